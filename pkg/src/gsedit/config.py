"""Project configuration: TOML file with sections for paths, the optimizer,
the selector, the oracle, the planner, rendering, and fitting.

Paths are resolved relative to the config file. The environment variable
``GSEDIT_SEED`` overrides the configured seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dc_field, fields as dc_fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .optimizer import OptimConfig

SEED_ENV_VAR = "GSEDIT_SEED"


@dataclass
class SelectorConfig:
    steps: int = 3000
    lr: float = 2.5e-2
    temperature_start: float = 1.0
    temperature_end: float = 0.1
    hard_fraction: float = 1.0 / 3.0


@dataclass
class OracleConfig:
    kind: str = "synthetic"          # synthetic | remote | identity
    endpoint: str = ""
    residue: float = 0.0
    cache: str = ""
    timeout: float = 30.0

    def __post_init__(self):
        if self.kind not in ("synthetic", "remote", "identity"):
            raise ConfigError(f"unknown oracle kind {self.kind!r}")
        if self.kind == "remote" and not self.endpoint:
            raise ConfigError("oracle.kind = 'remote' requires oracle.endpoint")


@dataclass
class PlannerConfig:
    backend: str = "rule"            # rule | llm
    endpoint: str = ""

    def __post_init__(self):
        if self.backend not in ("rule", "llm"):
            raise ConfigError(f"unknown planner backend {self.backend!r}")
        if self.backend == "llm" and not self.endpoint:
            raise ConfigError("planner.backend = 'llm' requires planner.endpoint")


@dataclass
class RenderConfig:
    width: int = 64
    height: int = 64
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ConfigError("render resolution must be at least 8x8")
        bg = tuple(float(c) for c in self.background)
        if len(bg) != 3 or any(not (0.0 <= c <= 1.0) for c in bg):
            raise ConfigError("background must be three channels in [0, 1]")
        self.background = bg


@dataclass
class FitConfig:
    init_count: int = 64
    init_radius: float = 1.5
    init_center: tuple = (0.0, 0.0, 0.0)
    field: bool = False
    field_order: int = 6
    field_hidden: tuple = (64, 64)


@dataclass
class ProjectConfig:
    seed: int = 0
    base_dir: str = "."
    paths: dict = dc_field(default_factory=dict)
    optim: OptimConfig = dc_field(default_factory=OptimConfig)
    selector: SelectorConfig = dc_field(default_factory=SelectorConfig)
    oracle: OracleConfig = dc_field(default_factory=OracleConfig)
    planner: PlannerConfig = dc_field(default_factory=PlannerConfig)
    render: RenderConfig = dc_field(default_factory=RenderConfig)
    fit: FitConfig = dc_field(default_factory=FitConfig)

    def path(self, name: str, default: str | None = None) -> str | None:
        value = self.paths.get(name, default)
        if value is None or value == "":
            return None
        return os.path.normpath(os.path.join(self.base_dir, value))

    def require_path(self, name: str) -> str:
        value = self.path(name)
        if value is None:
            raise ConfigError(f"config is missing paths.{name}")
        return value

    def output_dir(self, override: str | None = None) -> str:
        out = override or self.path("output", "out")
        os.makedirs(out, exist_ok=True)
        return out


_KNOWN_SECTIONS = {"paths", "optim", "selector", "oracle", "planner",
                   "render", "fit"}
_INPUT_PATH_KEYS = ("scene", "cameras", "frames", "masks", "plan", "mask")


def _build(cls, section: dict, name: str):
    allowed = {f.name for f in dc_fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    coerced = {k: tuple(v) if isinstance(v, list) else v
               for k, v in section.items()}
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


def load_config(path: str | os.PathLike) -> ProjectConfig:
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc

    unknown = set(doc) - _KNOWN_SECTIONS - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    base_dir = os.path.dirname(os.path.abspath(path))
    cfg = ProjectConfig(
        seed=int(doc.get("seed", 0)),
        base_dir=base_dir,
        paths=dict(doc.get("paths", {})),
        optim=_build(OptimConfig, doc.get("optim", {}), "optim"),
        selector=_build(SelectorConfig, doc.get("selector", {}), "selector"),
        oracle=_build(OracleConfig, doc.get("oracle", {}), "oracle"),
        planner=_build(PlannerConfig, doc.get("planner", {}), "planner"),
        render=_build(RenderConfig, doc.get("render", {}), "render"),
        fit=_build(FitConfig, doc.get("fit", {}), "fit"),
    )
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer") from exc
    cfg.optim.seed = cfg.seed

    for key in _INPUT_PATH_KEYS:
        resolved = cfg.path(key)
        if resolved is not None and not os.path.exists(resolved):
            raise ConfigError(f"paths.{key} does not exist: {resolved}")
    return cfg
