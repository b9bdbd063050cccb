"""Scene optimization: initial photometric fitting and edit optimization.

Both loops share a hand-rolled per-attribute Adam. During editing, gradients
of mask-0 Gaussians are zeroed before the moment update and the parameter
write touches mask-1 rows only, so frozen Gaussians stay bitwise unchanged
while still occluding and compositing. Densification (clone / split / prune)
runs through the mask-tracking ops and is restricted to mask-1 Gaussians;
Adam moments are remapped by id across topology changes (children start with
zero moments).
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
import torch

from .cameras import CameraPose
from .errors import DimensionMismatch, NonFiniteLoss
from .images import ImageBuffer
from .metrics import dilate, psnr
from .planner import TaskCategory
from .rasterizer import SceneGrads, TensorScene, _composite_core, render_tensor
from .rng import numpy_generator
from .scene import DTYPE, DeformationField, GaussianCloud, inverse_sigmoid
from .selector import EditMask
from .supervision import DatasetEntry, SupervisionDataset, idu_refresh
from .tracking import TrackedCloud, clone_op, prune_op, split_op

logger = logging.getLogger(__name__)

GAUSSIAN_ATTRS = ("position", "log_scale", "rotation", "opacity_logit", "color")


@dataclass
class OptimConfig:
    """Loop hyperparameters; the per-attribute learning rates follow standard
    splatting practice, with the position rate decaying exponentially."""

    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_field: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    steps: int = 2000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-3
    densify_scale_bound: float = 0.1
    prune_opacity: float = 0.005
    idu_period: int = 10
    seed: int = 0
    freeze_enabled: bool = True

    def __post_init__(self):
        for name in ("lr_position", "lr_log_scale", "lr_rotation", "lr_opacity",
                     "lr_color", "lr_field", "densify_grad_threshold",
                     "prune_opacity"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def position_lr_at(self, iteration: int) -> float:
        if self.lr_position <= 0 or self.lr_position_final <= 0 or self.steps <= 0:
            return self.lr_position
        frac = min(max(iteration / self.steps, 0.0), 1.0)
        return float(self.lr_position *
                     (self.lr_position_final / self.lr_position) ** frac)

    def attr_lr(self, attr: str, iteration: int) -> float:
        return {
            "position": self.position_lr_at(iteration),
            "log_scale": self.lr_log_scale,
            "rotation": self.lr_rotation,
            "opacity_logit": self.lr_opacity,
            "color": self.lr_color,
        }[attr]


# -- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    steps: dict[str, int]
    field_m: list[tuple[torch.Tensor, torch.Tensor]]
    field_v: list[tuple[torch.Tensor, torch.Tensor]]
    field_steps: int = 0

    @classmethod
    def init(cls, ts: TensorScene) -> "AdamState":
        return cls(
            m={a: torch.zeros_like(ts.params[a]) for a in GAUSSIAN_ATTRS},
            v={a: torch.zeros_like(ts.params[a]) for a in GAUSSIAN_ATTRS},
            steps={a: 0 for a in GAUSSIAN_ATTRS},
            field_m=[(torch.zeros_like(w), torch.zeros_like(b))
                     for w, b in ts.field_params],
            field_v=[(torch.zeros_like(w), torch.zeros_like(b))
                     for w, b in ts.field_params],
        )

    def remap_rows(self, old_ids: np.ndarray, new_ids: np.ndarray) -> None:
        """Carry moments over by Gaussian id; ids without history get zeros."""
        row_of = {int(i): k for k, i in enumerate(old_ids)}
        src = np.array([row_of.get(int(i), -1) for i in new_ids], dtype=np.int64)
        keep = src >= 0
        for table in (self.m, self.v):
            for attr, old in table.items():
                new = torch.zeros((len(new_ids),) + old.shape[1:], dtype=old.dtype)
                if keep.any():
                    new[torch.from_numpy(np.nonzero(keep)[0])] = \
                        old[torch.from_numpy(src[keep])]
                table[attr] = new


def _adam_apply(param: torch.Tensor, grad: torch.Tensor, m: torch.Tensor,
                v: torch.Tensor, step: int, lr: float, config: OptimConfig,
                row_mask: torch.Tensor | None = None) -> None:
    """One Adam update in place; with ``row_mask`` given, only those rows of
    the parameter are written (their moments update from already-zeroed
    gradients elsewhere, which keeps frozen moments at zero)."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    m.mul_(b1).add_(grad, alpha=1.0 - b1)
    v.mul_(b2).addcmul_(grad, grad, value=1.0 - b2)
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    update = lr * m_hat / (torch.sqrt(v_hat) + config.adam_eps)
    with torch.no_grad():
        if row_mask is None:
            param.data.sub_(update)
        else:
            param.data[row_mask] = param.data[row_mask] - update[row_mask]


def _grad_of(t: torch.Tensor) -> torch.Tensor:
    return t.grad if t.grad is not None else torch.zeros_like(t)


def step(ts: TensorScene, mask: EditMask, grads: SceneGrads, state: AdamState,
         config: OptimConfig, iteration: int = 1) -> TensorScene:
    """Apply one Adam step to mask-1 Gaussians and the field; mask-0 rows are
    bitwise untouched (their gradients are zeroed before the moment update)."""
    labels = np.asarray(mask.labels)
    row_mask = None
    if config.freeze_enabled:
        row_mask = torch.from_numpy(labels == 1)
    state.steps = {a: state.steps[a] + 1 for a in GAUSSIAN_ATTRS}
    for attr in GAUSSIAN_ATTRS:
        g = torch.tensor(getattr(grads, attr), dtype=DTYPE)
        if row_mask is not None:
            g[~row_mask] = 0.0
        _adam_apply(ts.params[attr], g, state.m[attr], state.v[attr],
                    state.steps[attr], config.attr_lr(attr, iteration), config,
                    row_mask=row_mask)
    if ts.field_params:
        state.field_steps += 1
        for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(
                ts.field_params, grads.field, state.field_m, state.field_v):
            _adam_apply(w, torch.tensor(gw, dtype=DTYPE), mw, vw,
                        state.field_steps, config.lr_field, config)
            _adam_apply(b, torch.tensor(gb, dtype=DTYPE), mb, vb,
                        state.field_steps, config.lr_field, config)
    return ts


def _step_from_autograd(ts: TensorScene, labels: np.ndarray, state: AdamState,
                        config: OptimConfig, iteration: int) -> None:
    """Loop-internal variant of :func:`step` reading .grad tensors directly."""
    row_mask = None
    if config.freeze_enabled:
        row_mask = torch.from_numpy(labels == 1)
    state.steps = {a: state.steps[a] + 1 for a in GAUSSIAN_ATTRS}
    for attr in GAUSSIAN_ATTRS:
        p = ts.params[attr]
        g = _grad_of(p)
        if row_mask is not None:
            g[~row_mask] = 0.0
        _adam_apply(p, g, state.m[attr], state.v[attr], state.steps[attr],
                    config.attr_lr(attr, iteration), config, row_mask=row_mask)
    if ts.field_params:
        state.field_steps += 1
        for (w, b), (mw, mb), (vw, vb) in zip(ts.field_params, state.field_m,
                                              state.field_v):
            _adam_apply(w, _grad_of(w), mw, vw, state.field_steps,
                        config.lr_field, config)
            _adam_apply(b, _grad_of(b), mb, vb, state.field_steps,
                        config.lr_field, config)


def _zero_grads(ts: TensorScene) -> None:
    for t in ts.all_tensors():
        if t.grad is not None:
            t.grad = None


# -- loss -----------------------------------------------------------------------

def edit_loss(cloud: GaussianCloud, field: DeformationField | None,
              entry: DatasetEntry, background=(0.0, 0.0, 0.0)):
    """MSE between the render at the entry's view and its target, plus
    gradients for every raw parameter."""
    if (entry.target.width, entry.target.height) != (entry.camera.width,
                                                     entry.camera.height):
        raise DimensionMismatch("entry target does not match camera viewport")
    ts = TensorScene.from_cloud(cloud, field, requires_grad=True)
    img = render_tensor(ts, entry.camera, background)
    loss = torch.mean((img - torch.tensor(entry.target.pixels, dtype=DTYPE)) ** 2)
    loss.backward()

    def grab(t):
        return _grad_of(t).numpy().copy()

    grads = SceneGrads(
        position=grab(ts.params["position"]),
        log_scale=grab(ts.params["log_scale"]),
        rotation=grab(ts.params["rotation"]),
        opacity_logit=grab(ts.params["opacity_logit"]),
        color=grab(ts.params["color"]),
        field=[(grab(w), grab(b)) for w, b in ts.field_params],
    )
    return float(loss.detach()), grads


# -- densification ----------------------------------------------------------------

def densify_and_prune(tc: TrackedCloud, grad_stats: np.ndarray,
                      config: OptimConfig,
                      rng: np.random.Generator) -> TrackedCloud:
    """Clone / split mask-1 Gaussians whose averaged positional gradient norm
    exceeds the threshold (small ones clone, large ones split), then prune
    mask-1 Gaussians whose activated opacity fell below the floor. Trigger
    sets come from the pre-op snapshot in ascending index order; the prune
    pass evaluates the post-densify cloud. Mask-0 Gaussians are never touched.
    """
    stats = np.asarray(grad_stats, dtype=np.float64).reshape(-1)
    if len(stats) != len(tc.cloud):
        raise DimensionMismatch(
            f"grad stats {len(stats)} != cloud size {len(tc.cloud)}")
    labels = tc.mask.labels
    smax = np.array([float(np.exp(g.log_scale).max()) for g in tc.cloud.primitives])
    hot = (labels == 1) & (stats > config.densify_grad_threshold)
    clone_ids = [g.id for i, g in enumerate(tc.cloud.primitives)
                 if hot[i] and smax[i] < config.densify_scale_bound]
    split_ids = [g.id for i, g in enumerate(tc.cloud.primitives)
                 if hot[i] and smax[i] >= config.densify_scale_bound]
    for gid in clone_ids:
        clone_op(tc, tc.index_of(gid))
    for gid in split_ids:
        split_op(tc, tc.index_of(gid), rng=rng)
    doomed = [i for i, g in enumerate(tc.cloud.primitives)
              if tc.mask.labels[i] == 1
              and 1.0 / (1.0 + np.exp(-g.opacity_logit)) < config.prune_opacity]
    for i in sorted(doomed, reverse=True):
        prune_op(tc, i)
    if clone_ids or split_ids or doomed:
        logger.debug("densify: +%d clones, +%d splits, -%d pruned -> %d",
                     len(clone_ids), len(split_ids), len(doomed), len(tc.cloud))
    return tc


# -- shared loop machinery ---------------------------------------------------------

class _TensorSceneView:
    """Scene handle over live optimizer tensors, for IDU re-renders."""

    def __init__(self, ts: TensorScene, background):
        self.ts = ts
        self.background = background

    def render(self, cam: CameraPose) -> ImageBuffer:
        with torch.no_grad():
            img = render_tensor(self.ts, cam, self.background)
        return ImageBuffer.from_array(img.numpy())

    def silhouette(self, cam: CameraPose, labels: np.ndarray, label: int = 1,
                   threshold: float = 0.5, dilate_px: int = 2) -> np.ndarray:
        """Dilated screen footprint of the Gaussians carrying ``label``."""
        keep = np.asarray(labels) == label
        if not keep.any():
            return np.zeros((cam.height, cam.width))
        idx = torch.from_numpy(np.nonzero(keep)[0])
        sub = {k: v.detach()[idx] for k, v in self.ts.params.items()}
        with torch.no_grad():
            _, trans = _composite_core(sub, self.ts.field, self.ts.field_params,
                                       cam, (0.0, 0.0, 0.0),
                                       ids=self.ts.ids[keep])
        sil = (1.0 - trans.numpy()) >= threshold
        return dilate(sil, dilate_px).astype(np.float64)


def _round_robin(n_entries: int, rng: np.random.Generator):
    """Seeded shuffle per epoch, cycling all entries before repeating."""
    while True:
        for i in rng.permutation(n_entries):
            yield int(i)


@dataclass
class EditResult:
    tracked: TrackedCloud
    field: DeformationField | None
    trace: list[tuple[int, float]] = dc_field(default_factory=list)
    state: "AdamState | None" = None


def edit_optimize(tc: TrackedCloud, field: DeformationField | None,
                  dataset: SupervisionDataset, oracle, config: OptimConfig,
                  *, background=(0.0, 0.0, 0.0), stream: tuple = (),
                  region_fn=None) -> EditResult:
    """Edit loop: sample entry -> MSE step (mask-0 frozen) -> periodic
    densify/prune among mask-1 -> IDU refresh every ``idu_period``.

    Deterministic for a fixed config seed (and ``stream`` salt) with the
    synthetic oracle. Raises NonFiniteLoss if the loss leaves the reals;
    oracle errors propagate after the remote client's retries.

    When no ``region_fn`` is given, the oracle's edit region defaults to the
    dilated screen silhouette of the mask-1 Gaussians (of the mask-0 ones for
    a background edit, whose region marks the preserved foreground).
    """
    if len(dataset) == 0:
        raise ValueError("edit_optimize needs a non-empty dataset")
    rng_entries = numpy_generator(config.seed, "optimizer", "entries", *stream)
    rng_densify = numpy_generator(config.seed, "optimizer", "densify", *stream)
    rng_grid = numpy_generator(config.seed, "grid-sampling", *stream)

    ts = TensorScene.from_cloud(tc.cloud, field, requires_grad=True)
    state = AdamState.init(ts)
    view = _TensorSceneView(ts, background)
    if region_fn is None:
        region_label = 1
        task = getattr(oracle, "task", None)
        if task is not None and task.category is TaskCategory.BACKGROUND_EDITING:
            region_label = 0
        # Regions come from the initial scene, like the fixed reference-frame
        # segmentation they stand in for, and never track the moving scene.
        region_cache: dict[str, np.ndarray] = {}

        def region_fn(cam, _labels=tc.mask.labels.copy()):
            key = cam.key()
            if key not in region_cache:
                region_cache[key] = view.silhouette(cam, _labels,
                                                    label=region_label)
            return region_cache[key]
    stats_sum = np.zeros(len(tc.cloud))
    stats_count = 0
    sampler = _round_robin(len(dataset), rng_entries)
    trace: list[tuple[int, float]] = []

    for it in range(1, config.steps + 1):
        idu_refresh(dataset, oracle, view, it, config.idu_period,
                    rng=rng_grid, region_fn=region_fn)
        entry = dataset.entries[next(sampler)]
        img = render_tensor(ts, entry.camera, background)
        loss = torch.mean(
            (img - torch.tensor(entry.target.pixels, dtype=DTYPE)) ** 2)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise NonFiniteLoss(f"loss became {value} at iteration {it}")
        _zero_grads(ts)
        loss.backward()
        labels = tc.mask.labels
        pos_grad = _grad_of(ts.params["position"])
        if config.freeze_enabled:
            frozen = torch.from_numpy(labels == 0)
            pos_grad[frozen] = 0.0  # shares storage with .grad
        stats_sum += np.linalg.norm(pos_grad.numpy(), axis=1)
        stats_count += 1
        _step_from_autograd(ts, labels, state, config, it)
        trace.append((it, value))

        if config.densify_interval > 0 and it % config.densify_interval == 0:
            ts.write_back(tc.cloud, field)
            old_ids = ts.ids
            densify_and_prune(tc, stats_sum / max(stats_count, 1), config,
                              rng_densify)
            ts = TensorScene.from_cloud(tc.cloud, field, requires_grad=True)
            state.remap_rows(old_ids, ts.ids)
            view.ts = ts
            stats_sum = np.zeros(len(tc.cloud))
            stats_count = 0

    ts.write_back(tc.cloud, field)
    return EditResult(tracked=tc, field=field, trace=trace, state=state)


@dataclass
class FitResult:
    cloud: GaussianCloud
    field: DeformationField | None
    trace: list[tuple[int, float]] = dc_field(default_factory=list)
    train_psnr: float = 0.0


def init_cloud(n: int, rng: np.random.Generator, center=(0.0, 0.0, 0.0),
               radius: float = 1.5) -> GaussianCloud:
    """Seeded random initialization inside a ball around the scene center."""
    cloud = GaussianCloud()
    sigma0 = radius / max(n, 1) ** (1.0 / 3.0)
    for _ in range(n):
        direction = rng.normal(size=3)
        direction /= max(np.linalg.norm(direction), 1e-9)
        pos = np.asarray(center) + direction * radius * rng.uniform() ** (1.0 / 3.0)
        cloud.append(
            position=pos,
            log_scale=np.log([sigma0] * 3),
            rotation=[1.0, 0.0, 0.0, 0.0],
            opacity_logit=float(inverse_sigmoid(0.1)),
            color=rng.normal(0.0, 0.2, size=3),
        )
    return cloud


def fit_scene(frames: list[ImageBuffer], cameras: list[CameraPose],
              config: OptimConfig, *, field: DeformationField | None = None,
              background=(0.0, 0.0, 0.0), init_count: int = 64,
              init_center=(0.0, 0.0, 0.0), init_radius: float = 1.5) -> FitResult:
    """Photometric MSE fit from a seeded random initialization. Densification
    applies to every Gaussian (all-ones mask); reports training-view PSNR."""
    if not frames:
        raise ValueError("fit_scene needs at least one frame")
    if len(frames) != len(cameras):
        raise DimensionMismatch("frames and cameras must pair up")
    for img, cam in zip(frames, cameras):
        if (img.width, img.height) != (cam.width, cam.height):
            raise DimensionMismatch("frame does not match camera viewport")
    rng = numpy_generator(config.seed, "fit", "init")
    rng_entries = numpy_generator(config.seed, "fit", "entries")
    rng_densify = numpy_generator(config.seed, "fit", "densify")
    cloud = init_cloud(init_count, rng, center=init_center, radius=init_radius)
    tc = TrackedCloud(cloud=cloud, mask=EditMask.uniform(cloud, label=1))

    fit_config = replace(config, freeze_enabled=False)
    ts = TensorScene.from_cloud(tc.cloud, field, requires_grad=True)
    state = AdamState.init(ts)
    targets = [torch.tensor(f.pixels, dtype=DTYPE) for f in frames]
    sampler = _round_robin(len(frames), rng_entries)
    stats_sum = np.zeros(len(tc.cloud))
    stats_count = 0
    trace: list[tuple[int, float]] = []

    for it in range(1, fit_config.steps + 1):
        k = next(sampler)
        img = render_tensor(ts, cameras[k], background)
        loss = torch.mean((img - targets[k]) ** 2)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise NonFiniteLoss(f"loss became {value} at iteration {it}")
        _zero_grads(ts)
        loss.backward()
        stats_sum += np.linalg.norm(_grad_of(ts.params["position"]).numpy(), axis=1)
        stats_count += 1
        _step_from_autograd(ts, tc.mask.labels, state, fit_config, it)
        trace.append((it, value))
        if fit_config.densify_interval > 0 and it % fit_config.densify_interval == 0:
            ts.write_back(tc.cloud, field)
            old_ids = ts.ids
            densify_and_prune(tc, stats_sum / max(stats_count, 1), fit_config,
                              rng_densify)
            ts = TensorScene.from_cloud(tc.cloud, field, requires_grad=True)
            state.remap_rows(old_ids, ts.ids)
            stats_sum = np.zeros(len(tc.cloud))
            stats_count = 0
        if it % 500 == 0:
            logger.debug("fit step %d loss %.3e (%d gaussians)", it, value,
                         len(tc.cloud))

    ts.write_back(tc.cloud, field)
    view = _TensorSceneView(ts, background)
    scores = [psnr(view.render(cam), frame) for cam, frame in zip(cameras, frames)]
    return FitResult(cloud=tc.cloud, field=field, trace=trace,
                     train_psnr=float(np.mean(scores)))


# -- optimizer-state checkpoint (binary) --------------------------------------------

CHECKPOINT_MAGIC = b"GSED"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {"f8": 0, "i8": 1}
_CODE_DTYPES = {0: np.float64, 1: np.int64}


def _write_tensor(buf: io.BufferedWriter, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float64:
        code = _DTYPE_CODES["f8"]
    elif arr.dtype == np.int64:
        code = _DTYPE_CODES["i8"]
    else:
        raise ValueError(f"unsupported checkpoint dtype {arr.dtype}")
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", code, arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<Q", d))
    buf.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def save_optim_state(path, state: AdamState, ids: np.ndarray,
                     iteration: int = 0) -> None:
    """Little-endian tensor table: magic 'GSED', u32 version, u32 count, then
    (name, dtype code, ndim, dims..., raw data) per tensor."""
    tensors: list[tuple[str, np.ndarray]] = [
        ("ids", np.asarray(ids, dtype=np.int64)),
        ("iteration", np.array([iteration], dtype=np.int64)),
        ("steps", np.array([state.steps[a] for a in GAUSSIAN_ATTRS],
                           dtype=np.int64)),
        ("field_steps", np.array([state.field_steps], dtype=np.int64)),
    ]
    for attr in GAUSSIAN_ATTRS:
        tensors.append((f"m.{attr}", state.m[attr].numpy()))
        tensors.append((f"v.{attr}", state.v[attr].numpy()))
    for i, ((mw, mb), (vw, vb)) in enumerate(zip(state.field_m, state.field_v)):
        tensors.append((f"field_m.{i}.w", mw.numpy()))
        tensors.append((f"field_m.{i}.b", mb.numpy()))
        tensors.append((f"field_v.{i}.w", vw.numpy()))
        tensors.append((f"field_v.{i}.b", vb.numpy()))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(f, name, arr)


def load_optim_state(path) -> tuple[dict[str, np.ndarray], int]:
    """Returns (tensor table, iteration)."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a gsedit optimizer checkpoint")
        version = struct.unpack("<I", f.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        count = struct.unpack("<I", f.read(4))[0]
        table: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            code, ndim = struct.unpack("<BB", f.read(2))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
            dtype = _CODE_DTYPES[code]
            n_bytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
            data = np.frombuffer(f.read(n_bytes),
                                 dtype=np.dtype(dtype).newbyteorder("<"))
            table[name] = data.reshape(shape).astype(dtype)
    iteration = int(table.get("iteration", np.array([0]))[0])
    return table, iteration
