"""Edit supervision: per-(view, time) target images from a pluggable oracle.

The synthetic oracle is a deterministic procedural editor (pure function of
image, task, region, seed) used for tests and local runs; the remote oracle
speaks the ``POST /edit`` wire contract of a diffusion-editing service.
Targets refresh on the Iterative-Dataset-Update schedule: every K iterations
an entry re-renders, joins three sibling views at the same time into a 2x2
grid, sends the grid through the oracle, and writes the split result back.
"""

from __future__ import annotations

import base64
import hashlib
import io
import logging
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image

from . import transport
from .cameras import CameraPose
from .errors import DimensionMismatch, MalformedResponse
from .images import ImageBuffer, assemble_grid, assemble_grid_array, split_grid
from .planner import AtomicTask, TaskCategory
from .rng import derive_seed
from .scene import TimeSample

logger = logging.getLogger(__name__)

NEVER_REFRESHED = -(10 ** 9)

# classic sepia tone, the default global style matrix
DEFAULT_STYLE_MATRIX = np.array([
    [0.393, 0.769, 0.189],
    [0.349, 0.686, 0.168],
    [0.272, 0.534, 0.131],
])

COLOR_TABLE = {
    "red": (1.0, 0.0, 0.0), "green": (0.0, 0.8, 0.0), "blue": (0.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0),
    "yellow": (1.0, 1.0, 0.0), "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 0.5), "pink": (1.0, 0.6, 0.8),
    "brown": (0.55, 0.27, 0.07), "gray": (0.5, 0.5, 0.5),
    "grey": (0.5, 0.5, 0.5), "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0), "violet": (0.56, 0.0, 1.0),
    "turquoise": (0.25, 0.88, 0.82), "golden": (1.0, 0.84, 0.0),
    "beige": (0.96, 0.96, 0.86), "crimson": (0.86, 0.08, 0.24),
    "teal": (0.0, 0.5, 0.5),
}


@dataclass
class DatasetEntry:
    camera: CameraPose
    time: TimeSample
    source: ImageBuffer
    target: ImageBuffer
    last_refresh: int = NEVER_REFRESHED

    def __post_init__(self):
        for img in (self.source, self.target):
            if img.width != self.camera.width or img.height != self.camera.height:
                raise DimensionMismatch(
                    f"entry image {img.width}x{img.height} != camera viewport "
                    f"{self.camera.width}x{self.camera.height}")


@dataclass
class SupervisionDataset:
    entries: list[DatasetEntry] = dc_field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def build_dataset(scene_view, cameras: list[CameraPose]) -> SupervisionDataset:
    """Initial dataset: sources and targets are current renders; every entry
    starts stale so the first refresh sweep rewrites all targets."""
    entries = []
    for cam in cameras:
        img = scene_view.render(cam)
        entries.append(DatasetEntry(camera=cam, time=cam.time, source=img,
                                    target=img.copy()))
    return SupervisionDataset(entries=entries)


class CloudSceneView:
    """Renders a (cloud, field) pair; the scene handle idu_refresh re-renders from."""

    def __init__(self, cloud, field, background=(0.0, 0.0, 0.0)):
        self.cloud = cloud
        self.field = field
        self.background = background

    def render(self, cam: CameraPose) -> ImageBuffer:
        from .rasterizer import render
        return render(self.cloud, self.field, cam, self.background)


# -- synthetic oracle -----------------------------------------------------------

def _prompt_color(prompt: str, seed: int) -> np.ndarray:
    for word, rgb in COLOR_TABLE.items():
        if word in prompt.lower():
            return np.array(rgb)
    rng = np.random.default_rng(derive_seed(seed, "prompt-color", prompt))
    return np.array(hsv_to_rgb([rng.uniform(), 1.0, 1.0]))


def _recolor(pixels: np.ndarray, region: np.ndarray, target_rgb: np.ndarray) -> np.ndarray:
    """Replace hue/saturation inside the region, scaling value by the target's:
    (H, S, V) -> (H_t, S_t, V * V_t). Linear in V, so any render of a
    recolored scene stays exactly representable."""
    t_h, t_s, t_v = rgb_to_hsv(target_rgb.reshape(1, 1, 3)).reshape(3)
    hsv = rgb_to_hsv(pixels)
    hsv[..., 0] = t_h
    hsv[..., 1] = t_s
    hsv[..., 2] = hsv[..., 2] * t_v
    out = pixels.copy()
    sel = region > 0.5
    out[sel] = hsv_to_rgb(hsv)[sel]
    return out


def _wave_texture(h: int, w: int, seed: int, salt: str) -> np.ndarray:
    """Smooth seeded pattern; base color plus two crossed sinusoids."""
    rng = np.random.default_rng(derive_seed(seed, "texture", salt))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    base = rng.uniform(0.2, 0.8, size=3)
    out = np.empty((h, w, 3))
    for ch in range(3):
        fx, fy = rng.uniform(0.05, 0.45, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out[..., ch] = base[ch] + 0.25 * np.sin(fx * xs + fy * ys + phase)
    return np.clip(out, 0.0, 1.0)


def _sprite(pixels: np.ndarray, region: np.ndarray, seed: int, salt: str) -> np.ndarray:
    """Seeded filled ellipse centered on the region's bounding box."""
    sel = region > 0.5
    if not sel.any():
        return pixels
    rows, cols = np.nonzero(sel)
    cy, cx = rows.mean(), cols.mean()
    ry = max(1.0, 0.35 * (rows.max() - rows.min() + 1))
    rx = max(1.0, 0.35 * (cols.max() - cols.min() + 1))
    rng = np.random.default_rng(derive_seed(seed, "sprite", salt))
    color = rng.uniform(0.1, 0.9, size=3)
    ys, xs = np.mgrid[0:pixels.shape[0], 0:pixels.shape[1]].astype(np.float64)
    inside = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
    out = pixels.copy()
    out[inside & sel] = color
    return out


def synthetic_edit(image: ImageBuffer, task: AtomicTask, region_mask: np.ndarray,
                   seed: int = 0, style_matrix: np.ndarray | None = None) -> ImageBuffer:
    """Deterministic procedural edit standing in for the diffusion editor.

    Per category: ColorAdjustment recolors inside the region toward the
    prompt's color word; StyleTransfer applies a fixed 3x3 color matrix
    globally; BackgroundEditing replaces pixels outside the region with a
    seeded texture; TextureReplacement / MaterialProperties paint a seeded
    pattern inside the region; LocalGeometryModification / CategorySwapping
    composite a seeded sprite inside the region.
    """
    region = np.asarray(region_mask, dtype=np.float64)
    if region.shape != (image.height, image.width):
        raise DimensionMismatch(
            f"region {region.shape} != image {(image.height, image.width)}")
    px = image.pixels
    cat = task.category
    if cat is TaskCategory.COLOR_ADJUSTMENT:
        out = _recolor(px, region, _prompt_color(task.prompt, seed))
    elif cat is TaskCategory.STYLE_TRANSFER:
        matrix = DEFAULT_STYLE_MATRIX if style_matrix is None else np.asarray(style_matrix)
        out = np.clip(px @ matrix.T, 0.0, 1.0)
    elif cat is TaskCategory.BACKGROUND_EDITING:
        texture = _wave_texture(image.height, image.width, seed, task.prompt)
        out = np.where((region > 0.5)[..., None], px, texture)
    elif cat in (TaskCategory.TEXTURE_REPLACEMENT, TaskCategory.MATERIAL_PROPERTIES):
        texture = _wave_texture(image.height, image.width, seed,
                                cat.value + task.prompt)
        out = np.where((region > 0.5)[..., None], texture, px)
    else:  # LocalGeometryModification, CategorySwapping
        out = _sprite(px, region, seed, cat.value + task.prompt)
    return ImageBuffer.from_array(out)


def residue_field(h: int, w: int, seed: int, amplitude: float) -> np.ndarray:
    """Low-frequency seeded color bias modeling editor leakage outside the
    requested region (zero-mean waves, deterministic per (seed, h, w))."""
    rng = np.random.default_rng(derive_seed(seed, "residue"))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.empty((h, w, 3))
    for ch in range(3):
        fx, fy = rng.uniform(0.01, 0.08, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        bias = rng.uniform(-0.5, 0.5)
        out[..., ch] = amplitude * (bias + np.sin(fx * xs + fy * ys + phase))
    return out


class SyntheticOracle:
    """In-process oracle; reentrant, pure given (task, seed).

    ``residue`` > 0 adds a small deterministic color field to the whole
    output, imitating how a real diffusion editor inadvertently perturbs
    regions it was not asked to touch. Zero keeps the edit exactly scoped.
    """

    kind = "synthetic"

    def __init__(self, task: AtomicTask, seed: int = 0,
                 style_matrix: np.ndarray | None = None,
                 residue: float = 0.0):
        self.task = task
        self.seed = seed
        self.style_matrix = style_matrix
        self.residue = residue

    def edit_grid(self, grid: ImageBuffer,
                  region_mask: np.ndarray | None = None) -> ImageBuffer:
        if region_mask is None:
            region_mask = np.ones((grid.height, grid.width))
        out = synthetic_edit(grid, self.task, region_mask, seed=self.seed,
                             style_matrix=self.style_matrix)
        if self.residue > 0.0:
            leak = residue_field(grid.height, grid.width, self.seed, self.residue)
            out = ImageBuffer.from_array(np.clip(out.pixels + leak, 0.0, 1.0))
        return out


class IdentityOracle:
    """Echoes its input; the fixed-point oracle for convergence tests."""

    kind = "identity"

    def edit_grid(self, grid: ImageBuffer,
                  region_mask: np.ndarray | None = None) -> ImageBuffer:
        return grid.copy()


# -- remote oracle ----------------------------------------------------------------

def _encode_png_b64(image: ImageBuffer) -> str:
    data = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _decode_png_b64(b64: str) -> np.ndarray:
    try:
        data = base64.b64decode(b64, validate=True)
        with Image.open(io.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except Exception as exc:
        raise MalformedResponse(f"response image is not a decodable PNG: {exc}") from exc


def remote_edit(grid: ImageBuffer, prompt: str, endpoint: str, *,
                timeout: float = transport.DEFAULT_TIMEOUT,
                retries: int = transport.DEFAULT_RETRIES,
                backoff: float = transport.DEFAULT_BACKOFF,
                cache_dir: str | os.PathLike | None = None) -> ImageBuffer:
    """POST the grid to the edit service; responses are cached on disk keyed
    by (grid content hash, prompt) so interrupted runs resume for free."""
    b64 = _encode_png_b64(grid)
    key = hashlib.sha256(b64.encode() + b"\x00" + prompt.encode()).hexdigest()
    cache_path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        cache_path = os.path.join(cache_dir, f"{key}.npy")
        if os.path.exists(cache_path):
            logger.debug("edit cache hit %s", key[:12])
            return ImageBuffer.from_array(np.load(cache_path))
    doc = transport.post_json(
        endpoint.rstrip("/") + "/edit",
        {"prompt": prompt, "width": grid.width, "height": grid.height,
         "image_b64": b64},
        timeout=timeout, retries=retries, backoff=backoff)
    if "image_b64" not in doc:
        raise MalformedResponse("edit response missing 'image_b64'")
    pixels = _decode_png_b64(doc["image_b64"])
    if pixels.shape != (grid.height, grid.width, 3):
        raise MalformedResponse(
            f"edited image {pixels.shape[1]}x{pixels.shape[0]} does not match "
            f"request {grid.width}x{grid.height}")
    if cache_path is not None:
        np.save(cache_path, pixels)
    return ImageBuffer.from_array(pixels)


class RemoteOracle:
    kind = "remote"

    def __init__(self, endpoint: str, prompt: str, *,
                 timeout: float = transport.DEFAULT_TIMEOUT,
                 retries: int = transport.DEFAULT_RETRIES,
                 backoff: float = transport.DEFAULT_BACKOFF,
                 cache_dir: str | os.PathLike | None = None):
        self.endpoint = endpoint
        self.prompt = prompt
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.cache_dir = cache_dir

    def edit_grid(self, grid: ImageBuffer,
                  region_mask: np.ndarray | None = None) -> ImageBuffer:
        # the remote editor infers the region from the prompt; the mask is local-only
        return remote_edit(grid, self.prompt, self.endpoint, timeout=self.timeout,
                           retries=self.retries, backoff=self.backoff,
                           cache_dir=self.cache_dir)


@dataclass
class EditOracleSpec:
    """Declarative oracle choice, resolved by :func:`make_oracle`."""

    kind: str                       # "synthetic" | "remote" | "identity"
    task: AtomicTask | None = None
    endpoint: str | None = None
    seed: int = 0
    style_matrix: np.ndarray | None = None
    cache_dir: str | None = None
    timeout: float = transport.DEFAULT_TIMEOUT

    def __post_init__(self):
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote oracle requires an endpoint")
        if self.kind in ("synthetic", "remote") and self.task is None:
            raise ValueError(f"{self.kind} oracle requires a task")


def make_oracle(spec: EditOracleSpec):
    if spec.kind == "synthetic":
        return SyntheticOracle(spec.task, seed=spec.seed,
                               style_matrix=spec.style_matrix)
    if spec.kind == "remote":
        return RemoteOracle(spec.endpoint, spec.task.prompt,
                            timeout=spec.timeout, cache_dir=spec.cache_dir)
    if spec.kind == "identity":
        return IdentityOracle()
    raise ValueError(f"unknown oracle kind {spec.kind!r}")


# -- iterative dataset update -------------------------------------------------------

def idu_refresh(dataset: SupervisionDataset, oracle, scene_view, iteration: int,
                period: int, *, rng: np.random.Generator,
                region_fn=None) -> SupervisionDataset:
    """Refresh stale entries (iteration - last_refresh >= period) in place.

    Each stale entry re-renders from the current scene, joins three sibling
    views sampled at its own time into a 2x2 grid (stale entry in quadrant 0),
    runs the oracle on the grid, splits the result, and writes all four view
    targets back with last_refresh = iteration. Entries untouched by any grid
    stay as they are; an oracle failure propagates after leaving already
    refreshed entries in place and the failing ones intact.
    """
    if period < 1:
        raise ValueError(f"refresh period must be >= 1, got {period}")
    entries = dataset.entries
    refreshed: set[int] = set()
    for i, entry in enumerate(entries):
        if i in refreshed or iteration - entry.last_refresh < period:
            continue
        peers = [j for j in range(len(entries))
                 if j != i and entries[j].time.t == entry.time.t]
        if len(peers) >= 3:
            others = list(rng.choice(peers, size=3, replace=False))
        elif peers:
            others = list(rng.choice(peers, size=3, replace=True))
        else:
            others = [i, i, i]
        view_ids = [i] + [int(j) for j in others]
        frames = [scene_view.render(entries[j].camera) for j in view_ids]
        grid = assemble_grid(frames)
        region = None
        if region_fn is not None:
            tiles = [np.asarray(region_fn(entries[j].camera), dtype=np.float64)
                     for j in view_ids]
            region = assemble_grid_array(tiles)
        edited = oracle.edit_grid(grid, region)
        if not edited.same_size(grid):
            raise MalformedResponse(
                f"oracle returned {edited.width}x{edited.height} for a "
                f"{grid.width}x{grid.height} grid")
        quads = split_grid(edited)
        for j, src, tgt in zip(view_ids, frames, quads):
            entries[j].source = src
            entries[j].target = tgt
            entries[j].last_refresh = iteration
            refreshed.add(j)
    return dataset
