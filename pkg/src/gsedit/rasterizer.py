"""Differentiable splat rasterizer.

Projects activated Gaussians to screen space (EWA first-order projection)
and alpha-composites them front to back. The whole pipeline is plain torch
in float64, so gradients w.r.t. every raw Gaussian parameter and the
deformation weights come from autograd and are exact up to roundoff.

Conventions:
  - depth is camera-space z; splats with z <= NEAR_PLANE are culled;
  - a splat is culled when its 3-sigma elliptical footprint misses the
    viewport [-0.5, W-0.5] x [-0.5, H-0.5];
  - composition order is ascending depth, ties broken by ascending id,
    independent of storage order;
  - cov2d gets a +0.3 px^2 diagonal floor, alpha is clamped to <= 0.999 so
    log-transmittance stays finite in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cameras import CameraPose
from .errors import MaskMisaligned
from .images import ImageBuffer
from .scene import (
    DTYPE,
    ActivatedGaussian,
    DeformationField,
    GaussianCloud,
    deform_tensors,
)

NEAR_PLANE = 0.01
COV2D_FLOOR = 0.3
ALPHA_MAX = 0.999
FOOTPRINT_SIGMA = 3.0

_ATTRS = ("position", "log_scale", "rotation", "opacity_logit", "color")


@dataclass
class Splat2D:
    """Screen-space footprint of one projected Gaussian."""

    mean: np.ndarray    # (2,) pixels
    cov2d: np.ndarray   # (2, 2) pixels^2, regularized
    depth: float        # camera-space z
    opacity: float
    color: np.ndarray


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternions (N, 4), w first, to rotation matrices (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=1),
    ], dim=1)


# -- tensor-side scene view ----------------------------------------------------

@dataclass
class TensorScene:
    """Torch view of a cloud + field, the working state of every optimizer."""

    ids: np.ndarray
    params: dict[str, torch.Tensor]
    field: DeformationField | None
    field_params: list[tuple[torch.Tensor, torch.Tensor]]

    @classmethod
    def from_cloud(
        cls,
        cloud: GaussianCloud,
        field: DeformationField | None = None,
        requires_grad: bool = False,
    ) -> "TensorScene":
        params = cloud.to_tensors()
        if requires_grad:
            for v in params.values():
                v.requires_grad_(True)
        fp = field.to_tensors(requires_grad=requires_grad) if field is not None else []
        return cls(ids=cloud.ids(), params=params, field=field, field_params=fp)

    def gaussian_tensors(self) -> list[torch.Tensor]:
        return [self.params[a] for a in _ATTRS]

    def all_tensors(self) -> list[torch.Tensor]:
        out = self.gaussian_tensors()
        for w, b in self.field_params:
            out.extend((w, b))
        return out

    def write_back(self, cloud: GaussianCloud, field: DeformationField | None = None) -> None:
        cloud.write_tensors(self.params)
        if field is not None and self.field_params:
            field.write_tensors(self.field_params)

    def size(self) -> int:
        return int(self.ids.shape[0])


@dataclass
class SceneGrads:
    """Per-parameter gradients; rows align with cloud order, culled rows zero."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    field: list[tuple[np.ndarray, np.ndarray]]


# -- projection ---------------------------------------------------------------

def _camera_tensors(cam: CameraPose) -> tuple[torch.Tensor, torch.Tensor]:
    return (torch.tensor(cam.rotation, dtype=DTYPE),
            torch.tensor(cam.translation, dtype=DTYPE))


def _activate_tensors(params: dict[str, torch.Tensor]):
    scales = torch.exp(params["log_scale"])
    qnorm = torch.linalg.norm(params["rotation"], dim=1, keepdim=True)
    q = params["rotation"] / torch.clamp(qnorm, min=1e-12)
    opacity = torch.sigmoid(params["opacity_logit"])
    color = torch.sigmoid(params["color"])
    return params["position"], scales, q, opacity, color


def _project_tensors(position, scales, q, cam: CameraPose):
    """Camera-space depth, pixel means, and regularized cov2d for all splats."""
    R, T = _camera_tensors(cam)
    p_cam = position @ R.T + T
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    mean2d = torch.stack([u, v], dim=1)

    rot = quat_to_rotmat(q)
    m = rot * scales.unsqueeze(1)            # R diag(s)
    sigma_world = m @ m.transpose(1, 2)      # R diag(s^2) R^T
    sigma_cam = R @ sigma_world @ R.T

    zero = torch.zeros_like(z)
    j = torch.stack([
        torch.stack([cam.fx / z, zero, -cam.fx * x / (z * z)], dim=1),
        torch.stack([zero, cam.fy / z, -cam.fy * y / (z * z)], dim=1),
    ], dim=1)                                # (N, 2, 3)
    cov2d = j @ sigma_cam @ j.transpose(1, 2)
    cov2d = cov2d + COV2D_FLOOR * torch.eye(2, dtype=DTYPE)
    return z, mean2d, cov2d


def _footprint_radius(cov2d_det: np.ndarray) -> np.ndarray:
    """3-sigma radius from the major eigenvalue of each 2x2 covariance."""
    a = cov2d_det[:, 0, 0]
    b = cov2d_det[:, 0, 1]
    c = cov2d_det[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.0, (0.5 * (a - c)) ** 2 + b * b))
    return FOOTPRINT_SIGMA * np.sqrt(np.maximum(1e-12, mid + disc))


def project(g: ActivatedGaussian, cam: CameraPose) -> Splat2D | None:
    """Project one activated Gaussian; None means culled (a value, not an error)."""
    params = {
        "position": torch.tensor(g.position, dtype=DTYPE).unsqueeze(0),
        "log_scale": torch.log(torch.tensor(g.scale, dtype=DTYPE)).unsqueeze(0),
        "rotation": torch.tensor(g.rotation, dtype=DTYPE).unsqueeze(0),
    }
    with torch.no_grad():
        scales = torch.exp(params["log_scale"])
        z, mean2d, cov2d = _project_tensors(params["position"], scales,
                                            params["rotation"], cam)
    depth = float(z[0])
    if depth <= NEAR_PLANE:
        return None
    cov = cov2d[0].numpy()
    r = float(_footprint_radius(cov2d.numpy())[0])
    u, v = float(mean2d[0, 0]), float(mean2d[0, 1])
    if (u + r < -0.5 or u - r > cam.width - 0.5
            or v + r < -0.5 or v - r > cam.height - 0.5):
        return None
    return Splat2D(mean=mean2d[0].numpy(), cov2d=cov, depth=depth,
                   opacity=g.opacity, color=np.asarray(g.color, dtype=np.float64))


# -- compositing ----------------------------------------------------------------

def _background_tensor(background, h: int, w: int) -> torch.Tensor:
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=DTYPE)
    return bg.view(1, 1, 3).expand(h, w, 3)


def _composite_core(params, field, field_params, cam: CameraPose, background,
                    keep_prob=None, ids=None):
    """Forward pipeline; returns (image (H,W,3), final transmittance (H,W))."""
    h, w = cam.height, cam.width
    bg = _background_tensor(background, h, w)
    n = params["position"].shape[0]
    if n == 0:
        return bg.clone(), torch.ones((h, w), dtype=DTYPE)
    if ids is None:
        ids = np.arange(n, dtype=np.int64)

    tensors = deform_tensors(params, field, cam.time.t, field_params or None)
    position, scales, q, opacity, color = _activate_tensors(tensors)
    if keep_prob is not None:
        opacity = opacity * keep_prob

    z, mean2d, cov2d = _project_tensors(position, scales, q, cam)

    # Cull decisions use detached values; surviving splats keep autograd.
    z_det = z.detach().numpy()
    front = z_det > NEAR_PLANE
    uv_det = mean2d.detach().numpy()
    radius = _footprint_radius(cov2d.detach().numpy())
    visible = (
        front
        & (uv_det[:, 0] + radius >= -0.5) & (uv_det[:, 0] - radius <= w - 0.5)
        & (uv_det[:, 1] + radius >= -0.5) & (uv_det[:, 1] - radius <= h - 0.5)
    )
    idx = np.nonzero(visible)[0]
    if idx.size == 0:
        return bg.clone(), torch.ones((h, w), dtype=DTYPE)
    order = np.lexsort((ids[idx], z_det[idx]))  # depth-major, id tie-break
    idx = idx[order]
    sel = torch.from_numpy(idx)

    mu = mean2d[sel]
    cov = cov2d[sel]
    opa = opacity[sel]
    col = color[sel]

    a = cov[:, 0, 0]
    b = cov[:, 0, 1]
    c = cov[:, 1, 1]
    det = a * c - b * b
    # (conic) inverse covariance entries
    ia = c / det
    ib = -b / det
    ic = a / det

    xs = torch.arange(w, dtype=DTYPE)
    ys = torch.arange(h, dtype=DTYPE)
    dx = xs.view(1, 1, w) - mu[:, 0].view(-1, 1, 1)   # (M, 1, W)
    dy = ys.view(1, h, 1) - mu[:, 1].view(-1, 1, 1)   # (M, H, 1)
    power = -0.5 * (
        ia.view(-1, 1, 1) * dx * dx
        + 2.0 * ib.view(-1, 1, 1) * dx * dy
        + ic.view(-1, 1, 1) * dy * dy
    )
    alpha = torch.clamp(opa.view(-1, 1, 1) * torch.exp(power), max=ALPHA_MAX)

    trans_full = torch.cumprod(1.0 - alpha, dim=0)
    trans_before = torch.cat(
        [torch.ones((1, h, w), dtype=DTYPE), trans_full[:-1]], dim=0
    )
    weight = alpha * trans_before
    img = torch.einsum("mhw,mc->hwc", weight, col) + trans_full[-1].unsqueeze(-1) * bg
    return img, trans_full[-1]


def render_tensor(ts: TensorScene, cam: CameraPose, background,
                  keep_prob: torch.Tensor | None = None) -> torch.Tensor:
    """Differentiable render of the full scene; (H, W, 3) tensor in [0, 1]."""
    img, _ = _composite_core(ts.params, ts.field, ts.field_params, cam,
                             background, keep_prob=keep_prob, ids=ts.ids)
    return img


# -- public image-level API -----------------------------------------------------

def render(cloud: GaussianCloud, field: DeformationField | None,
           cam: CameraPose, background=(0.0, 0.0, 0.0)) -> ImageBuffer:
    ts = TensorScene.from_cloud(cloud, field)
    with torch.no_grad():
        img = render_tensor(ts, cam, background)
    return ImageBuffer.from_array(img.numpy())


def render_backward(cloud: GaussianCloud, field: DeformationField | None,
                    cam: CameraPose, background, adjoint) -> SceneGrads:
    """Gradients of L = sum(adjoint * render) w.r.t. every raw parameter."""
    adj = adjoint.pixels if isinstance(adjoint, ImageBuffer) else np.asarray(adjoint)
    if adj.shape != (cam.height, cam.width, 3):
        raise MaskMisaligned(
            f"adjoint shape {adj.shape} != ({cam.height}, {cam.width}, 3)"
        )
    ts = TensorScene.from_cloud(cloud, field, requires_grad=True)
    img = render_tensor(ts, cam, background)
    loss = (torch.tensor(adj, dtype=DTYPE) * img).sum()
    loss.backward()

    def grad_of(t: torch.Tensor) -> np.ndarray:
        return (t.grad if t.grad is not None else torch.zeros_like(t)).numpy().copy()

    return SceneGrads(
        position=grad_of(ts.params["position"]),
        log_scale=grad_of(ts.params["log_scale"]),
        rotation=grad_of(ts.params["rotation"]),
        opacity_logit=grad_of(ts.params["opacity_logit"]),
        color=grad_of(ts.params["color"]),
        field=[(grad_of(w), grad_of(b)) for w, b in ts.field_params],
    )


def _check_mask_alignment(cloud: GaussianCloud, mask) -> None:
    if len(mask.labels) != len(cloud):
        raise MaskMisaligned(
            f"mask length {len(mask.labels)} != cloud size {len(cloud)}"
        )
    if not np.array_equal(np.asarray(mask.gaussian_ids), cloud.ids()):
        raise MaskMisaligned("mask ids differ from cloud id order")


def render_masked(cloud: GaussianCloud, field: DeformationField | None, mask,
                  cam: CameraPose, background=(0.0, 0.0, 0.0),
                  soft_keep: np.ndarray | None = None) -> ImageBuffer:
    """Render only mask-1 Gaussians; with ``soft_keep`` given, render all
    Gaussians with opacity scaled by the per-Gaussian keep probability."""
    _check_mask_alignment(cloud, mask)
    ts = TensorScene.from_cloud(cloud, field)
    with torch.no_grad():
        if soft_keep is not None:
            kp = torch.tensor(np.asarray(soft_keep, dtype=np.float64), dtype=DTYPE)
            img = render_tensor(ts, cam, background, keep_prob=kp)
        else:
            keep = np.asarray(mask.labels, dtype=bool)
            sub = {k: v[torch.from_numpy(np.nonzero(keep)[0])]
                   for k, v in ts.params.items()}
            img, _ = _composite_core(sub, ts.field, ts.field_params, cam,
                                     background, ids=ts.ids[keep])
    return ImageBuffer.from_array(img.numpy())


def render_silhouette(cloud: GaussianCloud, field: DeformationField | None, mask,
                      cam: CameraPose, threshold: float = 0.5) -> np.ndarray:
    """Binary (H, W) silhouette of the mask-1 subcloud: accumulated alpha
    1 - prod(1 - alpha_i) thresholded."""
    _check_mask_alignment(cloud, mask)
    ts = TensorScene.from_cloud(cloud, field)
    keep = np.asarray(mask.labels, dtype=bool)
    if not keep.any():
        return np.zeros((cam.height, cam.width), dtype=bool)
    sub = {k: v[torch.from_numpy(np.nonzero(keep)[0])] for k, v in ts.params.items()}
    with torch.no_grad():
        _, trans = _composite_core(sub, ts.field, ts.field_params, cam,
                                   (0.0, 0.0, 0.0), ids=ts.ids[keep])
    return (1.0 - trans.numpy()) >= threshold
