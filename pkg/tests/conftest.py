import numpy as np
import pytest
import torch

from gsedit.cameras import CameraPose, look_at
from gsedit.rasterizer import (
    NEAR_PLANE,
    TensorScene,
    _footprint_radius,
    render_tensor,
)
from gsedit.scene import DeformationField, GaussianCloud


def make_cloud(entries) -> GaussianCloud:
    """entries: iterable of (position, log_scale, rotation, opacity_logit, color)."""
    cloud = GaussianCloud()
    for pos, ls, rot, op, col in entries:
        cloud.append(pos, ls, rot, op, col)
    return cloud


def single_gaussian_cloud(
    position=(0.0, 0.0, 0.0),
    sigma=0.3,
    opacity_logit=0.0,
    color_raw=(0.0, 0.0, 0.0),
) -> GaussianCloud:
    return make_cloud([
        (position, np.log([sigma] * 3), (1.0, 0.0, 0.0, 0.0), opacity_logit, color_raw),
    ])


def front_camera(width=33, height=33, time=0.0, distance=5.0) -> CameraPose:
    return look_at([0.0, 0.0, -distance], width=width, height=height, time=time)


def random_test_scene(rng: np.random.Generator, n_gaussians: int, width=32, height=32,
                      with_field=True, time=None):
    """Random scene whose splats all sit well inside the viewport, away from
    the 3-sigma cull boundary and with pairwise-separated depths, so finite
    differences see a smooth function."""
    cam = front_camera(width=width, height=height,
                       time=rng.uniform() if time is None else time)
    for _ in range(200):
        cloud = GaussianCloud()
        for _ in range(n_gaussians):
            cloud.append(
                position=rng.uniform([-0.6, -0.6, -0.8], [0.6, 0.6, 0.8]),
                log_scale=np.log(rng.uniform(0.15, 0.3, size=3)),
                rotation=_random_quat(rng),
                opacity_logit=rng.uniform(-2.0, 2.0),
                color=rng.uniform(-1.5, 1.5, size=3),
            )
        field = None
        if with_field:
            field = DeformationField.create(
                time_embed_order=2, hidden=(8,), rng=rng)
            w, b = field.layers[-1]
            field.layers[-1] = (rng.normal(0.0, 0.01, size=w.shape),
                                rng.normal(0.0, 0.01, size=b.shape))
        if scene_has_margin(cloud, field, cam, margin_px=1.0, depth_gap=0.01):
            return cloud, field, cam
    raise AssertionError("could not build a margin-safe random scene")


def _random_quat(rng):
    q = rng.normal(size=4)
    n = np.linalg.norm(q)
    if n < 0.5:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    return q


def scene_has_margin(cloud, field, cam, margin_px=1.0, depth_gap=0.01) -> bool:
    """Every splat's 3-sigma footprint at least margin_px inside the viewport,
    depth safely past the near plane, and depths pairwise separated."""
    from gsedit.rasterizer import _activate_tensors, _project_tensors
    from gsedit.scene import deform_tensors

    ts = TensorScene.from_cloud(cloud, field)
    with torch.no_grad():
        tensors = deform_tensors(ts.params, field, cam.time.t,
                                 ts.field_params or None)
        position, scales, q, _, _ = _activate_tensors(tensors)
        z, mean2d, cov2d = _project_tensors(position, scales, q, cam)
    z = z.numpy()
    uv = mean2d.numpy()
    r = _footprint_radius(cov2d.numpy())
    if np.any(z <= NEAR_PLANE + 0.1):
        return False
    if np.any(uv[:, 0] - r < -0.5 + margin_px) or np.any(uv[:, 0] + r > cam.width - 0.5 - margin_px):
        return False
    if np.any(uv[:, 1] - r < -0.5 + margin_px) or np.any(uv[:, 1] + r > cam.height - 0.5 - margin_px):
        return False
    zs = np.sort(z)
    if len(zs) > 1 and np.min(np.diff(zs)) < depth_gap:
        return False
    return True


def render_loss(cloud, field, cam, background, adjoint) -> float:
    """sum(adjoint * render) without going through ImageBuffer clamping."""
    ts = TensorScene.from_cloud(cloud, field)
    with torch.no_grad():
        img = render_tensor(ts, cam, background)
    return float((torch.tensor(adjoint, dtype=img.dtype) * img).sum())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
