"""Deterministic desk-scale demo scenes: two separated Gaussian blobs with
known object membership, plus a camera arc that keeps them disjoint on screen."""

from __future__ import annotations

import math

import numpy as np

from .cameras import CameraPose, look_at
from .rng import numpy_generator
from .scene import DeformationField, GaussianCloud, inverse_sigmoid
from .selector import EditMask
from .tracking import TrackedCloud


def blob(cloud: GaussianCloud, center, color_raw, count: int,
         rng: np.random.Generator, spread: float = 0.26,
         sigma: float = 0.11, opacity_logit: float = 1.0) -> list[int]:
    """Append a cluster of Gaussians; returns their ids."""
    ids = []
    for _ in range(count):
        offset = rng.normal(0.0, spread, size=3)
        jitter = rng.normal(0.0, 0.15, size=3)
        g = cloud.append(
            position=np.asarray(center) + offset,
            log_scale=np.log([sigma] * 3) + rng.normal(0.0, 0.1, size=3),
            rotation=[1.0, 0.0, 0.0, 0.0],
            opacity_logit=opacity_logit,
            color=np.asarray(color_raw) + jitter,
        )
        ids.append(g.id)
    return ids


def two_blob_scene(seed: int = 0, n_per_blob: int = 6,
                   separation: float = 0.9):
    """Two color-coded blobs at +/- separation on x; returns
    (cloud, blob_a_ids, blob_b_ids). Blob A is warm, blob B cold."""
    rng = numpy_generator(seed, "toyscene")
    cloud = GaussianCloud()
    ids_a = blob(cloud, (separation, 0.0, 0.0), (1.5, 0.5, -0.5), n_per_blob, rng)
    ids_b = blob(cloud, (-separation, 0.0, 0.0), (-1.5, -0.3, 1.5), n_per_blob, rng)
    return cloud, ids_a, ids_b


def blob_mask(cloud: GaussianCloud, edit_ids) -> EditMask:
    edit = set(int(i) for i in edit_ids)
    labels = np.array([1 if g.id in edit else 0 for g in cloud.primitives])
    return EditMask.from_labels(cloud.ids(), labels)


def tracked_two_blob_scene(seed: int = 0, n_per_blob: int = 6):
    """TrackedCloud with blob A marked editable, plus the blob id lists."""
    cloud, ids_a, ids_b = two_blob_scene(seed=seed, n_per_blob=n_per_blob)
    return TrackedCloud(cloud=cloud, mask=blob_mask(cloud, ids_a)), ids_a, ids_b


def arc_rig(count: int = 6, radius: float = 5.0, max_angle: float = 0.55,
            width: int = 48, height: int = 48, elevation: float = 0.15,
            times=None) -> list[CameraPose]:
    """Cameras on a frontal arc; the blobs stay separated in every view."""
    cams = []
    for i in range(count):
        frac = i / max(count - 1, 1)
        ang = -max_angle + 2 * max_angle * frac
        eye = [radius * math.sin(ang), radius * elevation, -radius * math.cos(ang)]
        t = 0.0 if times is None else float(times[i])
        cams.append(look_at(eye, width=width, height=height, time=t))
    return cams


def wobble_field(seed: int = 0, amplitude: float = 0.05) -> DeformationField:
    """Small time-dependent position wobble, for dynamic-scene tests."""
    rng = numpy_generator(seed, "toyscene", "field")
    field = DeformationField.create(time_embed_order=2, hidden=(16,),
                                    deformed_attributes=("position",), rng=rng)
    w, b = field.layers[-1]
    field.layers[-1] = (rng.normal(0.0, amplitude, size=w.shape), b)
    return field
