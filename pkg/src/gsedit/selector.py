"""Per-Gaussian edit-mask learning.

A two-class logit per Gaussian (class 0 = keep as is, class 1 = edit) is
trained against 2D segmentation targets: the masked render of the scene
should reproduce the segmented reference frame. Discrete keep/edit draws go
through Gumbel-Softmax so the mask stays differentiable, with an optional
straight-through hard forward pass.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .cameras import CameraPose
from .errors import DimensionMismatch, InvalidTemperature, MaskMisaligned, NoTargets
from .images import ImageBuffer
from .rasterizer import TensorScene, render_tensor
from .scene import DTYPE, DeformationField, GaussianCloud

logger = logging.getLogger(__name__)

MASK_VERSION = 1
LABEL_LOGIT = 10.0  # logit magnitude used when reconstructing logits from labels


@dataclass
class EditMask:
    """Two-class logits plus binarized labels, index-aligned with the cloud."""

    gaussian_ids: np.ndarray          # (N,)
    logits: np.ndarray                # (N, 2)
    labels: np.ndarray = dc_field(default=None)  # (N,) in {0, 1}

    def __post_init__(self):
        self.gaussian_ids = np.asarray(self.gaussian_ids, dtype=np.int64).reshape(-1)
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(-1, 2)
        if self.labels is None:
            self.labels = np.argmax(self.logits, axis=1).astype(np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if not (len(self.gaussian_ids) == len(self.logits) == len(self.labels)):
            raise MaskMisaligned("ids, logits, and labels must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def initial(cls, cloud: GaussianCloud) -> "EditMask":
        """Zero logits; the argmax tie rule labels everything non-edit."""
        n = len(cloud)
        return cls(gaussian_ids=cloud.ids(), logits=np.zeros((n, 2)))

    @classmethod
    def from_labels(cls, gaussian_ids, labels) -> "EditMask":
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        logits = np.zeros((len(labels), 2))
        logits[np.arange(len(labels)), labels] = LABEL_LOGIT
        return cls(gaussian_ids=gaussian_ids, logits=logits, labels=labels)

    @classmethod
    def uniform(cls, cloud: GaussianCloud, label: int) -> "EditMask":
        return cls.from_labels(cloud.ids(), np.full(len(cloud), label))

    def binarize(self) -> "EditMask":
        """Set labels to the per-Gaussian argmax; idempotent, ties to class 0."""
        self.labels = np.argmax(self.logits, axis=1).astype(np.int64)
        return self

    def copy(self) -> "EditMask":
        return EditMask(self.gaussian_ids.copy(), self.logits.copy(),
                        self.labels.copy())

    def validate_against(self, cloud: GaussianCloud) -> None:
        if len(self) != len(cloud):
            raise MaskMisaligned(f"mask length {len(self)} != cloud size {len(cloud)}")
        if not np.array_equal(self.gaussian_ids, cloud.ids()):
            raise MaskMisaligned("mask ids differ from cloud id order")


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection-over-union of two binary label vectors."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def save_mask(path: str | os.PathLike, mask: EditMask) -> None:
    doc = {
        "version": MASK_VERSION,
        "gaussian_ids": [int(i) for i in mask.gaussian_ids],
        "labels": [int(l) for l in mask.labels],
    }
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def load_mask(path: str | os.PathLike) -> EditMask:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != MASK_VERSION:
        raise ValueError(f"unsupported mask version {doc.get('version')}")
    return EditMask.from_labels(np.array(doc["gaussian_ids"], dtype=np.int64),
                                np.array(doc["labels"], dtype=np.int64))


@dataclass
class SegTarget:
    """Edited reference frame, its binary segmentation, and the camera."""

    frame: ImageBuffer
    mask: np.ndarray       # (H, W) in {0, 1}
    camera: CameraPose

    def __post_init__(self):
        self.mask = (np.asarray(self.mask, dtype=np.float64) > 0.5).astype(np.float64)
        if self.mask.shape != (self.frame.height, self.frame.width):
            raise DimensionMismatch(
                f"mask {self.mask.shape} != frame {(self.frame.height, self.frame.width)}"
            )

    def masked_frame(self) -> np.ndarray:
        return self.mask[..., None] * self.frame.pixels


# -- Gumbel-Softmax ------------------------------------------------------------

def gumbel_sample(logits, temperature: float, generator: torch.Generator) -> torch.Tensor:
    """softmax((logits + Gumbel noise) / temperature) along the last axis."""
    if temperature <= 0:
        raise InvalidTemperature(f"temperature must be > 0, got {temperature}")
    lt = logits if isinstance(logits, torch.Tensor) else torch.tensor(
        np.asarray(logits, dtype=np.float64), dtype=DTYPE)
    u = torch.rand(lt.shape, generator=generator, dtype=lt.dtype)
    noise = -torch.log(-torch.log(u + 1e-12) + 1e-12)
    return torch.softmax((lt + noise) / temperature, dim=-1)


def straight_through(soft: torch.Tensor) -> torch.Tensor:
    """Hard one-hot of argmax (ties to the lowest index) in the forward pass;
    the backward pass is the identity onto the soft sample."""
    st = soft if isinstance(soft, torch.Tensor) else torch.tensor(
        np.asarray(soft, dtype=np.float64), dtype=DTYPE)
    index = torch.argmax(st, dim=-1, keepdim=True)
    hard = torch.zeros_like(st).scatter_(-1, index, 1.0)
    return (hard - st).detach() + st


@dataclass
class TemperatureSchedule:
    """Linear annealing with straight-through sampling over the final stretch."""

    start: float = 1.0
    end: float = 0.1
    hard_fraction: float = 1.0 / 3.0

    def temperature(self, step: int, total: int) -> float:
        if total <= 1:
            return self.start
        frac = step / (total - 1)
        return self.start + (self.end - self.start) * frac

    def hard(self, step: int, total: int) -> bool:
        frac = min(max(self.hard_fraction, 0.0), 1.0)
        return step >= total * (1.0 - frac)


def _keep_probability(logits: torch.Tensor, temperature: float, hard: bool,
                      generator: torch.Generator) -> torch.Tensor:
    soft = gumbel_sample(logits, temperature, generator)
    if hard:
        soft = straight_through(soft)
    return soft[:, 1]


def selector_loss(cloud: GaussianCloud, field: DeformationField | None,
                  mask_logits, target: SegTarget, temperature: float,
                  generator: torch.Generator,
                  background=(0.0, 0.0, 0.0), hard: bool = False):
    """MSE between the soft-masked render and the segmented reference frame.

    Returns (loss value, gradient w.r.t. the logits); Gaussian parameters and
    field weights never receive gradients here.
    """
    logits_arr = np.asarray(mask_logits, dtype=np.float64).reshape(-1, 2)
    if len(logits_arr) != len(cloud):
        raise MaskMisaligned(f"logits length {len(logits_arr)} != cloud {len(cloud)}")
    leaf = torch.tensor(logits_arr, dtype=DTYPE, requires_grad=True)
    ts = TensorScene.from_cloud(cloud, field)
    keep = _keep_probability(leaf, temperature, hard, generator)
    img = render_tensor(ts, target.camera, background, keep_prob=keep)
    loss = torch.mean((img - torch.tensor(target.masked_frame(), dtype=DTYPE)) ** 2)
    loss.backward()
    return float(loss.detach()), leaf.grad.numpy().copy()


def train_selector(cloud: GaussianCloud, field: DeformationField | None,
                   targets: list[SegTarget], steps: int,
                   schedule: TemperatureSchedule | None = None,
                   *, background=(0.0, 0.0, 0.0),
                   generator: torch.Generator | None = None,
                   lr: float = 2.5e-2):
    """Train the per-Gaussian selector; returns (binarized EditMask, loss trace).

    Targets are visited round-robin, one per step. Deterministic for a fixed
    generator seed.
    """
    if not targets:
        raise NoTargets("selector training needs at least one target")
    schedule = schedule or TemperatureSchedule()
    generator = generator or torch.Generator().manual_seed(0)
    ts = TensorScene.from_cloud(cloud, field)  # frozen scene
    n = len(cloud)
    logits = torch.zeros((n, 2), dtype=DTYPE, requires_grad=True)
    opt = torch.optim.Adam([logits], lr=lr)
    target_tensors = [
        (t.camera, torch.tensor(t.masked_frame(), dtype=DTYPE)) for t in targets
    ]
    trace: list[float] = []
    for step in range(steps):
        cam, goal = target_tensors[step % len(target_tensors)]
        tau = schedule.temperature(step, steps)
        hard = schedule.hard(step, steps)
        keep = _keep_probability(logits, tau, hard, generator)
        img = render_tensor(ts, cam, background, keep_prob=keep)
        loss = torch.mean((img - goal) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
        if step % 500 == 0:
            logger.debug("selector step %d loss %.3e tau %.3f", step, trace[-1], tau)
    mask = EditMask(gaussian_ids=cloud.ids(),
                    logits=logits.detach().numpy().copy()).binarize()
    return mask, trace
