"""Exact mask alignment through topology changes.

Clone duplicates a Gaussian and its mask entry; split replaces one Gaussian
by two children that inherit its label; prune drops a Gaussian together with
its entry. Children always get fresh monotone ids, never reused ones, so an
append-only op log replays deterministically (split records its position
noise for bitwise replay).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .errors import IndexOutOfRange, MaskMisaligned
from .rasterizer import quat_to_rotmat
from .scene import DTYPE, GaussianCloud, GaussianPrimitive
from .selector import EditMask

CLONE_EPSILON = 1e-4       # world-unit nudge along the dominant scale axis
SPLIT_SCALE_FACTOR = 1.6   # children shrink by log(1.6) in log-scale


@dataclass
class OpRecord:
    op: str                       # "clone" | "split" | "prune"
    parents: list[int]
    children: list[int]
    noise: np.ndarray | None = None  # (2, 3) split position draws

    def to_json(self) -> str:
        doc = {"op": self.op, "parent": self.parents, "children": self.children}
        if self.noise is not None:
            doc["noise"] = [[float(x) for x in row] for row in self.noise]
        return json.dumps(doc)

    @classmethod
    def from_json(cls, line: str) -> "OpRecord":
        doc = json.loads(line)
        noise = doc.get("noise")
        return cls(op=doc["op"], parents=list(doc["parent"]),
                   children=list(doc["children"]),
                   noise=None if noise is None else np.asarray(noise, dtype=np.float64))


@dataclass
class TrackedCloud:
    """A cloud and its edit mask, kept aligned through every topology op."""

    cloud: GaussianCloud
    mask: EditMask
    op_log: list[OpRecord] = dc_field(default_factory=list)

    def __post_init__(self):
        self.mask.validate_against(self.cloud)

    def __len__(self) -> int:
        return len(self.cloud)

    def index_of(self, gaussian_id: int) -> int:
        for i, g in enumerate(self.cloud.primitives):
            if g.id == gaussian_id:
                return i
        raise IndexOutOfRange(f"no Gaussian with id {gaussian_id}")

    def snapshot(self) -> "TrackedCloud":
        """Checkpoint copy with an empty op log (the replay starting point)."""
        return TrackedCloud(cloud=self.cloud.copy(), mask=self.mask.copy(),
                            op_log=[])

    def _check_idx(self, idx: int) -> None:
        if not (0 <= idx < len(self.cloud)):
            raise IndexOutOfRange(f"index {idx} outside cloud of {len(self.cloud)}")

    def _append_mask_rows(self, src_row: int, count: int) -> None:
        logits = np.concatenate(
            [self.mask.logits, np.repeat(self.mask.logits[src_row:src_row + 1],
                                         count, axis=0)])
        labels = np.concatenate(
            [self.mask.labels, np.repeat(self.mask.labels[src_row:src_row + 1],
                                         count)])
        self.mask = EditMask(self.cloud.ids(), logits, labels)

    def _drop_mask_row(self, idx: int) -> None:
        keep = np.arange(len(self.mask)) != idx
        self.mask = EditMask(self.cloud.ids(), self.mask.logits[keep],
                             self.mask.labels[keep])


def _dominant_axis(g: GaussianPrimitive) -> np.ndarray:
    """Unit world-space direction of the largest scale axis."""
    q = torch.tensor(g.rotation, dtype=DTYPE).unsqueeze(0)
    q = q / torch.clamp(torch.linalg.norm(q, dim=1, keepdim=True), min=1e-12)
    rot = quat_to_rotmat(q)[0].numpy()
    return rot[:, int(np.argmax(g.log_scale))]


def clone_op(tc: TrackedCloud, idx: int) -> TrackedCloud:
    """Duplicate Gaussian idx; the child inherits the parent's mask entry."""
    tc._check_idx(idx)
    parent = tc.cloud.primitives[idx]
    child = parent.copy()
    child.id = tc.cloud.fresh_id()
    child.position = parent.position + CLONE_EPSILON * _dominant_axis(parent)
    tc.cloud.primitives.append(child)
    tc.cloud.generation += 1
    tc._append_mask_rows(idx, 1)
    tc.op_log.append(OpRecord("clone", [parent.id], [child.id]))
    return tc


def split_op(tc: TrackedCloud, idx: int,
             rng: np.random.Generator | None = None,
             noise: np.ndarray | None = None) -> TrackedCloud:
    """Replace Gaussian idx by two children sampled from it; both inherit the
    parent's label, the parent's entry is removed."""
    tc._check_idx(idx)
    if noise is None:
        rng = rng or np.random.default_rng(0)
        noise = rng.standard_normal((2, 3))
    else:
        noise = np.asarray(noise, dtype=np.float64).reshape(2, 3)
    parent = tc.cloud.primitives[idx]
    rot = quat_to_rotmat(
        torch.tensor(parent.rotation / np.linalg.norm(parent.rotation),
                     dtype=DTYPE).unsqueeze(0))[0].numpy()
    scale = np.exp(parent.log_scale)
    children = []
    for k in range(2):
        child = parent.copy()
        child.id = tc.cloud.fresh_id()
        child.position = parent.position + rot @ (scale * noise[k])
        child.log_scale = parent.log_scale - np.log(SPLIT_SCALE_FACTOR)
        children.append(child)
    tc.cloud.primitives.append(children[0])
    tc.cloud.primitives.append(children[1])
    tc._append_mask_rows(idx, 2)
    # remove the parent after appending, then its mask row at the same index
    del tc.cloud.primitives[idx]
    tc.cloud.generation += 1
    tc._drop_mask_row(idx)
    tc.op_log.append(OpRecord("split", [parent.id],
                              [c.id for c in children], noise=noise.copy()))
    return tc


def prune_op(tc: TrackedCloud, idx: int) -> TrackedCloud:
    """Remove Gaussian idx and its mask entry; everything else untouched."""
    tc._check_idx(idx)
    parent_id = tc.cloud.primitives[idx].id
    del tc.cloud.primitives[idx]
    tc.cloud.generation += 1
    tc._drop_mask_row(idx)
    tc.op_log.append(OpRecord("prune", [parent_id], []))
    return tc


def replay(checkpoint: TrackedCloud, ops: list[OpRecord]) -> TrackedCloud:
    """Re-apply a logged op sequence onto a checkpoint; bitwise reproduction."""
    tc = checkpoint.snapshot()
    for rec in ops:
        idx = tc.index_of(rec.parents[0])
        if rec.op == "clone":
            clone_op(tc, idx)
        elif rec.op == "split":
            split_op(tc, idx, noise=rec.noise)
        elif rec.op == "prune":
            prune_op(tc, idx)
        else:
            raise ValueError(f"unknown op {rec.op!r}")
        got = tc.op_log[-1]
        if got.children != rec.children:
            raise MaskMisaligned(
                f"replay produced children {got.children}, log says {rec.children}"
            )
    return tc


def save_op_log(path: str | os.PathLike, ops: list[OpRecord]) -> None:
    with open(path, "w") as f:
        for rec in ops:
            f.write(rec.to_json())
            f.write("\n")


def load_op_log(path: str | os.PathLike) -> list[OpRecord]:
    with open(path) as f:
        return [OpRecord.from_json(line) for line in f if line.strip()]
