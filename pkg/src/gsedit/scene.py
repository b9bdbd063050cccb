"""Dynamic scene representation: canonical Gaussian cloud + time-conditioned
deformation field.

Raw (stored) parameters are unconstrained; activation maps them onto the
valid domain: exp for scale, sigmoid for opacity and color, normalization
for the quaternion. Deformation offsets are applied in raw space so the
constraints keep holding by construction.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .errors import DegenerateRotation, ShapeMismatch

DTYPE = torch.float64

# Canonical attribute order for deformation offsets.
DEFORMABLE_ATTRIBUTES = ("position", "rotation", "log_scale")
_ATTR_WIDTH = {"position": 3, "rotation": 4, "log_scale": 3}

QUAT_NORM_FLOOR = 1e-8


@dataclass
class TimeSample:
    """Normalized timeline position."""

    t: float

    def __post_init__(self):
        if not (0.0 <= self.t <= 1.0):
            raise ValueError(f"time {self.t} outside [0, 1]")


@dataclass
class GaussianPrimitive:
    """Raw parameters of one splat, with a stable integer identity."""

    id: int
    position: np.ndarray      # (3,)
    log_scale: np.ndarray     # (3,)
    rotation: np.ndarray      # (4,) raw quaternion, w first
    opacity_logit: float
    color: np.ndarray         # (3,) raw, sigmoid-activated to RGB

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.opacity_logit = float(self.opacity_logit)

    def copy(self) -> "GaussianPrimitive":
        return GaussianPrimitive(
            id=self.id,
            position=self.position.copy(),
            log_scale=self.log_scale.copy(),
            rotation=self.rotation.copy(),
            opacity_logit=self.opacity_logit,
            color=self.color.copy(),
        )


@dataclass
class ActivatedGaussian:
    """Constraint-satisfying view of a primitive."""

    id: int
    position: np.ndarray
    scale: np.ndarray        # exp(log_scale), strictly positive
    rotation: np.ndarray     # unit quaternion
    opacity: float           # in (0, 1)
    color: np.ndarray        # in (0, 1) per channel


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y / (1.0 - y))


def activate(g: GaussianPrimitive) -> ActivatedGaussian:
    """Map raw parameters to the constrained domain. Deterministic."""
    norm = float(np.linalg.norm(g.rotation))
    if norm <= QUAT_NORM_FLOOR:
        raise DegenerateRotation(f"quaternion norm {norm} <= {QUAT_NORM_FLOOR}")
    return ActivatedGaussian(
        id=g.id,
        position=g.position.copy(),
        scale=np.exp(g.log_scale),
        rotation=g.rotation / norm,
        opacity=float(_sigmoid(g.opacity_logit)),
        color=_sigmoid(g.color),
    )


def inverse_activate(a: ActivatedGaussian) -> GaussianPrimitive:
    """Raw parameters reproducing an activated view (quaternion stays unit)."""
    return GaussianPrimitive(
        id=a.id,
        position=a.position.copy(),
        log_scale=np.log(a.scale),
        rotation=a.rotation.copy(),
        opacity_logit=float(inverse_sigmoid(a.opacity)),
        color=inverse_sigmoid(a.color),
    )


@dataclass
class GaussianCloud:
    """Ordered cloud; the storage order is the canonical index order used by
    edit-mask alignment."""

    primitives: list[GaussianPrimitive] = dc_field(default_factory=list)
    next_id: int = 0
    generation: int = 0

    def __len__(self) -> int:
        return len(self.primitives)

    def ids(self) -> np.ndarray:
        return np.array([g.id for g in self.primitives], dtype=np.int64)

    def check_invariants(self) -> None:
        ids = [g.id for g in self.primitives]
        assert len(set(ids)) == len(ids), "duplicate Gaussian ids"
        if ids:
            assert self.next_id > max(ids), "next_id must exceed every id"

    def fresh_id(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i

    def append(self, position, log_scale, rotation, opacity_logit, color) -> GaussianPrimitive:
        g = GaussianPrimitive(
            id=self.fresh_id(),
            position=position,
            log_scale=log_scale,
            rotation=rotation,
            opacity_logit=opacity_logit,
            color=color,
        )
        self.primitives.append(g)
        return g

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            primitives=[g.copy() for g in self.primitives],
            next_id=self.next_id,
            generation=self.generation,
        )

    # Tensor views (float64, shared math with the rasterizer).

    def to_tensors(self) -> dict[str, torch.Tensor]:
        n = len(self.primitives)
        out = {
            "position": torch.empty((n, 3), dtype=DTYPE),
            "log_scale": torch.empty((n, 3), dtype=DTYPE),
            "rotation": torch.empty((n, 4), dtype=DTYPE),
            "opacity_logit": torch.empty((n,), dtype=DTYPE),
            "color": torch.empty((n, 3), dtype=DTYPE),
        }
        for i, g in enumerate(self.primitives):
            out["position"][i] = torch.from_numpy(g.position)
            out["log_scale"][i] = torch.from_numpy(g.log_scale)
            out["rotation"][i] = torch.from_numpy(g.rotation)
            out["opacity_logit"][i] = g.opacity_logit
            out["color"][i] = torch.from_numpy(g.color)
        return out

    def write_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        """Write tensor values back into the primitives (same order, same count)."""
        assert tensors["position"].shape[0] == len(self.primitives)
        pos = tensors["position"].detach().numpy()
        ls = tensors["log_scale"].detach().numpy()
        rot = tensors["rotation"].detach().numpy()
        op = tensors["opacity_logit"].detach().numpy()
        col = tensors["color"].detach().numpy()
        for i, g in enumerate(self.primitives):
            g.position = pos[i].copy()
            g.log_scale = ls[i].copy()
            g.rotation = rot[i].copy()
            g.opacity_logit = float(op[i])
            g.color = col[i].copy()


# -- time embedding ----------------------------------------------------------

def time_embed(t: float, L: int) -> np.ndarray:
    """Fourier features [sin(2^k pi t), cos(2^k pi t)] for k = 0..L-1."""
    if L < 1:
        raise ValueError("L must be >= 1")
    out = np.empty(2 * L, dtype=np.float64)
    for k in range(L):
        arg = (2.0 ** k) * math.pi * t
        out[2 * k] = math.sin(arg)
        out[2 * k + 1] = math.cos(arg)
    return out


def time_embed_tensor(t, L: int) -> torch.Tensor:
    tt = t if isinstance(t, torch.Tensor) else torch.tensor(float(t), dtype=DTYPE)
    ks = torch.arange(L, dtype=DTYPE)
    args = (2.0 ** ks) * math.pi * tt
    return torch.stack([torch.sin(args), torch.cos(args)], dim=1).reshape(-1)


# -- deformation field --------------------------------------------------------

@dataclass
class DeformationField:
    """Fully connected MLP mapping (position, time embedding) -> raw-space
    offsets for the deformed attributes. Tanh between layers, linear output.

    ``deformed_attributes`` is a subset of DEFORMABLE_ATTRIBUTES; an empty
    subset makes the field the identity at every time.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]  # [(weight (out,in), bias (out,))]
    time_embed_order: int = 6
    deformed_attributes: tuple[str, ...] = DEFORMABLE_ATTRIBUTES

    def __post_init__(self):
        self.deformed_attributes = tuple(
            a for a in DEFORMABLE_ATTRIBUTES if a in self.deformed_attributes
        )
        self.layers = [
            (np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
            for w, b in self.layers
        ]
        self.validate()

    @property
    def input_width(self) -> int:
        return 3 + 2 * self.time_embed_order

    @property
    def output_width(self) -> int:
        return sum(_ATTR_WIDTH[a] for a in self.deformed_attributes)

    def validate(self) -> None:
        if not self.deformed_attributes:
            return
        if not self.layers:
            raise ShapeMismatch("deformation field with attributes needs layers")
        widths = [self.input_width] + [w.shape[0] for w, _ in self.layers]
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeMismatch(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if w.shape[1] != widths[i]:
                raise ShapeMismatch(
                    f"layer {i}: input width {w.shape[1]} != expected {widths[i]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ShapeMismatch(f"layer {i}: non-finite weights")
        if widths[-1] != self.output_width:
            raise ShapeMismatch(
                f"output width {widths[-1]} != attribute total {self.output_width}"
            )

    @classmethod
    def identity(cls) -> "DeformationField":
        """Field that deforms nothing."""
        return cls(layers=[], time_embed_order=1, deformed_attributes=())

    @classmethod
    def create(
        cls,
        time_embed_order: int = 6,
        hidden: tuple[int, ...] = (64, 64),
        deformed_attributes: tuple[str, ...] = DEFORMABLE_ATTRIBUTES,
        rng: np.random.Generator | None = None,
    ) -> "DeformationField":
        """Xavier-uniform hidden layers, zero final layer (identity at init)."""
        deformed_attributes = tuple(
            a for a in DEFORMABLE_ATTRIBUTES if a in deformed_attributes
        )
        if not deformed_attributes:
            return cls.identity()
        rng = rng or np.random.default_rng(0)
        widths = [3 + 2 * time_embed_order, *hidden,
                  sum(_ATTR_WIDTH[a] for a in deformed_attributes)]
        layers = []
        for i in range(len(widths) - 1):
            fan_in, fan_out = widths[i], widths[i + 1]
            if i == len(widths) - 2:
                w = np.zeros((fan_out, fan_in))
                b = np.zeros(fan_out)
            else:
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
                b = np.zeros(fan_out)
            layers.append((w, b))
        return cls(layers=layers, time_embed_order=time_embed_order,
                   deformed_attributes=deformed_attributes)

    def to_tensors(self, requires_grad: bool = False) -> list[tuple[torch.Tensor, torch.Tensor]]:
        out = []
        for w, b in self.layers:
            wt = torch.tensor(w, dtype=DTYPE, requires_grad=requires_grad)
            bt = torch.tensor(b, dtype=DTYPE, requires_grad=requires_grad)
            out.append((wt, bt))
        return out

    def write_tensors(self, tensors: list[tuple[torch.Tensor, torch.Tensor]]) -> None:
        assert len(tensors) == len(self.layers)
        self.layers = [
            (w.detach().numpy().copy(), b.detach().numpy().copy()) for w, b in tensors
        ]

    def copy(self) -> "DeformationField":
        return DeformationField(
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            time_embed_order=self.time_embed_order,
            deformed_attributes=self.deformed_attributes,
        )


def field_offsets(
    layer_tensors: list[tuple[torch.Tensor, torch.Tensor]],
    deformed_attributes: tuple[str, ...],
    time_embed_order: int,
    positions: torch.Tensor,
    t,
) -> dict[str, torch.Tensor]:
    """Evaluate the deformation MLP; returns one offset tensor per deformed
    attribute. Differentiable w.r.t. positions and layer tensors."""
    if not deformed_attributes:
        return {}
    n = positions.shape[0]
    emb = time_embed_tensor(t, time_embed_order).to(positions.dtype)
    h = torch.cat([positions, emb.unsqueeze(0).expand(n, -1)], dim=1)
    for i, (w, b) in enumerate(layer_tensors):
        h = h @ w.T + b
        if i < len(layer_tensors) - 1:
            h = torch.tanh(h)
    out: dict[str, torch.Tensor] = {}
    offset = 0
    for attr in deformed_attributes:
        width = _ATTR_WIDTH[attr]
        out[attr] = h[:, offset:offset + width]
        offset += width
    return out


def deform_tensors(
    tensors: dict[str, torch.Tensor],
    field: DeformationField | None,
    t,
    layer_tensors: list[tuple[torch.Tensor, torch.Tensor]] | None = None,
) -> dict[str, torch.Tensor]:
    """Apply raw-space offsets at time t; non-deformed attributes pass through."""
    if field is None or not field.deformed_attributes:
        return tensors
    lt = layer_tensors if layer_tensors is not None else field.to_tensors()
    offsets = field_offsets(
        lt, field.deformed_attributes, field.time_embed_order, tensors["position"], t
    )
    out = dict(tensors)
    for attr, delta in offsets.items():
        out[attr] = tensors[attr] + delta
    return out


def deform_at(cloud: GaussianCloud, field: DeformationField | None, t: TimeSample) -> GaussianCloud:
    """Cloud with per-Gaussian offsets applied at time t; ids untouched."""
    if field is not None:
        field.validate()
    result = cloud.copy()
    if field is None or not field.deformed_attributes or len(cloud) == 0:
        return result
    with torch.no_grad():
        deformed = deform_tensors(cloud.to_tensors(), field, t.t)
    result.write_tensors(deformed)
    return result


# -- scene file --------------------------------------------------------------

SCENE_VERSION = 1


def scene_to_dict(cloud: GaussianCloud, field: DeformationField | None) -> dict:
    doc = {
        "version": SCENE_VERSION,
        "primitives": [
            {
                "id": int(g.id),
                "position": [float(x) for x in g.position],
                "log_scale": [float(x) for x in g.log_scale],
                "rotation": [float(x) for x in g.rotation],
                "opacity_logit": float(g.opacity_logit),
                "color": [float(x) for x in g.color],
            }
            for g in cloud.primitives
        ],
        "deformation": None,
        "next_id": int(cloud.next_id),
        "generation": int(cloud.generation),
    }
    if field is not None:
        doc["deformation"] = {
            "L": int(field.time_embed_order),
            "deformed_attributes": list(field.deformed_attributes),
            "layers": [
                {"w": [[float(x) for x in row] for row in w],
                 "b": [float(x) for x in b]}
                for w, b in field.layers
            ],
        }
    return doc


def scene_from_dict(doc: dict) -> tuple[GaussianCloud, DeformationField | None]:
    if doc.get("version") != SCENE_VERSION:
        raise ValueError(f"unsupported scene version {doc.get('version')}")
    prims = [
        GaussianPrimitive(
            id=int(p["id"]),
            position=p["position"],
            log_scale=p["log_scale"],
            rotation=p["rotation"],
            opacity_logit=p["opacity_logit"],
            color=p["color"],
        )
        for p in doc["primitives"]
    ]
    max_id = max((g.id for g in prims), default=-1)
    cloud = GaussianCloud(
        primitives=prims,
        next_id=int(doc.get("next_id", max_id + 1)),
        generation=int(doc.get("generation", 0)),
    )
    cloud.check_invariants()
    fld = None
    d = doc.get("deformation")
    if d is not None:
        fld = DeformationField(
            layers=[(np.array(l["w"], dtype=np.float64),
                     np.array(l["b"], dtype=np.float64)) for l in d["layers"]],
            time_embed_order=int(d["L"]),
            deformed_attributes=tuple(d["deformed_attributes"]),
        )
    return cloud, fld


def save_scene(path: str | os.PathLike, cloud: GaussianCloud,
               field: DeformationField | None) -> None:
    with open(path, "w") as f:
        json.dump(scene_to_dict(cloud, field), f, indent=1)
        f.write("\n")


def load_scene(path: str | os.PathLike) -> tuple[GaussianCloud, DeformationField | None]:
    with open(path) as f:
        return scene_from_dict(json.load(f))
