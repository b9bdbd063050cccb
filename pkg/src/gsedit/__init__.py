"""gsedit: a desk-scale 4D Gaussian splatting editing engine.

Canonical Gaussian cloud + deformation field, a differentiable rasterizer,
Gumbel-Softmax Gaussian selection with exact mask tracking through topology
changes, iterative-dataset-update edit supervision, and an atomic-task
instruction planner.
"""

__version__ = "0.1.0"

from .cameras import CameraPose, look_at, orbit_rig
from .images import ImageBuffer, assemble_grid, split_grid
from .planner import AtomicTask, EditPlan, TaskCategory, decompose
from .rasterizer import render, render_backward, render_masked, project
from .scene import (
    DeformationField,
    GaussianCloud,
    GaussianPrimitive,
    TimeSample,
    activate,
    deform_at,
    load_scene,
    save_scene,
    time_embed,
)
from .selector import EditMask, SegTarget, gumbel_sample, straight_through, train_selector
from .supervision import (
    EditOracleSpec,
    SupervisionDataset,
    idu_refresh,
    remote_edit,
    synthetic_edit,
)
from .optimizer import OptimConfig, edit_loss, edit_optimize, fit_scene, step
from .tracking import TrackedCloud, clone_op, prune_op, split_op
from .metrics import psnr, ssim

__all__ = [
    "AtomicTask", "CameraPose", "DeformationField", "EditMask", "EditOracleSpec",
    "EditPlan", "GaussianCloud", "GaussianPrimitive", "ImageBuffer",
    "OptimConfig", "SegTarget", "SupervisionDataset", "TaskCategory",
    "TimeSample", "TrackedCloud", "activate", "assemble_grid", "clone_op",
    "decompose", "deform_at", "edit_loss", "edit_optimize", "fit_scene",
    "gumbel_sample", "idu_refresh", "load_scene", "look_at", "orbit_rig",
    "project", "prune_op", "psnr", "remote_edit", "render", "render_backward",
    "render_masked", "save_scene", "split_grid", "split_op", "ssim", "step",
    "straight_through", "synthetic_edit", "time_embed", "train_selector",
]
