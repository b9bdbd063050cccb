"""Command-line surface: fit | plan | select | edit | render | metrics |
track-demo, plus a `demo` command that materializes a toy project.

Every command is deterministic given the config file and seed. Failures exit
non-zero with a machine-readable {"error", "context"} JSON line on stderr:
exit 2 for config errors, 3 for numeric failures, 4 for remote-service
failures, 1 otherwise.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import sys

import click
import numpy as np

from . import reports
from .cameras import load_camera_dir, orbit_rig, save_camera
from .config import ProjectConfig, load_config
from .errors import (
    ConfigError,
    GseditError,
    MalformedResponse,
    NonFiniteLoss,
    ServiceUnavailable,
    Timeout,
)
from .images import ImageBuffer, load_gray_png, save_gray_png
from .metrics import dilate, region_report
from .optimizer import OptimConfig, edit_optimize, fit_scene, save_optim_state
from .planner import LLMBackend, RuleBackend, decompose, load_plan, save_plan
from .rasterizer import render, render_silhouette
from .rng import numpy_generator, torch_generator
from .scene import DeformationField, load_scene, save_scene
from .selector import (
    EditMask,
    SegTarget,
    TemperatureSchedule,
    load_mask,
    save_mask,
    train_selector,
)
from .supervision import (
    CloudSceneView,
    IdentityOracle,
    RemoteOracle,
    SyntheticOracle,
    build_dataset,
    synthetic_edit,
)
from .tracking import TrackedCloud, load_op_log, replay, save_op_log
from .toyscene import arc_rig, blob_mask, two_blob_scene

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_REMOTE = 4


def _exit_code(exc: GseditError) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NonFiniteLoss):
        return EXIT_NUMERIC
    if isinstance(exc, (ServiceUnavailable, Timeout, MalformedResponse)):
        return EXIT_REMOTE
    return 1


def handled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except GseditError as exc:
            sys.stderr.write(json.dumps(
                {"error": type(exc).__name__, "context": str(exc)}) + "\n")
            sys.exit(_exit_code(exc))
    return wrapper


@click.group()
@click.option("--config", "-c", "config_path", type=click.Path(), default=None,
              help="Project config TOML.")
@click.option("--out", "out_override", type=click.Path(), default=None,
              help="Override the output directory.")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.pass_context
def main(ctx, config_path, out_override, verbose):
    """Desk-scale Gaussian-splat scene editing."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["out_override"] = out_override


def _cfg(ctx) -> ProjectConfig:
    path = ctx.obj.get("config_path")
    if path is None:
        raise ConfigError("this command needs --config pointing at a TOML file")
    return load_config(path)


def _out(ctx, cfg: ProjectConfig) -> str:
    return cfg.output_dir(ctx.obj.get("out_override"))


def _load_frames(cfg: ProjectConfig, names: list[str]) -> list[ImageBuffer]:
    frames_dir = cfg.require_path("frames")
    frames = []
    for name in names:
        path = os.path.join(frames_dir, f"{name}.png")
        if not os.path.exists(path):
            raise ConfigError(f"missing frame for camera {name!r}: {path}")
        frames.append(ImageBuffer.load_png(path))
    return frames


def _make_oracle(cfg: ProjectConfig, task):
    kind = cfg.oracle.kind
    if kind == "identity":
        return IdentityOracle()
    if kind == "remote":
        return RemoteOracle(cfg.oracle.endpoint, task.prompt,
                            timeout=cfg.oracle.timeout,
                            cache_dir=cfg.path("oracle_cache") or
                            (cfg.oracle.cache or None))
    return SyntheticOracle(task, seed=cfg.seed, residue=cfg.oracle.residue)


# -- commands --------------------------------------------------------------------


@main.command()
@click.argument("out_dir", type=click.Path())
@handled
def demo(out_dir):
    """Materialize a toy two-blob project (scene, cameras, frames, masks,
    plan, config) ready for select/edit/render/metrics."""
    from .planner import AtomicTask, TaskCategory, EditPlan

    os.makedirs(out_dir, exist_ok=True)
    for sub in ("cameras", "frames", "masks"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    cloud, ids_a, _ = two_blob_scene(seed=0)
    save_scene(os.path.join(out_dir, "scene.json"), cloud, None)
    gt = blob_mask(cloud, ids_a)
    save_mask(os.path.join(out_dir, "mask_gt.json"), gt)

    task = AtomicTask(TaskCategory.COLOR_ADJUSTMENT,
                      "Repaint the warm blob golden", subject="warm blob")
    plan = EditPlan(tasks=[task], provenance={
        "backend": "rule", "raw_instruction": task.prompt,
        "grounded_text": task.prompt})
    from .planner import order
    save_plan(os.path.join(out_dir, "plan.json"), order(plan.tasks,
                                                        plan.provenance))

    cams = arc_rig(6, width=48, height=48)
    for i, cam in enumerate(cams):
        name = f"cam_{i:02d}"
        save_camera(os.path.join(out_dir, "cameras", f"{name}.json"), cam)
        frame = render(cloud, None, cam)
        sil = render_silhouette(cloud, None, gt, cam, threshold=0.3)
        edited = synthetic_edit(frame, task, sil.astype(float), seed=0)
        edited.save_png(os.path.join(out_dir, "frames", f"{name}.png"))
        save_gray_png(sil, os.path.join(out_dir, "masks", f"{name}.png"))

    config_text = """\
seed = 7

[paths]
scene = "scene.json"
cameras = "cameras"
frames = "frames"
masks = "masks"
plan = "plan.json"
mask = "mask_gt.json"
output = "out"

[optim]
steps = 400
lr_position = 0.0
lr_position_final = 0.0
lr_log_scale = 0.0
lr_rotation = 0.0
lr_opacity = 0.0
lr_color = 1e-2
densify_interval = 100
idu_period = 10

[selector]
steps = 1500

[oracle]
kind = "synthetic"
residue = 0.02

[render]
width = 48
height = 48
"""
    with open(os.path.join(out_dir, "config.toml"), "w") as f:
        f.write(config_text)
    click.echo(f"demo project written to {out_dir}")


@main.command()
@click.pass_context
@handled
def fit(ctx):
    """Fit a scene to the configured frames and cameras."""
    cfg = _cfg(ctx)
    out = _out(ctx, cfg)
    rig = load_camera_dir(cfg.require_path("cameras"))
    names = [name for name, _ in rig]
    cams = [cam for _, cam in rig]
    frames = _load_frames(cfg, names)
    field = None
    if cfg.fit.field:
        field = DeformationField.create(
            time_embed_order=cfg.fit.field_order,
            hidden=tuple(int(h) for h in cfg.fit.field_hidden),
            rng=numpy_generator(cfg.seed, "fit", "field-init"))
    result = fit_scene(frames, cams, cfg.optim, field=field,
                       background=cfg.render.background,
                       init_count=cfg.fit.init_count,
                       init_center=cfg.fit.init_center,
                       init_radius=cfg.fit.init_radius)
    save_scene(os.path.join(out, "scene.json"), result.cloud, result.field)
    reports.save_trace_csv(os.path.join(out, "trace.csv"), result.trace)
    reports.loss_curve(os.path.join(out, "fit_loss.png"), result.trace,
                       title="scene fit")
    click.echo(f"fit: {len(result.cloud)} gaussians, "
               f"training PSNR {result.train_psnr:.2f} dB -> {out}/scene.json")


@main.command()
@click.argument("instruction", required=False)
@click.option("--instruction-file", type=click.Path(exists=True), default=None)
@click.pass_context
@handled
def plan(ctx, instruction, instruction_file):
    """Decompose an instruction into an ordered plan of atomic tasks."""
    cfg = _cfg(ctx)
    out = _out(ctx, cfg)
    if instruction_file is not None:
        with open(instruction_file) as f:
            instruction = f.read().strip()
    if not instruction:
        raise ConfigError("pass INSTRUCTION or --instruction-file")
    backend = (LLMBackend(cfg.planner.endpoint)
               if cfg.planner.backend == "llm" else RuleBackend())
    result = decompose(instruction, backend)
    save_plan(os.path.join(out, "plan.json"), result)
    click.echo(f"plan: {len(result.tasks)} task(s) -> {out}/plan.json")
    for t in result.tasks:
        click.echo(f"  {t.order}. [{t.category.value}] {t.prompt}")


@main.command()
@click.pass_context
@handled
def select(ctx):
    """Train the Gaussian selector against reference frames + masks."""
    cfg = _cfg(ctx)
    out = _out(ctx, cfg)
    cloud, field = load_scene(cfg.require_path("scene"))
    rig = load_camera_dir(cfg.require_path("cameras"))
    masks_dir = cfg.require_path("masks")
    frames = _load_frames(cfg, [name for name, _ in rig])
    targets = []
    for (name, cam), frame in zip(rig, frames):
        mask_path = os.path.join(masks_dir, f"{name}.png")
        if not os.path.exists(mask_path):
            raise ConfigError(f"missing segmentation mask: {mask_path}")
        targets.append(SegTarget(frame=frame, mask=load_gray_png(mask_path),
                                 camera=cam))
    schedule = TemperatureSchedule(start=cfg.selector.temperature_start,
                                   end=cfg.selector.temperature_end,
                                   hard_fraction=cfg.selector.hard_fraction)
    mask, trace = train_selector(cloud, field, targets, cfg.selector.steps,
                                 schedule, background=cfg.render.background,
                                 generator=torch_generator(cfg.seed, "selector"),
                                 lr=cfg.selector.lr)
    save_mask(os.path.join(out, "mask.json"), mask)
    reports.save_trace_csv(os.path.join(out, "selector_trace.csv"),
                           list(enumerate(trace, start=1)))
    reports.loss_curve(os.path.join(out, "selector_loss.png"),
                       list(enumerate(trace, start=1)), title="selector")
    click.echo(f"select: {int(mask.labels.sum())}/{len(mask)} gaussians marked "
               f"editable -> {out}/mask.json")


def _initial_mask(cfg: ProjectConfig, cloud, mask_path: str | None) -> EditMask:
    path = mask_path or cfg.path("mask")
    if path is None:
        return EditMask.uniform(cloud, label=1)
    mask = load_mask(path)
    mask.validate_against(cloud)
    return mask


@main.command()
@click.option("--mask", "mask_path", type=click.Path(exists=True), default=None,
              help="Gaussian mask JSON (default: paths.mask, else all-ones).")
@click.option("--scene", "scene_path", type=click.Path(exists=True), default=None,
              help="Override the input scene (for chaining checkpoints).")
@click.option("--task-index", type=int, default=None,
              help="Run only this task of the plan.")
@click.pass_context
@handled
def edit(ctx, mask_path, scene_path, task_index):
    """Execute the plan's atomic tasks sequentially on the scene."""
    cfg = _cfg(ctx)
    out = _out(ctx, cfg)
    cloud, field = load_scene(scene_path or cfg.require_path("scene"))
    plan_doc = load_plan(cfg.require_path("plan"))
    rig = load_camera_dir(cfg.require_path("cameras"))
    cams = [cam for _, cam in rig]
    tasks = plan_doc.tasks
    if task_index is not None:
        tasks = [t for t in tasks if t.order == task_index]
        if not tasks:
            raise ConfigError(f"plan has no task with order {task_index}")
    mask = _initial_mask(cfg, cloud, mask_path)

    os.makedirs(os.path.join(out, "before"), exist_ok=True)
    for i, cam in enumerate(cams):
        render(cloud, field, cam, cfg.render.background).save_png(
            os.path.join(out, "before", f"{i:04d}.png"))

    global_trace: list[tuple[int, float]] = []
    offset = 0
    for task in tasks:
        tc = TrackedCloud(cloud=cloud, mask=mask)
        oracle = _make_oracle(cfg, task)
        view = CloudSceneView(cloud, field, cfg.render.background)
        dataset = build_dataset(view, cams)
        before_view = dataset.entries[0].source
        click.echo(f"edit task {task.order}: [{task.category.value}] {task.prompt}")
        result = edit_optimize(tc, field, dataset, oracle, cfg.optim,
                               background=cfg.render.background,
                               stream=(task.order,))
        task_dir = os.path.join(out, f"task_{task.order:02d}")
        os.makedirs(task_dir, exist_ok=True)
        save_scene(os.path.join(task_dir, "scene.json"), tc.cloud, field)
        save_mask(os.path.join(task_dir, "mask.json"), tc.mask)
        if result.state is not None:
            save_optim_state(os.path.join(task_dir, "optim_state.bin"),
                             result.state, tc.cloud.ids(),
                             iteration=cfg.optim.steps)
        save_op_log(os.path.join(task_dir, "oplog.jsonl"), tc.op_log)
        reports.save_trace_csv(os.path.join(task_dir, "trace.csv"), result.trace)
        cam0 = cams[0]
        after_view = render(tc.cloud, field, cam0, cfg.render.background)
        region = dilate(render_silhouette(tc.cloud, field, tc.mask, cam0), 2)
        reports.edit_report(task_dir, before_view, after_view,
                            dataset.entries[0].target, region,
                            result.trace, name="edit")
        global_trace.extend((offset + it, v) for it, v in result.trace)
        offset += cfg.optim.steps
        cloud, mask = tc.cloud, tc.mask

    save_scene(os.path.join(out, "scene.json"), cloud, field)
    save_mask(os.path.join(out, "mask.json"), mask)
    reports.save_trace_csv(os.path.join(out, "trace.csv"), global_trace)
    reports.loss_curve(os.path.join(out, "loss_curve.png"), global_trace,
                       title="edit optimization")
    os.makedirs(os.path.join(out, "frames"), exist_ok=True)
    for i, cam in enumerate(cams):
        render(cloud, field, cam, cfg.render.background).save_png(
            os.path.join(out, "frames", f"{i:04d}.png"))
    click.echo(f"edit: {len(tasks)} task(s) done -> {out}/scene.json")


@main.command(name="render")
@click.option("--scene", "scene_path", type=click.Path(exists=True), default=None)
@click.option("--turntable", type=int, default=None,
              help="Render N orbit views (with a time sweep) instead of the "
                   "configured cameras.")
@click.pass_context
@handled
def render_cmd(ctx, scene_path, turntable):
    """Render the scene to PNG frames."""
    cfg = _cfg(ctx)
    out = _out(ctx, cfg)
    cloud, field = load_scene(scene_path or cfg.require_path("scene"))
    if turntable is not None:
        times = np.linspace(0.0, 1.0, max(turntable, 1))
        cams = orbit_rig(turntable, width=cfg.render.width,
                         height=cfg.render.height, times=times)
    else:
        cams = [cam for _, cam in load_camera_dir(cfg.require_path("cameras"))]
    frames_dir = os.path.join(out, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    for i, cam in enumerate(cams):
        img = render(cloud, field, cam, cfg.render.background)
        img.save_png(os.path.join(frames_dir, f"{i:04d}.png"))
    click.echo(f"render: {len(cams)} frame(s) -> {frames_dir}")


@main.command()
@click.option("--original", "original_path", type=click.Path(exists=True),
              default=None, help="Original scene JSON (default paths.scene).")
@click.option("--edited", "edited_path", type=click.Path(exists=True),
              default=None, help="Edited scene JSON (default <out>/scene.json).")
@click.option("--mask", "mask_path", type=click.Path(exists=True), default=None,
              help="Gaussian mask JSON (default <out>/mask.json).")
@click.pass_context
@handled
def metrics(ctx, original_path, edited_path, mask_path):
    """PSNR/SSIM of edited vs original renders, split by the mask's screen
    region (mask-1 silhouette, alpha > 0.5, dilated 2 px)."""
    cfg = _cfg(ctx)
    out = _out(ctx, cfg)
    orig_cloud, orig_field = load_scene(original_path or cfg.require_path("scene"))
    edited_file = edited_path or os.path.join(out, "scene.json")
    if not os.path.exists(edited_file):
        raise ConfigError(f"edited scene not found: {edited_file}")
    edit_cloud, edit_field = load_scene(edited_file)
    mask_file = mask_path or os.path.join(out, "mask.json")
    mask = load_mask(mask_file) if os.path.exists(mask_file) \
        else EditMask.uniform(edit_cloud, label=1)
    rig = load_camera_dir(cfg.require_path("cameras"))

    views = []
    rows = []
    first_figure = None
    for name, cam in rig:
        before = render(orig_cloud, orig_field, cam, cfg.render.background)
        after = render(edit_cloud, edit_field, cam, cfg.render.background)
        region = dilate(render_silhouette(edit_cloud, edit_field, mask, cam), 2)
        rep = region_report(before, after, region)
        views.append({"view": name, **rep})
        for reg_name in ("full", "edited", "non_edited"):
            rows.append((name, reg_name, rep[reg_name]["psnr"],
                         rep[reg_name]["ssim"]))
        if first_figure is None:
            first_figure = (before, after, region)

    def mean_of(region_name, metric):
        vals = [v[region_name][metric] for v in views
                if v[region_name][metric] is not None]
        return float(np.mean(vals)) if vals else None

    report = {
        "views": views,
        "mean": {f"{r}_{m}": mean_of(r, m)
                 for r in ("full", "edited", "non_edited")
                 for m in ("psnr", "ssim")},
    }
    with open(os.path.join(out, "metrics.json"), "w") as f:
        json.dump(report, f, indent=1)
        f.write("\n")
    import csv as _csv
    with open(os.path.join(out, "metrics.csv"), "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["view", "region", "psnr", "ssim"])
        writer.writerows(rows)
    if first_figure is not None:
        reports.metrics_figure(os.path.join(out, "metrics.png"), *first_figure)
    ne = report["mean"]["non_edited_psnr"]
    click.echo(f"metrics: non-edited PSNR "
               f"{'n/a' if ne is None else f'{ne:.2f} dB'} -> {out}/metrics.json")


@main.command(name="track-demo")
@click.option("--oplog", "oplog_path", type=click.Path(exists=True), required=True)
@click.option("--scene", "scene_path", type=click.Path(exists=True), default=None)
@click.option("--mask", "mask_path", type=click.Path(exists=True), default=None)
@click.pass_context
@handled
def track_demo(ctx, oplog_path, scene_path, mask_path):
    """Replay an op log from a checkpoint and print the mask audit."""
    cfg = _cfg(ctx)
    cloud, _ = load_scene(scene_path or cfg.require_path("scene"))
    mask = (load_mask(mask_path or cfg.require_path("mask"))
            if (mask_path or cfg.path("mask")) else EditMask.uniform(cloud, 1))
    mask.validate_against(cloud)
    tc = TrackedCloud(cloud=cloud, mask=mask)
    ops = load_op_log(oplog_path)
    click.echo(f"replaying {len(ops)} op(s) on a cloud of {len(tc)}")
    running = tc.snapshot()
    for rec in ops:
        replayed = replay(running, [rec])
        running = replayed
        ones = int(running.mask.labels.sum())
        click.echo(f"  {rec.op:6s} parent={rec.parents} children={rec.children} "
                   f"|cloud|={len(running.cloud)} |mask|={len(running.mask)} "
                   f"edit={ones} frozen={len(running.mask) - ones}")
        assert len(running.cloud) == len(running.mask)
    click.echo(f"audit ok: {len(running.cloud)} gaussians, "
               f"{int(running.mask.labels.sum())} editable")


if __name__ == "__main__":
    main()
