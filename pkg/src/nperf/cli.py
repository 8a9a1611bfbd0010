"""``nperf <command> --config <path> [--override key=value]...``

Stages write into ``<out>/<stage>/`` and read their inputs from earlier
stages, so ``run`` is just every command in order. Exit codes: 0 success,
1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, EditSpec, PipelineConfig, load
from .dnr import apply_dnr, plan_resample
from .geometry import DeformSpec, RigidTransform, edit_masked_points, segment
from .infotheory import FeatureQuantizer, scene_mi
from .metrics import evaluate, format_value
from .renderer import Decoder, RenderConfig, render_view
from .scene import Camera, Mask3D, NeuralPointCloud, generate_scene
from .train import NumericalError, Supervision, finetune

COMMANDS = ("generate", "segment", "edit", "dnr", "train", "render", "metrics", "mi", "run")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(RuntimeError):
    pass


def _stage(cfg: PipelineConfig, name: str) -> Path:
    return Path(cfg.out) / name


def _manifest(cfg: PipelineConfig, command: str, **extra) -> dict:
    return {"command": command, "config": cfg.to_flat(), **extra}


def _cam_name(i: int) -> str:
    return f"cam{i:02d}"


def _log(msg: str) -> None:
    print(msg, flush=True)


# ----------------------------------------------------------------------
# scene access


class SceneDir:
    """Read-side view of a generated scene directory."""

    def __init__(self, path: Path):
        self.path = Path(path)
        mpath = self.path / "manifest.json"
        if not mpath.exists():
            raise DataError(f"no scene manifest at {mpath} (run `generate` first)")
        self.manifest = io.read_json(mpath)
        self.cameras = [Camera.from_dict(d) for d in self.manifest["cameras"]]
        self.decoder = Decoder.from_dict(self.manifest["decoder"])
        self.object_indices = np.asarray(self.manifest["object_indices"], dtype=np.int64)

    def cloud(self) -> NeuralPointCloud:
        return io.read_npc(self.path / "cloud.npc")

    def depth(self, i):
        return io.read_depth(self.path / f"{_cam_name(i)}.dpth")

    def mask(self, i, mask_dir=None):
        base = self.path if mask_dir is None else Path(mask_dir)
        m = io.read_pgm_mask(base / f"{_cam_name(i)}.pgm")
        cam = self.cameras[i]
        if m.raster.shape != (cam.height, cam.width):
            raise DataError(f"mask {_cam_name(i)} does not match its camera raster")
        return m

    def render_config(self, cfg: PipelineConfig) -> RenderConfig:
        r = self.manifest["render"]
        opts = cfg.render
        return RenderConfig(
            samples_per_ray=opts.samples_per_ray,
            r_agg=r["r_agg"] if opts.r_agg is None else opts.r_agg,
            max_neighbors=opts.max_neighbors,
            background=tuple(opts.background),
            jitter=opts.jitter,
            jitter_seed=opts.jitter_seed,
            t_near=r["t_near"],
            t_far=r["t_far"],
            chunk_rays=opts.chunk_rays,
        )


def _bundle(cfg: PipelineConfig):
    # supervision rasters are regenerated from the seed, never from quantized files
    return generate_scene(cfg.scene)


def _removal(cfg: PipelineConfig) -> bool:
    return bool(cfg.edits) and cfg.edits[-1].op == "remove"


# ----------------------------------------------------------------------
# commands


def cmd_generate(cfg: PipelineConfig) -> None:
    b = generate_scene(cfg.scene)
    out = _stage(cfg, "scene")
    out.mkdir(parents=True, exist_ok=True)
    for i in range(len(b.cameras)):
        io.write_ppm(out / f"{_cam_name(i)}.ppm", b.images[i])
        io.write_depth(out / f"{_cam_name(i)}.dpth", b.depths[i])
        io.write_pgm_mask(out / f"{_cam_name(i)}.pgm", b.masks[i])
    io.write_npc(out / "cloud.npc", b.cloud)
    io.write_npc(out / "background.npc", b.background_cloud)
    rc = b.render_config
    io.write_json(
        out / "manifest.json",
        _manifest(
            cfg,
            "generate",
            cameras=[c.to_dict() for c in b.cameras],
            decoder=b.decoder.to_dict(),
            render={"r_agg": rc.r_agg, "t_near": rc.t_near, "t_far": rc.t_far},
            object_indices=b.object_indices.tolist(),
            n_points=len(b.cloud),
        ),
    )
    _log(f"generate: {len(b.cloud)} points ({len(b.object_indices)} object), {len(b.cameras)} cameras -> {out}")


def cmd_segment(cfg: PipelineConfig) -> None:
    sd = SceneDir(_stage(cfg, "scene"))
    cloud = sd.cloud()
    ids = cfg.segment.cameras if cfg.segment.cameras is not None else list(range(len(sd.cameras)))
    for i in ids:
        if not 0 <= int(i) < len(sd.cameras):
            raise ConfigError(f"segment.cameras: no camera {i}")
    cams = [sd.cameras[i] for i in ids]
    depths = [sd.depth(i) for i in ids]
    masks = [sd.mask(i, cfg.segment.mask_dir) for i in ids]
    m3, stats = segment(cams, depths, masks, cloud, cfg.segment.radius)
    out = _stage(cfg, "segment")
    io.write_mask3d(out / "mask3d.msk3", m3)
    io.write_json(out / "manifest.json", _manifest(cfg, "segment", cameras=list(ids), **stats))
    _log(
        f"segment: lifted |P^|={stats['lifted']} registered |P^_NN|={stats['registered']} "
        f"remaining |P_M|={stats['remaining']} (masked pixels without depth: {stats['skipped_pixels']})"
    )


def _edit_op(e: EditSpec):
    try:
        if e.op == "remove":
            return "remove"
        if e.op == "rotate":
            return RigidTransform.rotation(e.axis, e.degrees, e.pivot)
        if e.op == "translate":
            return RigidTransform.translation(e.vector)
        if e.op == "scale":
            return DeformSpec.scale(e.factors, e.pivot)
        return DeformSpec.shear(e.matrix, e.pivot)
    except ValueError as err:
        raise ConfigError(f"edit {e.op}: {err}") from err


def cmd_edit(cfg: PipelineConfig) -> None:
    if not cfg.edits:
        raise ConfigError("no edits configured")
    ops = [_edit_op(e) for e in cfg.edits]
    sd = SceneDir(_stage(cfg, "scene"))
    cloud = original = sd.cloud()
    touched = np.zeros(0, dtype=np.int64)
    for e, op in zip(cfg.edits, ops):
        path = _stage(cfg, "segment") / "mask3d.msk3" if e.mask == "segment" else Path(e.mask)
        mask = io.read_mask3d(path)
        try:
            mask.validate(len(cloud))
        except ValueError as err:
            raise DataError(f"{path}: {err}") from err
        touched = np.union1d(touched, mask.indices)
        cloud, _ = edit_masked_points(cloud, mask, op)
    vacated = original.positions[touched]
    out = _stage(cfg, "edit")
    io.write_npc(out / "cloud.npc", cloud)
    io.write_npc(out / "vacated.npc", NeuralPointCloud.from_positions(vacated, 1))
    # in-place edits: the moved points must not seed the resampling
    exclude = [] if _removal(cfg) else touched.tolist()
    io.write_mask3d(out / "exclude.msk3", Mask3D(exclude))
    io.write_json(
        out / "manifest.json",
        _manifest(cfg, "edit", edits=[asdict(e) for e in cfg.edits], n_points=len(cloud), n_vacated=len(vacated)),
    )
    _log(f"edit: {', '.join(e.op for e in cfg.edits)}; {len(original)} -> {len(cloud)} points, {len(vacated)} vacated")


def cmd_dnr(cfg: PipelineConfig) -> None:
    sd = SceneDir(_stage(cfg, "scene"))
    ed = _stage(cfg, "edit")
    cloud = io.read_npc(ed / "cloud.npc")
    vacated = io.read_npc(ed / "vacated.npc").positions
    exclude = io.read_mask3d(ed / "exclude.msk3")
    ctx = [(cam, sd.depth(i), sd.mask(i)) for i, cam in enumerate(sd.cameras)]
    try:
        plan = plan_resample(cloud, vacated, ctx, cfg.dnr, exclude=exclude)
    except ValueError as err:
        raise DataError(str(err)) from err
    out_cloud = apply_dnr(cloud, plan, cfg.dnr)
    out = _stage(cfg, "dnr")
    io.write_npc(out / "cloud.npc", out_cloud)
    io.write_json(
        out / "manifest.json",
        _manifest(cfg, "dnr", strategy=cfg.dnr.strategy, k=cfg.dnr.k, n_targets=len(plan), n_vacated=plan.n_vacated),
    )
    _log(f"dnr: strategy={cfg.dnr.strategy} K={cfg.dnr.k}; appended {len(plan)} points ({plan.n_vacated} vacated)")


def cmd_train(cfg: PipelineConfig) -> None:
    if not _removal(cfg):
        raise ConfigError("training supervision is only available for removal edits")
    sd = SceneDir(_stage(cfg, "scene"))
    cloud = io.read_npc(_stage(cfg, "dnr") / "cloud.npc")
    b = _bundle(cfg)
    sup = Supervision.for_removal(b.cameras, b.images, b.depths, b.masks, b.background_images, b.background_depths)
    rcfg = sd.render_config(cfg)
    res = finetune(cloud, sup, rcfg, sd.decoder, cfg.train, cfg.loss)
    out = _stage(cfg, "train")
    io.write_npc(out / "cloud.npc", res.cloud)
    buf = _io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["step", "total", "color", "per", "depth", "sparse"])
    for r in res.trace:
        wr.writerow([r["step"]] + [repr(float(r[k])) for k in ("total", "color", "per", "depth", "sparse")])
    (out / "loss.csv").write_text(buf.getvalue())
    final = res.trace[-1]["total"] if res.trace else None
    io.write_json(
        out / "manifest.json",
        _manifest(cfg, "train", steps=len(res.trace), convergence_step=res.convergence_step, final_loss=final),
    )
    _log(f"train: {len(res.trace)} steps, convergence_step={res.convergence_step}, final loss={final}")


def _eval_cloud(cfg: PipelineConfig) -> NeuralPointCloud:
    stage = cfg.eval.stage
    if stage.endswith(".npc"):
        return io.read_npc(stage)
    return io.read_npc(_stage(cfg, stage) / "cloud.npc")


def cmd_render(cfg: PipelineConfig) -> None:
    sd = SceneDir(_stage(cfg, "scene"))
    cloud = _eval_cloud(cfg)
    rcfg = sd.render_config(cfg)
    out = _stage(cfg, "render")
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(sd.cameras):
        r = render_view(cloud, cam, rcfg, sd.decoder)
        io.write_ppm(out / f"{_cam_name(i)}.ppm", r.color)
        io.write_depth(out / f"{_cam_name(i)}.dpth", r.depth_map())
    io.write_json(out / "manifest.json", _manifest(cfg, "render", source=cfg.eval.stage))
    _log(f"render: {len(sd.cameras)} views of '{cfg.eval.stage}' -> {out}")


def cmd_metrics(cfg: PipelineConfig) -> None:
    sd = SceneDir(_stage(cfg, "scene"))
    cloud = _eval_cloud(cfg)
    rcfg = sd.render_config(cfg)
    b = _bundle(cfg)
    targets = b.background_images if _removal(cfg) else b.images
    rows = []
    for i, cam in enumerate(sd.cameras):
        pred = render_view(cloud, cam, rcfg, sd.decoder).color
        if pred.shape != targets[i].shape:
            raise DataError(f"{_cam_name(i)}: rendered raster does not match the target")
        rows.append((_cam_name(i), evaluate(pred, targets[i], b.masks[i])))
    cols = ["psnr", "ssim", "psnr_masked", "ssim_masked"]
    buf = _io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["view"] + cols)
    for name, m in rows:
        wr.writerow([name] + [format_value(getattr(m, c)) for c in cols])
    means = []
    for c in cols:
        vals = [getattr(m, c) for _, m in rows if getattr(m, c) is not None]
        means.append(float(np.mean(vals)) if vals else None)
    wr.writerow(["mean"] + [format_value(v) for v in means])
    out = _stage(cfg, "metrics")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(buf.getvalue())
    io.write_json(out / "manifest.json", _manifest(cfg, "metrics", source=cfg.eval.stage))
    sys.stdout.write(buf.getvalue())


def cmd_mi(cfg: PipelineConfig) -> None:
    sd = SceneDir(_stage(cfg, "scene"))
    cloud = _eval_cloud(cfg)
    q = FeatureQuantizer.fit(sd.cloud().features, cfg.mi.bins)
    masks = [sd.mask(i) for i in range(len(sd.cameras))]
    value = scene_mi(cloud, sd.cameras, sd.render_config(cfg), sd.decoder, q, cfg.mi, masks)
    out = _stage(cfg, "mi")
    io.write_json(out / "manifest.json", _manifest(cfg, "mi", source=cfg.eval.stage, scene_mi=value))
    _log(f"mi: scene_mi={value:.6f} nats")


def cmd_run(cfg: PipelineConfig) -> None:
    steps = [cmd_generate, cmd_segment, cmd_edit, cmd_dnr]
    if _removal(cfg):
        steps.append(cmd_train)
    elif cfg.eval.stage == "train":
        cfg.eval.stage = "dnr"
    steps += [cmd_render, cmd_metrics, cmd_mi]
    for fn in steps:
        fn(cfg)


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# ----------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nperf", description="Point-based editable radiance field pipeline")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="config file (key = value text, or a JSON manifest)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load(args.config, args.override)
        HANDLERS[args.command](cfg)
        return EXIT_OK
    except ConfigError as e:
        print(f"nperf: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        parts = ", ".join(f"{k}={v!r}" for k, v in e.components.items())
        print(f"nperf: numerical failure at step {e.step}: {parts}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"nperf: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, io.FormatError, OSError, ValueError, KeyError) as e:
        print(f"nperf: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
