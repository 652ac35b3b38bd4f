"""Command-line entry point: ``gsavatar {synth,fit,train,render,eval}``.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from .articulation import fit_template
from .avatar import Avatar
from .checkpoint import CheckpointError, load_checkpoint
from .config import Config, ConfigError, load_config, parse_int_list, save_config
from .data import (DatasetError, load_dataset, load_template, parse_cameras, parse_poses, synthesize,
                   write_dataset, write_png)
from .raster import rasterize
from .trainer import evaluate, evaluate_images, train

log = logging.getLogger("gsavatar")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationError(ValueError):
    pass


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise ValidationError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> Config:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    return cfg


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _prepare_out(Path(args.out or cfg.paths.dataset), args.force)
    template = load_template(cfg.paths.template)
    teacher, ds = synthesize(template, cfg.avatar_spec(), cfg.synth_spec(), cfg.run.seed)
    save_config(out / "config.ini", cfg)
    write_dataset(out, ds, teacher, {"seed": cfg.run.seed})
    print(f"wrote {ds.n_frames} frames x {ds.n_views} views to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _config(args)
    if args.lam is not None:
        cfg.fit.lam = args.lam
    template = load_template(cfg.paths.template)
    target = args.target or cfg.paths.fit_target
    if not target:
        raise ValidationError("no fit target given ([paths] fit_target or --target)")
    doc = json.loads(Path(target).read_text())
    verts, joints = np.asarray(doc["vertices"], dtype=np.float64), np.asarray(doc["joints"], dtype=np.float64)
    if verts.shape != template.vertices.shape or joints.shape != template.skeleton.rest_joints.shape:
        raise ValidationError(f"target shapes {verts.shape}/{joints.shape} do not match template "
                              f"{template.vertices.shape}/{template.skeleton.rest_joints.shape}")
    res = fit_template(template, verts, joints, lam=cfg.fit.lam, max_iter=cfg.fit.max_iter)
    out = Path(args.out or cfg.paths.output)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.ini", cfg)
    report = {
        "betas": res.betas.tolist(), "translation": res.pose.translation.tolist(),
        "rotations": res.pose.rotations.tolist(), "objective": res.objective, "lam": cfg.fit.lam,
        "vertex_rms": res.vertex_rms, "joint_rms": res.joint_rms, "iterations": res.iterations,
        "converged": res.converged, "tolerance": cfg.fit.tolerance,
    }
    (out / "fit.json").write_text(json.dumps(report, indent=1) + "\n")
    print(f"vertex RMS {res.vertex_rms:.3e} m, joint RMS {res.joint_rms:.3e} m, "
          f"objective {res.objective:.6e} after {res.iterations} iterations")
    if res.vertex_rms > cfg.fit.tolerance:
        print(f"vertex RMS exceeds tolerance {cfg.fit.tolerance:g}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _prepare_out(Path(args.out or cfg.paths.output), args.force or args.init is not None)
    template = load_template(cfg.paths.template)
    ds = load_dataset(args.dataset or cfg.paths.dataset, n_joints=template.n_joints)
    if args.views:
        views = parse_int_list(args.views)
        ds.heldout_views = tuple(v for v in range(ds.n_views) if v not in views)
    save_config(out / "config.ini", cfg)
    if args.init:
        avatar = Avatar.from_checkpoint(load_checkpoint(args.init), template)
    else:
        avatar = Avatar.build(template, cfg.avatar_spec(), ds.poses, np.random.default_rng(cfg.run.seed))
    stages = ("pretrain", "joint", "face") if args.stage == "all" else (args.stage,)
    result = train(ds, avatar, cfg.train_schedule(), cfg.loss_weights(), out_dir=out, stages=stages)
    for stage, path in result.checkpoints.items():
        print(f"{stage}: {path}")
    return EXIT_OK


def _pick(items, idx, what):
    if not 0 <= idx < len(items):
        raise ValidationError(f"{what} {idx} out of range (have {len(items)})")
    return items[idx]


def cmd_render(args) -> int:
    cfg = _config(args)
    template = load_template(cfg.paths.template)
    avatar = Avatar.from_checkpoint(load_checkpoint(args.checkpoint), template)
    root = Path(args.dataset or cfg.paths.dataset)
    pose_text = Path(args.pose_file).read_text() if args.pose_file else (root / "poses.txt").read_text()
    cam_text = Path(args.camera_file).read_text() if args.camera_file else (root / "cameras.txt").read_text()
    pose = _pick(parse_poses(pose_text, template.n_joints), args.frame, "frame")
    cam = _pick(parse_cameras(cam_text), args.view, "view")
    img = rasterize(avatar.forward(pose, cam).posed, cam).color
    out = Path(args.out or "render.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(out, img)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    template = load_template(cfg.paths.template)
    ds = load_dataset(args.dataset or cfg.paths.dataset, n_joints=template.n_joints)
    views = parse_int_list(args.views) if args.views else tuple(ds.heldout_views)
    if not views:
        raise ValidationError("no views to evaluate")
    for v in views:
        _pick(ds.cameras, v, "view")
    if args.gt_self:
        pairs = {v: [(ds.image(f, v), ds.image(f, v), ds.face_image(f, v), ds.face_image(f, v))
                     for f in range(ds.n_frames)] for v in views}
        report = evaluate_images(pairs)
    else:
        if not args.checkpoint:
            raise ValidationError("eval needs --checkpoint (or --gt-self)")
        avatar = Avatar.from_checkpoint(load_checkpoint(args.checkpoint), template)
        report = evaluate(avatar, ds, views)
    out = Path(args.out or cfg.paths.output)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.ini", cfg)
    report.write_csv(out / "metrics.csv")
    print(report.table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsavatar", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="INI config file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--out", help=out_help)
        return sp

    s = common(sub.add_parser("synth", help="render a synthetic teacher dataset"), "dataset directory")
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth)

    s = common(sub.add_parser("fit", help="fit shape and pose to target vertices and joints"), "report directory")
    s.add_argument("--target", help="JSON file with vertices and joints arrays")
    s.add_argument("--lam", type=float, help="joint residual weight")
    s.set_defaults(func=cmd_fit)

    s = common(sub.add_parser("train", help="train an avatar on a dataset"), "run directory")
    s.add_argument("--dataset")
    s.add_argument("--force", action="store_true")
    s.add_argument("--views", help="comma list of training views (others are held out)")
    s.add_argument("--stage", choices=("all", "pretrain", "joint", "face"), default="all")
    s.add_argument("--init", help="start from this checkpoint instead of a fresh avatar")
    s.set_defaults(func=cmd_train)

    s = common(sub.add_parser("render", help="render a checkpoint for a pose and camera"), "output PNG")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset")
    s.add_argument("--pose-file", help="poses.txt-style file (default: the dataset's)")
    s.add_argument("--camera-file", help="cameras.txt-style file (default: the dataset's)")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--view", type=int, default=0)
    s.set_defaults(func=cmd_render)

    s = common(sub.add_parser("eval", help="PSNR/SSIM report on dataset views"), "report directory")
    s.add_argument("--checkpoint")
    s.add_argument("--dataset")
    s.add_argument("--views", help="comma list (default: held-out views)")
    s.add_argument("--gt-self", action="store_true", help="score ground truth against itself")
    s.set_defaults(func=cmd_eval)
    return p


def _where(exc: BaseException) -> str:
    tb = traceback.extract_tb(exc.__traceback__)
    if not tb:
        return ""
    fr = tb[-1]
    return f" ({Path(fr.filename).name}:{fr.lineno})"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigError, DatasetError, CheckpointError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}{_where(e)}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}{_where(e)}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
