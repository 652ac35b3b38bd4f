"""Losses, the staged optimization schedule and evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .avatar import Avatar
from .checkpoint import save_checkpoint
from .deformer import POSITION, decode_body_backward, decode_face_backward
from .metrics import PSNR_CAP, capped, psnr, ssim
from .raster import RenderOutput, rasterize, rasterize_backward

log = logging.getLogger(__name__)

# hook(rendered color, target color) -> (scalar, gradient image)
Hook = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


@dataclass
class LossWeights:
    l1: float = 1.0
    perceptual: float = 0.1
    offset: float = 5e-3
    adv: float = 5e-3

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


@dataclass
class TrainSchedule:
    pretrain_steps: int = 500
    joint_steps: int = 5000
    face_steps: int = 500
    lr_decoder: float = 5e-4
    lr_canonical: float = 5e-3
    seed: int = 0

    def __post_init__(self):
        for k in ("pretrain_steps", "joint_steps", "face_steps"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")


@dataclass
class LossResult:
    total: float
    terms: dict
    grad_color: np.ndarray
    grad_alpha: np.ndarray
    grad_offsets: np.ndarray | None


def compute_loss(rendered: RenderOutput, target, mask, offsets=None, weights: LossWeights | None = None,
                 perceptual: Hook | None = None, adversarial: Hook | None = None) -> LossResult:
    """l1 * (masked color L1 + alpha-vs-mask L1) + offset * mean |dpos|^2 + hook terms.

    The color term averages |rendered - target| over the 3 channels of pixels
    inside the mask; the alpha term averages over all pixels.
    """
    w = LossWeights() if weights is None else weights
    color = rendered.color
    target = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if color.shape != target.shape or m.shape != color.shape[:2]:
        raise ValueError(f"render {color.shape}, target {target.shape} and mask {m.shape} do not match")
    n_in = max(int(m.sum()), 1)
    diff = color - target
    l1 = float(np.abs(diff)[m].sum()) / (3 * n_in)
    g_color = np.where(m[..., None], np.sign(diff), 0.0) * (w.l1 / (3 * n_in))
    adiff = rendered.alpha - m
    l_mask = float(np.mean(np.abs(adiff)))
    g_alpha = np.sign(adiff) * (w.l1 / adiff.size)
    terms = {"l1": l1, "mask": l_mask}
    total = w.l1 * (l1 + l_mask)
    g_off = None
    if offsets is not None and len(offsets):
        n = len(offsets)
        terms["offset"] = float(np.sum(offsets ** 2)) / n
        total += w.offset * terms["offset"]
        g_off = (2.0 * w.offset / n) * offsets
    for name, hook, lam in (("perceptual", perceptual, w.perceptual), ("adv", adversarial, w.adv)):
        if hook is not None and lam > 0:
            val, g = hook(color, target)
            terms[name] = float(val)
            total += lam * float(val)
            g_color = g_color + lam * np.asarray(g)
    return LossResult(total, terms, g_color, g_alpha, g_off)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def reset(self) -> None:
        self.m.clear()
        self.v.clear()
        self.t.clear()

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lrs: dict[str, float]) -> None:
        """In-place update of every parameter that has both a gradient and a learning rate."""
        for name in sorted(grads):
            if name not in lrs:
                continue
            p, g = params[name], grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p -= lrs[name] * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    avatar: Avatar
    curve: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)


CURVE_FIELDS = ("step", "stage", "frame", "view", "total", "l1", "mask", "offset", "face_l1", "face_mask",
                "perceptual", "adv", "pretrain")


def _group_lrs(avatar: Avatar, groups: Sequence[str], schedule: TrainSchedule, scale: float):
    table = avatar.param_groups()
    lrs = {}
    for g in groups:
        base = schedule.lr_canonical if g.endswith("canonical") else schedule.lr_decoder
        for name in table[g]:
            lrs[name] = base * scale
    return lrs


def _stage_steps(schedule: TrainSchedule):
    return (("pretrain", schedule.pretrain_steps), ("joint", schedule.joint_steps), ("face", schedule.face_steps))


def _pretrain_step(avatar: Avatar, pose, camera, face_camera):
    state = avatar.forward(pose, camera, face_camera)
    res = state.residuals
    n = len(res)
    loss = float(np.sum(res ** 2)) / n
    nb_ = len(avatar.body)
    grads, _ = decode_body_backward(state.body_cache, avatar.body_decoder, 2.0 * res[:nb_] / n)
    gf, _ = decode_face_backward(state.face_cache, avatar.face_decoders, 2.0 * res[nb_:] / n)
    grads.update(gf)
    return loss, grads


def train(dataset, avatar: Avatar, schedule: TrainSchedule | None = None, weights: LossWeights | None = None,
          out_dir=None, perceptual: Hook | None = None, adversarial: Hook | None = None,
          stages: Sequence[str] = ("pretrain", "joint", "face"), log_every: int = 100) -> TrainResult:
    """Run the pretrain / joint / face-only stages in order, updating ``avatar`` in place.

    Each step samples one (frame, training view) with a generator seeded by
    ``schedule.seed``. The joint stage supervises the full image and the face
    crop (rendered with the crop intrinsics); the face stage only the crop and
    only updates the face decoders.
    """
    schedule = TrainSchedule() if schedule is None else schedule
    weights = LossWeights() if weights is None else weights
    dataset.validate()
    rng = np.random.default_rng(schedule.seed)
    views = list(dataset.train_views)
    result = TrainResult(avatar)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    step = 0
    for stage, n_steps in _stage_steps(schedule):
        if stage not in stages:
            continue
        opt = Adam()
        groups = {"pretrain": ("body_decoder", "face_decoders"),
                  "joint": ("body_canonical", "face_canonical", "body_decoder", "face_decoders"),
                  "face": ("face_decoders",)}[stage]
        params = avatar.params()
        for k in range(n_steps):
            frame = int(rng.integers(dataset.n_frames))
            view = views[int(rng.integers(len(views)))]
            pose = dataset.poses[frame]
            cam = dataset.cameras[view]
            face_cam = dataset.face_camera(frame, view)
            row = dict.fromkeys(CURVE_FIELDS, 0.0)
            row.update(step=step, stage=stage, frame=frame, view=view)
            if stage == "pretrain":
                loss, grads = _pretrain_step(avatar, pose, cam, face_cam)
                row["pretrain"] = loss
                row["total"] = loss
            else:
                state = avatar.forward(pose, cam, face_cam)
                offsets = avatar.offsets(state)
                grad_res = np.zeros_like(state.residuals)
                total = 0.0
                gpos = None
                if stage == "joint":
                    r_full = rasterize(state.posed, cam)
                    lf = compute_loss(r_full, dataset.image(frame, view), dataset.mask(frame, view), offsets,
                                      weights, perceptual=perceptual)
                    gpos = rasterize_backward(state.posed, cam, (0, 0, 0), lf.grad_color, lf.grad_alpha,
                                              forward=r_full)
                    total += lf.total
                    row.update({k2: v for k2, v in lf.terms.items() if k2 in row})
                    if lf.grad_offsets is not None:
                        grad_res[:, POSITION] += lf.grad_offsets
                    face_off = None
                else:
                    face_off = offsets[len(avatar.body):]
                r_face = rasterize(state.posed, face_cam)
                lc = compute_loss(r_face, dataset.face_image(frame, view), dataset.face_mask(frame, view),
                                  face_off, weights, perceptual=perceptual, adversarial=adversarial)
                gface = rasterize_backward(state.posed, face_cam, (0, 0, 0), lc.grad_color, lc.grad_alpha,
                                           forward=r_face)
                gpos = gface if gpos is None else gpos + gface
                if lc.grad_offsets is not None:
                    grad_res[len(avatar.body):, POSITION] += lc.grad_offsets
                    row["offset"] = lc.terms["offset"]
                total += lc.total
                row["face_l1"] = lc.terms["l1"]
                row["face_mask"] = lc.terms["mask"]
                row["perceptual"] += lc.terms.get("perceptual", 0.0)
                row["adv"] = lc.terms.get("adv", 0.0)
                row["total"] = total
                grads = avatar.backward(state, gpos, grad_res)
            lrs = _group_lrs(avatar, groups, schedule, cosine_lr(1.0, k, n_steps))
            opt.step(params, grads, lrs)
            result.curve.append(row)
            if log_every and step % log_every == 0:
                log.info("step %d [%s] loss %.6f", step, stage, row["total"])
            step += 1
        if out is not None:
            path = out / f"{stage}.ckpt"
            save_checkpoint(path, avatar.to_checkpoint(step, {"stage": stage, "seed": schedule.seed}))
            result.checkpoints[stage] = path
    if out is not None:
        write_curve(out / "loss.csv", result.curve)
    return result


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CURVE_FIELDS)
        w.writeheader()
        for row in curve:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    rows: list  # per view: view, frames, psnr, ssim, head_psnr, head_ssim
    aggregate: dict

    def table(self) -> str:
        cols = ("view", "frames", "psnr", "ssim", "head_psnr", "head_ssim")
        lines = ["  ".join(f"{c:>9}" for c in cols)]
        for r in self.rows + [dict(self.aggregate, view="mean")]:
            cells = []
            for c in cols:
                v = r[c]
                cells.append(f"{v:9.4f}" if isinstance(v, float) else f"{str(v):>9}")
            lines.append("  ".join(cells))
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        cols = ("view", "frames", "psnr", "ssim", "head_psnr", "head_ssim")
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow({c: r[c] for c in cols})
            w.writerow({**{c: self.aggregate[c] for c in cols[2:]}, "view": "mean", "frames": self.aggregate["frames"]})


def evaluate_images(pairs) -> MetricsReport:
    """Report from {view: [(full render, full gt, crop render, crop gt), ...]}; PSNR capped per frame."""
    rows = []
    for view, items in pairs.items():
        if not items:
            continue
        ps = [capped(psnr(a, b)) for a, b, _, _ in items]
        ss = [ssim(a, b) for a, b, _, _ in items]
        hp = [capped(psnr(c, d)) for _, _, c, d in items]
        hs = [ssim(c, d) for _, _, c, d in items]
        rows.append({"view": view, "frames": len(items), "psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)),
                     "head_psnr": float(np.mean(hp)), "head_ssim": float(np.mean(hs))})
    if not rows:
        raise ValueError("evaluation needs at least one view")
    agg = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "head_psnr", "head_ssim")}
    agg["frames"] = int(sum(r["frames"] for r in rows))
    return MetricsReport(rows, agg)


def evaluate(avatar: Avatar, dataset, views: Sequence[int], frames: Sequence[int] | None = None) -> MetricsReport:
    """Per-view PSNR/SSIM of full renders and of face-crop renders against the stored crops."""
    views = list(views)
    if not views:
        raise ValueError("evaluation needs at least one view")
    frames = range(dataset.n_frames) if frames is None else frames
    pairs = {}
    for v in views:
        items = []
        for f in frames:
            cam = dataset.cameras[v]
            face_cam = dataset.face_camera(f, v)
            state = avatar.forward(dataset.poses[f], cam, face_cam)
            full = np.clip(rasterize(state.posed, cam).color, 0.0, 1.0)
            crop = np.clip(rasterize(state.posed, face_cam).color, 0.0, 1.0)
            items.append((full, dataset.image(f, v), crop, dataset.face_image(f, v)))
        pairs[v] = items
    return evaluate_images(pairs)


__all__ = ["LossWeights", "TrainSchedule", "LossResult", "compute_loss", "Adam", "cosine_lr", "train",
           "TrainResult", "MetricsReport", "evaluate", "evaluate_images", "write_curve", "PSNR_CAP"]
