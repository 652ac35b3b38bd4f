"""Independent reference implementations and random scene builders for the tests."""
from __future__ import annotations

import numpy as np

from gsavatar.camera import Camera, Projection, look_at
from gsavatar.splat import GaussianSet

LOWPASS = 0.3
CUTOFF = 9.0
T_MIN = 1e-4
NEAR = 0.01
C0 = 0.28209479177387814
C1 = 0.4886025119029199


def random_set(rng, n, degree=1, center=(0.0, 0.0, 0.0), spread=0.4, log_scale=(-3.0, -1.6)):
    k = (degree + 1) ** 2
    return GaussianSet(
        np.asarray(center) + rng.uniform(-spread, spread, (n, 3)),
        rng.uniform(*log_scale, (n, 3)),
        rng.normal(size=(n, 4)),
        rng.normal(0.5, 1.5, n),
        rng.normal(0.0, 0.6, (n, k, 3)),
    )


def random_camera(rng, width, height, mode=Projection.PERSPECTIVE, target=(0.0, 0.0, 0.0)):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    if mode == Projection.PERSPECTIVE:
        f = rng.uniform(0.9, 1.4) * width
        eye = np.asarray(target) + rng.uniform(2.0, 3.0) * d
    else:
        f = width / rng.uniform(1.2, 1.8)
        eye = np.asarray(target) + 5.0 * d
    up = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    cx = width / 2 + rng.uniform(-2, 2)
    cy = height / 2 + rng.uniform(-2, 2)
    return look_at(eye, target, up, f, f * rng.uniform(0.95, 1.05), width, height, cx, cy, mode)


def quat_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def reference_projection(gs: GaussianSet, cam: Camera):
    """Per-Gaussian (mean2d, conic 2x2, depth, color, opacity, visible) by direct formulas."""
    out = []
    for i in range(len(gs)):
        p = cam.rotation @ gs.means[i] + cam.translation
        R = quat_matrix(gs.quats[i])
        S = np.diag(np.exp(gs.log_scales[i]) ** 2)
        cov = R @ S @ R.T
        if p[2] <= NEAR:
            out.append(None)
            continue
        if cam.orthographic:
            J = np.array([[cam.fx, 0, 0], [0, cam.fy, 0]])
            mean2d = np.array([cam.fx * p[0] + cam.cx, cam.fy * p[1] + cam.cy])
            view = cam.rotation[2]
        else:
            x, y, z = p
            J = np.array([[cam.fx / z, 0, -cam.fx * x / z ** 2], [0, cam.fy / z, -cam.fy * y / z ** 2]])
            mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
            center = -cam.rotation.T @ cam.translation
            view = gs.means[i] - center
            view = view / np.linalg.norm(view)
        T = J @ cam.rotation
        cov2 = T @ cov @ T.T + LOWPASS * np.eye(2)
        f = gs.sh[i]
        col = C0 * f[0]
        if f.shape[0] == 4:
            x, y, z = view
            col = col - C1 * y * f[1] + C1 * z * f[2] - C1 * x * f[3]
        op = 1.0 / (1.0 + np.exp(-gs.opacity_logits[i]))
        out.append((mean2d, np.linalg.inv(cov2), p[2], col, op))
    return out


def brute_force_render(gs: GaussianSet, cam: Camera, bg=(0.0, 0.0, 0.0)):
    """Per-pixel front-to-back compositing over a global depth sort, no tiles."""
    proj = reference_projection(gs, cam)
    order = sorted((p[2], i) for i, p in enumerate(proj) if p is not None)
    H, W = cam.height, cam.width
    ys, xs = np.mgrid[0:H, 0:W]
    px = xs + 0.5
    py = ys + 0.5
    color = np.zeros((H, W, 3))
    T = np.ones((H, W))
    done = np.zeros((H, W), bool)
    for _, i in order:
        mean2d, Q, _, col, op = proj[i]
        dx = px - mean2d[0]
        dy = py - mean2d[1]
        m = Q[0, 0] * dx * dx + 2 * Q[0, 1] * dx * dy + Q[1, 1] * dy * dy
        use = (m <= CUTOFF) & ~done
        a = np.where(use, op * np.exp(-0.5 * m), 0.0)
        color += (a * T)[..., None] * col
        T = T * (1.0 - a)
        done |= use & (T < T_MIN)
    color += T[..., None] * np.asarray(bg)
    return color, 1.0 - T


def smooth_margin(gs: GaussianSet, cam: Camera) -> float:
    """Smallest distance of any pixel's Mahalanobis value to the cutoff, or of any
    transmittance to the termination threshold (in log space). FD checks need a margin."""
    proj = reference_projection(gs, cam)
    H, W = cam.height, cam.width
    ys, xs = np.mgrid[0:H, 0:W]
    px, py = xs + 0.5, ys + 0.5
    margin = np.inf
    logT = np.zeros((H, W))
    for _, i in sorted((p[2], i) for i, p in enumerate(proj) if p is not None):
        mean2d, Q, _, _, op = proj[i]
        dx, dy = px - mean2d[0], py - mean2d[1]
        m = Q[0, 0] * dx * dx + 2 * Q[0, 1] * dx * dy + Q[1, 1] * dy * dy
        margin = min(margin, float(np.min(np.abs(m - CUTOFF))))
        a = np.where(m <= CUTOFF, op * np.exp(-0.5 * m), 0.0)
        logT = logT + np.log1p(-a)
    margin = min(margin, float(np.min(np.abs(logT - np.log(T_MIN)))))
    return margin


def central_fd(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def grad_close(analytic, numeric, rel=1e-4, abs_=1e-8):
    """Componentwise: |a - n| <= abs_ or |a - n| <= rel * max(|a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    err = np.abs(a - n)
    ok = (err <= abs_) | (err <= rel * np.maximum(np.abs(a), np.abs(n)))
    return bool(np.all(ok)), float(np.max(err)) if err.size else 0.0
