"""Tiled differentiable Gaussian rasterizer (CPU).

The forward pass composites depth-sorted splats front to back per 16x16 tile.
The backward pass replays each pixel's compositing, walks contributors in
reverse, and writes per-(tile, contributor) partial gradients that are summed in
a fixed order, so results do not depend on the thread count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .camera import NEAR_PLANE, Camera
from .rotations import quat_to_rotmat, quat_to_rotmat_vjp
from .splat import SH_C1, GaussianSet, sh_basis, sigmoid

TILE = 16
LOWPASS = 0.3
MAHA_CUTOFF = 9.0
T_MIN = 1e-4


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities plus what the backward pass needs."""

    visible: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # (N, 3): inverse cov2d entries (a, b, c)
    depth: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    pc: np.ndarray
    J: np.ndarray
    rot: np.ndarray
    scales: np.ndarray
    cov3d: np.ndarray
    dirs: np.ndarray
    basis: np.ndarray
    dist: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    n_contrib: np.ndarray
    proj: Projection | None = None
    tiles: tuple | None = None


@dataclass
class GaussianGrads:
    """Gradients w.r.t. the pre-activation attributes of a GaussianSet."""

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    @classmethod
    def zeros_like(cls, gs: GaussianSet) -> "GaussianGrads":
        return cls(np.zeros_like(gs.means), np.zeros_like(gs.log_scales), np.zeros_like(gs.quats),
                   np.zeros_like(gs.opacity_logits), np.zeros_like(gs.sh))

    def __add__(self, other: "GaussianGrads") -> "GaussianGrads":
        return GaussianGrads(self.means + other.means, self.log_scales + other.log_scales,
                             self.quats + other.quats, self.opacity_logits + other.opacity_logits,
                             self.sh + other.sh)

    def subset(self, idx) -> "GaussianGrads":
        return GaussianGrads(self.means[idx], self.log_scales[idx], self.quats[idx],
                             self.opacity_logits[idx], self.sh[idx])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in (self.means, self.log_scales, self.quats,
                                                   self.opacity_logits, self.sh)])


def project(gs: GaussianSet, camera: Camera) -> Projection:
    n = len(gs)
    W = camera.rotation
    pc = camera.to_camera(gs.means)
    depth = pc[:, 2].copy()
    visible = depth > NEAR_PLANE
    # keep the math finite for culled entries; they never reach the tiles
    safe_pc = pc.copy()
    safe_pc[~visible, 2] = 1.0
    J = camera.projection_jacobian(safe_pc)
    T = J @ W
    rot = quat_to_rotmat(gs.quats)
    scales = gs.scales
    M = rot * scales[:, None, :]
    cov3d = M @ np.swapaxes(M, 1, 2)
    # J Sigma J^T: the upper-left 2x2 block of the full 3x3 screen-space covariance
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    mean2d = camera.project_camera(safe_pc)
    if camera.orthographic:
        dirs = np.broadcast_to(W[2], (n, 3)).copy()
        dist = np.ones(n)
    else:
        v = gs.means - camera.center
        dist = np.linalg.norm(v, axis=1)
        dirs = v / np.where(dist > 0, dist, 1.0)[:, None]
    basis = sh_basis(dirs, gs.degree)
    color = np.einsum("nk,nkc->nc", basis, gs.sh)
    return Projection(visible, mean2d, cov2d, conic, depth, color, gs.opacities, pc, J, rot,
                      scales, cov3d, dirs, basis, dist)


def project_gaussian(gs: GaussianSet, index: int, camera: Camera) -> ProjectedGaussian | None:
    """Screen-space footprint of one primitive, or None when it is culled."""
    p = project(gs.subset([index]), camera)
    if not p.visible[0]:
        return None
    return ProjectedGaussian(p.mean2d[0], p.cov2d[0], float(p.depth[0]), p.color[0], float(p.opacity[0]))


@nb.njit(cache=True)
def _bin_tiles(order, mean2d, cov2d, n_tx, n_ty):
    n = order.shape[0]
    lo_x = np.empty(n, np.int64)
    hi_x = np.empty(n, np.int64)
    lo_y = np.empty(n, np.int64)
    hi_y = np.empty(n, np.int64)
    counts = np.zeros(n_tx * n_ty + 1, np.int64)
    for k in range(n):
        g = order[k]
        rx = 3.0 * np.sqrt(cov2d[g, 0, 0])
        ry = 3.0 * np.sqrt(cov2d[g, 1, 1])
        # pixel centers sit at index + 0.5
        x0 = int(np.floor((mean2d[g, 0] - rx - 0.5) / TILE))
        x1 = int(np.floor((mean2d[g, 0] + rx - 0.5) / TILE))
        y0 = int(np.floor((mean2d[g, 1] - ry - 0.5) / TILE))
        y1 = int(np.floor((mean2d[g, 1] + ry - 0.5) / TILE))
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        x1 = min(x1, n_tx - 1)
        y1 = min(y1, n_ty - 1)
        lo_x[k] = x0
        hi_x[k] = x1
        lo_y[k] = y0
        hi_y[k] = y1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * n_tx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], np.int64)
    for k in range(n):
        for ty in range(lo_y[k], hi_y[k] + 1):
            for tx in range(lo_x[k], hi_x[k] + 1):
                t = ty * n_tx + tx
                ids[fill[t]] = order[k]
                fill[t] += 1
    return offsets, ids


@nb.njit(parallel=True, cache=True)
def _forward_kernel(offsets, ids, mean2d, conic, color, opacity, bg, width, height, n_tx):
    out = np.empty((height, width, 3))
    alpha_img = np.empty((height, width))
    count = np.zeros((height, width), np.int64)
    n_tiles = offsets.shape[0] - 1
    for t in nb.prange(n_tiles):
        ty = t // n_tx
        tx = t - ty * n_tx
        start = offsets[t]
        end = offsets[t + 1]
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                nc = 0
                for k in range(start, end):
                    g = ids[k]
                    dx = fx - mean2d[g, 0]
                    dy = fy - mean2d[g, 1]
                    m = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if m > MAHA_CUTOFF:
                        continue
                    a = opacity[g] * np.exp(-0.5 * m)
                    w = a * T
                    c0 += w * color[g, 0]
                    c1 += w * color[g, 1]
                    c2 += w * color[g, 2]
                    T *= 1.0 - a
                    nc += 1
                    if T < T_MIN:
                        break
                out[py, px, 0] = c0 + T * bg[0]
                out[py, px, 1] = c1 + T * bg[1]
                out[py, px, 2] = c2 + T * bg[2]
                alpha_img[py, px] = 1.0 - T
                count[py, px] = nc
    return out, alpha_img, count


@nb.njit(parallel=True, cache=True)
def _backward_kernel(offsets, ids, mean2d, conic, color, opacity, bg, width, height, n_tx,
                     grad_color, grad_alpha):
    # per list entry: d mean2d (2), d conic (3), d opacity, d color (3)
    partial = np.zeros((ids.shape[0], 9))
    n_tiles = offsets.shape[0] - 1
    for t in nb.prange(n_tiles):
        ty = t // n_tx
        tx = t - ty * n_tx
        start = offsets[t]
        end = offsets[t + 1]
        n_list = end - start
        kbuf = np.empty(n_list, np.int64)
        abuf = np.empty(n_list)
        tbuf = np.empty(n_list)
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                fx = px + 0.5
                fy = py + 0.5
                T = 1.0
                n = 0
                for k in range(start, end):
                    g = ids[k]
                    dx = fx - mean2d[g, 0]
                    dy = fy - mean2d[g, 1]
                    m = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if m > MAHA_CUTOFF:
                        continue
                    a = opacity[g] * np.exp(-0.5 * m)
                    kbuf[n] = k
                    abuf[n] = a
                    tbuf[n] = T
                    n += 1
                    T *= 1.0 - a
                    if T < T_MIN:
                        break
                g0 = grad_color[py, px, 0]
                g1 = grad_color[py, px, 1]
                g2 = grad_color[py, px, 2]
                ga = grad_alpha[py, px]
                # color of everything behind the current contributor, normalized
                acc0 = bg[0]
                acc1 = bg[1]
                acc2 = bg[2]
                P = 1.0
                for j in range(n - 1, -1, -1):
                    k = kbuf[j]
                    g = ids[k]
                    a = abuf[j]
                    Ti = tbuf[j]
                    w = a * Ti
                    partial[k, 6] += w * g0
                    partial[k, 7] += w * g1
                    partial[k, 8] += w * g2
                    col0 = color[g, 0]
                    col1 = color[g, 1]
                    col2 = color[g, 2]
                    da = Ti * ((col0 - acc0) * g0 + (col1 - acc1) * g1 + (col2 - acc2) * g2) + ga * Ti * P
                    acc0 = a * col0 + (1.0 - a) * acc0
                    acc1 = a * col1 + (1.0 - a) * acc1
                    acc2 = a * col2 + (1.0 - a) * acc2
                    P *= 1.0 - a
                    dx = fx - mean2d[g, 0]
                    dy = fy - mean2d[g, 1]
                    m = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    partial[k, 5] += da * np.exp(-0.5 * m)
                    dm = -0.5 * a * da
                    partial[k, 0] += dm * -2.0 * (conic[g, 0] * dx + conic[g, 1] * dy)
                    partial[k, 1] += dm * -2.0 * (conic[g, 1] * dx + conic[g, 2] * dy)
                    partial[k, 2] += dm * dx * dx
                    partial[k, 3] += dm * 2.0 * dx * dy
                    partial[k, 4] += dm * dy * dy
    return partial


@nb.njit(cache=True)
def _reduce_partials(ids, partial, n):
    out = np.zeros((n, 9))
    for k in range(ids.shape[0]):
        g = ids[k]
        for c in range(9):
            out[g, c] += partial[k, c]
    return out


def _tiles(proj: Projection, camera: Camera):
    n_tx = (camera.width + TILE - 1) // TILE
    n_ty = (camera.height + TILE - 1) // TILE
    vis = np.flatnonzero(proj.visible)
    # depth order, ties by primitive index
    order = vis[np.lexsort((vis, proj.depth[vis]))].astype(np.int64)
    offsets, ids = _bin_tiles(order, proj.mean2d, proj.cov2d, n_tx, n_ty)
    return n_tx, offsets, ids


def rasterize(gs: GaussianSet, camera: Camera, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if len(gs) == 0:
        color = np.broadcast_to(bg, (camera.height, camera.width, 3)).copy()
        return RenderOutput(color, np.zeros((camera.height, camera.width)),
                            np.zeros((camera.height, camera.width), np.int64))
    proj = project(gs, camera)
    n_tx, offsets, ids = _tiles(proj, camera)
    color, alpha, count = _forward_kernel(offsets, ids, proj.mean2d, proj.conic, proj.color,
                                          proj.opacity, bg, camera.width, camera.height, n_tx)
    return RenderOutput(color, alpha, count, proj, (n_tx, offsets, ids))


def rasterize_backward(gs: GaussianSet, camera: Camera, background, grad_color_image,
                       grad_alpha_image=None, forward: RenderOutput | None = None) -> GaussianGrads:
    """Gradient of <grad_color, color> + <grad_alpha, alpha> w.r.t. pre-activation attributes.

    ``forward`` may be the RenderOutput of the same (gs, camera) to skip re-projection.
    """
    grads = GaussianGrads.zeros_like(gs)
    if len(gs) == 0:
        return grads
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    gc = np.ascontiguousarray(grad_color_image, dtype=np.float64).reshape(camera.height, camera.width, 3)
    if grad_alpha_image is None:
        ga = np.zeros((camera.height, camera.width))
    else:
        ga = np.ascontiguousarray(grad_alpha_image, dtype=np.float64).reshape(camera.height, camera.width)
    if forward is not None and forward.proj is not None:
        proj = forward.proj
        n_tx, offsets, ids = forward.tiles
    else:
        proj = project(gs, camera)
        n_tx, offsets, ids = _tiles(proj, camera)
    partial = _backward_kernel(offsets, ids, proj.mean2d, proj.conic, proj.color, proj.opacity, bg,
                               camera.width, camera.height, n_tx, gc, ga)
    red = _reduce_partials(ids, partial, len(gs))
    vis = proj.visible
    red[~vis] = 0.0
    return _chain_to_attributes(gs, camera, proj, red)


def _chain_to_attributes(gs: GaussianSet, camera: Camera, proj: Projection, red: np.ndarray) -> GaussianGrads:
    g_mean2d = red[:, 0:2]
    ga, gb, gc_ = red[:, 2], red[:, 3], red[:, 4]
    g_op = red[:, 5]
    g_color = red[:, 6:9]

    # conic -> cov2d: G_cov = -Q G_Q Q with G_Q the symmetric gradient on the conic
    a, b, c = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    Q = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    GQ = np.stack([np.stack([ga, 0.5 * gb], -1), np.stack([0.5 * gb, gc_], -1)], -2)
    G2 = -Q @ GQ @ Q

    W = camera.rotation
    J = proj.J
    T = J @ W
    GT = 2.0 * G2 @ T @ proj.cov3d
    G3 = np.swapaxes(T, 1, 2) @ G2 @ T
    GJ = GT @ W.T

    g_pc = np.einsum("nij,ni->nj", J, g_mean2d)
    if not camera.orthographic:
        x, y, z = proj.pc[:, 0], proj.pc[:, 1], np.where(proj.visible, proj.pc[:, 2], 1.0)
        fx, fy = camera.fx, camera.fy
        z2 = z * z
        z3 = z2 * z
        g_pc[:, 0] += GJ[:, 0, 2] * (-fx / z2)
        g_pc[:, 1] += GJ[:, 1, 2] * (-fy / z2)
        g_pc[:, 2] += (GJ[:, 0, 0] * (-fx / z2) + GJ[:, 0, 2] * (2 * fx * x / z3)
                       + GJ[:, 1, 1] * (-fy / z2) + GJ[:, 1, 2] * (2 * fy * y / z3))
    g_means = g_pc @ W

    # cov3d = M M^T, M = R diag(s)
    M = proj.rot * proj.scales[:, None, :]
    GM = 2.0 * G3 @ M
    g_s = np.sum(GM * proj.rot, axis=1)
    g_log_s = g_s * proj.scales
    GR = GM * proj.scales[:, None, :]
    g_q = quat_to_rotmat_vjp(gs.quats, GR)

    g_sh = proj.basis[:, :, None] * g_color[:, None, :]
    if gs.degree >= 1 and not camera.orthographic:
        f = gs.sh
        gd = np.stack([
            -SH_C1 * np.sum(f[:, 3] * g_color, axis=1),
            -SH_C1 * np.sum(f[:, 1] * g_color, axis=1),
            SH_C1 * np.sum(f[:, 2] * g_color, axis=1),
        ], axis=1)
        d = proj.dirs
        g_v = (gd - d * np.sum(d * gd, axis=1, keepdims=True)) / proj.dist[:, None]
        g_means = g_means + g_v

    op = proj.opacity
    g_logit = g_op * op * (1.0 - op)
    vis = proj.visible[:, None]
    return GaussianGrads(
        np.where(vis, g_means, 0.0),
        np.where(vis, g_log_s, 0.0),
        np.where(vis, g_q, 0.0),
        np.where(proj.visible, g_logit, 0.0),
        np.where(vis[:, :, None], g_sh, 0.0),
    )


def image_to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


__all__ = [
    "GaussianGrads", "ProjectedGaussian", "Projection", "RenderOutput", "project", "project_gaussian",
    "rasterize", "rasterize_backward", "sigmoid", "image_to_uint8",
]
