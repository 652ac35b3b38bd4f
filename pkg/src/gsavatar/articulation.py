"""Skeleton kinematics, linear blend skinning of Gaussians, surface binding and template fitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .raster import GaussianGrads
from .rotations import (axis_angle_to_rotmat, quat_exp, quat_exp_vjp, quat_left_matrix,
                        quat_multiply, quat_to_rotmat, quat_to_rotmat_vjp, rotmat_to_quat,
                        wrap_axis_angle)
from .splat import GaussianSet

log = logging.getLogger(__name__)

WEIGHT_TOL = 1e-6


@dataclass(frozen=True)
class Skeleton:
    names: tuple[str, ...]
    parents: np.ndarray
    rest_joints: np.ndarray

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_joints", np.asarray(self.rest_joints, dtype=np.float64).reshape(-1, 3))
        if parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j in range(1, len(parents)):
            if not 0 <= parents[j] < j:
                raise ValueError(f"joint {j} has parent {parents[j]}; parents must precede children")

    def __len__(self) -> int:
        return len(self.parents)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def local_offsets(self, joints: np.ndarray | None = None) -> np.ndarray:
        """Rest-pose translation of each joint relative to its parent."""
        J = self.rest_joints if joints is None else joints
        off = J.copy()
        off[1:] -= J[self.parents[1:]]
        return off


@dataclass
class Pose:
    rotations: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotations = wrap_axis_angle(np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3))
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.rotations)) and np.all(np.isfinite(self.translation))):
            raise ValueError("pose contains non-finite values")

    @classmethod
    def identity(cls, n_joints: int) -> "Pose":
        return cls(np.zeros((n_joints, 3)), np.zeros(3))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotations.ravel()])

    @classmethod
    def from_flat(cls, v) -> "Pose":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[3:].reshape(-1, 3), v[:3])


@dataclass
class SkinnedTemplate:
    """Canonical mesh with linear shape blendshapes and per-vertex skinning weights."""

    skeleton: Skeleton
    vertices: np.ndarray
    faces: np.ndarray
    weights: np.ndarray
    shape_dirs: np.ndarray
    joint_shape_dirs: np.ndarray
    betas: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.betas is None:
            self.betas = np.zeros(self.shape_dirs.shape[-1])
        check_weights(self.weights)

    @property
    def n_joints(self) -> int:
        return len(self.skeleton)

    @property
    def n_shape(self) -> int:
        return self.shape_dirs.shape[-1]

    def shaped_vertices(self, betas=None) -> np.ndarray:
        b = self.betas if betas is None else np.asarray(betas, dtype=np.float64)
        return self.vertices + self.shape_dirs @ b

    def shaped_joints(self, betas=None) -> np.ndarray:
        b = self.betas if betas is None else np.asarray(betas, dtype=np.float64)
        return self.skeleton.rest_joints + self.joint_shape_dirs @ b

    def posed(self, pose: Pose, betas=None) -> tuple[np.ndarray, np.ndarray]:
        """Posed (vertices, joint positions) for shape ``betas``."""
        joints = self.shaped_joints(betas)
        R, t = forward_kinematics(self.skeleton, pose, joints)
        verts = lbs_points(self.shaped_vertices(betas), self.weights, R, t)
        return verts, joint_positions(R, t, joints)


def check_weights(w: np.ndarray) -> None:
    w = np.asarray(w)
    bad = np.flatnonzero((np.abs(w.sum(axis=1) - 1.0) > WEIGHT_TOL) | np.any(w < 0, axis=1))
    if bad.size:
        raise ValueError(f"skinning weight rows not row-stochastic, first offending row {bad[0]}: {w[bad[0]]}")


def forward_kinematics(skeleton: Skeleton, pose: Pose, joints: np.ndarray | None = None):
    """Per-joint skinning transforms x -> R_j x + t_j mapping canonical to posed space.

    Each joint rotates its subtree about its rest position, composed onto the
    parent's transform. The posed joint position is R_j J_j + t_j.
    """
    J = skeleton.rest_joints if joints is None else joints
    n = len(skeleton)
    rots = axis_angle_to_rotmat(pose.rotations)
    R = np.empty((n, 3, 3))
    t = np.empty((n, 3))
    R[0] = rots[0]
    t[0] = (J[0] - rots[0] @ J[0]) + pose.translation
    for j in range(1, n):
        p = skeleton.parents[j]
        tb = J[j] - rots[j] @ J[j]
        R[j] = R[p] @ rots[j]
        t[j] = R[p] @ tb + t[p]
    return R, t


def joint_positions(R: np.ndarray, t: np.ndarray, joints: np.ndarray) -> np.ndarray:
    return np.einsum("jab,jb->ja", R, joints) + t


def lbs_points(points: np.ndarray, weights: np.ndarray, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Classic LBS, written as an offset from the input so the identity pose is exact."""
    eye = np.eye(3)
    dM = np.einsum("nj,jab->nab", weights, R - eye)
    dt = weights @ t
    return points + (np.einsum("nab,nb->na", dM, points) + dt)


def _polar_rotation(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    U[:, :, 2] *= d[:, None]
    return U @ Vt


@dataclass
class SkinState:
    blend: np.ndarray  # (N, 3, 3) blended linear part
    rot: np.ndarray  # (N, 3, 3) re-orthonormalized rotation
    qrot: np.ndarray  # (N, 4)


def skin_gaussians(gs: GaussianSet, weights: np.ndarray, R: np.ndarray, t: np.ndarray,
                   return_state: bool = False):
    """Pose a canonical GaussianSet with per-primitive skinning weights.

    Means follow classic LBS of the blended 3x4 matrix, so a primitive coincides
    with a mesh vertex skinned by the same weights. The covariance and quaternion
    are carried by the polar (closest-rotation) factor of the blended matrix.
    """
    check_weights(weights)
    eye = np.eye(3)
    dM = np.einsum("nj,jab->nab", weights, R - eye)
    means = gs.means + (np.einsum("nab,nb->na", dM, gs.means) + weights @ t)
    blend = dM + eye
    if not np.any(dM):
        rot = np.broadcast_to(eye, blend.shape).copy()
        q = np.zeros((len(gs), 4))
        q[:, 0] = 1.0
        quats = gs.quats.copy()
    else:
        rot = _polar_rotation(blend)
        q = rotmat_to_quat(rot)
        quats = quat_multiply(q, gs.quats)
    out = GaussianSet(means, gs.log_scales.copy(), quats, gs.opacity_logits.copy(), gs.sh.copy(), gs.tags.copy())
    if return_state:
        return out, SkinState(blend, rot, q)
    return out


def skin_backward(grads: GaussianGrads, state: SkinState) -> GaussianGrads:
    """Pull posed-attribute gradients back to canonical attributes (pose held fixed)."""
    g_means = np.einsum("nab,na->nb", state.blend, grads.means)
    g_quats = np.einsum("nab,na->nb", quat_left_matrix(state.qrot), grads.quats)
    return GaussianGrads(g_means, grads.log_scales.copy(), g_quats, grads.opacity_logits.copy(), grads.sh.copy())


# ---------------------------------------------------------------------------
# surface binding


@nb.njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    # Ericson, Real-Time Collision Detection, 5.1.5; returns barycentrics (u, v, w) of a, b, c
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@nb.njit(cache=True)
def _nearest_triangles(points, verts, faces):
    n = points.shape[0]
    tri = np.empty(n, np.int64)
    bary = np.empty((n, 3))
    for i in range(n):
        p = points[i]
        best = np.inf
        for f in range(faces.shape[0]):
            a = verts[faces[f, 0]]
            b = verts[faces[f, 1]]
            c = verts[faces[f, 2]]
            u, v, w = _closest_on_triangle(p, a, b, c)
            q = u * a + v * b + w * c
            d = p - q
            d2 = d @ d
            if d2 < best:
                best = d2
                tri[i] = f
                bary[i, 0] = u
                bary[i, 1] = v
                bary[i, 2] = w
    return tri, bary


def nearest_surface_points(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray):
    """Index of the nearest triangle (lowest index on ties) and barycentrics of the closest point."""
    return _nearest_triangles(np.ascontiguousarray(points, dtype=np.float64),
                              np.ascontiguousarray(vertices, dtype=np.float64),
                              np.ascontiguousarray(faces, dtype=np.int64))


def bind_gaussians_to_surface(points_or_set, template: SkinnedTemplate) -> np.ndarray:
    """Skinning weights from the barycentric point of the nearest canonical triangle."""
    pts = points_or_set.means if isinstance(points_or_set, GaussianSet) else points_or_set
    tri, bary = nearest_surface_points(pts, template.shaped_vertices(), template.faces)
    corners = template.faces[tri]
    w = np.einsum("nk,nkj->nj", bary, template.weights[corners])
    return w / w.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# template fitting


@dataclass
class FitResult:
    betas: np.ndarray
    pose: Pose
    objective: float
    vertex_rms: float
    joint_rms: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def _fit_objective(template: SkinnedTemplate, x: np.ndarray, vt, jt, lam: float, with_grad: bool):
    S = template.n_shape
    nj = template.n_joints
    betas = x[:S]
    trans = x[S:S + 3]
    aa = x[S + 3:].reshape(nj, 3)
    sk = template.skeleton
    J = template.shaped_joints(betas)
    V = template.shaped_vertices(betas)
    quats = quat_exp(aa)
    rots = quat_to_rotmat(quats)
    R = np.empty((nj, 3, 3))
    t = np.empty((nj, 3))
    tb = J - np.einsum("jab,jb->ja", rots, J)
    R[0] = rots[0]
    t[0] = tb[0] + trans
    for j in range(1, nj):
        p = sk.parents[j]
        R[j] = R[p] @ rots[j]
        t[j] = R[p] @ tb[j] + t[p]
    W = template.weights
    M = (W @ R.reshape(nj, 9)).reshape(-1, 3, 3)
    vp = np.einsum("nab,nb->na", M, V) + W @ t
    jp = np.einsum("jab,jb->ja", R, J) + t
    rv = vp - vt
    rj = jp - jt
    f = float(np.sum(rv * rv) + lam * np.sum(rj * rj))
    if not with_grad:
        return f, None, vp, jp
    gv = 2.0 * rv
    gjp = 2.0 * lam * rj
    # vp = M V + W t
    gR = (W.T @ (gv[:, :, None] * V[:, None, :]).reshape(-1, 9)).reshape(nj, 3, 3)
    gt = W.T @ gv
    gV = np.einsum("nab,na->nb", M, gv)
    # jp = R J + t
    gR += np.einsum("ja,jb->jab", gjp, J)
    gt += gjp
    gJ = np.einsum("jab,ja->jb", R, gjp)
    g_rots = np.zeros((nj, 3, 3))
    g_tb = np.zeros((nj, 3))
    for j in range(nj - 1, 0, -1):
        p = sk.parents[j]
        # R_j = R_p rots_j ; t_j = R_p tb_j + t_p
        gR[p] += gR[j] @ rots[j].T + np.outer(gt[j], tb[j])
        g_rots[j] += R[p].T @ gR[j]
        g_tb[j] += R[p].T @ gt[j]
        gt[p] += gt[j]
    g_rots[0] += gR[0]
    g_tb[0] += gt[0]
    g_trans = gt[0].copy()
    # tb = J - rots J
    gJ += g_tb - np.einsum("jab,ja->jb", rots, g_tb)
    g_rots -= np.einsum("ja,jb->jab", g_tb, J)
    g_aa = quat_exp_vjp(aa, quat_to_rotmat_vjp(quats, g_rots))
    g_betas = np.einsum("jas,ja->s", template.joint_shape_dirs, gJ) + np.einsum("nas,na->s", template.shape_dirs, gV)
    grad = np.concatenate([g_betas, g_trans, g_aa.ravel()])
    return f, grad, vp, jp


def fit_template(template: SkinnedTemplate, target_vertices, target_joints, lam: float = 1.0,
                 tol: float = 1e-9, max_iter: int = 5000, init: np.ndarray | None = None,
                 preconditioner: str = "gauss_newton") -> FitResult:
    """Fit shape and pose so the posed template matches target vertices and joints.

    Minimizes ||V - V*||^2 + lam ||J - J*||^2 (squared L2) by preconditioned
    gradient descent with an Armijo backtracking line search, stopping when the
    relative decrease of an accepted step falls below ``tol``.

    ``preconditioner`` is ``"gauss_newton"`` (J^T J of the residual, refreshed
    every iteration) or ``"diagonal"`` (inverse squared column norms of the
    residual Jacobian at the start point, fixed). The gradient itself is always
    the exact reverse-mode gradient.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if preconditioner not in ("gauss_newton", "diagonal"):
        raise ValueError(f"unknown preconditioner {preconditioner!r}")
    vt = np.asarray(target_vertices, dtype=np.float64)
    jt = np.asarray(target_joints, dtype=np.float64)
    if vt.shape != template.vertices.shape or jt.shape != template.skeleton.rest_joints.shape:
        raise ValueError(f"target shapes {vt.shape}, {jt.shape} do not match template "
                         f"{template.vertices.shape}, {template.skeleton.rest_joints.shape}")
    S, nj = template.n_shape, template.n_joints
    dim = S + 3 + 3 * nj
    x = np.zeros(dim) if init is None else np.asarray(init, dtype=np.float64).copy()
    if preconditioner == "diagonal":
        cols = np.linalg.norm(_residual_jacobian(template, x, lam), axis=0)
        D2 = 1.0 / np.maximum(cols, 1e-8) ** 2
    f, g, _, _ = _fit_objective(template, x, vt, jt, lam, True)
    history = [f]
    step = 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if f == 0.0:
            converged = True
            break
        if preconditioner == "diagonal":
            d = -D2 * g
        else:
            Jr = _residual_jacobian(template, x, lam)
            H = 2.0 * Jr.T @ Jr
            H[np.diag_indices_from(H)] += 1e-9 * np.max(np.diag(H))
            d = -np.linalg.solve(H, g)
            step = 1.0
        slope = g @ d
        if slope >= 0 or not np.isfinite(slope):
            converged = True
            break
        accepted = False
        while step > 1e-20:
            xn = _wrap_params(x + step * d, S)
            fn, _, _, _ = _fit_objective(template, xn, vt, jt, lam, False)
            if fn <= f + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        rel = (f - fn) / f
        x = xn
        f, g, _, _ = _fit_objective(template, x, vt, jt, lam, True)
        history.append(f)
        step = min(2.0 * step, 1.0) if preconditioner == "gauss_newton" else 2.0 * step
        if rel < tol:
            converged = True
            break
    _, _, vp, jp = _fit_objective(template, x, vt, jt, lam, False)
    if not converged:
        log.warning("fit_template stopped after %d iterations, objective %.3e", it, f)
    return FitResult(
        betas=x[:S].copy(),
        pose=Pose(x[S + 3:].reshape(nj, 3), x[S:S + 3]),
        objective=f,
        vertex_rms=float(np.sqrt(np.mean(np.sum((vp - vt) ** 2, axis=1)))),
        joint_rms=float(np.sqrt(np.mean(np.sum((jp - jt) ** 2, axis=1)))),
        iterations=it,
        converged=converged,
        history=history,
    )


def _wrap_params(x: np.ndarray, S: int) -> np.ndarray:
    x = x.copy()
    x[S + 3:] = wrap_axis_angle(x[S + 3:].reshape(-1, 3)).ravel()
    return x


def _residual_jacobian(template: SkinnedTemplate, x: np.ndarray, lam: float) -> np.ndarray:
    """Central-difference Jacobian of the stacked residual [V, sqrt(lam) J]."""
    h = 1e-6
    zeros_v = np.zeros_like(template.vertices)
    zeros_j = np.zeros_like(template.skeleton.rest_joints)
    sl = np.sqrt(lam)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        _, _, vp1, jp1 = _fit_objective(template, x + e, zeros_v, zeros_j, lam, False)
        _, _, vp0, jp0 = _fit_objective(template, x - e, zeros_v, zeros_j, lam, False)
        cols.append(np.concatenate([(vp1 - vp0).ravel(), sl * (jp1 - jp0).ravel()]) / (2 * h))
    return np.stack(cols, axis=1)
