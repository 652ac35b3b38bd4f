"""Quaternion and axis-angle helpers (w, x, y, z convention), batched over leading axes."""
from __future__ import annotations

import numpy as np

_EPS = 1e-12


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < _EPS):
        raise ValueError("zero quaternion cannot be normalized")
    return q / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (possibly unnormalized) quaternions, shape (..., 3, 3)."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    R = np.empty(w.shape + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient on R(q/|q|) back to the unnormalized quaternion."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    w, x, y, z = np.moveaxis(u, -1, 0)
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    du = np.stack([dw, dx, dy, dz], axis=-1)
    # d(q/|q|) = (I - u u^T) / |q|
    return (du - u * np.sum(du * u, axis=-1, keepdims=True)) / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_left_matrix(a: np.ndarray) -> np.ndarray:
    """Matrix L(a) with a*b == L(a) @ b."""
    w, x, y, z = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([w, -x, -y, -z], -1),
        np.stack([x, w, -z, y], -1),
        np.stack([y, z, w, -x], -1),
        np.stack([z, -y, x, w], -1),
    ], axis=-2)


def quat_right_matrix(b: np.ndarray) -> np.ndarray:
    """Matrix M(b) with a*b == M(b) @ a."""
    w, x, y, z = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([w, -x, -y, -z], -1),
        np.stack([x, w, z, -y], -1),
        np.stack([y, -z, w, x], -1),
        np.stack([z, y, -x, w], -1),
    ], axis=-2)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion with non-negative w for each rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    shape = R.shape[:-2]
    m = R.reshape(-1, 3, 3)
    m00, m11, m22 = m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]
    tr = m00 + m11 + m22
    # four candidate extractions; use the one with the largest pivot for stability
    cand = np.stack([
        np.stack([1 + tr, m[:, 2, 1] - m[:, 1, 2], m[:, 0, 2] - m[:, 2, 0], m[:, 1, 0] - m[:, 0, 1]], -1),
        np.stack([m[:, 2, 1] - m[:, 1, 2], 1 + m00 - m11 - m22, m[:, 0, 1] + m[:, 1, 0], m[:, 0, 2] + m[:, 2, 0]], -1),
        np.stack([m[:, 0, 2] - m[:, 2, 0], m[:, 0, 1] + m[:, 1, 0], 1 + m11 - m00 - m22, m[:, 1, 2] + m[:, 2, 1]], -1),
        np.stack([m[:, 1, 0] - m[:, 0, 1], m[:, 0, 2] + m[:, 2, 0], m[:, 1, 2] + m[:, 2, 1], 1 + m22 - m00 - m11], -1),
    ], axis=1)
    pivots = np.stack([tr, m00, m11, m22], -1)
    best = np.argmax(pivots, axis=-1)
    q = cand[np.arange(m.shape[0]), best]
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q.reshape(shape + (4,))


def quat_exp(v: np.ndarray) -> np.ndarray:
    """Unit quaternion of the rotation vector v (angle |v| about v/|v|)."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    # sin(t/2)/t, Taylor branch near zero
    k = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * v], axis=-1)


def quat_exp_vjp(v: np.ndarray, dq: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    half = 0.5 * theta
    k = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(half) / safe)
    # dk/dtheta / theta, with its series limit -1/24
    dk_over_t = np.where(small, -1.0 / 24.0,
                         (0.5 * np.cos(half) * safe - np.sin(half)) / safe ** 3)
    dw, dxyz = dq[..., :1], dq[..., 1:]
    # w = cos(theta/2): dw/dv = -sin(theta/2)/2 * v/theta = -k/2 * v
    return dw * (-0.5 * k * v) + k * dxyz + dk_over_t * v * np.sum(dxyz * v, axis=-1, keepdims=True)


def axis_angle_to_rotmat(aa: np.ndarray) -> np.ndarray:
    """Rodrigues' formula, batched."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)[..., None, None]
    K = skew(aa)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a * K + b * (K @ K)


def rotmat_to_axis_angle(R: np.ndarray) -> np.ndarray:
    q = rotmat_to_quat(R)
    w = np.clip(q[..., :1], -1.0, 1.0)
    s = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, w)
    safe = np.where(s < 1e-12, 1.0, s)
    return np.where(s < 1e-12, 2.0 * q[..., 1:], q[..., 1:] * angle / safe)


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    x, y, z = np.moveaxis(v, -1, 0)
    o = np.zeros_like(x)
    return np.stack([
        np.stack([o, -z, y], -1),
        np.stack([z, o, -x], -1),
        np.stack([-y, x, o], -1),
    ], axis=-2)


def wrap_axis_angle(aa: np.ndarray) -> np.ndarray:
    """Map rotation vectors to the equivalent one with angle in [0, pi]."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    wrapped = np.mod(theta + np.pi, 2 * np.pi) - np.pi
    safe = np.where(theta < 1e-12, 1.0, theta)
    return np.where(theta > np.pi, aa / safe * wrapped, aa)
