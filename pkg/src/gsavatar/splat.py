"""Gaussian primitives: storage, covariance, density and view-dependent color."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from enum import IntEnum

import numpy as np

from .rotations import quat_normalize, quat_to_rotmat

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

# |cov| below this (m^6) is treated as singular
COV_DET_EPS = 1e-18


class SourceTag(IntEnum):
    BODY = 0
    FACE = 1


def sh_dim(degree: int) -> int:
    if degree not in (0, 1):
        raise ValueError(f"unsupported SH degree {degree}; expected 0 or 1")
    return (degree + 1) ** 2


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class GaussianPrimitive:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color_coeffs: np.ndarray
    tag: SourceTag = SourceTag.BODY


@dataclass
class GaussianSet:
    """Dense arrays of Gaussian attributes in pre-activation form.

    ``log_scales`` go through ``exp`` and ``opacity_logits`` through the logistic
    function; ``sh`` has shape (N, K, 3) with K = (degree + 1)**2.
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    tags: np.ndarray = field(default=None)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        self.sh = sh.reshape(n, -1, 3) if n else sh.reshape(0, sh.shape[1] if sh.ndim == 3 else 1, 3)
        if self.tags is None:
            self.tags = np.zeros(n, dtype=np.int8)
        self.tags = np.asarray(self.tags, dtype=np.int8).reshape(n)

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mean=self.means[i].copy(),
            scale=np.exp(self.log_scales[i]),
            rotation=quat_normalize(self.quats[i]),
            opacity=float(sigmoid(self.opacity_logits[i])),
            color_coeffs=self.sh[i].copy(),
            tag=SourceTag(int(self.tags[i])),
        )

    @property
    def degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.scales, self.quats)

    def copy(self) -> "GaussianSet":
        return GaussianSet(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def with_(self, **kw) -> "GaussianSet":
        return replace(self, **kw)

    @classmethod
    def empty(cls, degree: int = 1) -> "GaussianSet":
        k = sh_dim(degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, k, 3)))

    @classmethod
    def concat(cls, sets) -> "GaussianSet":
        sets = list(sets)
        return cls(**{f.name: np.concatenate([getattr(s, f.name) for s in sets]) for f in fields(cls)})

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def build_covariance(scale, rotation) -> np.ndarray:
    """R(q) diag(s^2) R(q)^T for activated scales; batched over leading axes."""
    s = np.asarray(scale, dtype=np.float64)
    R = quat_to_rotmat(rotation)
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


class SingularCovarianceError(ValueError):
    pass


def eval_density(point, mean, cov, eps: float = COV_DET_EPS) -> float:
    cov = np.asarray(cov, dtype=np.float64)
    det = np.linalg.det(cov)
    if det < eps:
        raise SingularCovarianceError(f"covariance determinant {det:.3e} below {eps:.1e}")
    d = np.asarray(point, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    d2 = d @ np.linalg.solve(cov, d)
    return float(np.exp(-0.5 * d2) / np.sqrt((2 * np.pi) ** 3 * det))


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, shape (..., K)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    k = sh_dim(degree)
    out = np.empty(dirs.shape[:-1] + (k,))
    out[..., 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    return out


def eval_color(color_coeffs, view_direction, degree: int) -> np.ndarray:
    """RGB from SH coefficients of shape (K, 3) or flat 3K."""
    coeffs = np.asarray(color_coeffs, dtype=np.float64)
    k = sh_dim(degree)
    if coeffs.size != 3 * k:
        raise ValueError(f"expected {3 * k} color coefficients for degree {degree}, got {coeffs.size}")
    coeffs = coeffs.reshape(k, 3)
    return sh_basis(view_direction, degree) @ coeffs


def rgb_to_sh0(rgb) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) / SH_C0
