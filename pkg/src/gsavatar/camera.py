from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

NEAR_PLANE = 0.01


class Projection(str, Enum):
    PERSPECTIVE = "perspective"
    ORTHOGRAPHIC = "orthographic"


@dataclass(frozen=True)
class Camera:
    """Pinhole or orthographic camera.

    ``rotation``/``translation`` map world to camera coordinates
    (x_cam = R x_world + t). Image coordinates are continuous with pixel (col, row)
    centered at (col + 0.5, row + 0.5). For orthographic cameras fx, fy are pixels
    per meter.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    mode: Projection = Projection.PERSPECTIVE

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "mode", Projection(self.mode))
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-8, rtol=0):
            raise ValueError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def orthographic(self) -> bool:
        return self.mode is Projection.ORTHOGRAPHIC

    def with_intrinsics(self, fx, fy, cx, cy, width=None, height=None) -> "Camera":
        return replace(self, fx=float(fx), fy=float(fy), cx=float(cx), cy=float(cy),
                       width=int(width or self.width), height=int(height or self.height))

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project_camera(self, pc: np.ndarray) -> np.ndarray:
        pc = np.asarray(pc, dtype=np.float64)
        x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
        if self.orthographic:
            return np.stack([self.fx * x + self.cx, self.fy * y + self.cy], axis=-1)
        return np.stack([self.fx * x / z + self.cx, self.fy * y / z + self.cy], axis=-1)

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points to continuous pixel coordinates."""
        return self.project_camera(self.to_camera(points))

    def projection_jacobian(self, pc: np.ndarray) -> np.ndarray:
        """d(pixel)/d(camera-space point), shape (..., 2, 3)."""
        pc = np.asarray(pc, dtype=np.float64)
        J = np.zeros(pc.shape[:-1] + (2, 3))
        if self.orthographic:
            J[..., 0, 0] = self.fx
            J[..., 1, 1] = self.fy
            return J
        x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
        J[..., 0, 0] = self.fx / z
        J[..., 0, 2] = -self.fx * x / (z * z)
        J[..., 1, 1] = self.fy / z
        J[..., 1, 2] = -self.fy * y / (z * z)
        return J

    def view_dirs(self, points: np.ndarray) -> np.ndarray:
        """Unit viewing directions (camera to point) in world space."""
        if self.orthographic:
            d = np.broadcast_to(self.rotation[2], np.shape(points)).copy()
            return d
        d = np.asarray(points, dtype=np.float64) - self.center
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def look_at(eye, target, up, fx, fy, width, height, cx=None, cy=None,
            mode=Projection.PERSPECTIVE) -> Camera:
    """Camera at ``eye`` looking at ``target``; image y points along -up."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    t = -R @ eye
    return Camera(fx, fy, width / 2.0 if cx is None else cx, height / 2.0 if cy is None else cy,
                  R, t, width, height, mode)
