"""Procedural capsule humanoid used in place of a scanned body model.

Canonical frame: z up, the puppet faces +y, A-pose with arms 45 degrees down.
Shape parameters (linear blendshapes, one unit = 10 % change):
0 overall height, 1 arm length, 2 leg length, 3 limb and torso girth.
"""
from __future__ import annotations

import numpy as np

from .articulation import Skeleton, SkinnedTemplate

JOINT_NAMES = (
    "root", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "r_shoulder", "r_elbow",
    "l_hip", "l_knee", "r_hip", "r_knee",
)
PARENTS = (-1, 0, 1, 2, 1, 4, 1, 6, 0, 8, 0, 10)
N_SHAPE = 4

_ARM_DIR = np.array([np.sqrt(0.5), 0.0, -np.sqrt(0.5)])
# max weight handed to the parent joint at the proximal end of a segment
_PARENT_BLEND = 0.4
_BLEND_SPAN = 0.3


def _joints(betas: np.ndarray) -> np.ndarray:
    h, arm, leg, _ = 0.1 * betas
    hip_z = 0.90 + 0.9 * h + 0.4 * leg
    J = np.zeros((12, 3))
    J[0] = [0, 0, 0.95 + 0.95 * h + 0.4 * leg]
    J[1] = [0, 0, 1.25 + 1.25 * h + 0.4 * leg]
    J[2] = [0, 0, 1.50 + 1.50 * h + 0.4 * leg]
    J[3] = [0, 0, 1.69 + 1.69 * h + 0.4 * leg]
    for side, s in ((4, 1.0), (6, -1.0)):
        sh = np.array([s * 0.18, 0, 1.45 + 1.45 * h + 0.4 * leg])
        J[side] = sh
        J[side + 1] = sh + 0.28 * (1 + h + arm) * _ARM_DIR * [s, 1, 1]
    for side, s in ((8, 1.0), (10, -1.0)):
        J[side] = [s * 0.10, 0, hip_z]
        J[side + 1] = [s * 0.10, 0, hip_z - 0.40 * (1 + h + leg)]
    return J


def _segments(betas: np.ndarray):
    """(start, end, radius, owner joint, parent joint or -1) per capsule."""
    h, arm, leg, girth = 0.1 * betas
    J = _joints(betas)
    g = 1 + girth
    z = lambda v: v * (1 + h) + 0.4 * leg  # noqa: E731
    segs = [
        ([0, 0, z(0.88)], [0, 0, z(1.10)], 0.14 * g, 0, -1),
        ([0, 0, z(1.16)], [0, 0, z(1.40)], 0.15 * g, 1, 0),
        ([0, 0, z(1.46)], [0, 0, z(1.60)], 0.05 * g, 2, 1),
        ([0, 0, z(1.65)], [0, 0, z(1.73)], 0.10 * g, 3, 2),
    ]
    for sh, s in ((4, 1.0), (6, -1.0)):
        d = _ARM_DIR * [s, 1, 1]
        segs.append((J[sh], J[sh + 1], 0.05 * g, sh, 1))
        segs.append((J[sh + 1], J[sh + 1] + 0.26 * (1 + h + arm) * d, 0.04 * g, sh + 1, sh))
    for hp, s in ((8, 1.0), (10, -1.0)):
        segs.append((J[hp], J[hp + 1], 0.07 * g, hp, 0))
        segs.append((J[hp + 1], J[hp + 1] + np.array([0, 0, -0.40 * (1 + h + leg)]), 0.055 * g, hp + 1, hp))
    return [(np.asarray(a, float), np.asarray(b, float), r, o, p) for a, b, r, o, p in segs]


def _capsule(a, b, r, n_lon: int, n_cap: int, n_tube: int):
    axis = b - a
    length = np.linalg.norm(axis)
    ez = axis / length
    helper = np.array([0.0, 1.0, 0.0]) if abs(ez[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    ex = np.cross(helper, ez)
    ex /= np.linalg.norm(ex)
    ey = np.cross(ez, ex)
    lon = 2 * np.pi * np.arange(n_lon) / n_lon
    ring_dirs = np.cos(lon)[:, None] * ex + np.sin(lon)[:, None] * ey
    rings = []  # (center, radius, axial parameter t in [0,1] along the segment; caps clamp)
    for k in range(1, n_cap + 1):
        phi = -np.pi / 2 + k * (np.pi / 2) / n_cap
        rings.append((a + r * np.sin(phi) * ez, r * np.cos(phi), 0.0))
    for k in range(1, n_tube):
        t = k / n_tube
        rings.append((a + t * axis, r, t))
    for k in range(0, n_cap):
        phi = k * (np.pi / 2) / n_cap
        rings.append((b + r * np.sin(phi) * ez, r * np.cos(phi), 1.0))
    verts = [a - r * ez]
    tparam = [0.0]
    for c, rr, t in rings:
        verts.extend(c + rr * ring_dirs)
        tparam.extend([t] * n_lon)
    verts.append(b + r * ez)
    tparam.append(1.0)
    verts = np.array(verts)
    n_r = len(rings)
    faces = []
    for i in range(n_lon):
        j = (i + 1) % n_lon
        faces.append([0, 1 + j, 1 + i])
    for k in range(n_r - 1):
        base0 = 1 + k * n_lon
        base1 = 1 + (k + 1) * n_lon
        for i in range(n_lon):
            j = (i + 1) % n_lon
            faces.append([base0 + i, base0 + j, base1 + j])
            faces.append([base0 + i, base1 + j, base1 + i])
    top = len(verts) - 1
    last = 1 + (n_r - 1) * n_lon
    for i in range(n_lon):
        j = (i + 1) % n_lon
        faces.append([last + i, last + j, top])
    return verts, np.array(faces), np.array(tparam)


def _build(betas: np.ndarray, n_lon: int, n_cap: int, n_tube: int):
    verts, faces, weights = [], [], []
    offset = 0
    for a, b, r, owner, parent in _segments(betas):
        v, f, t = _capsule(a, b, r, n_lon, n_cap, n_tube)
        w = np.zeros((len(v), len(JOINT_NAMES)))
        if parent < 0:
            w[:, owner] = 1.0
        else:
            wp = _PARENT_BLEND * np.clip(1.0 - t / _BLEND_SPAN, 0.0, 1.0)
            w[:, parent] = wp
            w[:, owner] = 1.0 - wp
        verts.append(v)
        faces.append(f + offset)
        weights.append(w)
        offset += len(v)
    return np.concatenate(verts), np.concatenate(faces), np.concatenate(weights)


def build_puppet(n_lon: int = 16, n_cap: int = 4, n_tube: int = 4) -> SkinnedTemplate:
    """Twelve-joint capsule humanoid, about 2k vertices with the default tessellation."""
    zero = np.zeros(N_SHAPE)
    verts, faces, weights = _build(zero, n_lon, n_cap, n_tube)
    joints = _joints(zero)
    # the builder is affine in the shape parameters, so unit differences are exact directions
    shape_dirs = np.empty(verts.shape + (N_SHAPE,))
    joint_dirs = np.empty(joints.shape + (N_SHAPE,))
    for s in range(N_SHAPE):
        e = np.zeros(N_SHAPE)
        e[s] = 1.0
        shape_dirs[..., s] = _build(e, n_lon, n_cap, n_tube)[0] - verts
        joint_dirs[..., s] = _joints(e) - joints
    skeleton = Skeleton(JOINT_NAMES, np.array(PARENTS), joints)
    return SkinnedTemplate(skeleton, verts, faces, weights, shape_dirs, joint_dirs)


def head_weight(template: SkinnedTemplate) -> np.ndarray:
    return template.weights[:, template.skeleton.index("head")]
