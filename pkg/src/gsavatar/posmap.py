"""Front/back positional maps, face crops, and the canonical face model."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numba as nb
import numpy as np
from scipy.spatial import cKDTree

from .articulation import Pose, SkinnedTemplate, forward_kinematics, joint_positions, lbs_points
from .camera import NEAR_PLANE, Camera, Projection
from .splat import GaussianSet, SourceTag

HEAD_CROP_FACTOR = 2.5


class Side(str, Enum):
    FRONT = "front"
    BACK = "back"


def map_camera(side: Side, window: tuple[float, float, float, float], resolution: int) -> Camera:
    """Orthographic camera of a square canonical window (x0, x1, z0, z1).

    The template faces +y: the front camera looks along -y, the back camera along +y.
    Both keep +z up, so the two images are left-right mirrors of each other.
    """
    x0, x1, z0, z1 = window
    ppm = resolution / (x1 - x0)
    side = Side(side)
    if side is Side.FRONT:
        R = np.array([[-1.0, 0, 0], [0, 0, -1.0], [0, -1.0, 0]])
        cx = ppm * x1
    else:
        R = np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])
        cx = -ppm * x0
    # camera sits 10 m out along the viewing axis so every point has positive depth
    t = np.array([0.0, 0.0, 10.0])
    return Camera(ppm, ppm, cx, ppm * z1, R, t, resolution, resolution, Projection.ORTHOGRAPHIC)


@dataclass
class PositionalMap:
    """H x W grid of canonical surface points seen orthographically from one side.

    Uncovered pixels hold (0, 0, 0) and ``coverage`` False. ``posed`` holds the
    LBS-posed location of each stored point when the map was made for a pose.
    """

    side: Side
    positions: np.ndarray
    coverage: np.ndarray
    camera: Camera
    triangles: np.ndarray
    barycentrics: np.ndarray
    weights: np.ndarray
    posed: np.ndarray | None = None

    @property
    def resolution(self) -> tuple[int, int]:
        return self.coverage.shape

    @property
    def n_covered(self) -> int:
        return int(self.coverage.sum())

    def covered_positions(self) -> np.ndarray:
        return self.positions[self.coverage]

    def masked(self, keep: np.ndarray) -> "PositionalMap":
        """Copy restricted to ``keep & coverage``; dropped pixels return to the sentinel."""
        cov = self.coverage & keep
        pos = np.where(cov[..., None], self.positions, 0.0)
        posed = None if self.posed is None else np.where(cov[..., None], self.posed, 0.0)
        return replace(self, positions=pos, coverage=cov, posed=posed,
                       triangles=np.where(cov, self.triangles, -1))


@nb.njit(cache=True)
def _raster_mesh(uv, depth, faces, width, height):
    zbuf = np.full((height, width), np.inf)
    tri = np.full((height, width), -1, np.int64)
    bary = np.zeros((height, width, 3))
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0 = uv[i0, 0], uv[i0, 1]
        x1, y1 = uv[i1, 0], uv[i1, 1]
        x2, y2 = uv[i2, 0], uv[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-14:
            continue
        cmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        cmax = min(int(np.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        rmin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        rmax = min(int(np.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        for r in range(rmin, rmax + 1):
            py = r + 0.5
            for c in range(cmin, cmax + 1):
                px = c + 0.5
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = w0 * depth[i0] + w1 * depth[i1] + w2 * depth[i2]
                if z < zbuf[r, c]:
                    zbuf[r, c] = z
                    tri[r, c] = f
                    bary[r, c, 0] = w0
                    bary[r, c, 1] = w1
                    bary[r, c, 2] = w2
    return tri, bary


def body_window(template: SkinnedTemplate, margin: float = 0.05) -> tuple[float, float, float, float]:
    """Square canonical (x0, x1, z0, z1) window around the whole template."""
    v = template.shaped_vertices()
    lo = v.min(axis=0) - margin
    hi = v.max(axis=0) + margin
    half = 0.5 * max(hi[0] - lo[0], hi[2] - lo[2])
    cx, cz = 0.5 * (lo[0] + hi[0]), 0.5 * (lo[2] + hi[2])
    return (cx - half, cx + half, cz - half, cz + half)


def head_window(template: SkinnedTemplate, half_size: float = 0.16) -> tuple[float, float, float, float]:
    h = template.shaped_joints()[template.skeleton.index("head")]
    return (h[0] - half_size, h[0] + half_size, h[2] - half_size, h[2] + half_size)


def render_positional_map(template: SkinnedTemplate, pose: Pose | None, side, resolution: int,
                          window=None) -> PositionalMap:
    """Orthographic, depth-buffered map of the canonical template from one side.

    Each covered pixel stores the canonical point of the nearest surface along the
    viewing axis; with a pose, ``posed`` additionally holds that point after LBS.
    """
    side = Side(side)
    window = body_window(template) if window is None else window
    cam = map_camera(side, window, resolution)
    verts = template.shaped_vertices()
    uv = cam.project(verts)
    depth = cam.to_camera(verts)[:, 2]
    tri, bary = _raster_mesh(np.ascontiguousarray(uv), depth, template.faces, resolution, resolution)
    cov = tri >= 0
    corners = template.faces[np.where(cov, tri, 0)]
    pos = np.einsum("hwk,hwkc->hwc", bary, verts[corners])
    pos[~cov] = 0.0
    w = np.einsum("hwk,hwkj->hwj", bary, template.weights[corners])
    w[~cov] = 0.0
    pm = PositionalMap(side, pos, cov, cam, tri, bary, w)
    if pose is not None:
        pm = pose_map(pm, template, pose)
    return pm


def pose_map(pm: PositionalMap, template: SkinnedTemplate, pose: Pose, weights=None) -> PositionalMap:
    """Attach posed positions of the covered points (optionally with explicit per-point weights)."""
    R, t = forward_kinematics(template.skeleton, pose, template.shaped_joints())
    w = pm.weights[pm.coverage] if weights is None else weights
    posed = np.zeros_like(pm.positions)
    posed[pm.coverage] = lbs_points(pm.positions[pm.coverage], w, R, t)
    return replace(pm, posed=posed)


def head_region(pm: PositionalMap, template: SkinnedTemplate, threshold: float = 0.5) -> PositionalMap:
    """Restrict a map to pixels whose interpolated head skinning weight exceeds ``threshold``."""
    head = template.skeleton.index("head")
    return pm.masked(pm.weights[..., head] > threshold)


# ---------------------------------------------------------------------------
# crops


@dataclass(frozen=True)
class CropSpec:
    x: float
    y: float
    scale: float
    size: int

    def __post_init__(self):
        for k in ("x", "y", "scale"):
            object.__setattr__(self, k, float(getattr(self, k)))
        object.__setattr__(self, "size", int(self.size))
        if self.scale <= 0:
            raise ValueError("crop scale must be positive")

    @property
    def window(self) -> float:
        """Side of the crop window in source pixels."""
        return self.size / self.scale


def crop_intrinsics(K, crop: CropSpec):
    """Intrinsics after cropping at (x, y) and resizing by ``crop.scale``.

    Accepts a 3x3 matrix or a Camera (returned with the crop's output size).
    """
    s = crop.scale
    if isinstance(K, Camera):
        return K.with_intrinsics(s * K.fx, s * K.fy, s * (K.cx - crop.x), s * (K.cy - crop.y),
                                 crop.size, crop.size)
    K = np.asarray(K, dtype=np.float64)
    return np.array([
        [s * K[0, 0], 0.0, s * (K[0, 2] - crop.x)],
        [0.0, s * K[1, 1], s * (K[1, 2] - crop.y)],
        [0.0, 0.0, 1.0],
    ])


def compose_crops(first: CropSpec, second: CropSpec) -> CropSpec:
    """Single crop equal to applying ``first`` and then ``second`` (in first's output pixels)."""
    return CropSpec(first.x + second.x / first.scale, first.y + second.y / first.scale,
                    first.scale * second.scale, second.size)


def crop_point(uv, crop: CropSpec) -> np.ndarray:
    return crop.scale * (np.asarray(uv, dtype=np.float64) - [crop.x, crop.y])


class HeadNotVisibleError(ValueError):
    pass


def compute_face_crop(template: SkinnedTemplate, pose: Pose, camera: Camera, output_size: int,
                      factor: float = HEAD_CROP_FACTOR) -> CropSpec:
    """Square crop around the projected head joint, clamped to the image.

    The side is ``factor`` times the head-to-neck bone length projected at the
    head's depth.
    """
    joints = template.shaped_joints()
    R, t = forward_kinematics(template.skeleton, pose, joints)
    jp = joint_positions(R, t, joints)
    head = jp[template.skeleton.index("head")]
    neck = jp[template.skeleton.index("neck")]
    pc = camera.to_camera(head)
    if not camera.orthographic and pc[2] <= NEAR_PLANE:
        raise HeadNotVisibleError(f"head joint is behind the camera (depth {pc[2]:.3f} m)")
    center = camera.project_camera(pc)
    bone = np.linalg.norm(head - neck)
    ppm = camera.fx if camera.orthographic else camera.fx / pc[2]
    side = min(factor * bone * ppm, camera.width, camera.height)
    x = float(np.clip(center[0] - 0.5 * side, 0.0, camera.width - side))
    y = float(np.clip(center[1] - 0.5 * side, 0.0, camera.height - side))
    return CropSpec(x, y, output_size / side, output_size)


# ---------------------------------------------------------------------------
# canonical face model


class AttributeLayout:
    """Channel layout used to store Gaussian attributes on a grid."""

    def __init__(self, sh_k: int):
        self.sh_k = sh_k
        self.slices = {
            "means": slice(0, 3),
            "log_scales": slice(3, 6),
            "quats": slice(6, 10),
            "opacity_logits": slice(10, 11),
            "sh": slice(11, 11 + 3 * sh_k),
        }
        self.channels = 11 + 3 * sh_k

    def pack(self, gs: GaussianSet) -> np.ndarray:
        return np.concatenate([gs.means, gs.log_scales, gs.quats, gs.opacity_logits[:, None],
                               gs.sh.reshape(len(gs), -1)], axis=1)

    def unpack(self, values: np.ndarray, tag: SourceTag = SourceTag.FACE) -> GaussianSet:
        s = self.slices
        n = values.shape[0]
        return GaussianSet(values[:, s["means"]], values[:, s["log_scales"]], values[:, s["quats"]],
                           values[:, s["opacity_logits"]][:, 0], values[:, s["sh"]].reshape(n, self.sh_k, 3),
                           np.full(n, int(tag), np.int8))


def scatter(values: np.ndarray, coverage: np.ndarray) -> np.ndarray:
    out = np.zeros(coverage.shape + values.shape[1:])
    out[coverage] = values
    return out


def average_canonical_face(grids: Iterable[tuple[np.ndarray, np.ndarray]], streaming: bool = True):
    """Per-pixel mean of (grid, coverage) frames, counting only covered pixels.

    Returns (mean grid, coverage). ``streaming`` uses a running mean; otherwise
    all frames are summed at once.
    """
    grids = list(grids) if not streaming else grids
    mean = None
    count = None
    if streaming:
        for grid, cov in grids:
            grid = np.asarray(grid, dtype=np.float64)
            if mean is None:
                mean = np.zeros_like(grid)
                count = np.zeros(cov.shape, np.int64)
            count += cov
            k = np.where(cov, count, 1)[..., None]
            mean = np.where(cov[..., None], mean + (grid - mean) / k, mean)
        if mean is None:
            raise ValueError("cannot average an empty sequence of face grids")
    else:
        if not grids:
            raise ValueError("cannot average an empty sequence of face grids")
        stack = np.stack([np.asarray(g, dtype=np.float64) for g, _ in grids])
        covs = np.stack([c for _, c in grids])
        count = covs.sum(axis=0)
        total = np.where(covs[..., None], stack, 0.0).sum(axis=0)
        mean = total / np.maximum(count, 1)[..., None]
    coverage = count > 0
    mean[~coverage] = 0.0
    return mean, coverage


def densify_grid(grid: np.ndarray, factor: int, coverage: np.ndarray | None = None):
    """Upsample an H x W x C grid by ``factor`` with separable linear interpolation.

    Output node (i, j) sits at source coordinate (i / factor, j / factor), so source
    nodes are copied exactly. Nodes past the last source row/column (outside the
    source grid's hull) and nodes whose interpolation support touches an uncovered
    source node are marked uncovered and zeroed. Returns (dense grid, dense coverage).
    """
    if factor < 1:
        raise ValueError("densify factor must be >= 1")
    grid = np.asarray(grid, dtype=np.float64)
    H, W = grid.shape[:2]
    cov = np.ones((H, W), bool) if coverage is None else np.asarray(coverage, bool)
    if factor == 1:
        return grid.copy(), cov.copy()
    idx_r, fr = np.divmod(np.arange(factor * H), factor)
    idx_c, fc = np.divmod(np.arange(factor * W), factor)
    ar = fr / factor
    ac = fc / factor
    r1 = np.minimum(idx_r + 1, H - 1)
    c1 = np.minimum(idx_c + 1, W - 1)
    inside_r = (fr == 0) | (idx_r + 1 <= H - 1)
    inside_c = (fc == 0) | (idx_c + 1 <= W - 1)

    def lerp_rows(g):
        a = ar.reshape((-1,) + (1,) * (g.ndim - 1))
        top = g[idx_r]
        bot = g[r1]
        return np.where(a == 0, top, (1 - a) * top + a * bot)

    def lerp_cols(g):
        a = ac.reshape((1, -1) + (1,) * (g.ndim - 2))
        left = g[:, idx_c]
        right = g[:, c1]
        return np.where(a == 0, left, (1 - a) * left + a * right)

    dense = lerp_cols(lerp_rows(grid))
    # support coverage: every source node with nonzero weight must be covered
    cr = cov[idx_r] & np.where((fr > 0)[:, None], cov[r1], True)
    dcov = cr[:, idx_c] & np.where((fc > 0)[None, :], cr[:, c1], True)
    dcov &= inside_r[:, None] & inside_c[None, :]
    dense[~dcov] = 0.0
    return dense, dcov


@dataclass
class CanonicalFaceModel:
    """Averaged and densified head attribute grids, one pair per side."""

    factor: int
    layout_k: int
    grids: dict = field(default_factory=dict)  # side -> (grid, coverage)
    dense: dict = field(default_factory=dict)  # side -> (grid, coverage)

    def gaussians(self) -> GaussianSet:
        layout = AttributeLayout(self.layout_k)
        vals = [self.dense[s][0][self.dense[s][1]] for s in (Side.FRONT, Side.BACK)]
        return layout.unpack(np.concatenate(vals), SourceTag.FACE)

    def coverages(self) -> list[np.ndarray]:
        return [self.dense[s][1] for s in (Side.FRONT, Side.BACK)]


def canonicalize_head_frame(head_map: PositionalMap, template: SkinnedTemplate, pose: Pose,
                            body: GaussianSet, layout: AttributeLayout) -> tuple[np.ndarray, np.ndarray]:
    """Map one posed head positional map back to the canonical frame as an attribute grid.

    Posed points go through the inverse of their blended LBS transform; the
    non-positional attributes are read from the nearest canonical body Gaussian.
    """
    cov = head_map.coverage
    posed = head_map.posed[cov]
    R, t = forward_kinematics(template.skeleton, pose, template.shaped_joints())
    w = head_map.weights[cov]
    M = np.einsum("nj,jab->nab", w, R)
    tb = w @ t
    canon = np.linalg.solve(M, (posed - tb)[..., None])[..., 0]
    _, nearest = cKDTree(body.means).query(canon)
    attrs = layout.pack(body.subset(nearest))
    attrs[:, layout.slices["means"]] = canon
    return scatter(attrs, cov), cov


def build_canonical_face(template: SkinnedTemplate, poses: Sequence[Pose], body: GaussianSet,
                         resolution: int, factor: int, half_size: float = 0.16,
                         body_per_frame: Sequence[GaussianSet] | None = None) -> CanonicalFaceModel:
    """Average head attribute grids over all frames, then densify them.

    ``body`` supplies the canonical attributes (or ``body_per_frame`` one set per
    frame, e.g. the body branch decoded for that frame). Densified Gaussians get
    their scales divided by ``factor`` to keep coverage comparable.
    """
    if not poses:
        raise ValueError("need at least one frame to build the canonical face")
    layout = AttributeLayout(body.sh.shape[1])
    window = head_window(template, half_size)
    model = CanonicalFaceModel(factor, layout.sh_k)
    for side in (Side.FRONT, Side.BACK):
        base = head_region(render_positional_map(template, None, side, resolution, window), template)

        def frames():
            for k, pose in enumerate(poses):
                src = body if body_per_frame is None else body_per_frame[k]
                yield canonicalize_head_frame(pose_map(base, template, pose), template, pose, src, layout)

        grid, cov = average_canonical_face(frames())
        dense, dcov = densify_grid(grid, factor, cov)
        dense[..., layout.slices["log_scales"]] -= np.log(factor) * dcov[..., None]
        model.grids[side] = (grid, cov)
        model.dense[side] = (dense, dcov)
    return model
