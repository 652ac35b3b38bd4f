"""Synthetic teacher scenes and the on-disk dataset layout.

Dataset directory::

    manifest.json        format, sizes, held-out views, sha256 of every other file
    cameras.txt          one line per view: view fx fy cx cy r00 .. r22 t0 t1 t2 width height
    poses.txt            one line per frame: frame tx ty tz, then 3 axis-angle values per joint
    crops.txt            one line per (frame, view): frame view x y scale size
    images/f{frame:03d}_v{view:02d}.png        8-bit RGB
    masks/f{frame:03d}_v{view:02d}.png         8-bit gray, 255 inside
    face/images/..., face/masks/...            face crops, same naming
    teacher.ckpt         teacher avatar (replay and tests)

Numbers in the text files are written with ``repr`` so they round-trip exactly.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .articulation import Pose, Skeleton, SkinnedTemplate
from .avatar import Avatar, AvatarSpec
from .camera import Camera, look_at
from .checkpoint import load_checkpoint, save_checkpoint
from .posmap import CropSpec, compute_face_crop, crop_intrinsics
from .raster import image_to_uint8, rasterize
from .splat import logit, rgb_to_sh0

DATASET_FORMAT = "gsavatar-dataset"
DATASET_VERSION = 1

# one color per joint of the puppet, indexed by the dominant skinning weight
PART_COLORS = np.array([
    [0.80, 0.25, 0.20], [0.85, 0.55, 0.20], [0.90, 0.75, 0.60], [0.95, 0.80, 0.65],
    [0.20, 0.45, 0.80], [0.30, 0.65, 0.90], [0.20, 0.70, 0.40], [0.40, 0.85, 0.50],
    [0.35, 0.30, 0.60], [0.55, 0.45, 0.75], [0.60, 0.35, 0.30], [0.75, 0.50, 0.40],
])
FACE_COLORS = np.array([[0.95, 0.85, 0.70], [0.25, 0.15, 0.10]])


class DatasetError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid dataset:\n  " + "\n  ".join(self.problems))


# ---------------------------------------------------------------------------
# template I/O


TEMPLATE_FORMAT = "gsavatar-template"


def save_template(path, template: SkinnedTemplate) -> None:
    """JSON document: skeleton (names, parents, rest joints) plus mesh, weights and shape arrays."""
    doc = {
        "format": TEMPLATE_FORMAT, "version": 1,
        "names": list(template.skeleton.names),
        "parents": template.skeleton.parents.tolist(),
        "rest_joints": template.skeleton.rest_joints.tolist(),
        "vertices": template.vertices.tolist(),
        "faces": template.faces.tolist(),
        "weights": template.weights.tolist(),
        "shape_dirs": template.shape_dirs.tolist(),
        "joint_shape_dirs": template.joint_shape_dirs.tolist(),
        "betas": template.betas.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_template(path) -> SkinnedTemplate:
    """``builtin:puppet`` or a JSON file written by ``save_template``."""
    if str(path) in ("", "builtin:puppet"):
        from .puppet import build_puppet

        return build_puppet()
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != TEMPLATE_FORMAT:
        raise ValueError(f"{path}: not a {TEMPLATE_FORMAT} file")
    sk = Skeleton(tuple(doc["names"]), np.array(doc["parents"]), np.array(doc["rest_joints"]))
    return SkinnedTemplate(sk, np.array(doc["vertices"]), np.array(doc["faces"]), np.array(doc["weights"]),
                           np.array(doc["shape_dirs"]), np.array(doc["joint_shape_dirs"]), np.array(doc["betas"]))


# ---------------------------------------------------------------------------
# text formats


def format_cameras(cameras) -> str:
    lines = ["# view fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2 width height"]
    for i, c in enumerate(cameras):
        vals = [c.fx, c.fy, c.cx, c.cy, *c.rotation.ravel(), *c.translation]
        lines.append(" ".join([str(i), *map(repr, map(float, vals)), str(c.width), str(c.height)]))
    return "\n".join(lines) + "\n"


def parse_cameras(text: str) -> list[Camera]:
    cams = []
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 19:
            raise DatasetError([f"cameras.txt:{ln}: expected 19 fields, got {len(tok)}"])
        v = [float(x) for x in tok[1:17]]
        cams.append(Camera(v[0], v[1], v[2], v[3], np.array(v[4:13]).reshape(3, 3), np.array(v[13:16]),
                           int(tok[17]), int(tok[18])))
    return cams


def format_poses(poses) -> str:
    lines = ["# frame tx ty tz, then axis-angle (x y z) per joint"]
    for i, p in enumerate(poses):
        lines.append(" ".join([str(i), *map(repr, map(float, p.flat()))]))
    return "\n".join(lines) + "\n"


def parse_poses(text: str, n_joints: int | None = None) -> list[Pose]:
    poses = []
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        vals = [float(x) for x in line.split()[1:]]
        if (len(vals) - 3) % 3 or (n_joints is not None and len(vals) != 3 + 3 * n_joints):
            raise DatasetError([f"poses.txt:{ln}: {len(vals)} values do not fit the skeleton"])
        poses.append(Pose.from_flat(vals))
    return poses


def format_crops(crops: dict) -> str:
    lines = ["# frame view x y scale size"]
    for (f, v), c in sorted(crops.items()):
        lines.append(f"{f} {v} {c.x!r} {c.y!r} {c.scale!r} {c.size}")
    return "\n".join(lines) + "\n"


def parse_crops(text: str) -> dict:
    crops = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        t = line.split()
        crops[(int(t[0]), int(t[1]))] = CropSpec(float(t[2]), float(t[3]), float(t[4]), int(t[5]))
    return crops


def write_png(path, img: np.ndarray) -> None:
    arr = img if img.dtype == np.uint8 else image_to_uint8(img)
    Image.fromarray(arr).save(path, optimize=False)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def item_name(frame: int, view: int) -> str:
    return f"f{frame:03d}_v{view:02d}.png"


# ---------------------------------------------------------------------------
# synthesis


@dataclass
class SynthSpec:
    n_frames: int = 30
    n_views: int = 8
    width: int = 128
    height: int = 128
    focal: float = 170.0
    radius: float = 3.0
    camera_height: float = 1.1
    heldout_views: tuple = (7,)
    teacher_opacity: float = 0.97
    view_dependence: float = 0.03


def circle_cameras(spec: SynthSpec) -> list[Camera]:
    """Perspective cameras on a horizontal circle, view 0 in front of the puppet (+y)."""
    cams = []
    target = np.array([0.0, 0.0, 0.95])
    for k in range(spec.n_views):
        a = np.pi / 2 + 2 * np.pi * k / spec.n_views
        eye = np.array([spec.radius * np.cos(a), spec.radius * np.sin(a), spec.camera_height])
        cams.append(look_at(eye, target, [0, 0, 1], spec.focal, spec.focal, spec.width, spec.height))
    return cams


def animate(template: SkinnedTemplate, n_frames: int, rng: np.random.Generator) -> list[Pose]:
    """Smooth walk-like motion with small seeded jitter."""
    idx = template.skeleton.index
    poses = []
    for k in range(n_frames):
        ph = 2 * np.pi * k / max(n_frames, 1)
        rot = np.zeros((template.n_joints, 3))
        rot[idx("root")] = [0, 0, 0.25 * np.sin(ph)]
        rot[idx("spine")] = [0.05 * np.sin(2 * ph), 0, 0.15 * np.sin(ph + 0.5)]
        rot[idx("neck")] = [0.1 * np.sin(2 * ph), 0, 0.1 * np.cos(ph)]
        rot[idx("head")] = [0.15 * np.sin(ph + 1.0), 0.1 * np.sin(2 * ph), 0.35 * np.sin(ph)]
        rot[idx("l_shoulder")] = [0.5 * np.sin(ph), 0, 0.1]
        rot[idx("r_shoulder")] = [-0.5 * np.sin(ph), 0, -0.1]
        rot[idx("l_elbow")] = [-0.4 - 0.3 * np.sin(ph), 0, 0]
        rot[idx("r_elbow")] = [-0.4 + 0.3 * np.sin(ph), 0, 0]
        rot[idx("l_hip")] = [-0.4 * np.sin(ph), 0, 0]
        rot[idx("r_hip")] = [0.4 * np.sin(ph), 0, 0]
        rot[idx("l_knee")] = [0.3 + 0.3 * np.cos(ph), 0, 0]
        rot[idx("r_knee")] = [0.3 - 0.3 * np.cos(ph), 0, 0]
        rot += rng.normal(0.0, 0.03, rot.shape)
        trans = np.array([0.05 * np.sin(ph), 0.05 * np.cos(ph), 0.02 * np.sin(2 * ph)])
        poses.append(Pose(rot, trans))
    return poses


def make_teacher(template: SkinnedTemplate, avatar_spec: AvatarSpec, poses, spec: SynthSpec,
                 rng: np.random.Generator) -> Avatar:
    """Avatar with colored canonical Gaussians and zero decoders.

    Geometry is the same as a freshly built student avatar; colors follow the
    dominant skinning joint with a gentle stripe pattern, and the face carries a
    two-color checker at the densified grid spacing.
    """
    body, w_body, _ = Avatar.canonical_body(template, avatar_spec)
    part = np.argmax(w_body, axis=1)
    z = body.means[:, 2]
    stripe = 0.08 * np.sin(2 * np.pi * z / 0.12)[:, None]
    rgb = np.clip(PART_COLORS[part % len(PART_COLORS)] + stripe, 0.02, 0.98)
    sh = np.zeros_like(body.sh)
    sh[:, 0] = rgb_to_sh0(rgb)
    sh[:, 1:] = rng.normal(0.0, spec.view_dependence, sh[:, 1:].shape)
    body = body.with_(sh=sh, opacity_logits=np.full(len(body), float(logit(spec.teacher_opacity))))
    teacher = Avatar.build(template, avatar_spec, poses, rng, body=body)
    # checker with 2x2-node cells on each densified face grid (front then back)
    res = avatar_spec.face_resolution * avatar_spec.face_factor
    ii, jj = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    checker = (ii // 2 + jj // 2) % 2
    face = teacher.face
    colors = FACE_COLORS[np.concatenate([checker[c] for c in teacher.face_model.coverages()])]
    fsh = face.sh.copy()
    fsh[:, 0] = rgb_to_sh0(colors)
    fsh[:, 1:] = 0.0
    teacher.face = face.with_(sh=fsh, opacity_logits=np.full(len(face), float(logit(spec.teacher_opacity))))
    return teacher


@dataclass
class Dataset:
    """Images and metadata in memory; pixel arrays stay 8-bit until requested."""

    cameras: list
    poses: list
    crops: dict
    images: dict
    masks: dict
    face_images: dict
    face_masks: dict
    heldout_views: tuple = ()
    root: Path | None = None
    manifest: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def train_views(self) -> list[int]:
        return [v for v in range(self.n_views) if v not in self.heldout_views]

    def image(self, f, v) -> np.ndarray:
        return self.images[(f, v)].astype(np.float64) / 255.0

    def mask(self, f, v) -> np.ndarray:
        return self.masks[(f, v)] > 127

    def face_image(self, f, v) -> np.ndarray:
        return self.face_images[(f, v)].astype(np.float64) / 255.0

    def face_mask(self, f, v) -> np.ndarray:
        return self.face_masks[(f, v)] > 127

    def face_camera(self, f, v) -> Camera:
        return crop_intrinsics(self.cameras[v], self.crops[(f, v)])

    def problems(self) -> list[str]:
        out = []
        if not self.train_views:
            out.append("no training views left after holding out " + str(self.heldout_views))
        for v in self.heldout_views:
            if not 0 <= v < self.n_views:
                out.append(f"held-out view {v} does not exist")
        for f in range(self.n_frames):
            for v in range(self.n_views):
                cam = self.cameras[v]
                tag = item_name(f, v)
                for kind, store in (("image", self.images), ("mask", self.masks),
                                    ("face image", self.face_images), ("face mask", self.face_masks)):
                    if (f, v) not in store:
                        out.append(f"{tag}: missing {kind}")
                if (f, v) not in self.crops:
                    out.append(f"{tag}: missing face crop record")
                img = self.images.get((f, v))
                if img is not None and img.shape[:2] != (cam.height, cam.width):
                    out.append(f"{tag}: image is {img.shape[1]}x{img.shape[0]}, camera {v} is {cam.width}x{cam.height}")
                m = self.masks.get((f, v))
                if m is not None and img is not None and m.shape != img.shape[:2]:
                    out.append(f"{tag}: mask shape {m.shape} does not match image {img.shape[:2]}")
                c = self.crops.get((f, v))
                fi = self.face_images.get((f, v))
                if c is not None and fi is not None and fi.shape[:2] != (c.size, c.size):
                    out.append(f"{tag}: face crop is {fi.shape[:2]}, crop record says {c.size}")
        return out

    def validate(self) -> None:
        probs = self.problems()
        if probs:
            raise DatasetError(probs)


def synthesize(template: SkinnedTemplate, avatar_spec: AvatarSpec, spec: SynthSpec, seed: int = 0):
    """Teacher avatar plus the rendered dataset (in memory)."""
    rng = np.random.default_rng(seed)
    poses = animate(template, spec.n_frames, rng)
    cams = circle_cameras(spec)
    teacher = make_teacher(template, avatar_spec, poses, spec, rng)
    images, masks, fimages, fmasks, crops = {}, {}, {}, {}, {}
    for f, pose in enumerate(poses):
        for v, cam in enumerate(cams):
            crop = compute_face_crop(template, pose, cam, avatar_spec.crop_size)
            fcam = crop_intrinsics(cam, crop)
            state = teacher.forward(pose, cam, fcam)
            full = rasterize(state.posed, cam)
            face = rasterize(state.posed, fcam)
            images[(f, v)] = image_to_uint8(full.color)
            masks[(f, v)] = np.where(full.alpha > 0.5, 255, 0).astype(np.uint8)
            fimages[(f, v)] = image_to_uint8(face.color)
            fmasks[(f, v)] = np.where(face.alpha > 0.5, 255, 0).astype(np.uint8)
            crops[(f, v)] = crop
    ds = Dataset(cams, poses, crops, images, masks, fimages, fmasks, tuple(spec.heldout_views))
    return teacher, ds


def write_dataset(root, ds: Dataset, teacher: Avatar | None = None, extra_meta: dict | None = None) -> Path:
    root = Path(root)
    for sub in ("images", "masks", "face/images", "face/masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "cameras.txt").write_text(format_cameras(ds.cameras))
    (root / "poses.txt").write_text(format_poses(ds.poses))
    (root / "crops.txt").write_text(format_crops(ds.crops))
    for (f, v), img in sorted(ds.images.items()):
        name = item_name(f, v)
        write_png(root / "images" / name, img)
        write_png(root / "masks" / name, ds.masks[(f, v)])
        write_png(root / "face/images" / name, ds.face_images[(f, v)])
        write_png(root / "face/masks" / name, ds.face_masks[(f, v)])
    if teacher is not None:
        save_checkpoint(root / "teacher.ckpt", teacher.to_checkpoint(0, {"role": "teacher"}))
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "format": DATASET_FORMAT, "version": DATASET_VERSION,
        "n_frames": ds.n_frames, "n_views": ds.n_views,
        "heldout_views": list(ds.heldout_views),
        "files": {str(p.relative_to(root)): sha256(p) for p in files},
        **(extra_meta or {}),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_dataset(root, check_sums: bool = True, n_joints: int | None = None) -> Dataset:
    """Read and schema-check a dataset directory; every problem is reported at once."""
    root = Path(root)
    problems = []
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError([f"{mpath}: missing manifest"])
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        problems.append(f"{mpath}: format {manifest.get('format')!r} is not {DATASET_FORMAT!r}")
    if manifest.get("version", 0) > DATASET_VERSION:
        problems.append(f"{mpath}: dataset version {manifest.get('version')} is newer than {DATASET_VERSION}")
    for name in ("cameras.txt", "poses.txt", "crops.txt"):
        if not (root / name).is_file():
            problems.append(f"{root / name}: missing")
    if problems:
        raise DatasetError(problems)
    if check_sums:
        for rel, digest in manifest.get("files", {}).items():
            p = root / rel
            if p.is_file() and sha256(p) != digest:
                problems.append(f"{p}: checksum mismatch")
    cams = parse_cameras((root / "cameras.txt").read_text())
    poses = parse_poses((root / "poses.txt").read_text(), n_joints)
    crops = parse_crops((root / "crops.txt").read_text())
    if len(cams) != manifest.get("n_views"):
        problems.append(f"cameras.txt: {len(cams)} cameras, manifest says {manifest.get('n_views')}")
    if len(poses) != manifest.get("n_frames"):
        problems.append(f"poses.txt: {len(poses)} poses, manifest says {manifest.get('n_frames')}")
    stores = ({}, {}, {}, {})
    dirs = ("images", "masks", "face/images", "face/masks")
    for f in range(len(poses)):
        for v in range(len(cams)):
            for store, d in zip(stores, dirs):
                p = root / d / item_name(f, v)
                if p.is_file():
                    try:
                        store[(f, v)] = read_png(p)
                    except (OSError, ValueError) as e:
                        problems.append(f"{p}: unreadable image ({e})")
    ds = Dataset(cams, poses, crops, *stores, tuple(manifest.get("heldout_views", ())), root, manifest)
    problems += ds.problems()
    if problems:
        raise DatasetError(problems)
    return ds


def load_teacher(root, template: SkinnedTemplate) -> Avatar:
    return Avatar.from_checkpoint(load_checkpoint(Path(root) / "teacher.ckpt"), template)
