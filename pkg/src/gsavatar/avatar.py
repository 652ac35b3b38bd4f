"""The full avatar: canonical body and face Gaussians, decoders, and the posed render pipeline.

Per (pose, view) the pipeline is

    posed maps -> body decoder ---------> residuals -> canonical body  --+
    posed face points -> face decoders -> residuals -> canonical face  --+-> fuse -> LBS -> rasterize

and ``Avatar.backward`` walks the same chain in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .articulation import (Pose, SkinnedTemplate, bind_gaussians_to_surface, forward_kinematics,
                           joint_positions, lbs_points, skin_backward, skin_gaussians)
from .camera import Camera
from .checkpoint import Checkpoint
from .deformer import (POSITION, DecoderParams, FaceParams, PE_DIM, CAM_DIM, RESIDUAL_DIM,
                       apply_residuals, apply_residuals_backward, camera_embedding, check_architecture,
                       decode_body_backward, decode_body_points, decode_face_backward,
                       decode_face_points, fuse, fuse_backward)
from .posmap import (Side, body_window, build_canonical_face, compute_face_crop, crop_intrinsics,
                     render_positional_map)
from .raster import GaussianGrads, RenderOutput, rasterize, rasterize_backward
from .splat import GaussianSet, SourceTag, logit, rgb_to_sh0

ATTRS = ("log_scales", "quats", "opacity_logits", "sh")


@dataclass
class AvatarSpec:
    body_resolution: int = 112
    face_resolution: int = 18
    face_factor: int = 2
    face_half_size: float = 0.16
    n_mlp: int = 3
    cm: int = 1
    activation: str = "silu"
    head_threshold: float = 0.5
    attenuation: float = 0.1
    crop_size: int = 64
    scale_ratio: float = 0.7
    init_opacity: float = 0.9
    init_gray: float = 0.5


def _surface_set(points: np.ndarray, spacing: float, spec: AvatarSpec, tag: SourceTag) -> GaussianSet:
    n = len(points)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    sh = np.zeros((n, 4, 3))
    sh[:, 0] = rgb_to_sh0(np.full(3, spec.init_gray))
    return GaussianSet(points, np.full((n, 3), np.log(spec.scale_ratio * spacing)), quats,
                       np.full(n, float(logit(spec.init_opacity))), sh, np.full(n, int(tag), np.int8))


@dataclass
class FrameState:
    pose: Pose
    R: np.ndarray
    t: np.ndarray
    body_cache: object
    face_cache: object
    body_apply: object
    face_apply: object
    body_deformed: GaussianSet
    skin: object
    posed: GaussianSet
    residuals: np.ndarray
    face_camera: Camera | None


class Avatar:
    """Canonical Gaussians plus decoders; ``params()`` exposes every trainable array by name."""

    def __init__(self, template: SkinnedTemplate, spec: AvatarSpec, body: GaussianSet, body_weights,
                 face: GaussianSet, face_weights, body_decoder: DecoderParams, face_decoders: FaceParams):
        self.template = template
        self.spec = spec
        self.body = body
        self.body_weights = np.asarray(body_weights, dtype=np.float64)
        self.face = face
        self.face_weights = np.asarray(face_weights, dtype=np.float64)
        self.body_decoder = body_decoder
        self.face_decoders = face_decoders
        head = template.skeleton.index("head")
        self.body_head_weight = self.body_weights[:, head]
        self.all_weights = np.concatenate([self.body_weights, self.face_weights])
        self._head = head
        self._neck = template.skeleton.index("neck")
        self._joints = template.shaped_joints()
        self.face_model = None

    # -- construction -----------------------------------------------------------

    @classmethod
    def canonical_body(cls, template: SkinnedTemplate, spec: AvatarSpec):
        """Body Gaussians at the covered pixels of the canonical front and back maps."""
        window = body_window(template)
        maps = [render_positional_map(template, None, side, spec.body_resolution, window)
                for side in (Side.FRONT, Side.BACK)]
        spacing = (window[1] - window[0]) / spec.body_resolution
        pts = np.concatenate([m.covered_positions() for m in maps])
        w = np.concatenate([m.weights[m.coverage] for m in maps])
        return _surface_set(pts, spacing, spec, SourceTag.BODY), w / w.sum(axis=1, keepdims=True), maps

    @classmethod
    def build(cls, template: SkinnedTemplate, spec: AvatarSpec, poses, rng: np.random.Generator,
              body: GaussianSet | None = None) -> "Avatar":
        """Fresh avatar; ``body`` overrides the default gray canonical body attributes."""
        default_body, w_body, _ = cls.canonical_body(template, spec)
        body = default_body if body is None else body
        face_model = build_canonical_face(template, poses, body, spec.face_resolution, spec.face_factor,
                                          spec.face_half_size)
        face = face_model.gaussians()
        w_face = bind_gaussians_to_surface(face.means, template)
        body_dec = DecoderParams.init("body_dec", PE_DIM + CAM_DIM, RESIDUAL_DIM, spec.n_mlp, spec.cm,
                                      spec.activation, pose_in=3 * template.n_joints, rng=rng)
        face_dec = FaceParams.init(spec.n_mlp, spec.cm, spec.activation, rng=rng)
        avatar = cls(template, spec, body, w_body, face, w_face, body_dec, face_dec)
        avatar.face_model = face_model
        return avatar

    def decoders(self) -> list[DecoderParams]:
        return [self.body_decoder, *self.face_decoders.decoders()]

    # -- parameters ---------------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, gs in (("body", self.body), ("face", self.face)):
            for a in ATTRS:
                out[f"{prefix}.{a}"] = getattr(gs, a)
        for d in self.decoders():
            out.update(d.arrays())
        return out

    def param_groups(self) -> dict[str, list[str]]:
        names = list(self.params())
        return {
            "body_canonical": [n for n in names if n.startswith("body.")],
            "face_canonical": [n for n in names if n.startswith("face.")],
            "body_decoder": list(self.body_decoder.arrays()),
            "face_decoders": [k for d in self.face_decoders.decoders() for k in d.arrays()],
        }

    def set_params(self, values: dict) -> None:
        for prefix, gs in (("body", self.body), ("face", self.face)):
            for a in ATTRS:
                key = f"{prefix}.{a}"
                if key in values:
                    setattr(gs, a, np.asarray(values[key], dtype=np.float64).reshape(getattr(gs, a).shape))
        for d in self.decoders():
            d.load_arrays({**d.arrays(), **{k: v for k, v in values.items() if k in d.arrays()}})

    # -- forward ---------------------------------------------------------------

    def head_center(self, R, t) -> np.ndarray:
        return joint_positions(R[self._head:self._head + 1], t[self._head:self._head + 1],
                               self._joints[self._head:self._head + 1])[0]

    def face_camera(self, pose: Pose, camera: Camera) -> Camera:
        crop = compute_face_crop(self.template, pose, camera, self.spec.crop_size)
        return crop_intrinsics(camera, crop)

    def forward(self, pose: Pose, camera: Camera, face_camera: Camera | None = None) -> FrameState:
        """Posed, fused GaussianSet for ``pose`` seen from ``camera``.

        The body decoder is conditioned on ``camera``; the face decoders on the
        face crop camera (computed from the head joint when not given).
        """
        R, t = forward_kinematics(self.template.skeleton, pose, self._joints)
        center = self.head_center(R, t)
        if face_camera is None:
            face_camera = self.face_camera(pose, camera)
        posed_b = lbs_points(self.body.means, self.body_weights, R, t)
        res_b, cache_b = decode_body_points(posed_b, pose.rotations.ravel(), camera_embedding(camera, center),
                                            self.body_decoder)
        posed_f = lbs_points(self.face.means, self.face_weights, R, t)
        res_f, cache_f = decode_face_points(posed_f, camera_embedding(face_camera, center), self.face_decoders)
        body_def, app_b = apply_residuals(self.body, res_b, return_cache=True)
        face_def, app_f = apply_residuals(self.face, res_f, return_cache=True)
        fused = fuse(body_def, face_def, self.body_head_weight, self.spec.attenuation, self.spec.head_threshold)
        posed, skin = skin_gaussians(fused, self.all_weights, R, t, return_state=True)
        return FrameState(pose, R, t, cache_b, cache_f, app_b, app_f, body_def, skin, posed,
                          np.concatenate([res_b, res_f]), face_camera)

    def render(self, pose: Pose, camera: Camera, background=(0.0, 0.0, 0.0)) -> RenderOutput:
        return rasterize(self.forward(pose, camera).posed, camera, background)

    # -- backward --------------------------------------------------------------

    def backward(self, state: FrameState, grads: GaussianGrads, grad_residuals: np.ndarray | None = None):
        """Gradients of every parameter from gradients on the posed Gaussians.

        ``grad_residuals`` (N, 22) adds direct gradients on the residuals (regularizers).
        """
        g = skin_backward(grads, state.skin)
        gb, gf = fuse_backward(g, state.body_deformed, self.body_head_weight, self.spec.attenuation,
                               self.spec.head_threshold)
        out = {}
        nb_ = len(self.body)
        for prefix, gx, app in (("body", gb, state.body_apply), ("face", gf, state.face_apply)):
            g_canon, g_res = apply_residuals_backward(gx, app)
            for a in ATTRS:
                out[f"{prefix}.{a}"] = getattr(g_canon, a)
            if prefix == "body":
                g_res_b = g_res
            else:
                g_res_f = g_res
        if grad_residuals is not None:
            g_res_b = g_res_b + grad_residuals[:nb_]
            g_res_f = g_res_f + grad_residuals[nb_:]
        gdec, _ = decode_body_backward(state.body_cache, self.body_decoder, g_res_b)
        out.update(gdec)
        gdec, _ = decode_face_backward(state.face_cache, self.face_decoders, g_res_f)
        out.update(gdec)
        return out

    def offsets(self, state: FrameState) -> np.ndarray:
        return state.residuals[:, POSITION]

    # -- persistence --------------------------------------------------------------

    def to_checkpoint(self, step: int = 0, meta: dict | None = None) -> Checkpoint:
        ck = Checkpoint(step=step)
        ck.put_set("body", self.body)
        ck.put_set("face", self.face)
        ck.arrays["body_weights"] = self.body_weights.copy()
        ck.arrays["face_weights"] = self.face_weights.copy()
        # a snapshot: later training must not write through into it
        for d in self.decoders():
            ck.arrays.update({k: v.copy() for k, v in d.arrays().items()})
        ck.meta = dict(meta or {})
        ck.meta["avatar_spec"] = asdict(self.spec)
        ck.meta["arch"] = {d.name: d.arch_hash for d in self.decoders()}
        return ck

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, template: SkinnedTemplate) -> "Avatar":
        spec = AvatarSpec(**ck.meta["avatar_spec"])
        body_dec = DecoderParams.init("body_dec", PE_DIM + CAM_DIM, RESIDUAL_DIM, spec.n_mlp, spec.cm,
                                      spec.activation, pose_in=3 * template.n_joints)
        face_dec = FaceParams.init(spec.n_mlp, spec.cm, spec.activation)
        for d in (body_dec, *face_dec.decoders()):
            check_architecture(d, ck.meta["arch"][d.name])
            d.load_arrays(ck.arrays)
        return cls(template, spec, ck.get_set("body"), ck.arrays["body_weights"], ck.get_set("face"),
                   ck.arrays["face_weights"], body_dec, face_dec)

    def render_full(self, pose: Pose, camera: Camera, background=(0.0, 0.0, 0.0)):
        """(full-image render, face-crop render, face crop camera) from one forward pass."""
        state = self.forward(pose, camera)
        return (rasterize(state.posed, camera, background),
                rasterize(state.posed, state.face_camera, background), state)
