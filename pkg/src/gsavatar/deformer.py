"""Per-pixel residual decoders for the body and face branches, residual application and fusion.

Residual channel layout (22 per pixel, same for both branches)::

    0:12   color    SH coefficient deltas, coefficient-major (k, rgb)
    12     opacity  pre-activation delta
    13:16  scale    log-scale delta
    16:19  rotation tangent vector, applied as q <- q * exp(dr)
    19:22  position canonical offset in meters
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .raster import GaussianGrads
from .rotations import quat_exp, quat_exp_vjp, quat_left_matrix, quat_multiply, quat_right_matrix
from .splat import GaussianSet, logit, sigmoid

N_FREQ = 4
POSE_DIM = 16
CAM_DIM = 7
PE_DIM = 3 * (1 + 2 * N_FREQ)

COLOR = slice(0, 12)
AUX = slice(12, 19)
OPACITY = 12
SCALE = slice(13, 16)
ROTATION = slice(16, 19)
POSITION = slice(19, 22)
RESIDUAL_DIM = 22

HEAD_THRESHOLD = 0.5
HEAD_ATTENUATION = 0.1

ACTIVATIONS = ("silu", "tanh", "identity")


# ---------------------------------------------------------------------------
# encodings


def positional_encoding(p: np.ndarray) -> np.ndarray:
    """[p, sin(2^k pi p), cos(2^k pi p)] for k = 0..N_FREQ-1."""
    p = np.asarray(p, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(N_FREQ)
    arg = p[:, None, :] * freqs[None, :, None]  # (N, F, 3)
    return np.concatenate([p, np.sin(arg).reshape(len(p), -1), np.cos(arg).reshape(len(p), -1)], axis=1)


def positional_encoding_vjp(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(p)
    freqs = np.pi * 2.0 ** np.arange(N_FREQ)
    arg = p[:, None, :] * freqs[None, :, None]
    gs = g[:, 3:3 + 3 * N_FREQ].reshape(n, N_FREQ, 3)
    gc = g[:, 3 + 3 * N_FREQ:].reshape(n, N_FREQ, 3)
    return g[:, :3] + np.sum((gs * np.cos(arg) - gc * np.sin(arg)) * freqs[None, :, None], axis=1)


def camera_embedding(camera: Camera, target) -> np.ndarray:
    """Unit ray from the camera to ``target`` plus intrinsics normalized by image size."""
    if camera.orthographic:
        d = camera.rotation[2].copy()
    else:
        d = np.asarray(target, dtype=np.float64) - camera.center
        d /= np.linalg.norm(d)
    return np.concatenate([d, [camera.fx / camera.width, camera.fy / camera.height,
                               camera.cx / camera.width, camera.cy / camera.height]])


# ---------------------------------------------------------------------------
# MLP


def _act(name, z):
    if name == "silu":
        return z * sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z):
    if name == "silu":
        s = sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


def param_count(in_dim: int, out_dim: int, n_mlp: int, cm: int, pose_in: int = 0) -> int:
    width = 32 * cm
    dims = [in_dim + (POSE_DIM if pose_in else 0)] + [width] * (n_mlp - 1) + [out_dim]
    n = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    return n + (POSE_DIM * pose_in if pose_in else 0)


@dataclass
class DecoderParams:
    """Fixed-architecture per-pixel MLP, optionally with a linear pose embedding.

    ``n_mlp`` counts linear layers; hidden width is ``32 * cm``. The last layer
    starts at zero so a fresh decoder outputs exactly zero residuals.
    """

    name: str
    in_dim: int
    out_dim: int
    n_mlp: int
    cm: int
    activation: str
    weights: list
    biases: list
    pose_in: int = 0
    pose_proj: np.ndarray | None = None

    @classmethod
    def init(cls, name, in_dim, out_dim, n_mlp=3, cm=1, activation="silu", pose_in=0,
             rng: np.random.Generator | None = None) -> "DecoderParams":
        if n_mlp < 1 or cm < 1:
            raise ValueError("n_mlp and cm must be >= 1")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        width = 32 * cm
        dims = [in_dim + (POSE_DIM if pose_in else 0)] + [width] * (n_mlp - 1) + [out_dim]
        ws, bs = [], []
        for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            if k == n_mlp - 1:
                ws.append(np.zeros((a, b)))
            else:
                ws.append(rng.normal(0.0, np.sqrt(2.0 / a), (a, b)))
            bs.append(np.zeros(b))
        proj = rng.normal(0.0, 1.0 / np.sqrt(pose_in), (pose_in, POSE_DIM)) if pose_in else None
        return cls(name, in_dim, out_dim, n_mlp, cm, activation, ws, bs, pose_in, proj)

    def architecture(self) -> dict:
        return {"name": self.name, "in": self.in_dim, "out": self.out_dim, "n_mlp": self.n_mlp,
                "cm": self.cm, "activation": self.activation, "pose_in": self.pose_in,
                "pose_dim": POSE_DIM if self.pose_in else 0, "n_freq": N_FREQ}

    @property
    def arch_hash(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.w{k}"] = w
            out[f"{self.name}.b{k}"] = b
        if self.pose_proj is not None:
            out[f"{self.name}.pose"] = self.pose_proj
        return out

    def load_arrays(self, arrays: dict) -> None:
        for k in range(self.n_mlp):
            self.weights[k] = np.array(arrays[f"{self.name}.w{k}"], dtype=np.float64)
            self.biases[k] = np.array(arrays[f"{self.name}.b{k}"], dtype=np.float64)
        if self.pose_in:
            self.pose_proj = np.array(arrays[f"{self.name}.pose"], dtype=np.float64)

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.name, self.in_dim, self.out_dim, self.n_mlp, self.cm, self.activation,
                             [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             self.pose_in, None if self.pose_proj is None else self.pose_proj.copy())

    # -- forward / backward ---------------------------------------------------

    def forward(self, x: np.ndarray, pose_vec: np.ndarray | None = None):
        """Apply to rows of ``x``; returns (output, cache)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"{self.name}: expected {self.in_dim} input channels, got {x.shape[1]}")
        if self.pose_in:
            emb = self.pose_proj.T @ np.asarray(pose_vec, dtype=np.float64)
            x = np.concatenate([x, np.broadcast_to(emb, (len(x), POSE_DIM))], axis=1)
        hs, zs = [x], []
        h = x
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            zs.append(z)
            h = z if k == self.n_mlp - 1 else _act(self.activation, z)
            hs.append(h)
        return h, (hs, zs, pose_vec)

    def backward(self, cache, grad_out: np.ndarray):
        """Returns (dict of parameter gradients keyed like ``arrays()``, gradient w.r.t. x)."""
        hs, zs, pose_vec = cache
        grads = {}
        g = grad_out
        for k in range(self.n_mlp - 1, -1, -1):
            if k != self.n_mlp - 1:
                g = g * _act_grad(self.activation, zs[k])
            grads[f"{self.name}.w{k}"] = hs[k].T @ g
            grads[f"{self.name}.b{k}"] = g.sum(axis=0)
            g = g @ self.weights[k].T
        if self.pose_in:
            g_emb = g[:, self.in_dim:].sum(axis=0)
            grads[f"{self.name}.pose"] = np.outer(pose_vec, g_emb)
            g = g[:, :self.in_dim]
        return grads, g


def check_architecture(params: DecoderParams, stored_hash: str) -> None:
    if params.arch_hash != stored_hash:
        raise ValueError(f"decoder {params.name}: architecture hash {params.arch_hash} "
                         f"does not match stored {stored_hash}")


# ---------------------------------------------------------------------------
# residual maps


@dataclass
class ResidualAttributeMap:
    side: str
    values: np.ndarray  # (H, W, 22)
    coverage: np.ndarray

    @classmethod
    def from_points(cls, side, values: np.ndarray, coverage: np.ndarray) -> "ResidualAttributeMap":
        grid = np.zeros(coverage.shape + (RESIDUAL_DIM,))
        grid[coverage] = values
        return cls(side, grid, coverage)

    def points(self) -> np.ndarray:
        return self.values[self.coverage]

    @property
    def color(self):
        return self.values[..., COLOR]

    @property
    def auxiliary(self):
        return self.values[..., AUX]

    @property
    def position(self):
        return self.values[..., POSITION]


def _split(values: np.ndarray, maps) -> list[ResidualAttributeMap]:
    out, start = [], 0
    for pm in maps:
        n = pm.n_covered
        out.append(ResidualAttributeMap.from_points(pm.side.value, values[start:start + n], pm.coverage))
        start += n
    return out


def _check_pair(maps, expected=None):
    front, back = maps
    if front.resolution != back.resolution:
        raise ValueError(f"front map {front.resolution} and back map {back.resolution} differ in resolution")
    if expected is not None and tuple(front.resolution) != tuple(expected):
        raise ValueError(f"positional maps are {front.resolution}, decoder expects {tuple(expected)}")
    for pm in maps:
        if pm.posed is None:
            raise ValueError("decoder input maps must carry posed positions")


# -- body branch


@dataclass
class BodyCache:
    points: np.ndarray
    mlp: tuple


def decode_body_points(points: np.ndarray, pose_vec: np.ndarray, cam_emb: np.ndarray,
                       params: DecoderParams):
    """Residuals (N, 22) for posed surface points; returns (residuals, cache)."""
    x = np.concatenate([positional_encoding(points), np.broadcast_to(cam_emb, (len(points), CAM_DIM))], axis=1)
    out, cache = params.forward(x, pose_vec)
    return out, BodyCache(points, cache)


def decode_body_backward(cache: BodyCache, params: DecoderParams, grad_res: np.ndarray):
    """Parameter gradients and the gradient w.r.t. the input points."""
    grads, gx = params.backward(cache.mlp, grad_res)
    return grads, positional_encoding_vjp(cache.points, gx[:, :PE_DIM])


def decode_body(posmaps, camera: Camera, pose_vec, params: DecoderParams, head_center,
                expected_resolution=None) -> list[ResidualAttributeMap]:
    """Residual maps for a (front, back) pair of posed positional maps."""
    _check_pair(posmaps, expected_resolution)
    pts = np.concatenate([pm.posed[pm.coverage] for pm in posmaps])
    res, _ = decode_body_points(pts, pose_vec, camera_embedding(camera, head_center), params)
    return _split(res, posmaps)


# -- face branch


@dataclass
class FaceParams:
    positional: DecoderParams
    color: DecoderParams
    auxiliary: DecoderParams

    @classmethod
    def init(cls, n_mlp=3, cm=1, activation="silu", rng=None) -> "FaceParams":
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(DecoderParams.init("face_pos", PE_DIM, 3, n_mlp, cm, activation, rng=rng),
                   DecoderParams.init("face_color", PE_DIM + CAM_DIM, 12, n_mlp, cm, activation, rng=rng),
                   DecoderParams.init("face_aux", PE_DIM, 7, n_mlp, cm, activation, rng=rng))

    def decoders(self):
        return (self.positional, self.color, self.auxiliary)


@dataclass
class FaceCache:
    points: np.ndarray
    deformed: np.ndarray
    pos: tuple
    color: tuple
    aux: tuple


def decode_face_points(points: np.ndarray, cam_emb: np.ndarray, params: FaceParams):
    """Face residuals (N, 22) laid out as color || auxiliary || position offset.

    The positional decoder deforms the input, P_hat = P + dP; the color decoder
    sees PE(P_hat) and the camera, the auxiliary decoder only PE(P_hat).
    """
    d, c_pos = params.positional.forward(positional_encoding(points))
    deformed = points + d
    pe = positional_encoding(deformed)
    col, c_col = params.color.forward(np.concatenate([pe, np.broadcast_to(cam_emb, (len(points), CAM_DIM))], axis=1))
    aux, c_aux = params.auxiliary.forward(pe)
    out = np.concatenate([col, aux, deformed - points], axis=1)
    return out, FaceCache(points, deformed, c_pos, c_col, c_aux)


def decode_face_backward(cache: FaceCache, params: FaceParams, grad_res: np.ndarray):
    grads = {}
    g_col, gx_col = params.color.backward(cache.color, grad_res[:, COLOR])
    g_aux, gx_aux = params.auxiliary.backward(cache.aux, grad_res[:, AUX])
    grads.update(g_col)
    grads.update(g_aux)
    g_def = positional_encoding_vjp(cache.deformed, gx_col[:, :PE_DIM] + gx_aux)
    g_def = g_def + grad_res[:, POSITION]
    g_pos, gx_pos = params.positional.backward(cache.pos, g_def)
    grads.update(g_pos)
    # P_hat - P cancels the identity path, only dP depends on P through the decoder
    g_points = positional_encoding_vjp(cache.points, gx_pos) + g_def - grad_res[:, POSITION]
    return grads, g_points


def decode_face(posmaps, camera_new: Camera, params: FaceParams, head_center,
                expected_resolution=None) -> list[ResidualAttributeMap]:
    """Face residual maps for (front, back) posed head maps, conditioned on the crop camera."""
    _check_pair(posmaps, expected_resolution)
    pts = np.concatenate([pm.posed[pm.coverage] for pm in posmaps])
    res, _ = decode_face_points(pts, camera_embedding(camera_new, head_center), params)
    return _split(res, posmaps)


# ---------------------------------------------------------------------------
# applying residuals and fusing


@dataclass
class ApplyCache:
    canonical_quats: np.ndarray
    rot_delta: np.ndarray
    exp_delta: np.ndarray


def residual_points(residuals) -> np.ndarray:
    if isinstance(residuals, np.ndarray):
        return residuals
    return np.concatenate([r.points() for r in residuals])


def apply_residuals(canonical: GaussianSet, residuals, return_cache: bool = False):
    """Add residuals to canonical attributes in pre-activation space."""
    res = residual_points(residuals)
    n = len(canonical)
    if res.shape != (n, RESIDUAL_DIM):
        raise ValueError(f"residuals cover {res.shape[0]} primitives, canonical set has {n}")
    e = quat_exp(res[:, ROTATION])
    out = GaussianSet(
        canonical.means + res[:, POSITION],
        canonical.log_scales + res[:, SCALE],
        quat_multiply(canonical.quats, e),
        canonical.opacity_logits + res[:, OPACITY],
        canonical.sh + res[:, COLOR].reshape(n, -1, 3),
        canonical.tags.copy(),
    )
    if return_cache:
        return out, ApplyCache(canonical.quats, res[:, ROTATION], e)
    return out


def apply_residuals_backward(grads: GaussianGrads, cache: ApplyCache):
    """Returns (gradient w.r.t. canonical attributes, gradient w.r.t. residuals (N, 22))."""
    n = len(grads.means)
    g_res = np.empty((n, RESIDUAL_DIM))
    g_res[:, POSITION] = grads.means
    g_res[:, SCALE] = grads.log_scales
    g_res[:, OPACITY] = grads.opacity_logits
    g_res[:, COLOR] = grads.sh.reshape(n, -1)
    # q = q_c * e = L(q_c) e = M(e) q_c
    g_e = np.einsum("nab,na->nb", quat_left_matrix(cache.canonical_quats), grads.quats)
    g_qc = np.einsum("nab,na->nb", quat_right_matrix(cache.exp_delta), grads.quats)
    g_res[:, ROTATION] = quat_exp_vjp(cache.rot_delta, g_e)
    g_canon = GaussianGrads(grads.means.copy(), grads.log_scales.copy(), g_qc,
                            grads.opacity_logits.copy(), grads.sh.copy())
    return g_canon, g_res


def attenuation_mask(head_weights: np.ndarray, threshold: float = HEAD_THRESHOLD) -> np.ndarray:
    return np.asarray(head_weights) > threshold


def fuse(body: GaussianSet, face: GaussianSet, head_weights: np.ndarray | None = None,
         factor: float = HEAD_ATTENUATION, threshold: float = HEAD_THRESHOLD) -> GaussianSet:
    """Concatenate body then face; body primitives bound to the head get opacity scaled by ``factor``."""
    if head_weights is None or factor == 1.0:
        return GaussianSet.concat([body, face])
    mask = attenuation_mask(head_weights, threshold)
    op = body.opacity_logits.copy()
    op[mask] = logit(factor * sigmoid(op[mask]))
    return GaussianSet.concat([body.with_(opacity_logits=op), face])


def fuse_backward(grads: GaussianGrads, body: GaussianSet, head_weights: np.ndarray | None = None,
                  factor: float = HEAD_ATTENUATION, threshold: float = HEAD_THRESHOLD):
    """Split fused-set gradients into (body, face) gradients."""
    nb_ = len(body)
    gb = grads.subset(slice(0, nb_))
    gf = grads.subset(slice(nb_, None))
    if head_weights is not None and factor != 1.0:
        mask = attenuation_mask(head_weights, threshold)
        s = sigmoid(body.opacity_logits[mask])
        op = gb.opacity_logits.copy()
        op[mask] *= (1.0 - s) / (1.0 - factor * s)
        gb = GaussianGrads(gb.means, gb.log_scales, gb.quats, op, gb.sh)
    return gb, gf
