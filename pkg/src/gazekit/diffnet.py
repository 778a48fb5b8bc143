"""Gaze regressor with exact reverse-mode gradients in plain numpy.

Three small tanh MLPs wired as in the normalized-gaze architecture:

* ``eye`` net: one shared network embeds each eye's 33 normalized
  landmark features into E values; the left eye was normalized in a
  mirrored frame, so the same weights serve both.
* ``dist`` head: predicts the multiplicative distance correction c from
  symmetric combinations of the two eye embeddings (plus face features,
  depending on the mode).  The symmetric encoding makes c exactly
  invariant under interocular mirroring, which matches the physics.
  Personal calibration parameters are deliberately not an input.
* ``gaze`` head: per eye, maps [embedding, personal p half, c] to a 2D
  origin offset and 2D direction in the eye's normalized crop.

The loss is the mean miss distance of the assembled 3D rays plus hinge
regularizers, differentiated exactly through the ray assembly
(back-projection, orthonormal basis, denormalization, point-to-line
distance) with respect to both the weights and the calibration vectors.
Everything is float64 and deterministic; gradients are verified against
central finite differences in the test suite.

Per-eye batching convention: arrays of shape (2B, ...) stack all right
eyes first, then all left eyes; flat index i maps to sample i % B.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import geometry as geo
from . import eyesim as es
from . import pipeline as pl

MODEL_FORMAT = "gazekit-model/1"
DIST_MODES = ("none", "per-eye", "eyes-only", "eyes-and-face")

_C_LOG_RANGE = math.log(1.5)
_EYE_CC = geo.crop_center(*geo.EYE_CROP)
_CROP_HI = np.array([geo.EYE_CROP[0] - 1.0, geo.EYE_CROP[1] - 1.0])


class ModelError(ValueError):
    """Model containers that cannot be loaded or do not match."""


class NumericalError(RuntimeError):
    """Loss or gradients became non-finite."""


@dataclass(frozen=True)
class ArchConfig:
    n_calib: int = 3
    eye_hidden: int = 64
    eye_out: int = 16
    head_hidden: int = 64
    distance_mode: str = "eyes-and-face"
    eye_in: int = pl.EYE_FEATURE_DIM
    face_in: int = pl.FACE_FEATURE_DIM

    def __post_init__(self):
        if self.n_calib < 0:
            raise ModelError("n_calib must be nonnegative")
        if min(self.eye_hidden, self.eye_out, self.head_hidden) <= 0:
            raise ModelError("network widths must be positive")
        if self.distance_mode not in DIST_MODES:
            raise ModelError(
                f"distance_mode {self.distance_mode!r} not one of {DIST_MODES}"
            )

    @property
    def p_dim(self) -> int:
        return 2 * self.n_calib

    def dist_input_dim(self) -> int:
        if self.distance_mode == "per-eye":
            return self.eye_out
        if self.distance_mode == "eyes-only":
            return 2 * self.eye_out
        if self.distance_mode == "eyes-and-face":
            return 2 * self.eye_out + self.face_in
        return 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown architecture fields: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(seed: int, arch: ArchConfig) -> dict:
    """Glorot-uniform hidden layers, zero biases, zero final layers.

    Zero final layers put the initial operating point at the crop center
    with zero 2D direction and c exactly 1, so the first forward pass
    predicts the rough-distance ray straight at the camera.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    p: dict[str, np.ndarray] = {}

    def mlp(prefix, n_in, n_hidden, n_out, zero_final):
        p[f"{prefix}.W0"] = _glorot(rng, n_in, n_hidden)
        p[f"{prefix}.b0"] = np.zeros(n_hidden)
        p[f"{prefix}.W1"] = _glorot(rng, n_hidden, n_hidden)
        p[f"{prefix}.b1"] = np.zeros(n_hidden)
        if zero_final:
            p[f"{prefix}.W2"] = np.zeros((n_hidden, n_out))
        else:
            p[f"{prefix}.W2"] = _glorot(rng, n_hidden, n_out)
        p[f"{prefix}.b2"] = np.zeros(n_out)

    mlp("eye", arch.eye_in, arch.eye_hidden, arch.eye_out, zero_final=False)
    mlp("gaze", arch.eye_out + arch.n_calib + 1, arch.head_hidden, 4, zero_final=True)
    if arch.distance_mode != "none":
        mlp("dist", arch.dist_input_dim(), arch.head_hidden, 1, zero_final=True)
    return p


def _mlp_forward(params, prefix, x):
    h0 = np.tanh(x @ params[f"{prefix}.W0"] + params[f"{prefix}.b0"])
    h1 = np.tanh(h0 @ params[f"{prefix}.W1"] + params[f"{prefix}.b1"])
    out = h1 @ params[f"{prefix}.W2"] + params[f"{prefix}.b2"]
    return out, (x, h0, h1)


def _mlp_backward(params, prefix, cache, g_out, grads):
    """Chain gradients through one MLP; ``grads=None`` skips the weight
    gradients (used when only input gradients are needed)."""
    x, h0, h1 = cache
    g_h1 = g_out @ params[f"{prefix}.W2"].T
    g_p1 = g_h1 * (1.0 - h1 * h1)
    g_h0 = g_p1 @ params[f"{prefix}.W1"].T
    g_p0 = g_h0 * (1.0 - h0 * h0)
    if grads is not None:
        grads[f"{prefix}.W2"] = grads.get(f"{prefix}.W2", 0.0) + h1.T @ g_out
        grads[f"{prefix}.b2"] = grads.get(f"{prefix}.b2", 0.0) + g_out.sum(axis=0)
        grads[f"{prefix}.W1"] = grads.get(f"{prefix}.W1", 0.0) + h0.T @ g_p1
        grads[f"{prefix}.b1"] = grads.get(f"{prefix}.b1", 0.0) + g_p1.sum(axis=0)
        grads[f"{prefix}.W0"] = grads.get(f"{prefix}.W0", 0.0) + x.T @ g_p0
        grads[f"{prefix}.b0"] = grads.get(f"{prefix}.b0", 0.0) + g_p0.sum(axis=0)
    return g_p0 @ params[f"{prefix}.W0"].T


def _dist_encode(arch: ArchConfig, feat_r, feat_l, face_x):
    if arch.distance_mode == "per-eye":
        return np.concatenate([feat_r, feat_l], axis=0)  # (2B, E)
    parts = [feat_r + feat_l, (feat_r - feat_l) ** 2]
    if arch.distance_mode == "eyes-and-face":
        parts.append(face_x)
    return np.concatenate(parts, axis=1)  # (B, 2E [+face])


def _dist_encode_backward(arch: ArchConfig, g_in, feat_r, feat_l, batch):
    """Route distance-head input gradients back to the eye embeddings."""
    if arch.distance_mode == "per-eye":
        return g_in[:batch], g_in[batch:]
    e = feat_r.shape[1]
    g_sum = g_in[:, :e]
    g_sq = g_in[:, e : 2 * e]
    diff = feat_r - feat_l
    g_r = g_sum + 2.0 * g_sq * diff
    g_l = g_sum - 2.0 * g_sq * diff
    return g_r, g_l


@dataclass
class NetworkOutput:
    """Batched forward results; eye axis 0 = right, 1 = left."""

    o2d: np.ndarray  # (B, 2, 2) crop px
    d2d: np.ndarray  # (B, 2, 2)
    c: np.ndarray  # (B, 2); both columns equal when c is shared
    origin: np.ndarray  # (B, 2, 3) real camera frame, mm
    direction: np.ndarray  # (B, 2, 3) real camera frame


def _as_p_rows(p, batch, arch) -> tuple[np.ndarray, bool]:
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        if p.shape != (arch.p_dim,):
            raise ModelError(f"p has shape {p.shape}, expected ({arch.p_dim},)")
        return np.broadcast_to(p, (batch, arch.p_dim)), True
    if p.shape != (batch, arch.p_dim):
        raise ModelError(f"p has shape {p.shape}, expected ({batch}, {arch.p_dim})")
    return p, False


def _net_forward(params, arch, eye_x, face_x, p_rows):
    """Heads up to (o2d, d2d, c); returns flat (2B,...) arrays and caches."""
    batch = eye_x.shape[0]
    n = arch.n_calib
    feat_flat, eye_cache = _mlp_forward(
        params, "eye", np.concatenate([eye_x[:, es.RIGHT], eye_x[:, es.LEFT]], axis=0)
    )
    feat_r, feat_l = feat_flat[:batch], feat_flat[batch:]

    if arch.distance_mode == "none":
        a = None
        dist_cache = None
        c_flat = np.ones(2 * batch)
    else:
        d_in = _dist_encode(arch, feat_r, feat_l, face_x)
        a, dist_cache = _mlp_forward(params, "dist", d_in)
        a = a[:, 0]
        ta = np.tanh(a)
        c_head = np.exp(ta * _C_LOG_RANGE)
        if arch.distance_mode == "per-eye":
            c_flat = c_head  # already (2B,)
        else:
            c_flat = np.concatenate([c_head, c_head])

    p_flat = np.concatenate([p_rows[:, :n], p_rows[:, n:]], axis=0)
    g_in = np.concatenate([feat_flat, p_flat, c_flat[:, None]], axis=1)
    head_out, gaze_cache = _mlp_forward(params, "gaze", g_in)
    o2_flat = head_out[:, 0:2] + _EYE_CC
    d2_flat = head_out[:, 2:4]
    caches = {
        "eye": eye_cache,
        "dist": dist_cache,
        "gaze": gaze_cache,
        "a": a,
        "feat_r": feat_r,
        "feat_l": feat_l,
        "c_flat": c_flat,
        "batch": batch,
    }
    return o2_flat, d2_flat, c_flat, caches


def _net_backward(params, arch, caches, g_o2, g_d2, g_c_flat, grads):
    """Backprop the heads; returns per-flat-row gradient of p halves (2B, N).

    ``grads=None`` requests only the calibration gradient: the personal
    vector enters nothing but the gaze-head input, so the distance and
    eye-encoder backward passes are skipped entirely.
    """
    batch = caches["batch"]
    g_head = np.concatenate([g_o2, g_d2], axis=1)
    g_gin = _mlp_backward(params, "gaze", caches["gaze"], g_head, grads)
    e, n = arch.eye_out, arch.n_calib
    g_p_flat = g_gin[:, e : e + n]
    if grads is None:
        return g_p_flat
    g_feat_flat = g_gin[:, :e].copy()
    g_c_flat = g_c_flat + g_gin[:, e + n]

    if arch.distance_mode != "none":
        a = caches["a"]
        ta = np.tanh(a)
        c_head = np.exp(ta * _C_LOG_RANGE)
        if arch.distance_mode == "per-eye":
            g_a = g_c_flat * c_head * _C_LOG_RANGE * (1.0 - ta * ta)
        else:
            g_c_head = g_c_flat[:batch] + g_c_flat[batch:]
            g_a = g_c_head * c_head * _C_LOG_RANGE * (1.0 - ta * ta)
        g_din = _mlp_backward(params, "dist", caches["dist"], g_a[:, None], grads)
        g_r, g_l = _dist_encode_backward(
            arch, g_din, caches["feat_r"], caches["feat_l"], batch
        )
        g_feat_flat[:batch] += g_r
        g_feat_flat[batch:] += g_l

    _mlp_backward(params, "eye", caches["eye"], g_feat_flat, grads)
    return g_p_flat


# --- differentiable ray tail -------------------------------------------------
#
# All arrays are flat (2B, ...).  The chain: rho = c * rho_rough; v = pixel
# ray of o2D in the per-eye normalized camera; origin = rho * v/|v|; basis
# z = -v/|v|, x = unit(u2, 0, -u0), y = z cross x; d3 = X*d2 + z; miss is
# measured against the target rotated into the same normalized frame.
# Normalized-frame origins always have positive z (v_z = 1), so the basis
# is never degenerate and needs no sign flip.


def _cross(a, b):
    return np.cross(a, b)


def _tail_forward(o2, d2, c, rho_rough, f_n, t_norm):
    rho = c * rho_rough
    v = np.empty((o2.shape[0], 3))
    v[:, 0] = (o2[:, 0] - _EYE_CC[0]) / f_n
    v[:, 1] = (o2[:, 1] - _EYE_CC[1]) / f_n
    v[:, 2] = 1.0
    nv = np.linalg.norm(v, axis=1)
    u = v / nv[:, None]
    o3 = rho[:, None] * u
    z = -u
    xr = np.stack([u[:, 2], np.zeros_like(u[:, 0]), -u[:, 0]], axis=1)
    nx = np.linalg.norm(xr, axis=1)
    x = xr / nx[:, None]
    y = _cross(z, x)
    d3 = x * d2[:, 0:1] + y * d2[:, 1:2] + z
    am = t_norm - o3
    w = _cross(am, d3)
    nw = np.linalg.norm(w, axis=1)
    nd = np.linalg.norm(d3, axis=1)
    miss = nw / nd
    cache = (o2, d2, c, rho_rough, f_n, t_norm, rho, v, nv, u, o3, z, xr, nx,
             x, y, d3, am, w, nw, nd)
    return miss, cache


def _tail_backward(cache, g_miss):
    (o2, d2, c, rho_rough, f_n, t_norm, rho, v, nv, u, o3, z, xr, nx,
     x, y, d3, am, w, nw, nd) = cache
    safe_nw = np.maximum(nw, 1e-12)
    gw = (g_miss / (safe_nw * nd))[:, None] * w
    g_d3 = _cross(gw, am) - (g_miss * nw / (nd * nd * nd))[:, None] * d3
    g_am = _cross(d3, gw)
    g_o3 = -g_am

    g_x = g_d3 * d2[:, 0:1]
    g_y = g_d3 * d2[:, 1:2]
    g_z = g_d3.copy()
    g_d2 = np.stack([np.sum(g_d3 * x, axis=1), np.sum(g_d3 * y, axis=1)], axis=1)

    # y = z cross x
    g_z += _cross(x, g_y)
    g_x += _cross(g_y, z)

    # x = xr / |xr|
    g_xr = (g_x - x * np.sum(x * g_x, axis=1)[:, None]) / nx[:, None]

    # xr = (u2, 0, -u0); z = -u; o3 = rho * u
    g_u = -g_z
    g_u[:, 2] += g_xr[:, 0]
    g_u[:, 0] -= g_xr[:, 2]
    g_rho = np.sum(u * g_o3, axis=1)
    g_u += rho[:, None] * g_o3

    # u = v / |v|
    g_v = (g_u - u * np.sum(u * g_u, axis=1)[:, None]) / nv[:, None]

    g_o2 = np.stack([g_v[:, 0] / f_n, g_v[:, 1] / f_n], axis=1)
    g_c = g_rho * rho_rough
    return g_o2, g_d2, g_c


@dataclass(frozen=True)
class HingeConfig:
    lambda_origin: float = 1e-3
    lambda_c: float = 1e3
    lambda_iris: float = 1e-2
    c_low: float = 0.6
    c_high: float = 1.4


def hinge_terms(o2d, c, crop_w, crop_h, weights: HingeConfig) -> float:
    """Scalar hinge penalty for one eye's outputs (reference semantics)."""
    o = np.asarray(o2d, dtype=float)
    hi = np.array([crop_w - 1.0, crop_h - 1.0])
    over = np.maximum(o - hi, 0.0)
    under = np.maximum(-o, 0.0)
    h_o = weights.lambda_origin * float(np.sum(over**2 + under**2))
    h_c = weights.lambda_c * (
        max(0.0, c - weights.c_high) ** 2 + max(0.0, weights.c_low - c) ** 2
    )
    return h_o + h_c


def _rot_targets(rot, target):
    """Rotate per-sample targets into both per-eye normalized frames, flat."""
    t_r = np.einsum("bij,bj->bi", rot[:, es.RIGHT], target)
    t_l = np.einsum("bij,bj->bi", rot[:, es.LEFT], target)
    return np.concatenate([t_r, t_l], axis=0)


def loss_and_grad(
    params: dict,
    arch: ArchConfig,
    nb: pl.NormalizedBatch,
    p,
    hinges: HingeConfig = HingeConfig(),
    aux_mask: np.ndarray | None = None,
    want_theta: bool = True,
):
    """Mean per-(sample, eye) loss and exact gradients.

    ``p`` is either one shared vector of length 2N (calibration) or per
    sample rows (B, 2N) gathered from the population matrix (training).
    Returns (loss, grads dict matching params, g_p matching p's shape).
    ``want_theta=False`` returns an empty grads dict and computes only
    g_p, sparing the weight-gradient matmuls during calibration.
    """
    eye_x = nb.eye_x
    batch = eye_x.shape[0]
    if batch == 0:
        raise ModelError("empty batch")
    if not (np.isfinite(eye_x).all() and np.isfinite(nb.face_x).all()):
        raise NumericalError("non-finite feature inputs")
    p_rows, shared = _as_p_rows(p, batch, arch)

    o2, d2, c_flat, caches = _net_forward(params, arch, eye_x, nb.face_x, p_rows)
    rho_flat = np.tile(nb.rho_rough, 2)
    f_flat = np.concatenate([nb.f_n[:, es.RIGHT], nb.f_n[:, es.LEFT]])
    t_flat = _rot_targets(nb.rot, nb.target)

    miss, cache = _tail_forward(o2, d2, c_flat, rho_flat, f_flat, t_flat)
    if not np.isfinite(miss).all():
        bad = int(np.argmin(np.isfinite(miss)))
        raise NumericalError(
            f"non-finite miss distance at sample {bad % batch}, "
            f"{'right' if bad < batch else 'left'} eye"
        )

    n_flat = 2 * batch
    inv = 1.0 / n_flat

    # Hinge on the 2D origin against the crop bounds.
    over = np.maximum(o2 - _CROP_HI, 0.0)
    under = np.maximum(-o2, 0.0)
    h_origin = hinges.lambda_origin * np.sum(over**2 + under**2, axis=1)
    # Hinge on the distance correction.
    c_over = np.maximum(c_flat - hinges.c_high, 0.0)
    c_under = np.maximum(hinges.c_low - c_flat, 0.0)
    h_c = hinges.lambda_c * (c_over**2 + c_under**2)

    # Sparse iris anchor: pull o2D toward the warped iris centroid.
    if aux_mask is not None:
        mask_flat = np.tile(np.asarray(aux_mask, dtype=float), 2)
        ic_flat = np.concatenate(
            [nb.iris_center[:, es.RIGHT], nb.iris_center[:, es.LEFT]], axis=0
        )
        diff_ic = o2 - ic_flat
        h_iris = hinges.lambda_iris * mask_flat * np.sum(diff_ic**2, axis=1)
    else:
        mask_flat = None
        h_iris = 0.0

    loss = float(np.mean(miss + h_origin + h_c + h_iris))

    # Backward.
    grads: dict[str, np.ndarray] = {}
    g_miss = np.full(n_flat, inv)
    g_o2, g_d2, g_c = _tail_backward(cache, g_miss)
    g_o2 += inv * hinges.lambda_origin * (2.0 * over - 2.0 * under)
    g_c += inv * hinges.lambda_c * (2.0 * c_over - 2.0 * c_under)
    if aux_mask is not None:
        g_o2 += inv * hinges.lambda_iris * mask_flat[:, None] * 2.0 * diff_ic

    g_p_flat = _net_backward(
        params, arch, caches, g_o2, g_d2, g_c, grads if want_theta else None
    )

    if arch.n_calib == 0:
        g_p = np.zeros(0) if shared else np.zeros((batch, 0))
    else:
        g_p_rows = np.concatenate([g_p_flat[:batch], g_p_flat[batch:]], axis=1)
        g_p = g_p_rows.sum(axis=0) if shared else g_p_rows

    for k in grads:
        if not np.isfinite(grads[k]).all():
            raise NumericalError(f"non-finite gradient for {k}")
    return loss, grads, g_p


def forward(
    params: dict,
    arch: ArchConfig,
    nb: pl.NormalizedBatch,
    p,
) -> NetworkOutput:
    """Pure batched inference: network outputs plus assembled real rays."""
    batch = nb.eye_x.shape[0]
    if not (np.isfinite(nb.eye_x).all() and np.isfinite(nb.face_x).all()):
        raise NumericalError("non-finite feature inputs")
    p_rows, _ = _as_p_rows(p, batch, arch)
    o2, d2, c_flat, _ = _net_forward(params, arch, nb.eye_x, nb.face_x, p_rows)

    rho_flat = np.tile(nb.rho_rough, 2)
    f_flat = np.concatenate([nb.f_n[:, es.RIGHT], nb.f_n[:, es.LEFT]])
    rho = c_flat * rho_flat
    v = np.stack(
        [
            (o2[:, 0] - _EYE_CC[0]) / f_flat,
            (o2[:, 1] - _EYE_CC[1]) / f_flat,
            np.ones(2 * batch),
        ],
        axis=1,
    )
    u = v / np.linalg.norm(v, axis=1)[:, None]
    o3 = rho[:, None] * u
    z = -u
    xr = np.stack([u[:, 2], np.zeros_like(u[:, 0]), -u[:, 0]], axis=1)
    x = xr / np.linalg.norm(xr, axis=1)[:, None]
    y = np.cross(z, x)
    d3 = x * d2[:, 0:1] + y * d2[:, 1:2] + z

    rot_flat = np.concatenate([nb.rot[:, es.RIGHT], nb.rot[:, es.LEFT]], axis=0)
    o_real = np.einsum("bji,bj->bi", rot_flat, o3)
    d_real = np.einsum("bji,bj->bi", rot_flat, d3)

    def split(a):
        return np.stack([a[:batch], a[batch:]], axis=1)

    return NetworkOutput(
        o2d=split(o2),
        d2d=split(d2),
        c=split(c_flat),
        origin=split(o_real),
        direction=split(d_real),
    )


# --- persistence -------------------------------------------------------------


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode()}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype="<f8").copy()
    return a.reshape(d["shape"])


def save_params(path, params: dict, arch: ArchConfig, mean_calibration=None) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "arch": arch.to_dict(),
        "arch_hash": arch.hash(),
        "weights": {k: _encode_array(v) for k, v in sorted(params.items())},
        "mean_calibration": (
            None if mean_calibration is None else [float(x) for x in mean_calibration]
        ),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_params(path, expected_arch: ArchConfig | None = None):
    """Returns (params, arch, mean_calibration or None)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelError(f"{path}: corrupt model file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelError(
            f"{path}: format {doc.get('format')!r} is not {MODEL_FORMAT!r}"
            if isinstance(doc, dict)
            else f"{path}: corrupt model file"
        )
    try:
        arch = ArchConfig.from_dict(doc["arch"])
        stored_hash = doc["arch_hash"]
        params = {k: _decode_array(v) for k, v in doc["weights"].items()}
        mc = doc.get("mean_calibration")
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"{path}: corrupt model file: {exc}") from exc
    if stored_hash != arch.hash():
        raise ModelError(
            f"{path}: architecture hash mismatch: stored {stored_hash}, "
            f"recomputed {arch.hash()}"
        )
    if expected_arch is not None and expected_arch.hash() != arch.hash():
        raise ModelError(
            f"{path}: incompatible architecture: file {arch.hash()}, "
            f"expected {expected_arch.hash()}"
        )
    mean_calibration = None if mc is None else np.asarray(mc, dtype=float)
    return params, arch, mean_calibration


# --- finite-difference gradient verification ---------------------------------


def gradient_check(
    params: dict,
    arch: ArchConfig,
    nb: pl.NormalizedBatch,
    p,
    hinges: HingeConfig = HingeConfig(),
    aux_mask=None,
    h: float = 1e-5,
    floor: float = 1e-3,
) -> float:
    """Worst relative error between analytic and central-difference grads.

    ``floor`` guards the denominator for near-zero coordinates, where the
    finite difference itself is dominated by cancellation noise (the loss
    is O(10) mm, so coordinates below ~1e-3 carry no signal at h=1e-5).
    """
    _, grads, g_p = loss_and_grad(params, arch, nb, p, hinges, aux_mask)

    def f(pp, pv):
        val, _, _ = loss_and_grad(pp, arch, nb, pv, hinges, aux_mask)
        return val

    worst = 0.0
    for key in sorted(grads):
        g = np.atleast_1d(np.asarray(grads[key], dtype=float))
        flat_param = params[key].ravel()
        g_flat = g.ravel()
        for i in range(flat_param.size):
            orig = flat_param[i]
            flat_param[i] = orig + h
            up = f(params, p)
            flat_param[i] = orig - h
            dn = f(params, p)
            flat_param[i] = orig
            fd = (up - dn) / (2.0 * h)
            rel = abs(g_flat[i] - fd) / max(abs(g_flat[i]), abs(fd), floor)
            worst = max(worst, rel)

    p_arr = np.asarray(p, dtype=float)
    if p_arr.size:
        g_p_flat = np.asarray(g_p, dtype=float).ravel()
        p_flat = p_arr.ravel()
        for i in range(p_flat.size):
            orig = p_flat[i]
            p_flat[i] = orig + h
            up = f(params, p_arr)
            p_flat[i] = orig - h
            dn = f(params, p_arr)
            p_flat[i] = orig
            fd = (up - dn) / (2.0 * h)
            rel = abs(g_p_flat[i] - fd) / max(abs(g_p_flat[i]), abs(fd), floor)
            worst = max(worst, rel)
    return worst
