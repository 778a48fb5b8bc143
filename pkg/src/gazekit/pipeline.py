"""Vectorized sample normalization: datasets to network-ready arrays.

Bridges the scalar geometry routines and the regressor.  A loaded dataset
becomes a columnar :class:`DatasetArrays`; :func:`normalize_batch` then
builds, for every sample at once, the per-eye conversion rotations,
normalized cameras, warped landmark features, face features and rough
distances.  Re-normalization with jittered detections is a single call
with a ``det`` override, which the trainer uses every epoch.

Feature layout (all crop coordinates centered and divided by the crop
height, so values are O(1)):

* per-eye vector, 33 dims: pupil (2), glint (2, zeroed when absent),
  glint flag (1), iris ring (16), lid points (12);
* face vector, 7 dims: smooth mirror-invariant combinations of the warped
  detections and nose plus the log interocular scale (see
  ``face_features``).  Mirror invariance keeps the shared distance head
  indifferent to scene handedness, which matches the physics: a mirrored
  scene is at the same distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import eyesim as es

EYE_FEATURE_DIM = 33
FACE_FEATURE_DIM = 7

_EYE_CC = geo.crop_center(*geo.EYE_CROP)
_FACE_CC = geo.crop_center(*geo.FACE_CROP)
_EYE_SCALE = float(geo.EYE_CROP[1])
_FACE_SCALE = float(geo.FACE_CROP[1])


class PipelineError(ValueError):
    pass


@dataclass
class DatasetArrays:
    """Columnar dataset: index 0 of every eye axis is the right eye."""

    cam: geo.Camera
    person_ids: np.ndarray  # (S,) original ids
    person_index: np.ndarray  # (S,) dense 0..M-1
    unique_persons: np.ndarray  # (M,) original ids, sorted
    det: np.ndarray  # (S, 2, 2)
    pupil: np.ndarray  # (S, 2, 2)
    glint: np.ndarray  # (S, 2, 2)
    glint_present: np.ndarray  # (S, 2) bool
    iris: np.ndarray  # (S, 2, 8, 2)
    lid: np.ndarray  # (S, 2, 6, 2)
    nose: np.ndarray  # (S, 2)
    target: np.ndarray  # (S, 3)
    truth_eyes: np.ndarray  # (S, 2, 3)
    person_fovea: np.ndarray  # (M, 2, 2) per-person truth, rows right/left
    person_k: np.ndarray  # (M, 2)
    person_interoc: np.ndarray  # (M,)

    @property
    def n_samples(self) -> int:
        return int(self.det.shape[0])

    @property
    def n_persons(self) -> int:
        return int(self.unique_persons.shape[0])


@dataclass
class NormalizedBatch:
    """Per-sample network inputs plus everything needed to denormalize."""

    eye_x: np.ndarray  # (S, 2, 33)
    face_x: np.ndarray  # (S, 7)
    rot: np.ndarray  # (S, 2, 3, 3) conversion matrices (left mirrored)
    f_n: np.ndarray  # (S, 2) normalized-camera focal lengths
    rho_rough: np.ndarray  # (S,) mm
    iris_center: np.ndarray  # (S, 2, 2) warped iris centroid, crop px
    glint_present: np.ndarray  # (S, 2) bool
    target: np.ndarray  # (S, 3)
    person_index: np.ndarray  # (S,)
    truth_eyes: np.ndarray  # (S, 2, 3)
    interoc_px: np.ndarray  # (S,)


def build_arrays(samples: list) -> DatasetArrays:
    if not samples:
        raise PipelineError("empty sample list")
    cam = samples[0].cam
    for s in samples:
        if s.cam != cam:
            raise PipelineError("all samples must share one camera")
    pid = np.array([s.person_id for s in samples], dtype=int)
    uniq = np.unique(pid)
    pidx = np.searchsorted(uniq, pid)

    fovea = np.zeros((len(uniq), 2, 2))
    kk = np.zeros((len(uniq), 2))
    interoc = np.zeros(len(uniq))
    seen = np.zeros(len(uniq), dtype=bool)
    for s, m in zip(samples, pidx):
        if not seen[m]:
            fovea[m, es.RIGHT] = s.truth.person.fovea_r
            fovea[m, es.LEFT] = s.truth.person.fovea_l
            kk[m] = (s.truth.person.kr, s.truth.person.kl)
            interoc[m] = s.truth.person.interoc
            seen[m] = True

    def per_eye(attr):
        return np.stack(
            [
                np.stack([getattr(s.right, attr), getattr(s.left, attr)])
                for s in samples
            ]
        )

    return DatasetArrays(
        cam=cam,
        person_ids=pid,
        person_index=pidx,
        unique_persons=uniq,
        det=np.stack([s.det for s in samples]).astype(float),
        pupil=per_eye("pupil").astype(float),
        glint=per_eye("glint").astype(float),
        glint_present=per_eye("glint_present").astype(bool),
        iris=per_eye("iris").astype(float),
        lid=per_eye("lid").astype(float),
        nose=np.stack([s.face.nose for s in samples]).astype(float),
        target=np.stack([s.target_mm for s in samples]).astype(float),
        truth_eyes=np.stack(
            [np.stack([s.truth.eye_r, s.truth.eye_l]) for s in samples]
        ).astype(float),
        person_fovea=fovea,
        person_k=kk,
        person_interoc=interoc,
    )


def _pixel_rays(pts: np.ndarray, cam: geo.Camera) -> np.ndarray:
    """(..., 2) pixels -> (..., 3) unnormalized rays."""
    out = np.empty(pts.shape[:-1] + (3,))
    out[..., 0] = (pts[..., 0] - cam.cx) / cam.fx
    out[..., 1] = (pts[..., 1] - cam.cy) / cam.fy
    out[..., 2] = 1.0
    return out


def _conversion_rows(ref_rays: np.ndarray, io_2d: np.ndarray, cam: geo.Camera) -> np.ndarray:
    """Stacked unmirrored conversion matrices; ref_rays (..., 3), io (..., 2)."""
    z = ref_rays / np.linalg.norm(ref_rays, axis=-1, keepdims=True)
    t = np.zeros_like(z)
    t[..., 0] = io_2d[..., 0] / cam.fx
    t[..., 1] = io_2d[..., 1] / cam.fy
    x = t - np.sum(t * z, axis=-1, keepdims=True) * z
    nx = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(nx < 1e-12):
        raise PipelineError("interocular direction parallel to a reference ray")
    x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=-2)


def _warp(rot: np.ndarray, f_n: np.ndarray, cc: np.ndarray, rays: np.ndarray) -> np.ndarray:
    """Apply C_n·R to rays: rot (..., 3, 3), f_n (...,), rays (..., K, 3)."""
    m = np.einsum("...ij,...kj->...ki", rot, rays)
    if np.any(m[..., 2] <= 1e-12):
        raise PipelineError("a landmark maps behind the normalized camera")
    uv = m[..., :2] / m[..., 2:3]
    return f_n[..., None, None] * uv + cc


def face_features(det_w: np.ndarray, nose_w: np.ndarray, interoc_px: np.ndarray) -> np.ndarray:
    """Seven smooth, mirror-invariant face descriptors.

    Inputs are warped crop coordinates; centering and scaling happen here.
    Under an interocular mirror the centered x-coordinates negate and the
    eye roles swap, so each descriptor below is built to be exactly
    invariant: differences and sums that survive the swap, and products of
    two sign-flipping factors.
    """
    l = (det_w[..., es.LEFT, :] - _FACE_CC) / _FACE_SCALE
    r = (det_w[..., es.RIGHT, :] - _FACE_CC) / _FACE_SCALE
    n = (nose_w - _FACE_CC) / _FACE_SCALE
    lx, ly = l[..., 0], l[..., 1]
    rx, ry = r[..., 0], r[..., 1]
    nx, ny = n[..., 0], n[..., 1]
    return np.stack(
        [
            lx - rx,
            ly + ry,
            ny,
            (ly - ry) * nx,
            (lx + rx) * nx,
            (lx + rx) * (ly - ry),
            np.log(interoc_px / geo.FACE_INTEROC_PX),
        ],
        axis=-1,
    )


def normalize_batch(arrays: DatasetArrays, det: np.ndarray | None = None) -> NormalizedBatch:
    """Normalize every sample; ``det`` overrides the stored detections."""
    cam = arrays.cam
    d = arrays.det if det is None else np.asarray(det, dtype=float)
    if d.shape != arrays.det.shape:
        raise PipelineError(f"det override has shape {d.shape}")

    io = d[:, es.LEFT] - d[:, es.RIGHT]  # (S, 2)
    interoc_px = np.linalg.norm(io, axis=-1)
    if np.any(interoc_px < 1e-6):
        raise PipelineError("jittered detections coincide")

    det_rays = _pixel_rays(d, cam)  # (S, 2, 3)

    # Per-eye contexts: reference point is the eye's own detection; the
    # left-eye matrix gets the normalized-frame x-flip (first row negated).
    rot = _conversion_rows(det_rays, io[:, None, :], cam)  # (S, 2, 3, 3)
    rot[:, es.LEFT, 0, :] *= -1.0

    # Face context: reference is the interocular midpoint, no mirror.
    mid_ray = _pixel_rays(0.5 * (d[:, es.LEFT] + d[:, es.RIGHT]), cam)
    rot_f = _conversion_rows(mid_ray, io, cam)  # (S, 3, 3)

    def focal(r, target_px):
        """Focal making the rotated detections ``target_px`` apart.

        r is (..., 3, 3); the detections broadcast against its batch axes.
        """
        m = np.einsum("...ij,...kj->...ki", r, det_rays if r.ndim == 3 else det_rays[:, None])
        if np.any(m[..., 2] <= 1e-12):
            raise PipelineError("a detection maps behind the normalized camera")
        uv = m[..., :2] / m[..., 2:3]
        sep = np.linalg.norm(uv[..., es.LEFT, :] - uv[..., es.RIGHT, :], axis=-1)
        if np.any(sep < 1e-12):
            raise PipelineError("detections collapse under the conversion rotation")
        return target_px / sep

    f_n = focal(rot, geo.EYE_INTEROC_PX)  # (S, 2): per-eye contexts
    f_face = focal(rot_f, geo.FACE_INTEROC_PX)  # (S,)

    # Rough distance from the chord formula over unit detection rays.
    ur = det_rays / np.linalg.norm(det_rays, axis=-1, keepdims=True)
    cr = np.cross(ur[:, es.LEFT], ur[:, es.RIGHT])
    alpha = np.arctan2(
        np.linalg.norm(cr, axis=-1), np.sum(ur[:, es.LEFT] * ur[:, es.RIGHT], axis=-1)
    )
    if np.any(alpha < 1e-9):
        raise PipelineError("detections coincide; interocular angle is zero")
    rho_rough = geo.INTEROCULAR_MM / (2.0 * np.sin(alpha / 2.0))

    # Warp per-eye landmarks: pupil, glint, iris(8), lid(6) -> 16 points.
    pts = np.concatenate(
        [
            arrays.pupil[:, :, None, :],
            arrays.glint[:, :, None, :],
            arrays.iris,
            arrays.lid,
        ],
        axis=2,
    )  # (S, 2, 16, 2)
    warped = _warp(rot, f_n, _EYE_CC, _pixel_rays(pts, cam))
    feat_pts = (warped - _EYE_CC) / _EYE_SCALE
    flags = arrays.glint_present.astype(float)
    feat_pts[:, :, 1, :] *= flags[:, :, None]  # zero absent glints

    s_count = arrays.n_samples
    eye_x = np.concatenate(
        [
            feat_pts[:, :, 0, :],  # pupil
            feat_pts[:, :, 1, :],  # glint
            flags[:, :, None],
            feat_pts[:, :, 2:10, :].reshape(s_count, 2, 16),  # iris
            feat_pts[:, :, 10:16, :].reshape(s_count, 2, 12),  # lid
        ],
        axis=2,
    )
    iris_center = warped[:, :, 2:10, :].mean(axis=2)

    face_pts = np.concatenate([d[:, None, :, :], arrays.nose[:, None, None, :]], axis=2)
    warped_face = _warp(rot_f[:, None], f_face[:, None], _FACE_CC, _pixel_rays(face_pts, cam))
    det_w = warped_face[:, 0, :2, :]
    nose_w = warped_face[:, 0, 2, :]
    face_x = face_features(det_w, nose_w, interoc_px)

    return NormalizedBatch(
        eye_x=eye_x,
        face_x=face_x,
        rot=rot,
        f_n=f_n,
        rho_rough=rho_rough,
        iris_center=iris_center,
        glint_present=arrays.glint_present.copy(),
        target=arrays.target.copy(),
        person_index=arrays.person_index.copy(),
        truth_eyes=arrays.truth_eyes.copy(),
        interoc_px=interoc_px,
    )


def take_batch(nb: NormalizedBatch, idx) -> NormalizedBatch:
    """Row-indexed view of a normalized batch (numpy fancy indexing)."""
    return NormalizedBatch(
        eye_x=nb.eye_x[idx],
        face_x=nb.face_x[idx],
        rot=nb.rot[idx],
        f_n=nb.f_n[idx],
        rho_rough=nb.rho_rough[idx],
        iris_center=nb.iris_center[idx],
        glint_present=nb.glint_present[idx],
        target=nb.target[idx],
        person_index=nb.person_index[idx],
        truth_eyes=nb.truth_eyes[idx],
        interoc_px=nb.interoc_px[idx],
    )


def load_arrays(path) -> tuple[es.SimConfig, DatasetArrays]:
    cfg, samples = es.load_dataset(path)
    return cfg, build_arrays(samples)
