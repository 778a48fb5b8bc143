"""Synthetic PCCR eye scenes with exact ground truth.

Simulates a person fixating desk-scale targets in front of a single camera
with a coaxial illuminator.  Each eye is a spherical-cornea model: the
optical axis runs through the cornea centre and the pupil centre, the
visual axis is the optical axis rotated by a per-person fovea offset, and
the glint is the specular reflection of the coaxial light on the cornea
sphere, which lies exactly on the camera-to-cornea-centre line.

Everything is landmark-based: a sample carries projected 2D feature points
(pupil, glint, an iris ring, eyelid points, nose) plus eye detections, not
raster images.  Ground truth (3D eye centres, per-person parameters) rides
along for evaluation and for the closed-form PCCR oracle.

Fovea offsets rotate about the camera-frame axes so that the oracle, which
has no access to head pose, can invert them exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import geometry as geo

logger = logging.getLogger(__name__)

DATASET_FORMAT = "gazekit-ds/1"

# Population distributions (mm and degrees).
INTEROC_MEAN, INTEROC_SD, INTEROC_RANGE = 63.0, 3.5, (50.0, 76.0)
FOVEA_SD_DEG, FOVEA_MAX_DEG = 2.0, 8.0
CPD_MEAN, CPD_SD, CPD_RANGE = 4.2, 0.4, (3.0, 6.0)
CRADIUS_MEAN, CRADIUS_SD, CRADIUS_RANGE = 7.8, 0.25, (7.0, 9.0)

# Anatomy constants.
EYEBALL_TO_CORNEA_MM = 5.3  # eyeball centre to cornea centre, along the optical axis
IRIS_RING_RADIUS_MM = 6.0
# Per-person iris size spread.  Monocular absolute scale must stay clearly
# noisier than the interocular prior (3.5/63 = 5.6%), otherwise one eye's
# iris would pin down the viewing distance on its own; with the heavy
# truncation the effective spread is about 9% of the mean.
IRIS_RADIUS_SD, IRIS_RADIUS_RANGE = 0.80, (5.0, 7.0)
# Per-eye lid aperture spread, same reasoning as the iris: with a fixed
# template every crop would carry a noise-free absolute ruler.
LID_SCALE_SD, LID_SCALE_RANGE = 0.12, (0.7, 1.3)
IRIS_RING_POINTS = 8
MAX_ECCENTRICITY_DEG = 60.0
FIXATION_TOL_RAD = 1e-9
FIXATION_MAX_ITER = 50

# Fixed head-frame templates (mm, head frame: x toward the person's left as
# seen by the camera, y down, z away from the camera; the face points to -z).
LID_TEMPLATE = np.array(
    [
        [9.0 * math.cos(a), 5.0 * math.sin(a), -10.0]
        for a in np.radians([30.0, 90.0, 150.0, 210.0, 270.0, 330.0])
    ]
)
NOSE_OFFSET = np.array([0.0, 24.0, -22.0])

# Scene sampling spreads that are not part of SimConfig.
HEAD_LATERAL_X_MM = (-60.0, 60.0)
HEAD_LATERAL_Y_MM = (-40.0, 40.0)
HEAD_ROLL_RANGE_DEG = (-5.0, 5.0)

DEFAULT_SIM_CAMERA = geo.Camera(
    fx=1200.0, fy=1200.0, cx=639.5, cy=479.5, width=1280, height=960
)

RIGHT, LEFT = 0, 1


class SampleRejected(Exception):
    """A sampled scene cannot be rendered (unreachable fixation, out of frame)."""


class UnsupportedConfiguration(ValueError):
    """An operation needs a feature the sample was generated without."""


class DatasetError(ValueError):
    """Dataset generation or parsing failed."""


@dataclass
class PersonEye:
    """Per-eye anatomy: fovea offset (h, v degrees), cornea-pupil distance
    and cornea radius in mm, plus the lid aperture scale factor."""

    fovea_offset_deg: np.ndarray
    cornea_pupil_mm: float
    cornea_radius_mm: float
    lid_scale: float = 1.0

    def __post_init__(self):
        self.fovea_offset_deg = np.asarray(self.fovea_offset_deg, dtype=float)
        if self.fovea_offset_deg.shape != (2,):
            raise DatasetError("fovea offset must have two components")
        if not (CPD_RANGE[0] <= self.cornea_pupil_mm <= CPD_RANGE[1]):
            raise DatasetError(
                f"cornea-pupil distance {self.cornea_pupil_mm} outside {CPD_RANGE}"
            )


@dataclass
class Person:
    person_id: int
    right: PersonEye
    left: PersonEye
    interocular_mm: float
    eye_in_head_mm: np.ndarray  # (2, 3), rows RIGHT/LEFT, head frame
    iris_mm: float = IRIS_RING_RADIUS_MM


@dataclass
class Scene:
    """One fixation: head pose, target, and (after rendering) eye centres."""

    yaw_deg: float
    pitch_deg: float
    roll_deg: float
    head_pos_mm: np.ndarray
    target_mm: np.ndarray
    eye_centers_mm: np.ndarray | None = None  # (2, 3) cornea centres


@dataclass
class FeatureSet:
    """2D landmarks of one eye, real-image pixels."""

    pupil: np.ndarray
    glint: np.ndarray
    glint_present: bool
    iris: np.ndarray  # (8, 2)
    lid: np.ndarray  # (6, 2)


@dataclass
class FaceFeatures:
    det_l: np.ndarray
    det_r: np.ndarray
    nose: np.ndarray
    interoc_px: float


@dataclass
class PersonTruth:
    fovea_r: np.ndarray
    fovea_l: np.ndarray
    kr: float
    kl: float
    interoc: float


@dataclass
class SampleTruth:
    eye_r: np.ndarray
    eye_l: np.ndarray
    person: PersonTruth


@dataclass
class Sample:
    person_id: int
    cam: geo.Camera
    det: np.ndarray  # (2, 2): rows RIGHT/LEFT detections
    right: FeatureSet
    left: FeatureSet
    face: FaceFeatures
    target_mm: np.ndarray
    truth: SampleTruth


@dataclass
class SimConfig:
    n_persons: int
    samples_per_person: int
    seed: int
    target_planes: tuple = (-300.0, 0.0, 300.0)
    target_region: tuple = (-220.0, -160.0, 220.0, 160.0)  # xmin, ymin, xmax, ymax
    head_yaw_range: tuple = (-15.0, 15.0)
    head_pitch_range: tuple = (-10.0, 10.0)
    distance_range: tuple = (550.0, 750.0)
    illuminator: bool = True
    detection_jitter_frac: float = 0.03

    def __post_init__(self):
        if self.n_persons <= 0 or self.samples_per_person <= 0:
            raise DatasetError("n_persons and samples_per_person must be positive")
        if not self.target_planes:
            raise DatasetError("need at least one target plane")
        if self.distance_range[0] > self.distance_range[1]:
            raise DatasetError("distance range is inverted")
        if not (0.0 <= self.detection_jitter_frac < 0.5):
            raise DatasetError("detection jitter fraction out of range")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("target_planes", "target_region", "head_yaw_range",
                  "head_pitch_range", "distance_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        required = {"n_persons", "samples_per_person", "seed"}
        missing = required - set(d)
        if missing:
            raise DatasetError(f"config missing required fields: {sorted(missing)}")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"config has unknown fields: {sorted(unknown)}")
        kw = dict(d)
        for k in ("target_planes", "target_region", "head_yaw_range",
                  "head_pitch_range", "distance_range"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


def person_rng(seed: int, person_id: int) -> np.random.Generator:
    """Counter-based substream for one person, independent of generation order."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(person_id,))
    return np.random.Generator(np.random.Philox(ss))


def _trunc_normal(rng, mean, sd, lo, hi) -> float:
    for _ in range(1000):
        x = float(rng.normal(mean, sd))
        if lo <= x <= hi:
            return x
    raise DatasetError("truncated normal rejection did not terminate")


def sample_person(rng: np.random.Generator, person_id: int) -> Person:
    def eye():
        fov = np.array(
            [
                _trunc_normal(rng, 0.0, FOVEA_SD_DEG, -FOVEA_MAX_DEG, FOVEA_MAX_DEG),
                _trunc_normal(rng, 0.0, FOVEA_SD_DEG, -FOVEA_MAX_DEG, FOVEA_MAX_DEG),
            ]
        )
        cpd = _trunc_normal(rng, CPD_MEAN, CPD_SD, *CPD_RANGE)
        rad = _trunc_normal(rng, CRADIUS_MEAN, CRADIUS_SD, *CRADIUS_RANGE)
        lid = _trunc_normal(rng, 1.0, LID_SCALE_SD, *LID_SCALE_RANGE)
        return PersonEye(fov, cpd, rad, lid)

    interoc = _trunc_normal(rng, INTEROC_MEAN, INTEROC_SD, *INTEROC_RANGE)
    # The person faces the camera, so their right eye sits on the camera's
    # -x side at zero head pose.
    offsets = np.array([[-interoc / 2.0, 0.0, 0.0], [interoc / 2.0, 0.0, 0.0]])
    right, left = eye(), eye()
    iris_mm = _trunc_normal(rng, IRIS_RING_RADIUS_MM, IRIS_RADIUS_SD, *IRIS_RADIUS_RANGE)
    return Person(person_id, right, left, interoc, offsets, iris_mm)


def optical_axis(cornea_center, pupil_center) -> np.ndarray:
    """Unit optical-axis direction, from the cornea centre through the pupil."""
    c = np.asarray(cornea_center, dtype=float)
    p = np.asarray(pupil_center, dtype=float)
    d = p - c
    n = np.linalg.norm(d)
    if n < 1e-9:
        raise geo.GeometryError("cornea and pupil centres coincide")
    return d / n


def visual_axis(opt_axis, fovea_offset_deg, eye_frame) -> np.ndarray:
    """Rotate the optical axis by the fovea offset.

    First by offset[0] (horizontal) about the frame's vertical axis, then
    by offset[1] (vertical) about the frame's horizontal axis.
    """
    f = np.asarray(eye_frame, dtype=float)
    h, v = float(fovea_offset_deg[0]), float(fovea_offset_deg[1])
    r = geo.rotation_about_axis(f[:, 0], v) @ geo.rotation_about_axis(f[:, 1], h)
    return r @ np.asarray(opt_axis, dtype=float)


def _invert_visual_axis(vis, fovea_offset_deg, eye_frame) -> np.ndarray:
    f = np.asarray(eye_frame, dtype=float)
    h, v = float(fovea_offset_deg[0]), float(fovea_offset_deg[1])
    r = geo.rotation_about_axis(f[:, 1], -h) @ geo.rotation_about_axis(f[:, 0], -v)
    return r @ np.asarray(vis, dtype=float)


def _solve_fixation(eyeball_center, target, eye: PersonEye, face_forward) -> np.ndarray:
    """Optical-axis direction that makes the visual axis pass through target.

    Fixed-point iteration: the cornea centre sits a few mm from the eyeball
    centre along the optical axis, so the update converges geometrically at
    desk distances.
    """
    b = np.asarray(eyeball_center, dtype=float)
    t = np.asarray(target, dtype=float)
    frame = np.eye(3)  # fovea offsets are defined about the camera axes
    d = t - b
    if np.linalg.norm(d) < 50.0:
        raise SampleRejected("target too close to the eye")
    omega = d / np.linalg.norm(d)
    for _ in range(FIXATION_MAX_ITER):
        cornea = b + EYEBALL_TO_CORNEA_MM * omega
        vis = t - cornea
        vis = vis / np.linalg.norm(vis)
        new = _invert_visual_axis(vis, eye.fovea_offset_deg, frame)
        step = math.atan2(float(np.linalg.norm(np.cross(new, omega))), float(new @ omega))
        omega = new
        if step < FIXATION_TOL_RAD:
            break
    else:
        raise SampleRejected("fixation solve did not converge")
    ecc = math.degrees(
        math.atan2(float(np.linalg.norm(np.cross(omega, face_forward))), float(omega @ face_forward))
    )
    if ecc > MAX_ECCENTRICITY_DEG:
        raise SampleRejected(f"eye rotation {ecc:.1f} deg exceeds reachable range")
    return omega


def _sample_scene(rng: np.random.Generator, cfg: SimConfig) -> Scene:
    yaw = float(rng.uniform(*cfg.head_yaw_range))
    pitch = float(rng.uniform(*cfg.head_pitch_range))
    roll = float(rng.uniform(*HEAD_ROLL_RANGE_DEG))
    pos = np.array(
        [
            rng.uniform(*HEAD_LATERAL_X_MM),
            rng.uniform(*HEAD_LATERAL_Y_MM),
            rng.uniform(*cfg.distance_range),
        ]
    )
    plane = float(cfg.target_planes[rng.integers(len(cfg.target_planes))])
    xmin, ymin, xmax, ymax = cfg.target_region
    target = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax), plane])
    return Scene(yaw, pitch, roll, pos, target)


def _disk_jitter(rng: np.random.Generator, radius: float) -> np.ndarray:
    r = radius * math.sqrt(float(rng.uniform()))
    a = float(rng.uniform(0.0, 2.0 * math.pi))
    return np.array([r * math.cos(a), r * math.sin(a)])


def render_sample(
    person: Person,
    scene: Scene,
    cam: geo.Camera,
    cfg: SimConfig,
    rng: np.random.Generator,
) -> Sample:
    """Render one fixation into projected landmarks plus ground truth.

    Raises :class:`SampleRejected` when the fixation is unreachable or any
    feature point leaves the image.
    """
    head = geo.ypr_matrix(scene.yaw_deg, scene.pitch_deg, scene.roll_deg)
    face_forward = head @ np.array([0.0, 0.0, -1.0])
    target = np.asarray(scene.target_mm, dtype=float)

    eyes = []
    for idx, eye in ((RIGHT, person.right), (LEFT, person.left)):
        ball = scene.head_pos_mm + head @ person.eye_in_head_mm[idx]
        omega = _solve_fixation(ball, target, eye, face_forward)
        cornea = ball + EYEBALL_TO_CORNEA_MM * omega
        if cornea[2] <= 1.0:
            raise SampleRejected("eye behind the camera plane")
        pupil = cornea + eye.cornea_pupil_mm * omega
        vis = visual_axis(omega, eye.fovea_offset_deg, np.eye(3))
        miss = geo.miss_distance(geo.GazeRay(cornea, vis, "real"), target)
        if miss > 1e-6:
            raise SampleRejected(f"fixation residual {miss:.2e} mm")
        eyes.append((idx, eye, ball, omega, cornea, pupil))

    features = [None, None]
    corneas = np.zeros((2, 3))
    for idx, eye, ball, omega, cornea, pupil in eyes:
        corneas[idx] = cornea
        # Iris ring in the plane orthogonal to the optical axis, oriented
        # by the head's vertical so it rolls with the head.
        a = np.cross(head[:, 1], omega)
        na = np.linalg.norm(a)
        if na < 1e-9:
            raise SampleRejected("optical axis parallel to the head vertical")
        a = a / na
        b = np.cross(omega, a)
        angles = 2.0 * math.pi * np.arange(IRIS_RING_POINTS) / IRIS_RING_POINTS
        ring = pupil + person.iris_mm * (
            np.outer(np.cos(angles), a) + np.outer(np.sin(angles), b)
        )
        lids = ball + eye.lid_scale * (head @ LID_TEMPLATE.T).T
        if cfg.illuminator:
            glint3 = cornea * (1.0 - eye.cornea_radius_mm / np.linalg.norm(cornea))
            glint = geo.project(glint3, cam)
            glint_present = True
        else:
            glint = np.zeros(2)
            glint_present = False
        features[idx] = FeatureSet(
            pupil=geo.project(pupil, cam),
            glint=glint,
            glint_present=glint_present,
            iris=np.stack([geo.project(p, cam) for p in ring]),
            lid=np.stack([geo.project(p, cam) for p in lids]),
        )

    nose = geo.project(scene.head_pos_mm + head @ NOSE_OFFSET, cam)
    eye_px = np.stack([geo.project(corneas[RIGHT], cam), geo.project(corneas[LEFT], cam)])
    interoc_px = float(np.linalg.norm(eye_px[LEFT] - eye_px[RIGHT]))
    jitter_r = cfg.detection_jitter_frac * interoc_px
    det = np.stack(
        [
            eye_px[RIGHT] + _disk_jitter(rng, jitter_r),
            eye_px[LEFT] + _disk_jitter(rng, jitter_r),
        ]
    )

    pts = [det, nose[None, :], features[RIGHT].pupil[None, :], features[LEFT].pupil[None, :],
           features[RIGHT].iris, features[LEFT].iris, features[RIGHT].lid, features[LEFT].lid]
    if cfg.illuminator:
        pts += [features[RIGHT].glint[None, :], features[LEFT].glint[None, :]]
    allpts = np.concatenate(pts)
    if (
        allpts[:, 0].min() < 0.0
        or allpts[:, 1].min() < 0.0
        or allpts[:, 0].max() > cam.width - 1
        or allpts[:, 1].max() > cam.height - 1
    ):
        raise SampleRejected("feature point outside the image")

    det_sep = float(np.linalg.norm(det[LEFT] - det[RIGHT]))
    if det_sep < 1e-6:
        raise SampleRejected("jittered detections coincide")

    scene.eye_centers_mm = corneas.copy()
    truth = SampleTruth(
        eye_r=corneas[RIGHT].copy(),
        eye_l=corneas[LEFT].copy(),
        person=PersonTruth(
            fovea_r=person.right.fovea_offset_deg.copy(),
            fovea_l=person.left.fovea_offset_deg.copy(),
            kr=person.right.cornea_pupil_mm,
            kl=person.left.cornea_pupil_mm,
            interoc=person.interocular_mm,
        ),
    )
    return Sample(
        person_id=person.person_id,
        cam=cam,
        det=det,
        right=features[RIGHT],
        left=features[LEFT],
        face=FaceFeatures(det_l=det[LEFT].copy(), det_r=det[RIGHT].copy(),
                          nose=nose, interoc_px=det_sep),
        target_mm=target,
        truth=truth,
    )


def pccr_oracle(
    sample: Sample, eye: str, person_eye: PersonEye, known_distance_mm: float
) -> geo.GazeRay:
    """Closed-form PCCR gaze reconstruction with known person parameters.

    Reconstructs the cornea centre behind the glint at the known distance,
    intersects the pupil ray with the sphere of radius cornea_pupil_mm
    around it, reads off the optical axis and applies the fovea offset.
    """
    if eye not in ("right", "left"):
        raise ValueError(f"eye must be 'right' or 'left', got {eye!r}")
    fs = sample.right if eye == "right" else sample.left
    if not fs.glint_present:
        raise UnsupportedConfiguration("sample was generated without an illuminator")
    if known_distance_mm <= 0:
        raise geo.GeometryError("known distance must be positive")
    cam = sample.cam
    cornea = geo.back_project(fs.glint, known_distance_mm, cam)
    ray = geo.pixel_ray(fs.pupil, cam)
    ray = ray / np.linalg.norm(ray)
    k = person_eye.cornea_pupil_mm
    b = float(ray @ cornea)
    disc = b * b - float(cornea @ cornea) + k * k
    if disc < 0.0:
        if disc < -1e-6 * k * k:
            raise geo.GeometryError("pupil ray misses the cornea-pupil sphere")
        disc = 0.0
    t = b - math.sqrt(disc)  # near intersection: the pupil faces the camera
    pupil = t * ray
    omega = optical_axis(cornea, pupil)
    vis = visual_axis(omega, person_eye.fovea_offset_deg, np.eye(3))
    return geo.GazeRay(origin=cornea, direction=vis, frame="real")


def mirror_sample(sample: Sample) -> Sample:
    """Interocular mirror image of a sample (reflection about the camera
    yz-plane): pixels flip about the principal point column, eye roles swap,
    and per-eye truth swaps with the horizontal fovea component negated."""
    cam = sample.cam

    def mpx(p):
        p = np.asarray(p, dtype=float)
        out = p.copy()
        out[..., 0] = 2.0 * cam.cx - out[..., 0]
        return out

    def mfs(fs: FeatureSet) -> FeatureSet:
        return FeatureSet(
            pupil=mpx(fs.pupil),
            glint=mpx(fs.glint) if fs.glint_present else fs.glint.copy(),
            glint_present=fs.glint_present,
            iris=mpx(fs.iris),
            lid=mpx(fs.lid),
        )

    m3 = np.array([-1.0, 1.0, 1.0])

    def mirror_fovea(f):
        return np.array([-f[0], f[1]])

    truth = SampleTruth(
        eye_r=m3 * sample.truth.eye_l,
        eye_l=m3 * sample.truth.eye_r,
        person=PersonTruth(
            fovea_r=mirror_fovea(sample.truth.person.fovea_l),
            fovea_l=mirror_fovea(sample.truth.person.fovea_r),
            kr=sample.truth.person.kl,
            kl=sample.truth.person.kr,
            interoc=sample.truth.person.interoc,
        ),
    )
    det = np.stack([mpx(sample.det[LEFT]), mpx(sample.det[RIGHT])])
    return Sample(
        person_id=sample.person_id,
        cam=cam,
        det=det,
        right=mfs(sample.left),
        left=mfs(sample.right),
        face=FaceFeatures(
            det_l=det[LEFT].copy(),
            det_r=det[RIGHT].copy(),
            nose=mpx(sample.face.nose),
            interoc_px=sample.face.interoc_px,
        ),
        target_mm=m3 * sample.target_mm,
        truth=truth,
    )


# --- JSON-Lines dataset I/O ---


def _vec(a) -> list:
    return [float(x) for x in np.asarray(a).ravel()]


def _pts(a) -> list:
    return [[float(x), float(y)] for x, y in np.asarray(a)]


def sample_to_dict(s: Sample) -> dict:
    def fs(f: FeatureSet) -> dict:
        return {
            "pupil": _vec(f.pupil),
            "glint": _vec(f.glint),
            "glint_present": bool(f.glint_present),
            "iris": _pts(f.iris),
            "lid": _pts(f.lid),
        }

    return {
        "person_id": int(s.person_id),
        "cam": {
            "fx": s.cam.fx, "fy": s.cam.fy, "cx": s.cam.cx, "cy": s.cam.cy,
            "w": s.cam.width, "h": s.cam.height,
        },
        "det": _pts(s.det),
        "right": fs(s.right),
        "left": fs(s.left),
        "face": {
            "detL": _vec(s.face.det_l),
            "detR": _vec(s.face.det_r),
            "nose": _vec(s.face.nose),
            "interoc_px": float(s.face.interoc_px),
        },
        "target_mm": _vec(s.target_mm),
        "truth": {
            "eye_r": _vec(s.truth.eye_r),
            "eye_l": _vec(s.truth.eye_l),
            "person": {
                "fovea_r": _vec(s.truth.person.fovea_r),
                "fovea_l": _vec(s.truth.person.fovea_l),
                "kr": float(s.truth.person.kr),
                "kl": float(s.truth.person.kl),
                "interoc": float(s.truth.person.interoc),
            },
        },
    }


def sample_from_dict(d: dict) -> Sample:
    try:
        cam = geo.Camera(
            fx=d["cam"]["fx"], fy=d["cam"]["fy"], cx=d["cam"]["cx"],
            cy=d["cam"]["cy"], width=int(d["cam"]["w"]), height=int(d["cam"]["h"]),
        )

        def fs(f: dict) -> FeatureSet:
            return FeatureSet(
                pupil=np.array(f["pupil"], dtype=float),
                glint=np.array(f["glint"], dtype=float),
                glint_present=bool(f["glint_present"]),
                iris=np.array(f["iris"], dtype=float),
                lid=np.array(f["lid"], dtype=float),
            )

        tp = d["truth"]["person"]
        return Sample(
            person_id=int(d["person_id"]),
            cam=cam,
            det=np.array(d["det"], dtype=float),
            right=fs(d["right"]),
            left=fs(d["left"]),
            face=FaceFeatures(
                det_l=np.array(d["face"]["detL"], dtype=float),
                det_r=np.array(d["face"]["detR"], dtype=float),
                nose=np.array(d["face"]["nose"], dtype=float),
                interoc_px=float(d["face"]["interoc_px"]),
            ),
            target_mm=np.array(d["target_mm"], dtype=float),
            truth=SampleTruth(
                eye_r=np.array(d["truth"]["eye_r"], dtype=float),
                eye_l=np.array(d["truth"]["eye_l"], dtype=float),
                person=PersonTruth(
                    fovea_r=np.array(tp["fovea_r"], dtype=float),
                    fovea_l=np.array(tp["fovea_l"], dtype=float),
                    kr=float(tp["kr"]),
                    kl=float(tp["kl"]),
                    interoc=float(tp["interoc"]),
                ),
            ),
        )
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"malformed sample record: {exc}") from exc


def _dumps(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"))


def person_samples(
    cfg: SimConfig, person_id: int, cam: geo.Camera | None = None
) -> tuple[Person, list[Sample], int]:
    """Generate one person's accepted samples from their own substream.

    Returns (person, samples, rejected count).  Deterministic per
    (seed, person_id), independent of any other person's generation.
    """
    cam = cam or DEFAULT_SIM_CAMERA
    rng = person_rng(cfg.seed, person_id)
    person = sample_person(rng, person_id)
    samples: list[Sample] = []
    rejected = 0
    attempts = 0
    while len(samples) < cfg.samples_per_person:
        attempts += 1
        if attempts > 20 * cfg.samples_per_person:
            raise DatasetError(
                f"person {person_id}: rejection rate too high to proceed"
            )
        scene = _sample_scene(rng, cfg)
        try:
            samples.append(render_sample(person, scene, cam, cfg, rng))
        except SampleRejected as exc:
            rejected += 1
            logger.debug("person %d sample rejected: %s", person_id, exc)
    return person, samples, rejected


def generate_samples(
    cfg: SimConfig, cam: geo.Camera | None = None
) -> tuple[list[Sample], dict]:
    """All persons' samples in person order, with a generation summary.

    Aborts when the overall rejection rate passes 50%.
    """
    out: list[Sample] = []
    rejected = 0
    for pid in range(cfg.n_persons):
        _, samples, rej = person_samples(cfg, pid, cam)
        out.extend(samples)
        rejected += rej
        total = len(out) + rejected
        if total >= 200 and rejected / total > 0.5:
            raise DatasetError(
                f"rejection rate {rejected}/{total} exceeds 50%; "
                "check target region and head pose ranges"
            )
    summary = {
        "persons": cfg.n_persons,
        "samples": len(out),
        "rejected": rejected,
        "rejection_rate": rejected / max(len(out) + rejected, 1),
    }
    return out, summary


def generate_dataset(
    cfg: SimConfig, path, cam: geo.Camera | None = None
) -> dict:
    """Write a JSON-Lines dataset; returns a generation summary.

    Deterministic per (seed, person_id): each person draws from an
    independent counter-based substream, so generation order never matters.
    """
    samples, summary = generate_samples(cfg, cam)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dumps({"format": DATASET_FORMAT, "config": cfg.to_dict()}) + "\n")
        for sample in samples:
            fh.write(_dumps(sample_to_dict(sample)) + "\n")
    return {"path": str(path), **summary}


def load_dataset(path) -> tuple[SimConfig, list[Sample]]:
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise DatasetError(f"{path}: empty dataset file")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: bad header: {exc}") from exc
        if header.get("format") != DATASET_FORMAT:
            raise DatasetError(
                f"{path}: format {header.get('format')!r}, expected {DATASET_FORMAT!r}"
            )
        cfg = SimConfig.from_dict(header["config"])
        samples = []
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                samples.append(sample_from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {i + 2}: {exc}") from exc
    return cfg, samples


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
