"""Camera model, image-free normalization and gaze-ray geometry.

Conventions used throughout the package:

- Right-handed camera frame: x right, y down (matching image rows), z
  pointing away from the camera into the scene.  The camera centre is the
  origin and every 3D quantity is in millimetres.
- Pixel centres sit at integer coordinates with the origin at the top-left
  pixel centre, so a W x H crop has its centre at ((W-1)/2, (H-1)/2).
- A conversion matrix maps real-camera coordinates into normalized-camera
  coordinates.  Mirrored (left-eye) conversions carry determinant -1; their
  inverse is still the transpose because they stay orthogonal.
- Normalization acts on landmark coordinates only.  There is no image
  raster anywhere in the pipeline, so "warping" means mapping points
  through the homography norm_cam @ R @ real_cam^-1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GeometryError",
    "Camera",
    "Rotation3",
    "GazeRay",
    "NormalizationContext",
    "EYE_CROP",
    "FACE_CROP",
    "EYE_INTEROC_PX",
    "FACE_INTEROC_PX",
    "INTEROCULAR_MM",
    "project",
    "back_project",
    "pixel_ray",
    "conversion_matrix",
    "normalized_camera",
    "build_context",
    "warp_point",
    "unwarp_point",
    "crop_center",
    "rough_distance",
    "gaze_basis",
    "assemble_ray",
    "denormalize_ray",
    "miss_distance",
    "angular_error",
    "rot_x",
    "rot_y",
    "rot_z",
    "ypr_matrix",
    "rotation_about_axis",
]

# Assumed true interocular distance used by the rough distance estimate.
INTEROCULAR_MM = 63.0

# Crop geometry of the normalized eye and face views (width, height) and the
# pixel distance the interocular vector is scaled to in each.
EYE_CROP = (224, 112)
FACE_CROP = (224, 56)
EYE_INTEROC_PX = 320.0
FACE_INTEROC_PX = 84.0

_MIRROR_X = np.diag([-1.0, 1.0, 1.0])


class GeometryError(ValueError):
    """Raised when a geometric operation hits a degenerate configuration."""


def _as_vec(x, n, name) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.shape != (n,):
        raise GeometryError(f"{name} must be a {n}-vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise GeometryError(f"{name} contains non-finite values")
    return v


def _unit(v: np.ndarray, name: str) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise GeometryError(f"{name} is degenerate (zero length)")
    return v / n


@dataclass(frozen=True)
class Camera:
    """Pinhole camera intrinsics.  Focal lengths and principal point in px."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image dimensions must be positive")

    def k(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def k_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True, eq=False)
class Rotation3:
    """Orthogonal 3x3 matrix; det +1 for plain rotations, -1 when mirrored."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        if m.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {m.shape}")
        err = np.abs(m.T @ m - np.eye(3)).max()
        if err >= 1e-9:
            raise GeometryError(f"matrix is not orthogonal (|R'R - I| = {err:.3e})")
        object.__setattr__(self, "m", m)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.m))

    def inverse(self) -> "Rotation3":
        # Orthogonality makes the transpose an exact inverse, mirrored or not.
        return Rotation3(self.m.T.copy())

    def apply(self, v) -> np.ndarray:
        return self.m @ np.asarray(v, dtype=float)


@dataclass(frozen=True, eq=False)
class GazeRay:
    """Parametric gaze line g(t) = origin + t * direction.

    ``frame`` records which coordinates the ray lives in: "real" for the
    real camera, "normalized-right"/"normalized-left" for the per-eye
    normalized cameras (the left one is mirrored).
    """

    origin: np.ndarray
    direction: np.ndarray
    frame: str = "real"

    _FRAMES = ("real", "normalized-right", "normalized-left")

    def __post_init__(self):
        o = _as_vec(self.origin, 3, "ray origin")
        d = _as_vec(self.direction, 3, "ray direction")
        if np.linalg.norm(d) < 1e-12:
            raise GeometryError("ray direction must be nonzero")
        if self.frame not in self._FRAMES:
            raise GeometryError(f"unknown frame {self.frame!r}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def point(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True, eq=False)
class NormalizationContext:
    """Everything needed to move one crop between real and normalized frames."""

    rotation: Rotation3
    real_cam: Camera
    norm_cam: Camera
    crop_w: int
    crop_h: int
    ref_point: np.ndarray
    mirrored: bool
    homography: np.ndarray = field(init=False)
    homography_inv: np.ndarray = field(init=False)

    def __post_init__(self):
        h = self.norm_cam.k() @ self.rotation.m @ self.real_cam.k_inv()
        object.__setattr__(self, "ref_point", _as_vec(self.ref_point, 2, "ref_point"))
        object.__setattr__(self, "homography", h)
        object.__setattr__(self, "homography_inv", np.linalg.inv(h))


def crop_center(crop_w: int, crop_h: int) -> np.ndarray:
    """Centre of a crop under the integer-pixel-centre convention."""
    return np.array([(crop_w - 1) / 2.0, (crop_h - 1) / 2.0])


def project(p3, cam: Camera) -> np.ndarray:
    """Project a 3D camera-frame point to pixel coordinates."""
    p = _as_vec(p3, 3, "point")
    if p[2] <= 1e-9:
        raise GeometryError(f"cannot project point with z = {p[2]:.3g} <= 0")
    return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])


def pixel_ray(p2, cam: Camera) -> np.ndarray:
    """Unnormalized back-projection direction ((u-cx)/fx, (v-cy)/fy, 1)."""
    p = _as_vec(p2, 2, "pixel")
    return np.array([(p[0] - cam.cx) / cam.fx, (p[1] - cam.cy) / cam.fy, 1.0])


def back_project(p2, distance_mm: float, cam: Camera) -> np.ndarray:
    """3D point along the pixel's ray at Euclidean distance ``distance_mm``.

    The parameter is distance from the camera centre, not z-depth; this
    keeps the value identical in every rotated (normalized) frame.
    """
    if distance_mm <= 0:
        raise GeometryError(f"distance must be positive, got {distance_mm}")
    r = pixel_ray(p2, cam)
    return distance_mm * r / np.linalg.norm(r)


def conversion_matrix(ref_ray, interocular_2d, cam: Camera, mirror: bool) -> Rotation3:
    """Rotation taking real-camera coordinates to the normalized camera.

    The normalized camera looks straight at the reference point (its ray
    maps to +z) and sees the interocular direction parallel to +x.  The
    2D interocular vector is lifted to 3D under the fronto-parallel
    assumption (both eyes at equal depth), i.e. (du/fx, dv/fy, 0).

    With ``mirror`` the result additionally flips x in the normalized
    frame, which mirrors the camera in the interocular direction after
    the rotation; the determinant is then -1.
    """
    ref = _as_vec(ref_ray, 3, "ref_ray")
    io = _as_vec(interocular_2d, 2, "interocular_2d")
    if ref[2] <= 1e-9:
        raise GeometryError("reference ray must point in front of the camera (z > 0)")
    if np.linalg.norm(io) < 1e-12:
        raise GeometryError("interocular direction must be nonzero")
    z = _unit(ref, "ref_ray")
    t = np.array([io[0] / cam.fx, io[1] / cam.fy, 0.0])
    x = t - (t @ z) * z
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise GeometryError("interocular direction is parallel to the reference ray")
    x = x / nx
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    if mirror:
        r = _MIRROR_X @ r
    return Rotation3(r)


def normalized_camera(
    det_l,
    det_r,
    real_cam: Camera,
    rotation: Rotation3,
    target_interoc_px: float,
    crop_w: int,
    crop_h: int,
) -> Camera:
    """Normalized pinhole camera for one crop.

    The focal length is the single scale that makes the warped detections
    exactly ``target_interoc_px`` apart; the principal point is the crop
    centre.
    """
    if target_interoc_px <= 0:
        raise GeometryError("target interocular must be positive")
    dl = _as_vec(det_l, 2, "det_l")
    dr = _as_vec(det_r, 2, "det_r")
    if np.linalg.norm(dl - dr) < 1e-9:
        raise GeometryError("eye detections coincide")
    sep = _rotated_unit_separation(dl, dr, real_cam, rotation)
    if sep < 1e-12:
        raise GeometryError("detections collapse under the conversion rotation")
    f = target_interoc_px / sep
    cc = crop_center(crop_w, crop_h)
    return Camera(fx=f, fy=f, cx=cc[0], cy=cc[1], width=crop_w, height=crop_h)


def _rotated_unit_separation(dl, dr, cam: Camera, rotation: Rotation3) -> float:
    """Image-plane separation of two detections at unit focal length."""
    pts = []
    for d in (dl, dr):
        m = rotation.m @ pixel_ray(d, cam)
        if m[2] <= 1e-12:
            raise GeometryError("detection maps behind the normalized camera")
        pts.append(m[:2] / m[2])
    return float(np.linalg.norm(pts[0] - pts[1]))


def build_context(
    ref_point,
    det_r,
    det_l,
    real_cam: Camera,
    target_interoc_px: float,
    crop_w: int,
    crop_h: int,
    mirror: bool,
) -> NormalizationContext:
    """Assemble the full normalization context for one crop."""
    ref = _as_vec(ref_point, 2, "ref_point")
    dl = _as_vec(det_l, 2, "det_l")
    dr = _as_vec(det_r, 2, "det_r")
    rot = conversion_matrix(pixel_ray(ref, real_cam), dl - dr, real_cam, mirror)
    ncam = normalized_camera(dl, dr, real_cam, rot, target_interoc_px, crop_w, crop_h)
    return NormalizationContext(
        rotation=rot,
        real_cam=real_cam,
        norm_cam=ncam,
        crop_w=crop_w,
        crop_h=crop_h,
        ref_point=ref,
        mirrored=mirror,
    )


def warp_point(p2, ctx: NormalizationContext) -> np.ndarray:
    """Map a real-image point into crop coordinates through the homography."""
    p = _as_vec(p2, 2, "point")
    m = ctx.homography @ np.array([p[0], p[1], 1.0])
    if abs(m[2]) < 1e-12:
        raise GeometryError("point maps to infinity under the normalization warp")
    return m[:2] / m[2]


def unwarp_point(p2, ctx: NormalizationContext) -> np.ndarray:
    """Inverse of :func:`warp_point`."""
    p = _as_vec(p2, 2, "point")
    m = ctx.homography_inv @ np.array([p[0], p[1], 1.0])
    if abs(m[2]) < 1e-12:
        raise GeometryError("point maps to infinity under the inverse warp")
    return m[:2] / m[2]


def rough_distance(det_l, det_r, cam: Camera) -> float:
    """Chord-based eye distance estimate from the two detections.

    Treats the detections as the endpoints of a 63 mm chord seen under the
    angle between their back-projected rays: rho = 63 / (2 sin(alpha/2)).
    """
    rl = _unit(pixel_ray(det_l, cam), "left detection ray")
    rr = _unit(pixel_ray(det_r, cam), "right detection ray")
    alpha = math.atan2(float(np.linalg.norm(np.cross(rl, rr))), float(rl @ rr))
    if alpha < 1e-9:
        raise GeometryError("detections coincide; interocular angle is zero")
    return INTEROCULAR_MM / (2.0 * math.sin(alpha / 2.0))


def gaze_basis(origin) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthonormal gaze basis at a 3D origin.

    z points from the origin back to the camera centre; x is orthogonal to
    both z and the camera y-axis, with its sign fixed so the x component is
    positive along the camera x-axis; y = z cross x completes the
    right-handed set.
    """
    o = _as_vec(origin, 3, "origin")
    n = np.linalg.norm(o)
    if n < 1e-9:
        raise GeometryError("gaze origin coincides with the camera centre")
    z = -o / n
    x = np.array([-z[2], 0.0, z[0]])
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise GeometryError("origin lies on the camera y-axis; basis x undefined")
    x = x / nx
    if x[0] < 0:
        x = -x
    y = np.cross(z, x)
    return x, y, z


def assemble_ray(
    o2d,
    d2d,
    c: float,
    rho_rough_mm: float,
    norm_cam: Camera,
    frame: str = "normalized-right",
) -> GazeRay:
    """Build the normalized-frame gaze ray from the regressor outputs.

    The origin is the crop point ``o2d`` back-projected at distance
    c * rho_rough; the direction is x*d2d[0] + y*d2d[1] + z in the gaze
    basis at that origin, which keeps direction . z = 1.
    """
    if c <= 0:
        raise GeometryError(f"distance correction must be positive, got {c}")
    if rho_rough_mm <= 0:
        raise GeometryError("rough distance must be positive")
    d = _as_vec(d2d, 2, "d2d")
    origin = back_project(o2d, c * rho_rough_mm, norm_cam)
    x, y, z = gaze_basis(origin)
    direction = d[0] * x + d[1] * y + z
    return GazeRay(origin=origin, direction=direction, frame=frame)


def denormalize_ray(ray: GazeRay, rotation: Rotation3) -> GazeRay:
    """Map a normalized-frame ray back to the real camera frame.

    Works for mirrored left-eye conversions too: the matrices stay
    orthogonal, so the transpose is the exact (full) inverse either way.
    """
    if ray.frame == "real":
        raise GeometryError("ray is already in the real frame")
    inv = rotation.m.T
    return GazeRay(origin=inv @ ray.origin, direction=inv @ ray.direction, frame="real")


def miss_distance(ray: GazeRay, target) -> float:
    """Shortest distance from ``target`` to the infinite line of ``ray``."""
    t = _as_vec(target, 3, "target")
    d = ray.direction
    cr = np.cross(t - ray.origin, d)
    return float(np.linalg.norm(cr) / np.linalg.norm(d))


def angular_error(true_eye, target, ray: GazeRay) -> float:
    """Angular gaze error in degrees, robust to origin misplacement.

    Finds the point G on the ray where (target - G) is orthogonal to the
    true eye-target line ET, then returns the angle between ET and EG.
    Returns NaN when the ray is parallel to the plane through the target
    orthogonal to ET, so no valid G exists.
    """
    e = _as_vec(true_eye, 3, "true_eye")
    t = _as_vec(target, 3, "target")
    et = t - e
    net = np.linalg.norm(et)
    if net < 1e-12:
        raise GeometryError("true eye coincides with the target")
    u = et / net
    d = ray.direction
    denom = float(d @ u)
    if abs(denom) < 1e-12 * np.linalg.norm(d):
        return math.nan
    s = float((t - ray.origin) @ u) / denom
    eg = ray.origin + s * d - e
    neg = np.linalg.norm(eg)
    if neg < 1e-12:
        return math.nan
    ang = math.atan2(float(np.linalg.norm(np.cross(u, eg))), float(u @ eg))
    return math.degrees(ang)


# Small rotation helpers shared by the simulator and tests.


def rot_x(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def ypr_matrix(yaw_deg: float, pitch_deg: float, roll_deg: float) -> np.ndarray:
    """Head orientation as intrinsic yaw (about y), pitch (x), roll (z)."""
    return rot_y(yaw_deg) @ rot_x(pitch_deg) @ rot_z(roll_deg)


def rotation_about_axis(axis, deg: float) -> np.ndarray:
    """Rodrigues rotation matrix about an arbitrary axis."""
    n = _unit(_as_vec(axis, 3, "axis"), "axis")
    a = math.radians(deg)
    k = np.array([[0, -n[2], n[1]], [n[2], 0, -n[0]], [-n[1], n[0], 0]])
    return np.eye(3) + math.sin(a) * k + (1.0 - math.cos(a)) * (k @ k)
