import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from gazekit import geometry as geo


CAM = geo.Camera(fx=1200.0, fy=1200.0, cx=639.5, cy=479.5, width=1280, height=960)
NIR_CAM = geo.Camera(fx=3679.0, fy=3679.0, cx=574.5, cy=149.5, width=1150, height=300)


def finite(lo, hi):
    return st.floats(min_value=lo, max_value=hi, allow_nan=False, allow_infinity=False)


# --- camera model ---


def test_camera_validation():
    with pytest.raises(geo.GeometryError):
        geo.Camera(fx=-1.0, fy=1.0, cx=0.0, cy=0.0, width=10, height=10)
    with pytest.raises(geo.GeometryError):
        geo.Camera(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=0, height=10)


@given(finite(-500, 500), finite(-350, 350), finite(80, 2000))
def test_project_back_project_roundtrip(x, y, z):
    p3 = np.array([x, y, z])
    px = geo.project(p3, CAM)
    rec = geo.back_project(px, float(np.linalg.norm(p3)), CAM)
    assert_allclose(rec, p3, atol=1e-9)


def test_back_project_is_euclidean_distance():
    # Distance parameter is measured along the ray, not as z-depth.
    p = geo.back_project([100.0, 50.0, 650.0][:2], 650.0, CAM)
    assert math.isclose(float(np.linalg.norm(p)), 650.0, rel_tol=1e-12)
    assert p[2] < 650.0


def test_project_behind_camera_rejected():
    with pytest.raises(geo.GeometryError):
        geo.project([0.0, 0.0, -5.0], CAM)


# --- conversion matrix ---


def test_conversion_matrix_trivial_identity():
    r = geo.conversion_matrix([0.0, 0.0, 1.0], [1.0, 0.0], CAM, mirror=False)
    assert_allclose(r.m, np.eye(3), atol=1e-12)


def test_conversion_matrix_trivial_mirror():
    r = geo.conversion_matrix([0.0, 0.0, 1.0], [1.0, 0.0], CAM, mirror=True)
    assert_allclose(r.m, np.diag([-1.0, 1.0, 1.0]), atol=1e-12)
    assert math.isclose(r.det, -1.0, abs_tol=1e-12)


def test_conversion_matrix_20deg_matches_axis_angle():
    # Reference point 20 degrees off axis in the y direction with a purely
    # horizontal interocular: the conversion must equal a rotation about x
    # that carries the reference ray onto +z.  Built independently from the
    # axis-angle constructor as the oracle.
    ref = np.array([0.0, math.tan(math.radians(20.0)), 1.0])
    r = geo.conversion_matrix(ref, [1.0, 0.0], CAM, mirror=False)
    oracle = geo.rotation_about_axis([1.0, 0.0, 0.0], 20.0)
    assert_allclose(oracle @ ref / np.linalg.norm(ref), [0.0, 0.0, 1.0], atol=1e-12)
    assert_allclose(r.m, oracle, atol=1e-12)


@given(
    finite(-0.35, 0.35),
    finite(-0.3, 0.3),
    finite(-200, 200),
    finite(-60, 60),
    st.booleans(),
)
@settings(deadline=None)
def test_conversion_matrix_properties(rx, ry, iox, ioy, mirror):
    ref = np.array([rx, ry, 1.0])
    io = np.array([iox + 250.0, ioy])  # keep well away from degenerate zero
    r = geo.conversion_matrix(ref, io, CAM, mirror=mirror)
    # Orthogonal with the right determinant.
    assert np.abs(r.m.T @ r.m - np.eye(3)).max() < 1e-12
    assert math.isclose(r.det, -1.0 if mirror else 1.0, abs_tol=1e-9)
    # Reference ray lands on the optical axis.
    mapped = r.apply(ref / np.linalg.norm(ref))
    assert_allclose(mapped[:2], 0.0, atol=1e-12)
    assert mapped[2] > 0
    # Lifted interocular direction projects onto the x axis of the image
    # plane, pointing to +x unless mirrored.
    t = np.array([io[0] / CAM.fx, io[1] / CAM.fy, 0.0])
    mt = r.apply(t)
    assert abs(mt[1]) < 1e-12
    assert (mt[0] < 0) == mirror


def test_conversion_matrix_rejects_degenerate():
    with pytest.raises(geo.GeometryError):
        geo.conversion_matrix([0.0, 0.0, -1.0], [1.0, 0.0], CAM, mirror=False)
    with pytest.raises(geo.GeometryError):
        geo.conversion_matrix([0.0, 0.0, 1.0], [0.0, 0.0], CAM, mirror=False)
    with pytest.raises(geo.GeometryError):
        # Interocular lift parallel to the reference ray.
        geo.conversion_matrix([0.2 * CAM.fx, 0.0, 0.0 * CAM.fx + 1e-6], [1.0, 0.0], CAM, False)


# --- normalized camera and warping ---


def test_normalized_camera_identity_scale():
    # Detections already 320 px apart under an identity conversion: the
    # normalized focal must equal the real focal.
    dl = np.array([CAM.cx + 160.0, CAM.cy])
    dr = np.array([CAM.cx - 160.0, CAM.cy])
    ncam = geo.normalized_camera(dl, dr, CAM, geo.Rotation3(np.eye(3)), 320.0, 224, 112)
    assert math.isclose(ncam.fx, CAM.fx, rel_tol=1e-12)
    assert_allclose([ncam.cx, ncam.cy], [111.5, 55.5])


def test_normalized_interocular_nir_setup():
    # Full-pipeline check in an NIR-like setup: eyes 63 mm apart at 650 mm,
    # focal 3679 px.  After building the context from the projected eye
    # positions, the warped interocular distance must come out at 320 px.
    eye_r = np.array([-31.5, 20.0, 650.0])
    eye_l = np.array([31.5, 18.0, 652.0])
    det_r = geo.project(eye_r, NIR_CAM)
    det_l = geo.project(eye_l, NIR_CAM)
    ctx = geo.build_context(det_r, det_r, det_l, NIR_CAM, 320.0, 224, 112, mirror=False)
    wl = geo.warp_point(det_l, ctx)
    wr = geo.warp_point(det_r, ctx)
    assert abs(np.linalg.norm(wl - wr) - 320.0) < 0.5


def test_warp_sends_reference_to_crop_center():
    ctx = geo.build_context(
        [500.0, 400.0], [500.0, 400.0], [700.0, 420.0], CAM, 320.0, 224, 112, False
    )
    assert_allclose(geo.warp_point([500.0, 400.0], ctx), [111.5, 55.5], atol=1e-9)


@given(
    finite(200, 1000),
    finite(200, 700),
    finite(120, 320),
    finite(-40, 40),
    finite(-80, 80),
    finite(-60, 60),
    st.booleans(),
)
@settings(deadline=None)
def test_warp_round_trip(rx, ry, sep, sy, px, py, mirror):
    det_r = np.array([rx, ry])
    det_l = det_r + np.array([sep, sy])
    ref = det_l if mirror else det_r
    ctx = geo.build_context(ref, det_r, det_l, CAM, 320.0, 224, 112, mirror)
    p = ref + np.array([px, py])
    w = geo.warp_point(p, ctx)
    back = geo.unwarp_point(w, ctx)
    assert np.linalg.norm(back - p) < 1e-9


# --- rough distance ---


def test_rough_distance_chord_oracle():
    # NIR geometry: detections 356.6 px apart straddling the principal
    # point.  Oracle: exact chord formula from the ray half-angle.
    half = 178.3
    det_l = np.array([NIR_CAM.cx + half, NIR_CAM.cy])
    det_r = np.array([NIR_CAM.cx - half, NIR_CAM.cy])
    rho = geo.rough_distance(det_l, det_r, NIR_CAM)
    alpha = 2.0 * math.atan(half / NIR_CAM.fx)
    oracle = 63.0 / (2.0 * math.sin(alpha / 2.0))
    assert math.isclose(rho, oracle, rel_tol=1e-12)
    assert abs(rho - 650.0) < 1.0


def test_rough_distance_scales_with_separation():
    d1 = geo.rough_distance([600.0, 480.0], [700.0, 480.0], CAM)
    d2 = geo.rough_distance([625.0, 480.0], [675.0, 480.0], CAM)
    assert d2 > 1.9 * d1


def test_rough_distance_coincident_rejected():
    with pytest.raises(geo.GeometryError):
        geo.rough_distance([500.0, 400.0], [500.0, 400.0], CAM)


# --- gaze basis and ray assembly ---


def test_gaze_basis_on_axis():
    x, y, z = geo.gaze_basis([0.0, 0.0, 650.0])
    assert_allclose(x, [1.0, 0.0, 0.0], atol=1e-12)
    assert_allclose(y, [0.0, -1.0, 0.0], atol=1e-12)
    assert_allclose(z, [0.0, 0.0, -1.0], atol=1e-12)


@given(finite(-300, 300), finite(-300, 300), finite(100, 1500))
def test_gaze_basis_orthonormal_right_handed(ox, oy, oz):
    x, y, z = geo.gaze_basis([ox, oy, oz])
    for a, b in [(x, y), (y, z), (x, z)]:
        assert abs(a @ b) < 1e-12
    for v in (x, y, z):
        assert math.isclose(float(np.linalg.norm(v)), 1.0, abs_tol=1e-12)
    assert_allclose(np.cross(x, y), z, atol=1e-12)
    assert x[0] >= 0.0
    assert x[1] == 0.0


def test_gaze_basis_degenerate_on_y_axis():
    with pytest.raises(geo.GeometryError):
        geo.gaze_basis([0.0, 50.0, 0.0])


@given(finite(10, 210), finite(10, 100), finite(-0.6, 0.6), finite(-0.6, 0.6), finite(0.7, 1.4))
def test_assemble_ray_direction_z_component(u, v, p, q, c):
    ncam = geo.Camera(fx=2900.0, fy=2900.0, cx=111.5, cy=55.5, width=224, height=112)
    ray = geo.assemble_ray([u, v], [p, q], c, 650.0, ncam)
    _, _, z = geo.gaze_basis(ray.origin)
    assert abs(float(ray.direction @ z) - 1.0) < 1e-12
    assert math.isclose(float(np.linalg.norm(ray.origin)), c * 650.0, rel_tol=1e-12)


def test_assemble_ray_rejects_nonpositive_c():
    ncam = geo.Camera(fx=2900.0, fy=2900.0, cx=111.5, cy=55.5, width=224, height=112)
    with pytest.raises(geo.GeometryError):
        geo.assemble_ray([111.5, 55.5], [0.0, 0.0], 0.0, 650.0, ncam)


# --- denormalization ---


def test_denormalize_plain_rotation_roundtrip():
    rot = geo.Rotation3(geo.rot_y(25.0) @ geo.rot_x(-10.0))
    ray_n = geo.GazeRay([5.0, -3.0, 640.0], [0.1, -0.2, -1.0], frame="normalized-right")
    ray_r = geo.denormalize_ray(ray_n, rot)
    assert_allclose(rot.m @ ray_r.origin, ray_n.origin, atol=1e-9)
    assert_allclose(rot.m @ ray_r.direction, ray_n.direction, atol=1e-9)


def test_denormalize_mirrored_matches_mirrored_scene():
    # Oracle: run the unmirrored pipeline on the x-mirrored scene.  The
    # mirrored-left denormalization must produce the x-mirrored ray.
    det_r = np.array([520.0, 470.0])
    det_l = np.array([760.0, 490.0])
    mirror_px = lambda p: np.array([2.0 * CAM.cx - p[0], p[1]])
    ctx_l = geo.build_context(det_l, det_r, det_l, CAM, 320.0, 224, 112, mirror=True)
    ctx_m = geo.build_context(
        mirror_px(det_l), mirror_px(det_l), mirror_px(det_r), CAM, 320.0, 224, 112, False
    )
    assert math.isclose(ctx_l.norm_cam.fx, ctx_m.norm_cam.fx, rel_tol=1e-12)
    o2d, d2d, c, rho = [120.0, 50.0], [0.15, -0.08], 1.05, 655.0
    ray_l = geo.denormalize_ray(
        geo.assemble_ray(o2d, d2d, c, rho, ctx_l.norm_cam, "normalized-left"),
        ctx_l.rotation,
    )
    ray_m = geo.denormalize_ray(
        geo.assemble_ray(o2d, d2d, c, rho, ctx_m.norm_cam, "normalized-right"),
        ctx_m.rotation,
    )
    flip = np.diag([-1.0, 1.0, 1.0])
    assert_allclose(ray_l.origin, flip @ ray_m.origin, atol=1e-9)
    assert_allclose(ray_l.direction, flip @ ray_m.direction, atol=1e-9)


# --- error metrics ---


def brute_force_line_distance(origin, direction, target):
    # Independent oracle: the squared distance along the line is an exact
    # quadratic in t, so fit it through three probes and read the vertex.
    ts = np.array([-1000.0, 0.0, 1000.0])
    d2 = [float(np.sum((origin + t * direction - target) ** 2)) for t in ts]
    a, b, c = np.polyfit(ts, d2, 2)
    return math.sqrt(max(c - b * b / (4.0 * a), 0.0))


@given(
    finite(-400, 400), finite(-400, 400), finite(-400, 400),
    finite(-1, 1), finite(-1, 1), finite(-1, 1),
    finite(-300, 300), finite(-300, 300), finite(0, 900),
)
@settings(deadline=None)
def test_miss_distance_brute_force(ox, oy, oz, dx, dy, dz, tx, ty, tz):
    direction = np.array([dx, dy, dz - 1.5])  # keep away from zero
    ray = geo.GazeRay([ox, oy, oz + 950.0], direction, frame="real")
    target = np.array([tx, ty, tz])
    oracle = brute_force_line_distance(ray.origin, ray.direction, target)
    assert math.isclose(geo.miss_distance(ray, target), oracle, rel_tol=1e-6, abs_tol=1e-6)


def test_miss_distance_zero_on_line():
    ray = geo.GazeRay([0.0, 0.0, 650.0], [0.1, 0.2, -1.0], frame="real")
    assert geo.miss_distance(ray, ray.point(123.4)) < 1e-9


def test_angular_error_one_degree_construction():
    eye = np.array([10.0, -20.0, 650.0])
    target = np.array([80.0, 40.0, 0.0])
    u = (target - eye) / np.linalg.norm(target - eye)
    # Rotate the true direction by exactly 1 degree about an axis
    # orthogonal to it.
    axis = np.cross(u, [0.0, 0.0, 1.0])
    d = geo.rotation_about_axis(axis, 1.0) @ u
    ray = geo.GazeRay(eye, d, frame="real")
    assert math.isclose(geo.angular_error(eye, target, ray), 1.0, abs_tol=1e-9)


def test_angular_error_zero_through_target():
    eye = np.array([0.0, 0.0, 650.0])
    target = np.array([100.0, -50.0, 0.0])
    ray = geo.GazeRay([5.0, 5.0, 655.0], target - np.array([5.0, 5.0, 655.0]), frame="real")
    assert geo.angular_error(eye, target, ray) < 1e-9


def test_angular_error_nan_when_no_foot_point():
    eye = np.array([0.0, 0.0, 650.0])
    target = np.array([0.0, 0.0, 0.0])
    # Ray direction orthogonal to ET: the orthogonality condition has no
    # solution, so the metric reports the NaN sentinel.
    ray = geo.GazeRay([50.0, 0.0, 300.0], [1.0, 0.0, 0.0], frame="real")
    assert math.isnan(geo.angular_error(eye, target, ray))


@given(
    finite(-20, 20), finite(-20, 20), finite(-0.4, 0.4),
    finite(-180, 180), finite(-89, 89),
    finite(-300, 300), finite(-300, 300), finite(-300, 300),
)
@settings(deadline=None)
def test_angular_error_isometry_invariant(ex, ey, doff, yaw, pitch, tx, ty, tz):
    eye = np.array([ex, ey, 650.0])
    target = np.array([40.0, -30.0, 0.0])
    d = target - eye + np.array([doff, -doff, 0.0])
    ray = geo.GazeRay(eye + np.array([2.0, -1.0, 4.0]), d, frame="real")
    base = geo.angular_error(eye, target, ray)
    rot = geo.ypr_matrix(yaw, pitch, 0.0) @ geo.rot_x(pitch)
    shift = np.array([tx, ty, tz])
    moved = geo.GazeRay(rot @ ray.origin + shift, rot @ ray.direction, frame="real")
    same = geo.angular_error(rot @ eye + shift, rot @ target + shift, moved)
    assert math.isclose(base, same, rel_tol=1e-9, abs_tol=1e-9)


def test_rotation3_rejects_non_orthogonal():
    with pytest.raises(geo.GeometryError):
        geo.Rotation3(np.eye(3) * 1.1)


def test_crop_center_convention():
    assert_allclose(geo.crop_center(224, 112), [111.5, 55.5])
    assert_allclose(geo.crop_center(224, 56), [111.5, 27.5])
