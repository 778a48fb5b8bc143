import json

import numpy as np
import pytest
from scipy import stats

from gazekit import diffnet as dn
from gazekit import pipeline as pl
from gazekit import trainer as tr

from conftest import gen_batch

SMALL = dict(eye_hidden=8, eye_out=4, head_hidden=8, n_calib=2)


def small_config(seed=5, **kw):
    base = dict(
        seed=seed,
        epochs=3,
        batch_size=32,
        **SMALL,
    )
    base.update(kw)
    return tr.TrainConfig(**base)


# ------------------------------------------------------- schedule


def test_lr_schedule_decades():
    cfg = small_config()
    assert tr.lr_schedule(0, cfg) == pytest.approx(1e-3)
    assert tr.lr_schedule(9, cfg) == pytest.approx(1e-3)
    assert tr.lr_schedule(10, cfg) == pytest.approx(1e-4)
    assert tr.lr_schedule(19, cfg) == pytest.approx(1e-4)
    assert tr.lr_schedule(20, cfg) == pytest.approx(1e-5)
    assert tr.lr_schedule(29, cfg) == pytest.approx(1e-5)


# ----------------------------------------------------------- adam


def test_adam_first_step_is_signed_lr():
    params = {"w": np.zeros(3)}
    state = tr.AdamState.for_params(params)
    g = np.array([0.5, -2.0, 1e-3])
    tr.adam_step(state, params, {"w": g}, lr=0.01)
    # first bias-corrected step is -lr * g / (|g| + eps) = -lr * sign(g)
    np.testing.assert_allclose(params["w"], -0.01 * np.sign(g), rtol=1e-4)
    assert state.t == 1


def test_adam_zero_gradient_is_identity():
    params = {"w": np.array([1.0, -2.0])}
    state = tr.AdamState.for_params(params)
    tr.adam_step(state, params, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_decoupled_weight_decay():
    # zero gradient isolates the decay term: one step multiplies the
    # parameter by (1 - lr * wd)
    params = {"w": np.array([2.0])}
    state = tr.AdamState.for_params(params)
    tr.adam_step(state, params, {"w": np.zeros(1)}, lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(params["w"], [2.0 * (1.0 - 0.1 * 0.5)])


def test_adam_two_steps_match_reference():
    # hand-rolled reference with the standard update equations
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    grads = [np.array([0.3, -1.0]), np.array([-0.2, 0.4])]
    w_ref = np.zeros(2)
    m = np.zeros(2)
    v = np.zeros(2)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w_ref = w_ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)

    params = {"w": np.zeros(2)}
    state = tr.AdamState.for_params(params)
    for g in grads:
        tr.adam_step(state, params, {"w": g}, lr=lr)
    np.testing.assert_allclose(params["w"], w_ref, rtol=1e-12)


def test_adam_rejects_nonfinite_gradient():
    params = {"w": np.zeros(2)}
    state = tr.AdamState.for_params(params)
    with pytest.raises(tr.TrainError, match="w"):
        tr.adam_step(state, params, {"w": np.array([1.0, np.nan])}, lr=0.1)


# ---------------------------------------------------- sparse adam


def test_sparse_adam_untouched_rows_stay_exact():
    mat = np.arange(8.0).reshape(4, 2)
    before = mat.copy()
    state = tr.SparseAdamState.for_matrix(4, 2)
    grads = np.zeros((4, 2))
    grads[1] = [1.0, -1.0]
    tr.sparse_adam_step(state, mat, grads, np.array([1]), lr=0.1)
    np.testing.assert_array_equal(mat[[0, 2, 3]], before[[0, 2, 3]])
    assert not np.array_equal(mat[1], before[1])
    np.testing.assert_array_equal(state.t, [0, 1, 0, 0])


def test_sparse_adam_per_row_counters_bias_correct():
    # row 0 stepped twice, row 1 once; each row must behave like its own
    # fresh Adam at its own step count
    mat = np.zeros((2, 1))
    state = tr.SparseAdamState.for_matrix(2, 1)
    g = np.array([[1.0], [1.0]])
    tr.sparse_adam_step(state, mat, g, np.array([0]), lr=0.1)
    tr.sparse_adam_step(state, mat, g, np.array([0, 1]), lr=0.1)

    ref = np.zeros((1, 1))
    ref_state = tr.SparseAdamState.for_matrix(1, 1)
    tr.sparse_adam_step(ref_state, ref, np.array([[1.0]]), np.array([0]), lr=0.1)
    np.testing.assert_allclose(mat[1], ref[0], rtol=1e-12)
    np.testing.assert_array_equal(state.t, [2, 1])


def test_sparse_adam_empty_rows_noop():
    mat = np.ones((3, 2))
    state = tr.SparseAdamState.for_matrix(3, 2)
    tr.sparse_adam_step(state, mat, np.zeros((3, 2)), np.zeros(0, dtype=int), lr=0.1)
    np.testing.assert_array_equal(mat, np.ones((3, 2)))


# --------------------------------------------------------- jitter


def test_jitter_zero_fraction_is_identity_copy():
    det = np.arange(12.0).reshape(3, 2, 2)
    rng = np.random.Generator(np.random.Philox(3))
    out = tr.jitter_detections(det, np.full(3, 80.0), rng, 0.0)
    np.testing.assert_array_equal(out, det)
    assert out is not det


def test_jitter_bounded_by_fraction_of_interocular():
    rng = np.random.Generator(np.random.Philox(4))
    det = np.zeros((500, 2, 2))
    interoc = rng.uniform(60.0, 120.0, size=500)
    out = tr.jitter_detections(det, interoc, rng, 0.04)
    norms = np.linalg.norm(out - det, axis=-1)  # (500, 2)
    assert np.all(norms <= 0.04 * interoc[:, None] + 1e-12)
    assert norms.max() > 0.0


def test_jitter_radius_is_disk_uniform():
    # squared radius over max squared radius should be Uniform(0, 1)
    rng = np.random.Generator(np.random.Philox(5))
    n = 4000
    det = np.zeros((n, 2, 2))
    interoc = np.full(n, 100.0)
    out = tr.jitter_detections(det, interoc, rng, 0.1)
    r2 = np.sum(out**2, axis=-1).ravel() / 10.0**2
    assert stats.kstest(r2, "uniform").pvalue > 0.01


# ------------------------------------------------------- training


@pytest.fixture(scope="module")
def tiny_arrays():
    # Clean detections: the smoke test below checks optimizer mechanics,
    # and detection noise puts a ~40 mm floor under the loss that the
    # fixed decay schedule cannot pass on 100 samples.
    _, arrays, _ = gen_batch(2, 50, seed=808, detection_jitter_frac=0.0)
    return arrays


def test_training_smoke_reduces_loss(tiny_arrays):
    # Frozen reference point: this seed and batch size reach about 7% of
    # the epoch-0 loss; the 20% bound leaves close to a 3x margin.
    cfg = tr.TrainConfig(seed=5, epochs=30, batch_size=4, jitter_frac=0.0)
    params, report = tr.train(tiny_arrays, cfg)
    assert len(report.epoch_losses) == 30
    assert report.epoch_losses[-1] < 0.2 * report.epoch_losses[0]
    assert np.isfinite(report.final_train_loss)
    assert report.final_p.shape == (2, 6)
    assert report.mean_calibration.shape == (6,)
    for v in params.values():
        assert np.isfinite(v).all()


def test_training_deterministic(tiny_arrays):
    cfg = small_config(seed=9, epochs=2)
    p1, r1 = tr.train(tiny_arrays, cfg)
    p2, r2 = tr.train(tiny_arrays, cfg)
    assert r1.epoch_losses == r2.epoch_losses
    np.testing.assert_array_equal(r1.final_p, r2.final_p)
    np.testing.assert_array_equal(r1.mean_calibration, r2.mean_calibration)
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])

    p3, r3 = tr.train(tiny_arrays, small_config(seed=10, epochs=2))
    assert r3.epoch_losses != r1.epoch_losses


def test_training_invariant_to_person_relabeling(tiny_arrays):
    _, arrays, _ = gen_batch(2, 50, seed=808)
    samples, _, _ = (None, None, None)  # relabel via arrays copy below
    import dataclasses

    relabeled = dataclasses.replace(
        arrays,
        person_ids=np.where(arrays.person_ids == 0, 7, 3),
        unique_persons=np.array([3, 7]),
        person_index=1 - arrays.person_index,
        person_fovea=arrays.person_fovea[::-1].copy(),
        person_k=arrays.person_k[::-1].copy(),
        person_interoc=arrays.person_interoc[::-1].copy(),
    )
    cfg = small_config(seed=5, epochs=2)
    _, r1 = tr.train(arrays, cfg)
    _, r2 = tr.train(relabeled, cfg)
    assert r1.epoch_losses == r2.epoch_losses
    np.testing.assert_array_equal(r2.final_p, r1.final_p[::-1])
    np.testing.assert_array_equal(r2.person_ids, [3, 7])


def test_training_without_latent(tiny_arrays):
    cfg = small_config(seed=5, epochs=2, n_calib=0)
    params, report = tr.train(tiny_arrays, cfg)
    assert report.final_p.shape == (2, 0)
    assert report.mean_calibration.shape == (0,)
    assert np.isfinite(report.epoch_losses).all()


def test_training_divergence_aborts(tiny_arrays):
    import dataclasses

    bad = dataclasses.replace(tiny_arrays, target=tiny_arrays.target * 1e9)
    with pytest.raises(tr.TrainError, match="diverged"):
        tr.train(bad, small_config(seed=5, epochs=1))


def test_aux_iris_changes_training(tiny_arrays):
    cfg_off = small_config(seed=5, epochs=2)
    cfg_on = small_config(seed=5, epochs=2, aux_iris=True, aux_fraction=0.5)
    _, r_off = tr.train(tiny_arrays, cfg_off)
    _, r_on = tr.train(tiny_arrays, cfg_on)
    assert r_on.epoch_losses != r_off.epoch_losses


# ------------------------------------------------- config, report


def test_config_roundtrip_and_validation():
    cfg = small_config(seed=3, aux_iris=True)
    cfg2 = tr.TrainConfig.from_dict(cfg.to_dict())
    assert cfg2 == cfg
    with pytest.raises(tr.TrainError, match="unknown"):
        tr.TrainConfig.from_dict({"seed": 1, "bogus": 2})
    with pytest.raises(tr.TrainError, match="seed"):
        tr.TrainConfig.from_dict({"epochs": 5})
    with pytest.raises(tr.TrainError):
        tr.TrainConfig(seed=1, epochs=0)
    with pytest.raises(tr.TrainError):
        tr.TrainConfig(seed=1, jitter_frac=-0.1)


def test_report_files_roundtrip(tmp_path, tiny_arrays):
    cfg = small_config(seed=5, epochs=2)
    _, report = tr.train(tiny_arrays, cfg)
    jpath = tmp_path / "report.json"
    cpath = tmp_path / "loss.csv"
    report.save_json(jpath)
    report.save_loss_csv(cpath)

    with open(jpath, encoding="utf-8") as fh:
        d = json.load(fh)
    assert d["format"] == tr.REPORT_FORMAT
    assert tr.TrainConfig.from_dict(d["config"]) == cfg
    assert d["epoch_losses"] == report.epoch_losses
    assert np.asarray(d["P"]).shape == report.final_p.shape

    lines = cpath.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss_mm,lr"
    assert len(lines) == 1 + len(report.epoch_losses)
