"""Benchmark experiments: sweeps, ablations, and their summary statistics.

Every experiment follows one protocol.  A training population fits the
model; a disjoint evaluation population supplies, per person, a pool of
potential calibration samples and a held-out test set.  A sweep point is
(model or k or mode) x person x repeat, where each repeat draws k
calibration samples from the pool without replacement, calibrates from
the model's mean calibration vector, and measures the mean angular test
error.  Repeats per sweep value grow in blocks until the standard error
of the value's mean is below SE_TARGET_DEG or the cap is reached, and
every draw is seeded by (experiment seed, point, person, repeat), so
reruns and worker scheduling cannot change any number.

Results stream to an append-only CSV (a crashed run leaves a valid
prefix) that is rewritten in canonical order on success, plus a JSON
summary with per-value means and consistency bands.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import eyesim as es
from . import pipeline as pl
from . import diffnet as dn
from . import calib as cb
from . import trainer as tr

logger = logging.getLogger(__name__)

SUMMARY_FORMAT = "gazekit-exp/1"
EXPERIMENT_KINDS = (
    "nparams",
    "ksweep",
    "distmode",
    "depthplanes",
    "irisanchor",
    "gradcheck",
)

NPARAMS_VALUES = (0, 1, 2, 3, 4, 5)
KSWEEP_VALUES = (0, 1, 2, 4, 8, 9, 16, 32, 64)
NPARAMS_K = 16
DISTMODE_K = 9

SE_TARGET_DEG = 0.02
REPEAT_BLOCK = 4
MAX_REPEATS = 24

THREE_PLANES = (-300.0, 0.0, 300.0)
SINGLE_PLANE = (0.0,)

# Default scenes per experiment family.  The regression sweeps (latent size,
# calibration size, distance encodings) run a desk scene: the screen sits
# below a camera at its top edge and the user leans back 70 to 90 cm.  The
# off-axis viewing makes facial foreshortening carry real distance
# information, which the distance-mode comparison is about; a camera-centered
# target region washes that signal out.  The origin-accuracy experiments
# (depth planes, iris anchoring) keep the wide centered scene instead,
# where transverse target spread gives depth triangulation the most leverage.
DESK_SCENE = {
    "target_region": (-100.0, 80.0, 100.0, 220.0),
    "distance_range": (700.0, 900.0),
}
DEFAULT_SCENE = {
    "nparams": DESK_SCENE,
    "ksweep": DESK_SCENE,
    "distmode": DESK_SCENE,
}

# The origin-accuracy experiments double the schedule.  Absolute scale is
# the slowest thing the network learns: per-person size cues keep sharpening
# well after angular error has flattened, and the latent rows only become
# cleanly readable once the low-learning-rate tail has run.
DEPTH_SCHEDULE = {"epochs": 60, "lr_decay_every": 20}

CSV_COLUMNS = (
    "experiment",
    "value",
    "person",
    "repeat",
    "k",
    "mean_error_deg",
    "origin_median_mm",
    "origin_iqr_mm",
)


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    """Sizes and seeds for one experiment run; JSON-friendly."""

    kind: str
    seed: int
    train_persons: int = 200
    train_spp: int = 300
    eval_persons: int = 40
    calib_pool: int = 100
    test_per_person: int = 100
    sweep: tuple = ()  # kind-specific; empty means the default sweep
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    sim: dict = field(default_factory=dict)  # scene-geometry overrides

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ExperimentError(
                f"unknown experiment kind {self.kind!r}; expected one of "
                f"{', '.join(EXPERIMENT_KINDS)}"
            )
        if self.calib_pool < 1 or self.test_per_person < 1:
            raise ExperimentError("calib_pool and test_per_person must be positive")
        self.sweep = tuple(self.sweep)
        if not self.sim:
            # Fill in the experiment family's default scene so the persisted
            # config states the geometry it actually ran.  Any explicit sim
            # overrides replace the default wholesale.
            self.sim = dict(DEFAULT_SCENE.get(self.kind, {}))
        owned = {"n_persons", "samples_per_person", "seed", "target_planes"} & set(self.sim)
        if owned:
            raise ExperimentError(
                f"sim overrides may not set {sorted(owned)}; the experiment owns them"
            )
        unknown = set(self.sim) - set(es.SimConfig.__dataclass_fields__)
        if unknown:
            raise ExperimentError(f"unknown sim override fields: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sweep"] = list(self.sweep)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ExperimentError(f"unknown experiment config fields: {sorted(unknown)}")
        missing = {"kind", "seed"} - set(d)
        if missing:
            raise ExperimentError(f"experiment config missing fields: {sorted(missing)}")
        return cls(**d)

    def train_config(self, **overrides) -> tr.TrainConfig:
        base = dict(seed=self.seed, **self.train)
        base.update(overrides)
        return tr.TrainConfig(**base)

    def _sim_overrides(self) -> dict:
        kw = dict(self.sim)
        for k in ("target_region", "head_yaw_range", "head_pitch_range", "distance_range"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return kw

    def sim_train(self, planes=THREE_PLANES) -> es.SimConfig:
        return es.SimConfig(
            n_persons=self.train_persons,
            samples_per_person=self.train_spp,
            seed=self.seed,
            target_planes=tuple(planes),
            **self._sim_overrides(),
        )

    def sim_eval(self) -> es.SimConfig:
        # Disjoint person stream: a different seed guarantees the eval
        # population shares no per-person substream with training.  Eval
        # targets always span the three planes regardless of the training
        # arm, mirroring the benchmark protocol.
        return es.SimConfig(
            n_persons=self.eval_persons,
            samples_per_person=self.calib_pool + self.test_per_person,
            seed=self.seed + 1,
            target_planes=THREE_PLANES,
            **self._sim_overrides(),
        )


# ------------------------------------------------------------------ data


@dataclass
class EvalSplit:
    """Evaluation population, normalized once, with per-person splits."""

    arrays: pl.DatasetArrays
    nb: pl.NormalizedBatch
    pools: list  # per person index: np.ndarray of sample indices
    tests: list

    @property
    def n_persons(self) -> int:
        return self.arrays.n_persons


def split_eval(arrays: pl.DatasetArrays, pool_size: int) -> EvalSplit:
    nb = pl.normalize_batch(arrays)
    pools, tests = [], []
    for m in range(arrays.n_persons):
        idx = np.flatnonzero(arrays.person_index == m)
        if idx.size <= pool_size:
            raise ExperimentError(
                f"person {m} has {idx.size} samples, need more than {pool_size}"
            )
        pools.append(idx[:pool_size])
        tests.append(idx[pool_size:])
    return EvalSplit(arrays, nb, pools, tests)


def _point_rng(seed: int, point: int, person: int, repeat: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(point, person, repeat))
    return np.random.Generator(np.random.Philox(ss))


# ------------------------------------------------- per-point machinery


@dataclass
class PointResult:
    """All repeats of one sweep value: matrices indexed (person, repeat)."""

    value: object
    k: int
    mu: np.ndarray  # (M, R) mean angular error per person per repeat
    origin_median: np.ndarray  # (M, R)
    origin_iqr: np.ndarray  # (M, R)
    pooled_origin: np.ndarray  # (2 * tests,) from repeat 0, all persons

    @property
    def repeats(self) -> int:
        return self.mu.shape[1]

    def mean(self) -> float:
        return float(self.mu.mean())

    def band(self) -> float:
        if self.repeats < 2:
            return 0.0
        b = cb.consistency_band(self.mu)
        return 0.0 if math.isnan(b) else b

    def person_se(self) -> float:
        per_person = self.mu.mean(axis=1)
        return float(np.std(per_person, ddof=1) / math.sqrt(per_person.size))

    def repeat_se(self) -> float:
        means = self.mu.mean(axis=0)
        if means.size < 2:
            return 0.0
        return float(np.std(means, ddof=1) / math.sqrt(means.size))

    def summary(self) -> dict:
        return {
            "value": self.value,
            "k": self.k,
            "mean_error_deg": self.mean(),
            "band_deg": self.band(),
            "person_se_deg": self.person_se(),
            "repeat_se_deg": self.repeat_se(),
            "repeats": self.repeats,
            "origin_median_mm": float(np.median(self.pooled_origin)),
            "origin_iqr_mm": _iqr(self.pooled_origin),
        }


def _iqr(x) -> float:
    q1, q3 = np.percentile(np.asarray(x), [25.0, 75.0])
    return float(q3 - q1)


def _person_eval(params, arch, split, m, p_vec):
    """Mean test error and origin distances for one person."""
    nb_t = pl.take_batch(split.nb, split.tests[m])
    out = dn.forward(params, arch, nb_t, p_vec)
    errs = cb.angular_errors(out.origin, out.direction, nb_t.truth_eyes, nb_t.target[:, None, :])
    od = np.linalg.norm(out.origin - nb_t.truth_eyes, axis=-1).ravel()
    return float(np.nanmean(errs)), od


def calibration_point(
    params: dict,
    arch: dn.ArchConfig,
    p_bar: np.ndarray,
    split: EvalSplit,
    k: int,
    value,
    seed: int,
    point: int,
    hinges: dn.HingeConfig,
    se_target: float = SE_TARGET_DEG,
    block: int = REPEAT_BLOCK,
    max_repeats: int = MAX_REPEATS,
) -> PointResult:
    """Adaptive-repeat evaluation of one sweep value.

    k = 0 evaluates the uncalibrated model (mean calibration vector);
    its repeats are identical, so a single repeat is recorded.
    """
    m_count = split.n_persons
    if k > len(split.pools[0]):
        raise ExperimentError(
            f"k={k} exceeds the calibration pool size {len(split.pools[0])}"
        )
    mu, omed, oiqr = [], [], []
    pooled0 = None
    r = 0
    if k == 0:
        block = 1
    while True:
        for _ in range(block):
            col_mu = np.zeros(m_count)
            col_med = np.zeros(m_count)
            col_iqr = np.zeros(m_count)
            pooled = []
            for m in range(m_count):
                if k > 0:
                    rng = _point_rng(seed, point, m, r)
                    chosen = np.sort(rng.choice(split.pools[m], size=k, replace=False))
                    nb_c = pl.take_batch(split.nb, chosen)
                    p_m = cb.calibrate(params, arch, nb_c, p_bar, hinges).p
                else:
                    p_m = p_bar
                err, od = _person_eval(params, arch, split, m, p_m)
                col_mu[m] = err
                col_med[m] = float(np.median(od))
                col_iqr[m] = _iqr(od)
                pooled.append(od)
            mu.append(col_mu)
            omed.append(col_med)
            oiqr.append(col_iqr)
            if pooled0 is None:
                pooled0 = np.concatenate(pooled)
            r += 1
        res = PointResult(
            value, k, np.stack(mu, axis=1), np.stack(omed, axis=1),
            np.stack(oiqr, axis=1), pooled0,
        )
        if k == 0 or res.repeat_se() <= se_target or r >= max_repeats:
            return res


# --------------------------------------------------------- CSV plumbing


class CsvSink:
    """Append-only result rows with a canonical sorted rewrite at the end."""

    def __init__(self, path):
        self.path = path
        self.rows = []
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(CSV_COLUMNS)
        self._fh.flush()

    def add_point(self, experiment: str, res: PointResult) -> None:
        for m in range(res.mu.shape[0]):
            for rep in range(res.repeats):
                row = (
                    experiment,
                    str(res.value),
                    m,
                    rep,
                    res.k,
                    repr(float(res.mu[m, rep])),
                    repr(float(res.origin_median[m, rep])),
                    repr(float(res.origin_iqr[m, rep])),
                )
                self.rows.append(row)
                self._writer.writerow(row)
        self._fh.flush()

    def finalize(self, value_order: list) -> None:
        self._fh.close()
        order = {str(v): i for i, v in enumerate(value_order)}
        self.rows.sort(key=lambda row: (order[row[1]], row[4], row[2], row[3]))
        tmp = f"{self.path}.tmp"
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            w.writerows(self.rows)
        os.replace(tmp, self.path)

    def abandon(self) -> None:
        if not self._fh.closed:
            self._fh.close()


# ----------------------------------------------------------- sweep plans


@dataclass
class ModelSpec:
    """One trained model an experiment needs."""

    overrides: dict  # TrainConfig overrides on top of the experiment's
    planes: tuple = THREE_PLANES  # training target planes


@dataclass
class PointSpec:
    """One sweep value: evaluate ``model`` at calibration size ``k``."""

    point: int  # unique index, keys the calibration rng substream
    value: object
    k: int
    model: str


def _plan(cfg: ExperimentConfig) -> tuple[dict, list]:
    if cfg.kind == "nparams":
        values = cfg.sweep or NPARAMS_VALUES
        models = {f"N{int(n)}": ModelSpec(dict(n_calib=int(n))) for n in values}
        points = [
            PointSpec(i, int(n), NPARAMS_K, f"N{int(n)}") for i, n in enumerate(values)
        ]
    elif cfg.kind == "ksweep":
        values = cfg.sweep or KSWEEP_VALUES
        models = {"base": ModelSpec({})}
        points = [PointSpec(i, int(k), int(k), "base") for i, k in enumerate(values)]
    elif cfg.kind == "distmode":
        values = cfg.sweep or dn.DIST_MODES  # none first, then richer encodings
        models = {str(m): ModelSpec(dict(distance_mode=str(m))) for m in values}
        points = []
        for i, m in enumerate(values):
            points.append(PointSpec(2 * i, str(m), 0, str(m)))
            points.append(PointSpec(2 * i + 1, str(m), DISTMODE_K, str(m)))
    elif cfg.kind == "depthplanes":
        models = {
            "three-plane": ModelSpec(dict(DEPTH_SCHEDULE), THREE_PLANES),
            "single-plane": ModelSpec(dict(DEPTH_SCHEDULE), SINGLE_PLANE),
        }
        points = [
            PointSpec(0, "three-plane", 0, "three-plane"),
            PointSpec(1, "single-plane", 0, "single-plane"),
        ]
    elif cfg.kind == "irisanchor":
        models = {
            "off": ModelSpec(dict(aux_iris=False, **DEPTH_SCHEDULE)),
            "on": ModelSpec(dict(aux_iris=True, **DEPTH_SCHEDULE)),
        }
        points = [PointSpec(0, "off", 0, "off"), PointSpec(1, "on", 0, "on")]
    else:
        raise ExperimentError(f"{cfg.kind} has no sweep plan")
    return models, points


def model_key(tcfg: tr.TrainConfig, planes=THREE_PLANES, sim: dict | None = None) -> str:
    """Cache key for a trained model: readable prefix plus a config hash.

    The hash covers the full training configuration and scene geometry, so
    two models share a key only when retraining would reproduce them
    byte-for-byte from the same rendered arrays.
    """
    blob = json.dumps(
        dict(train=dataclasses.asdict(tcfg), planes=list(planes), sim=sim or {}),
        sort_keys=True, separators=(",", ":"), default=list,
    )
    tag = hashlib.sha256(blob.encode()).hexdigest()[:8]
    return (
        f"N{tcfg.n_calib}-{tcfg.distance_mode}-aux{int(tcfg.aux_iris)}-"
        f"planes{len(planes)}-{tag}"
    )


def _trained(arrays, tcfg: tr.TrainConfig, pretrained: dict | None, key: str):
    if pretrained and key in pretrained:
        return pretrained[key]
    logger.info("training model %s", key)
    params, report = tr.train(arrays, tcfg)
    if pretrained is not None:
        pretrained[key] = (params, report)
    return params, report


def _run_sweep(
    cfg: ExperimentConfig,
    sink: CsvSink,
    pretrained: dict | None,
    train_arrays: pl.DatasetArrays | None,
    split: EvalSplit | None,
    workers: int,
    out_dir,
) -> list:
    """Train the plan's models, evaluate its points, stream rows to ``sink``.

    Returns PointResults in plan order.  ``train_arrays`` and ``split``
    short-circuit rendering when the caller already holds the benchmark
    data (they must match the config's sizes and seed).
    """
    models, points = _plan(cfg)

    arrays_cache: dict = {}
    if train_arrays is not None:
        arrays_cache[THREE_PLANES] = train_arrays
    trained = {}
    for key, spec in models.items():
        arrays = arrays_cache.get(spec.planes)
        if arrays is None:
            logger.info("rendering training set (planes %s)", list(spec.planes))
            samples, info = es.generate_samples(cfg.sim_train(spec.planes))
            logger.info("rendered %d samples (%d rejected)", len(samples), info["rejected"])
            arrays = pl.build_arrays(samples)
            arrays_cache[spec.planes] = arrays
        trained[key] = _trained(
            arrays, cfg.train_config(**spec.overrides), pretrained,
            model_key(cfg.train_config(**spec.overrides), spec.planes, cfg.sim),
        )

    eval_path = None
    if split is None:
        if workers > 1:
            eval_path = os.path.join(out_dir, "eval.jsonl")
            es.generate_dataset(cfg.sim_eval(), eval_path)
            _, eval_arrays = pl.load_arrays(eval_path)
        else:
            eval_samples, _ = es.generate_samples(cfg.sim_eval())
            eval_arrays = pl.build_arrays(eval_samples)
        split = split_eval(eval_arrays, cfg.calib_pool)

    if workers > 1:
        if eval_path is None:
            eval_path = os.path.join(out_dir, "eval.jsonl")
            es.generate_dataset(cfg.sim_eval(), eval_path)
        tasks = []
        for ps in points:
            spec = models[ps.model]
            tcfg = cfg.train_config(**spec.overrides)
            mp = os.path.join(out_dir, f"model-{ps.model}.json")
            if not os.path.exists(mp):
                params, report = trained[ps.model]
                dn.save_params(mp, params, tcfg.arch(), report.mean_calibration)
            tasks.append(
                dict(
                    config=cfg.to_dict(),
                    model_path=mp,
                    eval_path=eval_path,
                    train_overrides=spec.overrides,
                    k=ps.k,
                    value=ps.value,
                    point=ps.point,
                )
            )
        by_point = dict(map_points(tasks, workers))
        results = [by_point[ps.point] for ps in points]
    else:
        results = []
        for ps in points:
            params, report = trained[ps.model]
            tcfg = cfg.train_config(**models[ps.model].overrides)
            results.append(
                calibration_point(
                    params, tcfg.arch(), report.mean_calibration, split,
                    ps.k, ps.value, cfg.seed, ps.point, tcfg.hinges(),
                )
            )

    for res in results:
        sink.add_point(cfg.kind, res)
        logger.info(
            "%s %s (k=%d): %.3f deg, origin median %.1f mm",
            cfg.kind, res.value, res.k, res.mean(),
            float(np.median(res.pooled_origin)),
        )
    return results, trained, arrays_cache


# ------------------------------------------------------------- summaries


def _summarize_nparams(results: list) -> dict:
    by_n = {int(p.value): p for p in results}
    summary = {"points": [p.summary() for p in results], "k": NPARAMS_K}
    if 3 in by_n and 5 in by_n:
        e3, e5 = by_n[3].mean(), by_n[5].mean()
        summary["plateau_stat"] = (e3 - e5) / e3
    return summary


def _summarize_ksweep(results: list) -> dict:
    by_k = {int(p.value): p for p in results}
    summary = {"points": [p.summary() for p in results]}
    if 0 in by_k and 9 in by_k:
        un, cal = by_k[0], by_k[9]
        improved = np.mean(cal.mu.mean(axis=1) < un.mu.mean(axis=1))
        summary["calibration_benefit"] = {
            "uncalibrated_deg": un.mean(),
            "calibrated_k9_deg": cal.mean(),
            "ratio": cal.mean() / un.mean(),
            "band_deg": cal.band(),
            "fraction_improved": float(improved),
        }
    return summary


def _summarize_distmode(results: list) -> dict:
    pairs: dict = {}
    for res in results:
        slot = "uncalibrated" if res.k == 0 else "calibrated"
        pairs.setdefault(str(res.value), {})[slot] = res
    summary_points = [
        {
            "value": mode,
            "uncalibrated": d["uncalibrated"].summary(),
            "calibrated": d["calibrated"].summary(),
        }
        for mode, d in pairs.items()
    ]
    summary = {"points": summary_points, "k": DISTMODE_K}
    order = ("eyes-and-face", "eyes-only", "per-eye", "none")
    if all(m in pairs and "uncalibrated" in pairs[m] for m in order):
        vecs = {m: pairs[m]["uncalibrated"].mu.mean(axis=1) for m in order}
        summary["ordering"] = [
            {
                "pair": f"{a} minus {b}",
                "gap_deg": float((vecs[a] - vecs[b]).mean()),
                "paired_se_deg": float(
                    (vecs[a] - vecs[b]).std(ddof=1) / np.sqrt(vecs[a].size)
                ),
            }
            # adjacent pairs in the claimed order, weaker minus stronger
            for a, b in zip(order[1:], order[:-1])
        ]
    if "none" in pairs and "eyes-and-face" in pairs:
        gap_un = pairs["none"]["uncalibrated"].mean() - pairs["eyes-and-face"]["uncalibrated"].mean()
        gap_cal = pairs["none"]["calibrated"].mean() - pairs["eyes-and-face"]["calibrated"].mean()
        summary["gap_shrink"] = {
            "uncalibrated_gap_deg": gap_un,
            "calibrated_gap_deg": gap_cal,
            "shrink_fraction": 1.0 - gap_cal / gap_un if gap_un > 0 else math.nan,
        }
    return summary


def _summarize_depthplanes(results: list) -> dict:
    by = {str(p.value): p for p in results}
    med_three = float(np.median(by["three-plane"].pooled_origin))
    med_single = float(np.median(by["single-plane"].pooled_origin))
    return {
        "points": [p.summary() for p in results],
        "origin_median_three_mm": med_three,
        "origin_median_single_mm": med_single,
        "median_ratio": med_single / med_three if med_three > 0 else math.inf,
    }


def _summarize_irisanchor(results: list) -> dict:
    by = {str(p.value): p for p in results}
    iqr_off = _iqr(by["off"].pooled_origin)
    iqr_on = _iqr(by["on"].pooled_origin)
    return {
        "points": [p.summary() for p in results],
        "origin_iqr_off_mm": iqr_off,
        "origin_iqr_on_mm": iqr_on,
        "iqr_reduction": 1.0 - iqr_on / iqr_off if iqr_off > 0 else math.nan,
    }


_SUMMARIZERS = {
    "nparams": _summarize_nparams,
    "ksweep": _summarize_ksweep,
    "distmode": _summarize_distmode,
    "depthplanes": _summarize_depthplanes,
    "irisanchor": _summarize_irisanchor,
}


def run_gradcheck(cfg: ExperimentConfig, instances: int = 20) -> dict:
    """Finite-difference audit on random (weights, p, batch) instances."""
    results = []
    for i in range(instances):
        rng = _point_rng(cfg.seed, 0, 0, i)
        mode = dn.DIST_MODES[i % len(dn.DIST_MODES)]
        arch = dn.ArchConfig(
            n_calib=int(rng.integers(0, 4)),
            eye_hidden=8,
            eye_out=4,
            head_hidden=8,
            distance_mode=mode,
        )
        sim = es.SimConfig(
            n_persons=2, samples_per_person=3, seed=int(rng.integers(1 << 31))
        )
        samples, _ = es.generate_samples(sim)
        nb = pl.normalize_batch(pl.build_arrays(samples))
        params = dn.init_params(int(rng.integers(1 << 31)), arch)
        params = {
            k: v + rng.normal(scale=0.3, size=v.shape) for k, v in params.items()
        }
        p = rng.normal(scale=0.3, size=(nb.eye_x.shape[0], arch.p_dim))
        worst = dn.gradient_check(params, arch, nb, p)
        results.append({"instance": i, "mode": mode, "worst_rel_error": worst})
        logger.info("gradcheck %d (%s): %.2e", i, mode, worst)
    worst_overall = max(r["worst_rel_error"] for r in results)
    return {
        "instances": results,
        "worst_rel_error": worst_overall,
        "passed": bool(worst_overall < 1e-4),
    }


# --------------------------------------------------------------- driver


def _value_order(cfg: ExperimentConfig) -> list:
    _, points = _plan(cfg)
    seen = []
    for ps in points:
        if ps.value not in seen:
            seen.append(ps.value)
    return seen


def run_experiment(
    cfg: ExperimentConfig,
    out_dir,
    pretrained: dict | None = None,
    train_arrays: pl.DatasetArrays | None = None,
    split: EvalSplit | None = None,
    workers: int = 1,
) -> dict:
    """Run one experiment into ``out_dir``; returns the summary document.

    Writes <kind>.csv (one row per value/person/repeat) and
    <kind>_summary.json.  A failed run leaves the partial CSV in place,
    recognizable by the missing summary file.
    """
    os.makedirs(out_dir, exist_ok=True)
    if cfg.kind == "gradcheck":
        summary = run_gradcheck(cfg)
    else:
        sink = CsvSink(os.path.join(out_dir, f"{cfg.kind}.csv"))
        try:
            results, trained, arrays_cache = _run_sweep(
                cfg, sink, pretrained, train_arrays, split, workers, out_dir
            )
            summary = _SUMMARIZERS[cfg.kind](results)
            if cfg.kind == "depthplanes":
                # The three-plane model doubles as the identifiability
                # readout: regress its learned per-person rows onto the
                # simulator's true eye parameters.
                _, report = trained["three-plane"]
                tcfg = cfg.train_config(**_plan(cfg)[0]["three-plane"].overrides)
                if tcfg.n_calib > 0:
                    summary["latent_r2"] = latent_identifiability(
                        report.final_p, arrays_cache[THREE_PLANES], tcfg.n_calib
                    )
        except Exception:
            sink.abandon()
            raise
        sink.finalize(_value_order(cfg))
    doc = {
        "format": SUMMARY_FORMAT,
        "kind": cfg.kind,
        "config": cfg.to_dict(),
        "summary": summary,
    }
    path = os.path.join(out_dir, f"{cfg.kind}_summary.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return doc


# ----------------------------------------------------- identifiability


def latent_identifiability(p_matrix: np.ndarray, arrays: pl.DatasetArrays, n: int) -> dict:
    """OLS from trained calibration rows to true per-eye parameters.

    Each eye's N-dimensional half is regressed (with intercept) onto that
    eye's true horizontal and vertical fovea offsets and cornea-pupil
    distance; returns R-squared per (eye, component).
    """
    if n == 0:
        raise ExperimentError("no calibration dimensions to regress")
    out = {}
    halves = {"right": p_matrix[:, :n], "left": p_matrix[:, n:]}
    for eye, half in halves.items():
        e = es.RIGHT if eye == "right" else es.LEFT
        targets = {
            "fovea_h": arrays.person_fovea[:, e, 0],
            "fovea_v": arrays.person_fovea[:, e, 1],
            "cornea_pupil": arrays.person_k[:, e],
        }
        x = np.column_stack([half, np.ones(half.shape[0])])
        for name, y in targets.items():
            coef, *_ = np.linalg.lstsq(x, y, rcond=None)
            resid = y - x @ coef
            ss_tot = float(np.sum((y - y.mean()) ** 2))
            r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else math.nan
            out[f"{eye}.{name}"] = r2
    return out


# ------------------------------------------------------- worker fan-out


def _pool_task(payload: dict) -> tuple:
    """Executed in a worker: one calibration sweep point from saved files."""
    cfg = ExperimentConfig.from_dict(payload["config"])
    params, arch, p_bar = dn.load_params(payload["model_path"])
    _, eval_arrays = pl.load_arrays(payload["eval_path"])
    split = split_eval(eval_arrays, cfg.calib_pool)
    tcfg = cfg.train_config(**payload.get("train_overrides", {}))
    res = calibration_point(
        params, arch, np.asarray(p_bar), split,
        payload["k"], payload["value"], cfg.seed, payload["point"], tcfg.hinges(),
    )
    return payload["point"], res


def map_points(tasks: list, workers: int) -> list:
    """Run point payloads, optionally in a process pool; preserves order."""
    if workers <= 1:
        return [_pool_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return sorted(pool.map(_pool_task, tasks), key=lambda pair: pair[0])
