"""Few-shot personal calibration and evaluation metrics.

Calibration freezes the trained weights and minimizes the same loss over
one 2N-dimensional personal vector with a dense-inverse-Hessian BFGS.
The line search uses Armijo plus weak Wolfe bisection, which guarantees
positive curvature updates and tolerates the miss-distance loss's kink
at zero.  The mean calibration solves the same problem once over the
whole training set; it is both the uncalibrated operating point and the
initializer for per-person calibration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import eyesim as es
from . import pipeline as pl
from . import diffnet as dn

logger = logging.getLogger(__name__)


@dataclass
class BfgsResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool


def minimize_bfgs(
    fun,
    x0,
    gtol: float = 1e-8,
    maxiter: int = 200,
    c1: float = 1e-4,
    c2: float = 0.9,
) -> BfgsResult:
    """Dense BFGS with an Armijo + weak-Wolfe bisection line search.

    ``fun(x) -> (value, gradient)``.  Suited to low dimension (here at
    most ~10) and to objectives that are smooth almost everywhere: weak
    Wolfe acceptance keeps y's =  g+ - g curvature positive so the
    inverse-Hessian update stays well defined.
    """
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    f, g = fun(x)
    if n == 0:
        return BfgsResult(x, float(f), 0, True)
    h = np.eye(n)
    best_f, best_x = float(f), x.copy()
    first_update = True

    for it in range(maxiter):
        if np.max(np.abs(g)) < gtol:
            return BfgsResult(best_x, best_f, it, True)
        d = -h @ g
        gd = float(g @ d)
        if gd >= 0.0:  # H lost positive definiteness numerically; reset
            h = np.eye(n)
            d = -g
            gd = float(g @ d)
            if gd >= 0.0:
                return BfgsResult(best_x, best_f, it, True)

        lo, hi = 0.0, math.inf
        t = 1.0
        f_new = g_new = None
        for _ in range(60):
            f_t, g_t = fun(x + t * d)
            if not np.isfinite(f_t) or f_t > f + c1 * t * gd:
                hi = t
            elif float(g_t @ d) < c2 * gd:
                lo = t
            else:
                f_new, g_new = f_t, g_t
                break
            t = 0.5 * (lo + hi) if hi < math.inf else 2.0 * t
        if f_new is None:
            logger.debug("line search failed at iteration %d", it)
            return BfgsResult(best_x, best_f, it, False)

        s = t * d
        y = g_new - g
        x = x + s
        f, g = f_new, g_new
        if f < best_f:
            best_f, best_x = float(f), x.copy()

        ys = float(y @ s)
        if ys > 1e-12 * float(np.linalg.norm(y)) * float(np.linalg.norm(s)):
            if first_update:
                h *= ys / float(y @ y)
                first_update = False
            rho = 1.0 / ys
            hy = h @ y
            # H <- (I - rho s y')H(I - rho y s') + rho s s'
            h -= rho * (np.outer(s, hy) + np.outer(hy, s))
            h += rho * rho * float(y @ hy) * np.outer(s, s)
            h += rho * np.outer(s, s)
    return BfgsResult(best_x, best_f, maxiter, False)


@dataclass
class CalibResult:
    p: np.ndarray
    final_error: float
    iterations: int
    converged: bool


def _p_objective(params, arch, nb, hinges):
    def fun(p):
        loss, _, g_p = dn.loss_and_grad(params, arch, nb, p, hinges, want_theta=False)
        return loss, np.asarray(g_p, dtype=float)

    return fun


def calibrate(
    params: dict,
    arch: dn.ArchConfig,
    nb: pl.NormalizedBatch | None,
    p_init,
    hinges: dn.HingeConfig = dn.HingeConfig(),
    maxiter: int = 200,
) -> CalibResult:
    """Fit one person's 2N vector on a (possibly tiny) calibration set.

    ``nb`` may be None or empty-equivalent for the k=0 case, which
    returns the initializer untouched.
    """
    p_init = np.asarray(p_init, dtype=float).copy()
    if nb is None or nb.eye_x.shape[0] == 0:
        return CalibResult(p_init, math.nan, 0, True)
    res = minimize_bfgs(_p_objective(params, arch, nb, hinges), p_init, maxiter=maxiter)
    return CalibResult(res.x, res.fun, res.iterations, res.converged)


def mean_calibration(
    params: dict,
    arch: dn.ArchConfig,
    nb: pl.NormalizedBatch,
    hinges: dn.HingeConfig = dn.HingeConfig(),
    maxiter: int = 150,
    gtol: float = 1e-6,
) -> np.ndarray:
    """Single shared calibration vector minimizing the training-set loss.

    Runs over the full training set, so the gradient tolerance is looser
    than per-person calibration: sub-1e-4 precision in p̄ is far below
    the evaluation noise and each gradient costs a full-dataset pass.
    """
    if arch.n_calib == 0:
        return np.zeros(0)
    res = minimize_bfgs(
        _p_objective(params, arch, nb, hinges),
        np.zeros(arch.p_dim),
        gtol=gtol,
        maxiter=maxiter,
    )
    if not res.converged:
        logger.warning("mean calibration stopped before convergence (%d iters)", res.iterations)
    return res.x


@dataclass
class EvalReport:
    mean_error: float  # mean of per-person means, degrees
    pooled_mean_error: float  # mean over all sample-eyes
    median_error: float
    quantiles: np.ndarray  # deciles 10..90
    per_person_mean: np.ndarray  # (M,)
    person_ids: np.ndarray  # (M,)
    nan_count: int
    origin_distances: np.ndarray  # (valid sample-eyes,) mm, pooled
    errors: np.ndarray  # (S, 2) degrees, NaN where undefined

    def origin_median(self) -> float:
        return float(np.median(self.origin_distances))

    def origin_iqr(self) -> float:
        q1, q3 = np.percentile(self.origin_distances, [25.0, 75.0])
        return float(q3 - q1)

    def to_dict(self) -> dict:
        return {
            "mean_error_deg": self.mean_error,
            "pooled_mean_error_deg": self.pooled_mean_error,
            "median_error_deg": self.median_error,
            "quantiles_deg": [float(x) for x in self.quantiles],
            "per_person_mean_deg": [float(x) for x in self.per_person_mean],
            "person_ids": [int(x) for x in self.person_ids],
            "nan_count": self.nan_count,
            "origin_median_mm": self.origin_median(),
            "origin_iqr_mm": self.origin_iqr(),
        }


def angular_errors(
    origin: np.ndarray, direction: np.ndarray, truth_eye: np.ndarray, target: np.ndarray
) -> np.ndarray:
    """Vectorized counterpart of :func:`geometry.angular_error`.

    All inputs broadcast over leading axes with a trailing 3-vector; the
    result drops that axis.  NaN marks rays for which no point projects
    onto the eye-target line, matching the scalar metric.
    """
    e = np.asarray(truth_eye, dtype=float)
    t = np.asarray(target, dtype=float)
    et = t - e
    net = np.linalg.norm(et, axis=-1, keepdims=True)
    if np.any(net < 1e-12):
        raise geo.GeometryError("a true eye coincides with its target")
    u = et / net
    d = np.asarray(direction, dtype=float)
    o = np.asarray(origin, dtype=float)
    denom = np.sum(d * u, axis=-1)
    ok = np.abs(denom) >= 1e-12 * np.linalg.norm(d, axis=-1)
    safe = np.where(ok, denom, 1.0)
    s = np.sum((t - o) * u, axis=-1) / safe
    eg = o + s[..., None] * d - e
    neg = np.linalg.norm(eg, axis=-1)
    ok &= neg >= 1e-12
    ang = np.degrees(
        np.arctan2(np.linalg.norm(np.cross(u, eg), axis=-1), np.sum(u * eg, axis=-1))
    )
    return np.where(ok, ang, np.nan)


def evaluate(
    params: dict,
    arch: dn.ArchConfig,
    nb: pl.NormalizedBatch,
    p_rows: np.ndarray,
    person_ids: np.ndarray | None = None,
) -> EvalReport:
    """Angular errors against held-out true eye centers.

    ``p_rows`` has one row per person index appearing in ``nb`` (shape
    (M, 2N)); every sample uses its person's row.
    """
    s_count = nb.eye_x.shape[0]
    p_rows = np.asarray(p_rows, dtype=float)
    per_sample_p = p_rows[nb.person_index]
    out = dn.forward(params, arch, nb, per_sample_p)

    errors = angular_errors(
        out.origin, out.direction, nb.truth_eyes, nb.target[:, None, :]
    )
    origin_d = np.linalg.norm(out.origin - nb.truth_eyes, axis=-1)

    finite = np.isfinite(errors)
    nan_count = int((~finite).sum())
    m_count = int(nb.person_index.max()) + 1
    per_person = np.full(m_count, np.nan)
    for m in range(m_count):
        sel = nb.person_index == m
        vals = errors[sel][finite[sel]]
        if vals.size:
            per_person[m] = float(vals.mean())
    pooled = errors[finite]
    ids = (
        np.asarray(person_ids)
        if person_ids is not None
        else np.arange(m_count)
    )
    return EvalReport(
        mean_error=float(np.nanmean(per_person)),
        pooled_mean_error=float(pooled.mean()) if pooled.size else math.nan,
        median_error=float(np.median(pooled)) if pooled.size else math.nan,
        quantiles=np.percentile(pooled, np.arange(10, 100, 10)) if pooled.size else np.full(9, np.nan),
        per_person_mean=per_person,
        person_ids=ids,
        nan_count=nan_count,
        origin_distances=origin_d.ravel(),
        errors=errors,
    )


def consistency_band(mu_table) -> float:
    """Spread of per-person mean errors across repeated calibrations.

    ``mu_table`` is (persons, repeats); returns the root mean per-person
    variance (unbiased) in the same units as the errors.
    """
    mu = np.asarray(mu_table, dtype=float)
    if mu.ndim != 2 or mu.shape[1] < 2:
        raise ValueError("need at least two repeats per person")
    return float(np.sqrt(np.mean(np.var(mu, axis=1, ddof=1))))
