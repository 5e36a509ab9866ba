"""Quality metrics for variance predictors: retention AUC, correlation, and
Laplace log-likelihood with a fitted two-parameter noise decomposition."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import NumericalError, StructuralError
from .util import as_float_array


@dataclass(frozen=True)
class LaplaceCalibration:
    """Noise decomposition 2b^2 = alpha + beta * nu for a Laplace likelihood.

    alpha absorbs input-independent (aleatoric) error, beta scales the
    predicted epistemic variance. Fit on a validation split, never on the
    split being scored.
    """

    alpha: float
    beta: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha >= 0.0):
            raise StructuralError("alpha must be finite and nonnegative")
        if not (math.isfinite(self.beta) and self.beta >= 0.0):
            raise StructuralError("beta must be finite and nonnegative")


def retention_auc(errors, variances) -> float:
    """Area under the mean-error curve as high-variance points are removed.

    Points leave in decreasing-variance order (ties broken by index). The
    curve starts at the full mean error with nothing removed and is integrated
    by the trapezoidal rule over the removed fraction k/N for k = 0..N-1.
    Lower is better when the variances rank the errors well.
    """
    e = as_float_array(errors)
    v = as_float_array(variances)
    if e.shape != v.shape or e.ndim != 1:
        raise StructuralError("errors and variances must be equal-length vectors")
    n = e.size
    if n < 2:
        raise StructuralError("retention curve needs at least two points")
    order = np.argsort(-v, kind="stable")
    removed_first = e[order]
    suffix_sums = np.cumsum(removed_first[::-1])[::-1]
    counts = np.arange(n, 0, -1, dtype=np.float64)
    means = suffix_sums / counts
    # uniform spacing 1/n over fractions removed 0 .. (n-1)/n
    inner = float(np.sum(means[1:-1]))
    return (inner + 0.5 * (means[0] + means[-1])) / n


def error_correlation(errors, stddevs) -> float:
    """Pearson correlation between absolute errors and predicted deviations."""
    e = np.abs(as_float_array(errors))
    s = as_float_array(stddevs)
    if e.shape != s.shape or e.ndim != 1 or e.size < 2:
        raise StructuralError("need two equal-length series of at least 2 points")
    ec = e - e.mean()
    sc = s - s.mean()
    denom = math.sqrt(float(ec @ ec) * float(sc @ sc))
    if denom == 0.0:
        raise NumericalError("correlation undefined: a series is constant")
    return float(ec @ sc) / denom


def laplace_loglik(y, mu, nu, calib: LaplaceCalibration) -> float:
    """Mean log density of y under Laplace(mu, b) with 2b^2 = alpha + beta*nu."""
    yv = as_float_array(y)
    mv = as_float_array(mu)
    nv = as_float_array(nu)
    if not (yv.shape == mv.shape == nv.shape):
        raise StructuralError("y, mu and nu must share a shape")
    two_b_sq = calib.alpha + calib.beta * nv
    if np.any(two_b_sq <= 0.0):
        raise NumericalError("alpha + beta*nu must be positive everywhere")
    b = np.sqrt(two_b_sq / 2.0)
    return float(np.mean(-np.log(2.0 * b) - np.abs(yv - mv) / b))


def _loglik_and_grads(abs_err, nu, alpha, beta):
    """Value plus d/dalpha and d/dbeta of the mean Laplace log density."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        v = alpha + beta * nu
        b = np.sqrt(v / 2.0)
        value = float(np.mean(-np.log(2.0 * b) - abs_err / b))
        dv = -0.5 / v + abs_err / (math.sqrt(2.0) * v ** 1.5)
        grads = float(np.mean(dv)), float(np.mean(dv * nu))
    return value, grads[0], grads[1]


def fit_laplace_calibration(y, mu, nu, fit_beta: bool = True, beta0=None,
                            alpha0=None, steps: int = 2000,
                            step_size: float = 1e-2) -> LaplaceCalibration:
    """Fit (alpha, beta) by log-space gradient ascent with accept-only steps.

    Starts from the homoscedastic scale estimate for alpha (unless alpha0
    overrides it) and, when beta is fitted, a tiny positive beta. The returned
    calibration never scores worse than its own starting point on the data it
    was fit to.
    """
    yv = as_float_array(y)
    abs_err = np.abs(yv - as_float_array(mu))
    nv = as_float_array(nu)
    if abs_err.shape != nv.shape or abs_err.ndim != 1 or abs_err.size < 2:
        raise StructuralError("need at least two calibration points")
    if np.any(nv < 0.0):
        raise StructuralError("variances must be nonnegative")

    mean_abs = float(abs_err.mean())
    alpha = max(2.0 * mean_abs ** 2, 1e-12)
    if alpha0 is not None:
        if alpha0 <= 0.0:
            raise StructuralError("alpha0 must be positive")
        alpha = float(alpha0)
    if beta0 is not None:
        beta = float(beta0)
        if beta < 0.0:
            raise StructuralError("beta0 must be nonnegative")
    elif fit_beta:
        nu_scale = float(nv.mean()) + 1e-30
        beta = 1e-6 * alpha / nu_scale
    else:
        beta = 0.0

    free_beta = fit_beta and beta > 0.0
    log_a = math.log(alpha)
    log_b = math.log(beta) if beta > 0.0 else None
    best, ga, gb = _loglik_and_grads(
        abs_err, nv, math.exp(log_a), math.exp(log_b) if log_b is not None else beta)
    lr = step_size
    for _ in range(steps):
        cur_b = math.exp(log_b) if log_b is not None else beta
        step_a = lr * ga * math.exp(log_a)
        step_b = lr * gb * cur_b if free_beta else 0.0
        cand_a = log_a + step_a
        cand_b = (log_b + step_b) if log_b is not None else None
        try:
            value, cga, cgb = _loglik_and_grads(
                abs_err, nv, math.exp(cand_a),
                math.exp(cand_b) if cand_b is not None else beta)
        except (OverflowError, FloatingPointError):
            value = -math.inf
        if math.isfinite(value) and value > best:
            log_a, log_b = cand_a, cand_b
            best, ga, gb = value, cga, cgb
            lr = min(lr * 1.5, 1.0)
        else:
            lr *= 0.5
            if lr < 1e-14:
                break
    return LaplaceCalibration(alpha=math.exp(log_a),
                              beta=math.exp(log_b) if log_b is not None else beta)


def improvement(score: float, reference_score: float,
                higher_is_better: bool = True) -> float:
    """Signed gap to a reference method; positive always means better."""
    gap = score - reference_score
    return gap if higher_is_better else -gap


def standard_error(values) -> float:
    """Standard error of the mean of a sample."""
    v = as_float_array(values)
    if v.size < 2:
        raise StructuralError("standard error needs at least two values")
    return float(v.std(ddof=1)) / math.sqrt(v.size)
