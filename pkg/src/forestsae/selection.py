"""Fit criteria from stored per-observation log-likelihood draws: LPPD,
both WAIC variants with their penalties, DIC with its effective parameter
count, and RMSE of fitted values."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


def _check_loglik(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"log-likelihood matrix must be 2-D, got {m.ndim}-D")
    if m.shape[0] < 2:
        raise ValueError("need at least 2 draws (rows)")
    if not np.all(np.isfinite(m)):
        bad = np.flatnonzero(~np.all(np.isfinite(m), axis=0))
        raise ValueError(f"non-finite log-likelihood for observations "
                         f"{bad[:10].tolist()}")
    return m


@dataclass
class FitReport:
    """One model's scores; lower dic/waic/rmse indicate better fit."""

    model: str
    dic: float
    p_d: float
    waic1: float
    waic2: float
    p1: float
    p2: float
    lppd: float
    rmse: float


def lppd(m) -> float:
    """Log pointwise predictive density:
    sum_i log( mean_l exp(m[l, i]) ), stabilized via log-sum-exp."""
    m = _check_loglik(m)
    L = m.shape[0]
    col = logsumexp(m, axis=0) - np.log(L)
    if np.any(np.isneginf(col)):
        bad = np.flatnonzero(np.isneginf(col))
        raise ValueError(f"zero predictive density for observations "
                         f"{bad[:10].tolist()}")
    return float(np.sum(col))


def waic(m) -> tuple[float, float, float, float]:
    """Both WAIC variants: waic_k = -2 (lppd - p_k) with
    p1 = 2 sum_i [log mean_l exp(m) - mean_l m] and
    p2 = sum_i var_l m[:, i] (L-1 denominator)."""
    m = _check_loglik(m)
    L = m.shape[0]
    col_lppd = logsumexp(m, axis=0) - np.log(L)
    if np.any(np.isneginf(col_lppd)):
        bad = np.flatnonzero(np.isneginf(col_lppd))
        raise ValueError(f"zero predictive density for observations "
                         f"{bad[:10].tolist()}")
    total = float(np.sum(col_lppd))
    p1 = 2.0 * float(np.sum(col_lppd - m.mean(axis=0)))
    p2 = float(np.sum(m.var(axis=0, ddof=1)))
    return (-2.0 * (total - p1), -2.0 * (total - p2), p1, p2)


def dic(m, loglik_at_posterior_mean) -> tuple[float, float]:
    """DIC = -2 (L_hat - p_d) with L_hat the log-likelihood at the posterior
    mean parameters and p_d = 2 (L_hat - mean_l sum_i m[l, i])."""
    m = _check_loglik(m)
    at_mean = np.asarray(loglik_at_posterior_mean, dtype=np.float64)
    if at_mean.shape != (m.shape[1],):
        raise ValueError(f"plug-in vector has shape {at_mean.shape}, "
                         f"expected ({m.shape[1]},)")
    l_hat = float(np.sum(at_mean))
    p_d = 2.0 * (l_hat - float(np.mean(np.sum(m, axis=1))))
    return (-2.0 * (l_hat - p_d), p_d)


def rmse(fitted, observed) -> float:
    """Root mean squared difference between fitted and observed values."""
    fitted = np.asarray(fitted, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if fitted.shape != observed.shape:
        raise ValueError(f"length mismatch: {fitted.shape} vs {observed.shape}")
    d = fitted - observed
    return float(np.sqrt(np.mean(d * d)))


def rank_models(reports) -> dict[str, list[str]]:
    """Model names in ascending order per criterion; ties keep registration
    order (stable sort)."""
    if len(reports) < 2:
        raise ValueError("need at least 2 reports to rank")
    out = {}
    for crit in ("dic", "waic1", "waic2", "rmse"):
        vals = np.array([getattr(r, crit) for r in reports])
        order = np.argsort(vals, kind="stable")
        out[crit] = [reports[i].model for i in order]
    return out
