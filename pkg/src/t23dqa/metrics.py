"""Rank/linear correlation statistics and the five-parameter logistic mapping.

Degenerate inputs (constant vectors, empty pair sets) give ``nan`` rather than
raising; callers decide how to treat them.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special, stats

log = logging.getLogger(__name__)


def _as_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y differ in length")
    return x, y


def plcc(x, y) -> float:
    x, y = _as_pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    den = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    return float((xc * yc).sum() / den) if den > 0 else float("nan")


def srcc(x, y) -> float:
    """Spearman correlation: Pearson correlation of mid-ranks."""
    x, y = _as_pair(x, y)
    if x.size < 2:
        return float("nan")
    return plcc(stats.rankdata(x), stats.rankdata(y))


def _sign_matrix(v: np.ndarray) -> np.ndarray:
    return np.sign(v[:, None] - v[None, :])


def pair_krcc(x, y, pair_mask: np.ndarray | None = None) -> float:
    """Kendall tau-b over a subset of pairs.

    ``pair_mask`` is an (n, n) boolean matrix; only its strict upper triangle is read.
    With no mask every pair counts and this is the ordinary tau-b.
    """
    x, y = _as_pair(x, y)
    n = x.size
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    if pair_mask is not None:
        upper &= np.asarray(pair_mask, dtype=bool)
    sx, sy = _sign_matrix(x)[upper], _sign_matrix(y)[upper]
    n0 = sx.size
    if n0 == 0:
        return float("nan")
    n1 = np.count_nonzero(sx == 0)
    n2 = np.count_nonzero(sy == 0)
    den = np.sqrt(float(n0 - n1) * float(n0 - n2))
    if den == 0:
        return float("nan")
    return float((sx * sy).sum() / den)


def krcc(x, y) -> float:
    """Kendall tau-b (tie-adjusted)."""
    return pair_krcc(x, y)


def logistic5(x, b1, b2, b3, b4, b5):
    x = np.asarray(x, dtype=np.float64)
    # 1 / (1 + exp(b2 (x - b3))) written via expit to avoid overflow
    return b1 * (0.5 - special.expit(-b2 * (x - b3))) + b4 * x + b5


@dataclass
class Logistic5Fit:
    params: tuple[float, float, float, float, float]
    converged: bool
    residual: float

    def __call__(self, x) -> np.ndarray:
        if not self.converged:
            return np.asarray(x, dtype=np.float64)
        return logistic5(x, *self.params)

    def is_monotone(self, lo: float, hi: float, n: int = 512) -> bool:
        grid = self(np.linspace(lo, hi, n))
        d = np.diff(grid)
        return bool((d >= -1e-12).all() or (d <= 1e-12).all())


def fit_logistic5(pred, mos, maxfev: int = 20000) -> Logistic5Fit:
    """Least-squares logistic-5 fit mapping predictions onto the MOS scale."""
    pred, mos = _as_pair(pred, mos)
    if pred.size < 5:
        raise ValueError("logistic-5 fitting needs at least 5 points")
    sd = pred.std()
    p0 = [mos.max() - mos.min(), 1.0 / sd if sd > 0 else 1.0, pred.mean(), 0.0, mos.mean()]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", optimize.OptimizeWarning)
            params, _ = optimize.curve_fit(logistic5, pred, mos, p0=p0, maxfev=maxfev)
        fitted = logistic5(pred, *params)
        if not np.all(np.isfinite(fitted)):
            raise RuntimeError("non-finite fitted curve")
    except (RuntimeError, ValueError) as exc:
        msg = f"logistic-5 fit did not converge ({exc}); using identity mapping"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        log.warning(msg)
        return Logistic5Fit((0.0, 0.0, 0.0, 1.0, 0.0), False, float(np.mean((pred - mos) ** 2)))
    return Logistic5Fit(tuple(float(p) for p in params), True, float(np.mean((fitted - mos) ** 2)))
