"""Regime-conditional densities, the Hamilton filter and Kim's smoother.

All filter arithmetic runs in the log domain with a log-sum-exp normalizer per
step. The first period only conditions the recursion: its filtered
probabilities are the initial distribution and it adds nothing to the
log-likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from numba import njit

from .model import LogSquaredPanel, ModelParams, RegimeParams, RegimePath, TransitionMatrix, stationary_dist
from .weights import WeightMatrix

_LOG_2PI = math.log(2.0 * math.pi)


class FilterError(ArithmeticError):
    """The filter met an impossible configuration (e.g. all densities underflow)."""


def log_det(w: WeightMatrix | np.ndarray, rho: float) -> float:
    """``log det(I - rho W)`` via dense LU with sign tracking; requires a positive determinant."""
    W = w.values if isinstance(w, WeightMatrix) else np.asarray(w)
    sign, value = np.linalg.slogdet(np.eye(W.shape[0]) - rho * W)
    if not sign > 0:
        raise FilterError(f"det(I - rho*W) <= 0 at rho={rho}")
    return float(value)


def log_cond_density(
    yt: np.ndarray,
    ytm1: np.ndarray,
    regime: RegimeParams,
    sigma2: float,
    w: WeightMatrix,
) -> float:
    """Gaussian quasi log-density of ``Y*_t`` given ``Y*_{t-1}`` in one regime."""
    yt = np.asarray(yt, dtype=float)
    ytm1 = np.asarray(ytm1, dtype=float)
    if not (np.all(np.isfinite(yt)) and np.all(np.isfinite(ytm1))):
        raise ValueError("non-finite observation passed to log_cond_density")
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    W = w.values
    n = yt.size
    u = yt - regime.rho * (W @ yt) - regime.gamma * ytm1 - regime.delta * (W @ ytm1) - regime.phi
    return log_det(w, regime.rho) - 0.5 * n * (_LOG_2PI + math.log(sigma2)) - float(u @ u) / (2.0 * sigma2)


class PanelMoments:
    """Per-period cross-product matrices that make repeated likelihood calls cheap.

    For ``z_t = (Y_t, W Y_t, Y_{t-1}, W Y_{t-1}, 1)`` the residual of a regime
    with coefficients ``c = (1, -rho, -gamma, -delta, -phi)`` is ``z_t c``, so
    its sum of squares is ``c' G_t c`` with ``G_t = z_t' z_t``.
    """

    def __init__(self, panel: LogSquaredPanel | np.ndarray, w: WeightMatrix):
        Y = panel.values if isinstance(panel, LogSquaredPanel) else np.asarray(panel, dtype=float)
        if Y.shape[0] != w.n:
            raise ValueError(f"panel has {Y.shape[0]} locations but W is {w.n}x{w.n}")
        if Y.shape[1] < 2:
            raise ValueError("at least two periods are required")
        if not np.all(np.isfinite(Y)):
            raise ValueError("panel has non-finite entries")
        self.w = w
        self.n, self.T = Y.shape
        WY = w.values @ Y
        Z = np.stack([Y[:, 1:], WY[:, 1:], Y[:, :-1], WY[:, :-1], np.ones((self.n, self.T - 1))])
        # (T-1, 5, 5)
        self.gram = np.einsum("ait,bit->tab", Z, Z)
        self._gram_flat = np.ascontiguousarray(self.gram.reshape(self.T - 1, 25))
        self._logdet_cache: dict[float, float] = {}

    def logdet(self, rho: float) -> float:
        value = self._logdet_cache.get(rho)
        if value is None:
            value = log_det(self.w, rho)
            if len(self._logdet_cache) > 64:
                self._logdet_cache.clear()
            self._logdet_cache[rho] = value
        return value

    def log_densities(self, params: ModelParams) -> np.ndarray:
        """``T x 2`` conditional log-densities; row 0 (no lagged data) is NaN."""
        out = np.full((self.T, 2), np.nan)
        const = -0.5 * self.n * (_LOG_2PI + math.log(params.sigma2))
        for k, reg in enumerate(params.regimes):
            c = np.array([1.0, -reg.rho, -reg.gamma, -reg.delta, -reg.phi])
            # overflow surfaces as a non-finite density, which the filter rejects
            with np.errstate(over="ignore", invalid="ignore"):
                ss = self._gram_flat @ np.outer(c, c).ravel()
            out[1:, k] = self.logdet(reg.rho) + const - ss / (2.0 * params.sigma2)
        return out


@njit(cache=True)
def _logaddexp(a, b):
    if a == -np.inf and b == -np.inf:
        return -np.inf
    m = max(a, b)
    return m + math.log(math.exp(a - m) + math.exp(b - m))


@njit(cache=True)
def _hamilton_loop(log_dens, log_P, log_init, log_filt, log_pred, step_ll):
    """Returns -1 on success, else the zero-based period where both densities vanish."""
    T = log_dens.shape[0]
    log_filt[0, 0] = log_init[0]
    log_filt[0, 1] = log_init[1]
    for t in range(T):
        if t > 0:
            a = log_pred[t - 1, 0] + log_dens[t, 0]
            b = log_pred[t - 1, 1] + log_dens[t, 1]
            c = _logaddexp(a, b)
            if not math.isfinite(c):
                return t
            step_ll[t] = c
            log_filt[t, 0] = a - c
            log_filt[t, 1] = b - c
        for j in range(2):
            log_pred[t, j] = _logaddexp(log_P[j, 0] + log_filt[t, 0], log_P[j, 1] + log_filt[t, 1])
    return -1


@dataclass
class FilterOutput:
    """Filter results; row ``t`` of ``predicted`` is the forecast for period ``t+1``."""

    filtered: np.ndarray
    predicted: np.ndarray
    log_densities: np.ndarray
    step_loglik: np.ndarray
    loglik: float

    @property
    def T(self) -> int:
        return self.filtered.shape[0]


def _safe_log(x) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=float))


def run_filter(log_dens: np.ndarray, transition: TransitionMatrix, init) -> FilterOutput:
    """Hamilton recursion over precomputed ``T x 2`` log-densities."""
    init = np.asarray(init, dtype=float)
    if init.shape != (2,) or np.any(init < 0) or abs(init.sum() - 1.0) > 1e-10:
        raise ValueError(f"initial distribution must be a probability pair, got {init}")
    T = log_dens.shape[0]
    log_filt = np.empty((T, 2))
    log_pred = np.empty((T, 2))
    step_ll = np.zeros(T)
    bad = _hamilton_loop(
        np.ascontiguousarray(log_dens), _safe_log(transition.matrix), _safe_log(init), log_filt, log_pred, step_ll
    )
    if bad >= 0:
        raise FilterError(f"both regime densities underflow at period t={bad + 1}")
    loglik = float(step_ll.sum())
    if not math.isfinite(loglik):
        raise FilterError("log-likelihood is not finite")
    return FilterOutput(np.exp(log_filt), np.exp(log_pred), log_dens, step_ll, loglik)


def hamilton_filter(
    panel: LogSquaredPanel,
    params: ModelParams,
    w: WeightMatrix,
    init=None,
    *,
    moments: PanelMoments | None = None,
) -> FilterOutput:
    """Filtered and predicted regime probabilities and the log-likelihood.

    ``init`` is the distribution of the first period's regime; by default the
    stationary distribution of the chain.
    """
    if panel.T < 2:
        raise ValueError("the filter needs T >= 2")
    if init is None:
        init = stationary_dist(params.transition)
    moments = moments or PanelMoments(panel, w)
    return run_filter(moments.log_densities(params), params.transition, init)


def loglik(params: ModelParams, panel: LogSquaredPanel, w: WeightMatrix, *, moments: PanelMoments | None = None) -> float:
    return hamilton_filter(panel, params, w, moments=moments).loglik


@dataclass
class SmoothedPath:
    smoothed: np.ndarray
    most_likely: RegimePath


def kim_smooth(filter_out: FilterOutput, transition: TransitionMatrix) -> SmoothedPath:
    """Backward recursion for ``P(s_t | Y*_1..Y*_T)`` seeded with the last filtered row."""
    filt, pred = filter_out.filtered, filter_out.predicted
    T = filt.shape[0]
    P = transition.matrix
    smooth = np.empty_like(filt)
    smooth[-1] = filt[-1]
    for t in range(T - 2, -1, -1):
        num, den = smooth[t + 1], pred[t]
        if np.any((den == 0.0) & (num > 0.0)):
            raise FilterError(f"zero predicted probability with positive smoothed mass at t={t + 2}")
        ratio = np.divide(num, den, out=np.zeros(2), where=den > 0.0)
        row = filt[t] * (P.T @ ratio)
        smooth[t] = row / row.sum()
    states = np.where(smooth[:, 1] > smooth[:, 0], 2, 1)
    return SmoothedPath(smooth, RegimePath(states))


def probabilities_frame(filter_out: FilterOutput, smoothed: SmoothedPath, time_ids=None) -> pd.DataFrame:
    T = filter_out.T
    return pd.DataFrame(
        {
            "time": list(time_ids) if time_ids is not None else list(range(1, T + 1)),
            "xi1_filtered": filter_out.filtered[:, 0],
            "xi2_filtered": filter_out.filtered[:, 1],
            "xi1_smoothed": smoothed.smoothed[:, 0],
            "xi2_smoothed": smoothed.smoothed[:, 1],
            "state": smoothed.most_likely.states,
        }
    )
