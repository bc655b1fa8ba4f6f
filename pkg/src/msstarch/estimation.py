"""Quasi-maximum-likelihood estimation of the one- and two-regime models."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize, stats

from .filtering import FilterError, PanelMoments, run_filter
from .model import LOG_CHI2_VAR, LogSquaredPanel, ModelParams, RegimeParams, TransitionMatrix, stationary_dist
from .weights import WeightMatrix

logger = logging.getLogger(__name__)

TWO_REGIME_NAMES = ("rho1", "gamma1", "delta1", "phi1", "rho2", "gamma2", "delta2", "phi2", "p", "q", "sigma2")
ONE_REGIME_NAMES = ("rho", "gamma", "delta", "phi", "sigma2")

_EFFECT = (-1.0, 1.0)
_PROB = (0.0, 1.0)
_BOUNDS = {
    "rho": _EFFECT, "gamma": _EFFECT, "delta": _EFFECT, "phi": None,
    "p": _PROB, "q": _PROB, "sigma2": (0.0, math.inf),
}
_BAD_OBJECTIVE = 1e12


def _bounds_of(name: str):
    if name in _BOUNDS:
        return _BOUNDS[name]
    return _BOUNDS[name[:-1]]


def to_bounded(x: float, a: float, b: float) -> float:
    """Map the real line onto ``(a, b)``: ``a + (b - a) / (1 + exp(-x))``."""
    if x >= 0:
        return a + (b - a) / (1.0 + math.exp(-x))
    e = math.exp(x)
    return a + (b - a) * e / (1.0 + e)


def from_bounded(v: float, a: float, b: float) -> float:
    return math.log((v - a) / (b - v))


def to_positive(x: float, a: float = 0.0) -> float:
    return a + math.exp(x)


def from_positive(v: float, a: float = 0.0) -> float:
    return math.log(v - a)


def _transform(names, values, inverse: bool) -> np.ndarray:
    out = np.empty(len(names))
    for i, (name, value) in enumerate(zip(names, values)):
        bounds = _bounds_of(name)
        if bounds is None:
            out[i] = value
        elif math.isinf(bounds[1]):
            out[i] = from_positive(value, bounds[0]) if inverse else to_positive(value, bounds[0])
        else:
            out[i] = from_bounded(value, *bounds) if inverse else to_bounded(value, *bounds)
    return out


def constrained_vector(m: ModelParams, one_regime: bool = False) -> np.ndarray:
    if one_regime:
        return np.array([*m.regimes[0].as_tuple(), m.sigma2])
    d = m.as_dict()
    return np.array([d[k] for k in TWO_REGIME_NAMES])


def params_from_vector(x, one_regime: bool = False) -> ModelParams:
    x = [float(v) for v in x]
    if one_regime:
        return ModelParams.single(RegimeParams(*x[:4]), x[4])
    return ModelParams(
        (RegimeParams(*x[0:4]), RegimeParams(*x[4:8])), TransitionMatrix(x[8], x[9]), x[10]
    )


def to_unconstrained(m: ModelParams, one_regime: bool = False) -> np.ndarray:
    names = ONE_REGIME_NAMES if one_regime else TWO_REGIME_NAMES
    return _transform(names, constrained_vector(m, one_regime), inverse=True)


def to_constrained(v, one_regime: bool = False) -> ModelParams:
    names = ONE_REGIME_NAMES if one_regime else TWO_REGIME_NAMES
    return params_from_vector(_transform(names, v, inverse=False), one_regime)


def bic(loglik: float, n_params: int, n_obs: int) -> float:
    if n_obs < 1:
        raise ValueError("n_obs must be at least 1")
    return n_params * math.log(n_obs) - 2.0 * loglik


@dataclass
class FitOptions:
    n_starts: int = 5
    seed: int = 0
    tol: float = 1e-8
    maxiter: int = 2000
    nm_maxfev: int = 1500
    penalty_weight: float = 1e10
    penalty_margin: float = 1e-6
    compute_se: bool = True
    sigma2_start: float = LOG_CHI2_VAR

    def __post_init__(self):
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")


@dataclass
class StdErrors:
    values: dict
    pvalues: dict
    reliable: bool


@dataclass
class EstimationResult:
    model: str
    params: ModelParams
    loglik: float
    bic: float
    n_params: int
    n_obs: int
    converged: bool
    iterations: int
    start_points_tried: int
    std_errors: dict | None = None
    pvalues: dict | None = None
    se_reliable: bool | None = None
    options: dict = field(default_factory=dict)

    @property
    def one_regime(self) -> bool:
        return self.model == "one-regime"

    @property
    def names(self) -> tuple[str, ...]:
        return ONE_REGIME_NAMES if self.one_regime else TWO_REGIME_NAMES

    def estimates(self) -> dict:
        return dict(zip(self.names, constrained_vector(self.params, self.one_regime).tolist()))

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "estimates": self.estimates(),
            "std_errors": self.std_errors,
            "pvalues": self.pvalues,
            "se_reliable": self.se_reliable,
            "loglik": self.loglik,
            "bic": self.bic,
            "n_params": self.n_params,
            "n_obs": self.n_obs,
            "converged": self.converged,
            "iterations": self.iterations,
            "start_points_tried": self.start_points_tried,
            "options": self.options,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, allow_nan=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "EstimationResult":
        one = d["model"] == "one-regime"
        names = ONE_REGIME_NAMES if one else TWO_REGIME_NAMES
        est = d["estimates"]
        params = params_from_vector([est[k] for k in names], one)
        return cls(
            model=d["model"], params=params, loglik=d["loglik"], bic=d["bic"], n_params=d["n_params"],
            n_obs=d["n_obs"], converged=d["converged"], iterations=d["iterations"],
            start_points_tried=d["start_points_tried"], std_errors=d.get("std_errors"),
            pvalues=d.get("pvalues"), se_reliable=d.get("se_reliable"), options=d.get("options", {}),
        )

    @classmethod
    def from_json(cls, path) -> "EstimationResult":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def loglik_one_regime(regime: RegimeParams, sigma2: float, moments: PanelMoments) -> float:
    """Gaussian quasi log-likelihood of the single-regime model (first period conditioned on)."""
    dens = moments.log_densities(ModelParams.single(regime, sigma2))
    return float(dens[1:, 0].sum())


def loglik_two_regime(params: ModelParams, moments: PanelMoments) -> float:
    return run_filter(moments.log_densities(params), params.transition, stationary_dist(params.transition)).loglik


def _penalty(params: ModelParams, options: FitOptions) -> float:
    total = 0.0
    for reg in params.regimes:
        excess = reg.rho + reg.delta - (1.0 - options.penalty_margin)
        if excess > 0:
            total += options.penalty_weight * excess**2
    return total


def _make_objective(moments: PanelMoments, one_regime: bool, options: FitOptions) -> Callable:
    def objective(v):
        try:
            params = to_constrained(v, one_regime)
            if one_regime:
                ll = loglik_one_regime(params.regimes[0], params.sigma2, moments)
            else:
                ll = loglik_two_regime(params, moments)
        except (FilterError, OverflowError, ValueError, ZeroDivisionError):
            return _BAD_OBJECTIVE
        if not math.isfinite(ll):
            return _BAD_OBJECTIVE
        return -ll + _penalty(params, options)

    return objective


def _neutral_start(moments: PanelMoments, one_regime: bool, options: FitOptions) -> ModelParams:
    # intercept implied by the panel mean when every effect is 0.1
    ybar = moments.gram[:, 0, 4].sum() / (moments.n * (moments.T - 1))
    reg = RegimeParams(0.1, 0.1, 0.1, ybar * (1.0 - 0.3))
    if one_regime:
        return ModelParams.single(reg, options.sigma2_start)
    return ModelParams((reg, reg), TransitionMatrix(0.9, 0.9), options.sigma2_start)


def _jittered_start(base: ModelParams, rng: np.random.Generator, one_regime: bool) -> ModelParams:
    def draw_regime(phi0):
        while True:
            rho, gamma, delta = rng.uniform(-0.9, 0.9, size=3)
            if rho + delta < 0.9:
                return RegimeParams(rho, gamma, delta, phi0 + rng.uniform(-1.0, 1.0))

    phi0 = base.regimes[0].phi
    sigma2 = base.sigma2 * rng.uniform(0.5, 2.0)
    if one_regime:
        return ModelParams.single(draw_regime(phi0), sigma2)
    regs = (draw_regime(phi0), draw_regime(phi0))
    p, q = rng.uniform(0.5, 0.99, size=2)
    return ModelParams(regs, TransitionMatrix(p, q), sigma2)


def start_points(moments: PanelMoments, one_regime: bool, options: FitOptions) -> list[ModelParams]:
    rng = np.random.default_rng(options.seed)
    base = _neutral_start(moments, one_regime, options)
    return [base] + [_jittered_start(base, rng, one_regime) for _ in range(options.n_starts - 1)]


@dataclass
class _LocalFit:
    x: np.ndarray
    fun: float
    converged: bool
    iterations: int


def _local_fit(objective, x0: np.ndarray, options: FitOptions) -> _LocalFit:
    f0 = objective(x0)
    if f0 >= _BAD_OBJECTIVE:
        return _LocalFit(x0, f0, False, 0)
    nm = optimize.minimize(
        objective, x0, method="Nelder-Mead",
        options={"maxfev": options.nm_maxfev, "xatol": 1e-4, "fatol": 1e-6, "adaptive": True},
    )
    qn = optimize.minimize(
        objective, nm.x, method="L-BFGS-B", jac="3-point",
        options={"ftol": options.tol, "gtol": 1e-6, "maxiter": options.maxiter},
    )
    x, fun = (qn.x, qn.fun) if qn.fun <= nm.fun else (nm.x, nm.fun)
    converged = bool(qn.success)
    if not converged:
        # line-search stalls at a flat optimum are accepted when the gradient is small
        g = optimize.approx_fprime(x, objective, 1e-6)
        converged = bool(np.all(np.isfinite(g)) and np.max(np.abs(g)) < 1e-2 * max(1.0, abs(fun)) ** 0.5)
    return _LocalFit(x, fun, converged and fun < _BAD_OBJECTIVE, int(nm.nit + qn.nit))


def _central_gradient(fun: Callable, x: np.ndarray, steps: np.ndarray) -> np.ndarray:
    g = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = steps[i]
        g[i] = (fun(x + e) - fun(x - e)) / (2.0 * steps[i])
    return g


def _newton_polish(objective, fit: _LocalFit, max_iter: int = 20) -> _LocalFit:
    """Damped Newton steps from a quasi-Newton optimum.

    L-BFGS-B stops on a relative objective change, which on a large panel
    leaves the optimum loose in absolute terms. A few Newton steps with a
    finite-difference Hessian tighten it so different start points agree.
    """
    x, fun = fit.x.copy(), fit.fun
    for it in range(max_iter):
        h = 1e-4 * np.maximum(np.abs(x), 1.0)
        g = _central_gradient(objective, x, 1e-2 * h)
        H = numerical_hessian(objective, x, h)
        try:
            np.linalg.cholesky(H)
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-4:
            trial = objective(x - t * step)
            if trial <= fun:
                break
            t *= 0.5
        else:
            break
        x, fun = x - t * step, trial
        if np.max(np.abs(t * step)) < 1e-9:
            break
    return _LocalFit(x, fun, fit.converged, fit.iterations + it + 1)


def canonical_labels(params: ModelParams) -> ModelParams:
    """Order regimes so that ``gamma1 <= gamma2``."""
    if params.regimes[0].gamma > params.regimes[1].gamma:
        return params.swapped()
    return params


def _fit(panel: LogSquaredPanel, w: WeightMatrix, options: FitOptions | None, one_regime: bool) -> EstimationResult:
    options = options or FitOptions()
    if not w.row_normalized:
        raise ValueError("estimation requires a row-normalized weight matrix")
    moments = PanelMoments(panel, w)
    objective = _make_objective(moments, one_regime, options)
    fits = []
    for k, start in enumerate(start_points(moments, one_regime, options)):
        fit = _local_fit(objective, to_unconstrained(start, one_regime), options)
        logger.debug("start %d: objective %.6f converged=%s", k, fit.fun, fit.converged)
        fits.append(fit)
    finite = [f for f in fits if f.fun < _BAD_OBJECTIVE]
    if not finite:
        raise FilterError("objective is non-finite at every start point")
    pool = [f for f in finite if f.converged] or finite
    # min() keeps the first of equal values, i.e. the lowest start index
    best = min(pool, key=lambda f: f.fun)
    if best.converged:
        best = _newton_polish(objective, best)
    params = to_constrained(best.x, one_regime)
    if not one_regime:
        params = canonical_labels(params)
    for reg in params.regimes:
        if not reg.rho + reg.delta < 1:
            raise AssertionError(f"returned optimum violates rho+delta<1: {reg}")
    ll = loglik_one_regime(params.regimes[0], params.sigma2, moments) if one_regime else loglik_two_regime(params, moments)
    n_params = len(ONE_REGIME_NAMES if one_regime else TWO_REGIME_NAMES)
    n_obs = panel.n * (panel.T - 1)
    result = EstimationResult(
        model="one-regime" if one_regime else "two-regime",
        params=params,
        loglik=ll,
        bic=bic(ll, n_params, n_obs),
        n_params=n_params,
        n_obs=n_obs,
        converged=best.converged,
        iterations=best.iterations,
        start_points_tried=len(fits),
        options=asdict(options),
    )
    if options.compute_se and result.converged:
        se = std_errors(result, panel, w, moments=moments)
        result.std_errors, result.pvalues, result.se_reliable = se.values, se.pvalues, se.reliable
    return result


def fit_two_regime(panel: LogSquaredPanel, w: WeightMatrix, options: FitOptions | None = None) -> EstimationResult:
    """Two-regime QMLE: Nelder-Mead then L-BFGS-B from several start points."""
    return _fit(panel, w, options, one_regime=False)


def fit_one_regime(panel: LogSquaredPanel, w: WeightMatrix, options: FitOptions | None = None) -> EstimationResult:
    return _fit(panel, w, options, one_regime=True)


def numerical_hessian(fun: Callable, x, steps) -> np.ndarray:
    """Central-difference Hessian of ``fun`` at ``x``."""
    x = np.asarray(x, dtype=float)
    h = np.asarray(steps, dtype=float)
    k = x.size
    H = np.empty((k, k))
    f0 = fun(x)
    E = np.diag(h)
    for i in range(k):
        fp, fm = fun(x + E[i]), fun(x - E[i])
        H[i, i] = (fp - 2.0 * f0 + fm) / h[i] ** 2
        for j in range(i):
            fpp = fun(x + E[i] + E[j])
            fpm = fun(x + E[i] - E[j])
            fmp = fun(x - E[i] + E[j])
            fmm = fun(x - E[i] - E[j])
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
    return H


def hessian_std_errors(loglik_fn: Callable, x, names, steps=None) -> StdErrors:
    """Standard errors from the inverse Hessian of ``-loglik_fn`` at ``x``.

    A Hessian that is not positive definite yields NaN errors and
    ``reliable=False`` rather than made-up numbers.
    """
    x = np.asarray(x, dtype=float)
    if steps is None:
        steps = 1e-4 * np.maximum(np.abs(x), 1.0)
    H = numerical_hessian(lambda v: -loglik_fn(v), x, steps)
    values = np.full(x.size, np.nan)
    reliable = False
    if np.all(np.isfinite(H)):
        try:
            np.linalg.cholesky(H)
            cov = np.linalg.inv(H)
            diag = np.diag(cov)
            if np.all(diag > 0):
                values, reliable = np.sqrt(diag), True
        except np.linalg.LinAlgError:
            pass
    with np.errstate(invalid="ignore", divide="ignore"):
        pvals = 2.0 * stats.norm.sf(np.abs(x / values))
    return StdErrors(dict(zip(names, values.tolist())), dict(zip(names, pvals.tolist())), reliable)


def std_errors(
    result: EstimationResult, panel: LogSquaredPanel, w: WeightMatrix, *, moments: PanelMoments | None = None
) -> StdErrors:
    """Hessian-based standard errors on the constrained scale, with Wald p-values."""
    moments = moments or PanelMoments(panel, w)
    one = result.one_regime
    x = constrained_vector(result.params, one)
    names = result.names

    def ll(v):
        try:
            params = params_from_vector(v, one)
            if one:
                return loglik_one_regime(params.regimes[0], params.sigma2, moments)
            return loglik_two_regime(params, moments)
        except (FilterError, ValueError):
            return -math.inf

    steps = 1e-4 * np.maximum(np.abs(x), 1.0)
    # keep every stencil point inside the open parameter box
    for i, name in enumerate(names):
        bounds = _bounds_of(name)
        if bounds is not None:
            room = min(x[i] - bounds[0], bounds[1] - x[i])
            steps[i] = min(steps[i], 0.25 * room)
    return hessian_std_errors(ll, x, names, steps)


def significance_stars(pvalue: float) -> str:
    if not math.isfinite(pvalue):
        return ""
    for cut, mark in ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, ".")):
        if pvalue < cut:
            return mark
    return ""
