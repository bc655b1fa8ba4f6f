"""Parameter and panel types, and the two-regime data-generating process."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.special import digamma

from .weights import WeightMatrix, ZeroPolicy, log_square_series

# E[log eps^2] for eps ~ N(0, 1): mean of log chi^2_1
MU_EPS = float(digamma(0.5) + math.log(2.0))
# Var[log eps^2]
LOG_CHI2_VAR = math.pi**2 / 2.0


class ParameterError(ValueError):
    """A parameter lies outside the admissible region; ``name`` identifies it."""

    def __init__(self, name: str, message: str):
        super().__init__(message)
        self.name = name


@dataclass(frozen=True)
class RegimeParams:
    """Per-regime coefficients: spatial, temporal, spatio-temporal effects and intercept.

    The intercept is on the centered (phi) scale when the parameters describe a
    fitted model. Simulation takes it on the raw (mu) scale by default; see
    :func:`simulate`.
    """

    rho: float
    gamma: float
    delta: float
    phi: float

    def violations(self) -> list[str]:
        out = []
        for name in ("rho", "gamma", "delta"):
            value = getattr(self, name)
            if not (abs(value) < 1 and math.isfinite(value)):
                out.append(f"{name}={value} outside (-1, 1)")
        if not self.rho + self.delta < 1:
            out.append(f"rho+delta={self.rho + self.delta} not < 1")
        if not math.isfinite(self.phi):
            out.append(f"phi={self.phi} is not finite")
        return out

    def is_valid(self) -> bool:
        return not self.violations()

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.rho, self.gamma, self.delta, self.phi)


@dataclass(frozen=True)
class TransitionMatrix:
    """Two-state chain with stay probabilities ``p`` (regime 1) and ``q`` (regime 2).

    The matrix is column-stochastic: column j holds the distribution of the next
    state given current state j, so predictions are ``P @ xi``.
    """

    p: float
    q: float

    def __post_init__(self):
        for name in ("p", "q"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ParameterError(name, f"{name}={value} is not a probability")

    @property
    def matrix(self) -> np.ndarray:
        p, q = self.p, self.q
        return np.array([[p, 1.0 - q], [1.0 - p, q]])

    def swapped(self) -> "TransitionMatrix":
        return TransitionMatrix(self.q, self.p)


def stationary_dist(transition: TransitionMatrix) -> np.ndarray:
    """Stationary distribution ``pi`` with ``P @ pi = pi``."""
    p, q = transition.p, transition.q
    if p == 1.0 and q == 1.0:
        raise ValueError("p = q = 1 gives a reducible chain; pass an explicit initial distribution")
    pi1 = (1.0 - q) / (2.0 - p - q)
    return np.array([pi1, 1.0 - pi1])


@dataclass(frozen=True)
class ModelParams:
    regimes: tuple[RegimeParams, RegimeParams]
    transition: TransitionMatrix
    sigma2: float = LOG_CHI2_VAR

    def __post_init__(self):
        if len(self.regimes) != 2:
            raise ValueError("exactly two regimes are supported")
        object.__setattr__(self, "regimes", tuple(self.regimes))

    def validate(self) -> None:
        for k, reg in enumerate(self.regimes, start=1):
            problems = reg.violations()
            if problems:
                name = problems[0].split("=")[0]
                raise ParameterError(f"{name}{k}", f"regime {k}: " + "; ".join(problems))
        if not (self.sigma2 > 0 and math.isfinite(self.sigma2)):
            raise ParameterError("sigma2", f"sigma2={self.sigma2} must be positive")

    def is_valid(self) -> bool:
        try:
            self.validate()
        except ParameterError:
            return False
        return True

    def swapped(self) -> "ModelParams":
        """Exchange regime labels (and ``p`` with ``q``); the likelihood is unchanged."""
        return ModelParams((self.regimes[1], self.regimes[0]), self.transition.swapped(), self.sigma2)

    def shift_intercepts(self, shift: float) -> "ModelParams":
        regs = tuple(replace(r, phi=r.phi + shift) for r in self.regimes)
        return ModelParams(regs, self.transition, self.sigma2)

    @classmethod
    def single(cls, regime: RegimeParams, sigma2: float = LOG_CHI2_VAR) -> "ModelParams":
        """A one-regime model expressed as two tied regimes."""
        return cls((regime, regime), TransitionMatrix(0.5, 0.5), sigma2)

    def as_dict(self) -> dict:
        out = {}
        for k, reg in enumerate(self.regimes, start=1):
            for name, value in zip(("rho", "gamma", "delta", "phi"), reg.as_tuple()):
                out[f"{name}{k}"] = value
        out["p"] = self.transition.p
        out["q"] = self.transition.q
        out["sigma2"] = self.sigma2
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        try:
            regs = tuple(
                RegimeParams(
                    float(d[f"rho{k}"]), float(d[f"gamma{k}"]), float(d[f"delta{k}"]), float(d[f"phi{k}"])
                )
                for k in (1, 2)
            )
            return cls(regs, TransitionMatrix(float(d["p"]), float(d["q"])), float(d.get("sigma2", LOG_CHI2_VAR)))
        except KeyError as exc:
            raise ParameterError(str(exc.args[0]), f"missing parameter {exc.args[0]!r}") from None


def study_dgp(sigma2: float = LOG_CHI2_VAR) -> ModelParams:
    """The weakly dependent / persistent pair of regimes used in the simulation study.

    Intercepts are on the raw (mu) scale.
    """
    return ModelParams(
        (RegimeParams(0.2, 0.2, -0.2, 0.1), RegimeParams(0.2, 0.8, -0.2, 0.1)),
        TransitionMatrix(0.97, 0.93),
        sigma2,
    )


def _default_labels(prefix: str, k: int) -> tuple[str, ...]:
    return tuple(f"{prefix}{i + 1}" for i in range(k))


@dataclass
class Panel:
    """Raw observations ``y_it`` stored as an ``n x T`` array."""

    values: np.ndarray
    location_ids: tuple = ()
    time_ids: tuple = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("panel values must be a 2-d array (locations x times)")
        self.values = v
        n, T = v.shape
        self.location_ids = tuple(self.location_ids) or _default_labels("s", n)
        self.time_ids = tuple(self.time_ids) or tuple(range(1, T + 1))
        if len(self.location_ids) != n or len(self.time_ids) != T:
            raise ValueError("label vectors do not match panel dimensions")
        if len(set(self.location_ids)) != n or len(set(self.time_ids)) != T:
            raise ValueError("panel labels must be unique")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values.T, columns=[str(c) for c in self.location_ids])
        df.insert(0, "time", list(self.time_ids))
        return df

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path) -> "Panel":
        df = pd.read_csv(path, float_precision="round_trip")
        return cls._from_frame(df)

    @classmethod
    def _from_frame(cls, df: pd.DataFrame, **kw):
        if df.shape[1] < 2:
            raise ValueError("panel CSV needs a time column and at least one location column")
        values = df.iloc[:, 1:].to_numpy(dtype=float).T
        return cls(values, tuple(df.columns[1:]), tuple(df.iloc[:, 0].tolist()), **kw)


@dataclass
class LogSquaredPanel(Panel):
    """Log-squared observations ``Y*_it = log y_it^2``; every entry finite."""

    zero_replacements: int = 0

    def __post_init__(self):
        super().__post_init__()
        if not np.all(np.isfinite(self.values)):
            raise ValueError("log-squared panel has non-finite entries")


def log_square(panel: Panel, zero_policy: ZeroPolicy | None = None) -> LogSquaredPanel:
    """Element-wise ``log(y^2)``; zeros are floored per ``zero_policy`` series by series."""
    out = np.empty_like(panel.values)
    total = 0
    for i, series in enumerate(panel.values):
        out[i], n_zero = log_square_series(series, zero_policy)
        total += n_zero
    return LogSquaredPanel(out, panel.location_ids, panel.time_ids, zero_replacements=total)


@dataclass
class RegimePath:
    """Regime labels in {1, 2}, one per period."""

    states: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.states, dtype=int)
        if s.ndim != 1 or not np.all((s == 1) | (s == 2)):
            raise ValueError("regime states must be a 1-d vector of 1s and 2s")
        self.states = s

    def __len__(self) -> int:
        return self.states.size

    def to_csv(self, path, time_ids: Sequence | None = None) -> None:
        times = list(time_ids) if time_ids is not None else list(range(1, len(self) + 1))
        pd.DataFrame({"time": times, "state": self.states}).to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path) -> "RegimePath":
        return cls(pd.read_csv(path)["state"].to_numpy())


@dataclass
class Simulation:
    """Output of :func:`simulate`; unpacks as ``(panel, log_squared, path)``."""

    panel: Panel
    log_squared: LogSquaredPanel
    path: RegimePath
    shocks: np.ndarray = field(repr=False)  # log eps^2, n x T

    def __iter__(self):
        return iter((self.panel, self.log_squared, self.path))


def simulate_path(transition: TransitionMatrix, T: int, rng: np.random.Generator, init=None) -> np.ndarray:
    """Zero-based regime indices of a Markov chain path of length ``T``."""
    init = stationary_dist(transition) if init is None else np.asarray(init, dtype=float)
    u = rng.random(T)
    states = np.empty(T, dtype=int)
    states[0] = 0 if u[0] < init[0] else 1
    stay = (transition.p, transition.q)
    for t in range(1, T):
        prev = states[t - 1]
        states[t] = prev if u[t] < stay[prev] else 1 - prev
    return states


def simulate(
    params: ModelParams,
    w: WeightMatrix,
    T: int,
    burn_in: int = 100,
    seed=None,
    *,
    intercept_scale: str = "mu",
    init=None,
) -> Simulation:
    """Draw a panel from the two-regime spatio-temporal log-ARCH process.

    With ``intercept_scale="mu"`` the regime intercepts are the raw constants
    added to ``log eps^2``; with ``"phi"`` they are the centered intercepts of
    the estimated model (``phi = mu + E[log eps^2]``). The chain starts from its
    stationary distribution unless ``init`` is given, and the first ``burn_in``
    periods are discarded. ``seed`` may be an int, a ``SeedSequence`` or a
    ``Generator``.
    """
    if intercept_scale not in ("mu", "phi"):
        raise ValueError("intercept_scale must be 'mu' or 'phi'")
    if T < 2:
        raise ValueError("T must be at least 2")
    if burn_in < 0:
        raise ValueError("burn_in must be non-negative")
    if not w.row_normalized:
        raise ValueError("simulation requires a row-normalized weight matrix")
    params.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shift = MU_EPS if intercept_scale == "phi" else 0.0

    n, total = w.n, burn_in + T
    W = w.values
    eye = np.eye(n)
    factors = []
    for reg in params.regimes:
        A = eye - reg.rho * W
        lu, piv = scipy.linalg.lu_factor(A, check_finite=False)
        pivots = np.abs(np.diag(lu))
        if pivots.min() <= 1e-12 * max(pivots.max(), 1.0):
            raise ParameterError("rho", f"I - rho*W is numerically singular at rho={reg.rho}")
        factors.append((lu, piv))

    states = simulate_path(params.transition, total, rng, init)
    eps = rng.standard_normal((total, n))
    shocks = np.log(eps**2)

    Y = np.zeros((total, n))
    prev = np.zeros(n)
    for t in range(total):
        reg = params.regimes[states[t]]
        rhs = reg.gamma * prev + reg.delta * (W @ prev) + (reg.phi - shift) + shocks[t]
        Y[t] = scipy.linalg.lu_solve(factors[states[t]], rhs, check_finite=False)
        prev = Y[t]

    keep = slice(burn_in, total)
    y = np.sign(eps[keep]) * np.exp(Y[keep] / 2.0)
    panel = Panel(y.T)
    log_sq = log_square(panel)
    return Simulation(panel, log_sq, RegimePath(states[keep] + 1), shocks[keep].T)
