"""Spatial weight matrices: queen-contiguity lattices and model-based k-NN weights.

The model-based route fits a log-ARCH(P) regression to every series, measures
dissimilarity between series as the Euclidean (Piccolo) distance between their
fitted ARCH coefficient vectors, and links each series to its k nearest
neighbours.
"""

from __future__ import annotations

import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_ROW_TOL = 1e-12


class DegenerateInputError(ValueError):
    """Raised when a series carries no information for a regression fit."""


@dataclass(frozen=True)
class ZeroPolicy:
    """How exact zeros are treated before taking ``log(y**2)``.

    ``"floor"`` replaces each zero with ``scale * sd(series)`` (so the log-square
    becomes ``log((scale * sd)**2)``); a series whose standard deviation is zero
    falls back to ``fallback``. ``"error"`` refuses zeros outright.
    """

    kind: str = "floor"
    scale: float = 1e-3
    fallback: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("floor", "error"):
            raise ValueError(f"unknown zero policy {self.kind!r}")
        if self.scale <= 0 or self.fallback <= 0:
            raise ValueError("zero policy scale and fallback must be positive")

    def floor_value(self, series: np.ndarray) -> float:
        sd = float(np.std(series))
        value = self.scale * sd
        return value if value > 0 else self.fallback


def log_square_series(series, zero_policy: ZeroPolicy | None = None) -> tuple[np.ndarray, int]:
    """Element-wise ``log(y**2)`` of one series; returns the values and the zero count."""
    policy = zero_policy or ZeroPolicy()
    y = np.asarray(series, dtype=float)
    zeros = y == 0.0
    n_zero = int(zeros.sum())
    if n_zero and policy.kind == "error":
        raise DegenerateInputError(f"series contains {n_zero} exact zeros")
    out = np.empty_like(y)
    out[~zeros] = np.log(y[~zeros] ** 2)
    if n_zero:
        out[zeros] = 2.0 * math.log(policy.floor_value(y))
    return out, n_zero


@dataclass
class WeightMatrix:
    values: np.ndarray
    row_normalized: bool = False
    method: str = "custom"
    zero_rows: tuple[int, ...] = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"weight matrix must be square, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("weight matrix has non-finite entries")
        if np.any(v < 0):
            raise ValueError("weight matrix has negative entries")
        if np.any(np.diag(v) != 0):
            raise ValueError("weight matrix must have a zero diagonal")
        if self.row_normalized:
            sums = v.sum(axis=1)
            bad = (sums > 0) & (np.abs(sums - 1.0) > _ROW_TOL)
            if np.any(bad):
                raise ValueError(
                    f"rows {np.flatnonzero(bad).tolist()} do not sum to 1 "
                    "but the matrix is flagged row-normalized"
                )
        v.setflags(write=False)
        self.values = v

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.values)

    def rho_bounds(self) -> tuple[float, float]:
        """Open interval ``(1/lambda_min, 1/lambda_max)`` over the real spectrum.

        Only meaningful when the spectrum is real (symmetric or similar to
        symmetric ``W``); exposed as a validity check, estimation uses (-1, 1).
        """
        lam = self.eigenvalues()
        real = lam.real[np.abs(lam.imag) < 1e-10]
        lo, hi = real.min(), real.max()
        return (1.0 / lo if lo < 0 else -math.inf, 1.0 / hi if hi > 0 else math.inf)

    def to_csv(self, path, *, metadata: bool = True, extra: dict | None = None) -> None:
        path = Path(path)
        write_matrix_csv(path, self.values)
        if metadata:
            meta = {
                "n": self.n,
                "row_normalized": self.row_normalized,
                "method": self.method,
                "zero_rows": list(self.zero_rows),
            }
            if extra:
                meta.update(extra)
            metadata_path(path).write_text(json.dumps(meta, indent=2))

    @classmethod
    def from_csv(cls, path) -> "WeightMatrix":
        path = Path(path)
        values = read_matrix_csv(path)
        meta_file = metadata_path(path)
        if meta_file.exists():
            meta = json.loads(meta_file.read_text())
            return cls(
                values,
                row_normalized=bool(meta.get("row_normalized", False)),
                method=meta.get("method", "custom"),
                zero_rows=tuple(meta.get("zero_rows", ())),
            )
        # no sidecar: infer the flag from the rows themselves
        sums = values.sum(axis=1)
        normalized = bool(np.all((sums == 0) | (np.abs(sums - 1.0) <= _ROW_TOL)))
        return cls(values, row_normalized=normalized)


def metadata_path(csv_path: Path) -> Path:
    return csv_path.with_name(csv_path.name + ".json")


def write_matrix_csv(path, values: np.ndarray) -> None:
    np.savetxt(path, np.asarray(values, dtype=float), delimiter=",", fmt="%.17g")


def read_matrix_csv(path) -> np.ndarray:
    values = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
    return values


def build_queen_grid(rows: int, cols: int) -> WeightMatrix:
    """Binary queen-contiguity adjacency on a ``rows x cols`` lattice.

    Cells are numbered row-major. Cells sharing an edge or a corner are
    neighbours. The result is not row-normalized.
    """
    if int(rows) != rows or int(cols) != cols or rows < 1 or cols < 1:
        raise ValueError(f"grid dimensions must be positive integers, got ({rows}, {cols})")
    rows, cols = int(rows), int(cols)
    n = rows * cols
    # dense n x n float64 storage
    if n > math.isqrt(sys.maxsize // 8):
        raise OverflowError(f"grid {rows}x{cols} is too large for a dense weight matrix")
    w = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == 0 and dc == 0:
                        continue
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < rows and 0 <= cc < cols:
                        w[i, rr * cols + cc] = 1.0
    return WeightMatrix(w, row_normalized=False, method=f"queen:{rows}x{cols}")


def row_normalize(w: WeightMatrix) -> WeightMatrix:
    """Divide each row by its sum. Zero rows (isolated locations) stay zero.

    The indices of zero rows are logged at warning level and kept on the
    returned matrix as ``zero_rows``.
    """
    v = np.array(w.values)
    sums = v.sum(axis=1)
    nonzero = sums > 0
    v[nonzero] /= sums[nonzero, None]
    zero_rows = tuple(int(i) for i in np.flatnonzero(~nonzero))
    if zero_rows:
        logger.warning("row_normalize: isolated locations (zero rows) %s", list(zero_rows))
    return WeightMatrix(v, row_normalized=True, method=w.method, zero_rows=zero_rows)


@dataclass(frozen=True)
class UnivariateLogArchFit:
    series_id: Hashable
    order: int
    constant: float
    coefficients: np.ndarray = field(repr=False)
    residual_variance: float
    zero_replacements: int = 0

    def __post_init__(self):
        coefs = np.asarray(self.coefficients, dtype=float)
        if coefs.shape != (self.order,):
            raise ValueError(f"expected {self.order} coefficients, got shape {coefs.shape}")
        if self.residual_variance < 0:
            raise ValueError("residual variance must be non-negative")
        object.__setattr__(self, "coefficients", coefs)


def fit_log_arch(
    series,
    order: int = 1,
    zero_policy: ZeroPolicy | None = None,
    series_id: Hashable = None,
) -> UnivariateLogArchFit:
    """OLS fit of ``log y_t^2`` on an intercept and its first ``order`` lags."""
    y = np.asarray(series, dtype=float)
    if order < 1:
        raise ValueError("order must be at least 1")
    if y.ndim != 1 or y.size <= order + 10:
        raise ValueError(f"series of length {y.size} is too short for log-ARCH({order})")
    if not np.all(np.isfinite(y)):
        raise ValueError("series has non-finite values")
    z, n_zero = log_square_series(y, zero_policy)
    return _fit_ar_ols(z, order, series_id, n_zero)


def _fit_ar_ols(z: np.ndarray, order: int, series_id, n_zero: int) -> UnivariateLogArchFit:
    m = z.size - order
    X = np.ones((m, order + 1))
    for lag in range(1, order + 1):
        X[:, lag] = z[order - lag : z.size - lag]
    target = z[order:]
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[-1] <= sv[0] * 1e-10:
        raise DegenerateInputError(
            f"series {series_id!r}: singular log-ARCH design (constant or degenerate series)"
        )
    beta, *_ = np.linalg.lstsq(X, target, rcond=None)
    resid = target - X @ beta
    dof = max(m - order - 1, 1)
    var = float(resid @ resid) / dof
    return UnivariateLogArchFit(
        series_id=series_id,
        order=order,
        constant=float(beta[0]),
        coefficients=beta[1:],
        residual_variance=max(var, 0.0),
        zero_replacements=n_zero,
    )


def piccolo_distance(a: UnivariateLogArchFit, b: UnivariateLogArchFit) -> float:
    """Euclidean distance between ARCH coefficient vectors (constants excluded)."""
    if a.order != b.order:
        raise ValueError(f"order mismatch: {a.order} vs {b.order}")
    return float(np.sqrt(np.sum((a.coefficients - b.coefficients) ** 2)))


@dataclass
class DistanceMatrix:
    values: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"distance matrix must be square, got shape {v.shape}")
        if np.any(v < 0):
            raise ValueError("distances must be non-negative")
        if np.any(np.diag(v) != 0):
            raise ValueError("distance matrix must have a zero diagonal")
        if not np.allclose(v, v.T, rtol=0, atol=1e-12):
            raise ValueError("distance matrix must be symmetric")
        self.values = v

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path) -> None:
        write_matrix_csv(path, self.values)


def piccolo_matrix(fits: Sequence[UnivariateLogArchFit]) -> DistanceMatrix:
    n = len(fits)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = piccolo_distance(fits[i], fits[j])
    return DistanceMatrix(d, labels=tuple(f.series_id for f in fits))


def knn_weights(d: DistanceMatrix, k: int) -> WeightMatrix:
    """k-nearest-neighbour weights, ``w_ij = 1/#N_k(i)`` for neighbours.

    Ties in distance are broken by the lower series index. The relation is
    not symmetrized, so ``W`` is generally asymmetric.
    """
    n = d.n
    if int(k) != k or not 1 <= k <= n - 1:
        raise ValueError(f"k must satisfy 1 <= k <= n-1 = {n - 1}, got {k}")
    k = int(k)
    w = np.zeros((n, n))
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        dist = d.values[i, others]
        finite = np.isfinite(dist)
        others, dist = others[finite], dist[finite]
        # lexsort: last key is primary -> distance first, index second
        order = np.lexsort((others, dist))
        neighbours = others[order[:k]]
        if neighbours.size:
            w[i, neighbours] = 1.0 / neighbours.size
    return WeightMatrix(w, row_normalized=True, method=f"knn:k={k}")
