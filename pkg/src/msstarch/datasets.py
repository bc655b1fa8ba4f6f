"""Bundled synthetic sample data.

``synthetic_28.csv`` is a 28-series daily log-return panel drawn from a
two-regime process on a 5-NN network of random points, with return standard
deviations of order 1e-2. It is regenerated by :func:`make_synthetic_returns`
with the default seed.
"""

from __future__ import annotations

from importlib import resources

import numpy as np
import pandas as pd

from .model import ModelParams, Panel, RegimeParams, TransitionMatrix, simulate
from .weights import DistanceMatrix, knn_weights

SYNTHETIC_SEED = 2015
N_SERIES = 28
N_DAYS = 1000


def synthetic_params() -> ModelParams:
    # raw-scale intercepts chosen so that log y^2 centres near -10.4 (sd of returns ~ 1e-2)
    return ModelParams(
        (RegimeParams(0.30, 0.20, 0.05, -3.40), RegimeParams(0.08, 0.20, 0.00, -6.57)),
        TransitionMatrix(0.98, 0.98),
    )


def make_synthetic_returns(seed: int = SYNTHETIC_SEED, n: int = N_SERIES, T: int = N_DAYS) -> Panel:
    rng = np.random.default_rng(seed)
    coords = rng.uniform(size=(n, 2))
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    w = knn_weights(DistanceMatrix(d), 5)
    sim = simulate(synthetic_params(), w, T, burn_in=200, seed=rng)
    dates = pd.bdate_range("2014-01-02", periods=T).strftime("%Y-%m-%d")
    ids = tuple(f"IDX{i + 1:02d}" for i in range(n))
    return Panel(sim.panel.values, ids, tuple(dates))


def synthetic_returns_path():
    return resources.files("msstarch") / "data" / "synthetic_28.csv"


def load_synthetic_returns() -> Panel:
    with resources.as_file(synthetic_returns_path()) as path:
        return Panel.from_csv(path)
