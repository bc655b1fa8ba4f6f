import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from msstarch import cli  # noqa: E402
from msstarch.model import (  # noqa: E402
    MU_EPS,
    ModelParams,
    RegimeParams,
    TransitionMatrix,
    study_dgp,
    simulate,
)
from msstarch.weights import WeightMatrix, build_queen_grid, row_normalize  # noqa: E402
from oracles import random_row_normalized  # noqa: E402


@pytest.fixture(scope="session")
def queen6():
    return row_normalize(build_queen_grid(6, 6))


@pytest.fixture(scope="session")
def queen10():
    return row_normalize(build_queen_grid(10, 10))


@pytest.fixture(scope="session")
def study_truth_phi():
    """The simulation-study parameters on the estimated model's intercept scale."""
    return study_dgp().shift_intercepts(MU_EPS)


def random_instance(rng, n=None, T=None):
    """A small random model, weight matrix and panel for oracle comparisons."""
    n = n or int(rng.integers(1, 5))
    T = T or int(rng.integers(2, 7))
    W = random_row_normalized(n, rng)
    w = WeightMatrix(W, row_normalized=True)

    def regime():
        while True:
            rho, gamma, delta = rng.uniform(-0.9, 0.9, 3)
            if abs(rho) + abs(gamma) + abs(delta) < 0.95:
                return RegimeParams(rho, gamma, delta, rng.normal(-1.0, 1.0))

    params = ModelParams(
        (regime(), regime()),
        TransitionMatrix(*rng.uniform(0.05, 0.95, 2)),
        float(rng.uniform(0.5, 6.0)),
    )
    sim = simulate(params, w, T, burn_in=5, seed=rng, intercept_scale="phi")
    return params, w, sim.log_squared


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@dataclass
class DeskRun:
    exit_code: int
    out_dir: Path
    seconds: float
    tidy: pd.DataFrame
    records: pd.DataFrame

    def rmse(self, n, T, name):
        t = self.tidy
        return float(t[(t.n == n) & (t["T"] == T) & (t.parameter == name)].rmse.iloc[0])

    def mean(self, n, T, name):
        t = self.tidy
        return float(t[(t.n == n) & (t["T"] == T) & (t.parameter == name)]["mean"].iloc[0])


@pytest.fixture(scope="session")
def desk_study(tmp_path_factory):
    """The desk-scale study (all nine cells, 30 replications) run once through the CLI."""
    out = tmp_path_factory.mktemp("desk")
    started = time.perf_counter()
    code = cli.main(["mc-study", "--desk", "--out-dir", str(out)])
    seconds = time.perf_counter() - started
    return DeskRun(code, out, seconds, pd.read_csv(out / "report_tidy.csv"), pd.read_csv(out / "replications.csv"))


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: s.split()[1]):
            terminalreporter.write_line(line)
