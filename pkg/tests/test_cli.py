import json

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from msstarch import cli
from msstarch.datasets import load_synthetic_returns, make_synthetic_returns, synthetic_returns_path
from msstarch.model import Panel, RegimePath
from msstarch.weights import WeightMatrix, build_queen_grid, row_normalize

FIXTURE = str(synthetic_returns_path())


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    """A 6x6 two-regime panel at T=300, fitted in both modes through the CLI."""
    root = tmp_path_factory.mktemp("sim")
    row_normalize(build_queen_grid(6, 6)).to_csv(root / "w.csv")
    assert cli.main(["simulate", "--weights", str(root / "w.csv"), "--T", "300", "--seed", "3", "--out-dir", str(root)]) == 0
    assert cli.main(["fit", "--panel", str(root / "panel.csv"), "--weights", str(root / "w.csv"), "--out-dir", str(root)]) == 0
    return root


class TestSimulate:
    def test_writes_three_files(self, tmp_path, capsys):
        code, out, _ = run(capsys, "simulate", "--grid", "3x3", "--T", "50", "--seed", "1", "--out-dir", tmp_path)
        assert code == 0
        for name in ("panel.csv", "log_squared.csv", "regimes.csv"):
            assert (tmp_path / name).exists()
        assert "n=9" in out and "T=50" in out and "seed=1" in out
        panel = Panel.from_csv(tmp_path / "panel.csv")
        assert panel.values.shape == (9, 50)
        assert len(RegimePath.from_csv(tmp_path / "regimes.csv")) == 50

    def test_bad_rho_named(self, tmp_path, capsys):
        code, _, err = run(capsys, "simulate", "--rho1", "1.5", "--grid", "3x3", "--out-dir", tmp_path)
        assert code != 0
        assert "rho" in err

    def test_byte_identical_reruns(self, tmp_path, capsys):
        args = ["simulate", "--grid", "4x4", "--T", "40", "--seed", "11"]
        assert run(capsys, *args, "--out-dir", tmp_path / "a")[0] == 0
        assert run(capsys, *args, "--out-dir", tmp_path / "b")[0] == 0
        for name in ("panel.csv", "log_squared.csv", "regimes.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_refuses_overwrite_without_force(self, tmp_path, capsys):
        args = ["simulate", "--grid", "2x2", "--T", "20", "--out-dir", tmp_path]
        assert run(capsys, *args)[0] == 0
        code, _, err = run(capsys, *args)
        assert code == 1 and "--force" in err
        assert run(capsys, *args, "--force")[0] == 0

    def test_config_supplies_flags_and_flags_win(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"T": 30, "grid": "2x3", "seed": 5}))
        code, out, _ = run(capsys, "simulate", "--config", cfg, "--T", "25", "--out-dir", tmp_path / "o")
        assert code == 0 and "n=6 T=25 seed=5" in out

    def test_bad_flag_is_usage_error(self, capsys):
        assert cli.main(["simulate", "--no-such-flag"]) == 1
        capsys.readouterr()


class TestBuildWeights:
    def test_fixture_k5(self, tmp_path, capsys):
        code, _, _ = run(capsys, "build-weights", "--panel", FIXTURE, "--k", "5", "--out-dir", tmp_path)
        assert code == 0
        w = WeightMatrix.from_csv(tmp_path / "weights_k5.csv")
        assert w.values.shape == (28, 28)
        assert_allclose(w.values.sum(axis=1), 1.0, atol=1e-12)
        assert_array_equal((w.values > 0).sum(axis=1), np.full(28, 5))
        meta = json.loads((tmp_path / "weights_k5.csv.json").read_text())
        assert meta["row_normalized"] and meta["order"] == 1

    def test_k_equal_n_rejected(self, tmp_path, capsys):
        code, _, err = run(capsys, "build-weights", "--panel", FIXTURE, "--k", "28", "--out-dir", tmp_path)
        assert code != 0 and "k=28" in err

    def test_short_series(self, tmp_path, capsys):
        Panel(np.random.default_rng(0).normal(size=(3, 8))).to_csv(tmp_path / "short.csv")
        code, _, err = run(capsys, "build-weights", "--panel", tmp_path / "short.csv", "--k", "1", "--out-dir", tmp_path)
        assert code != 0 and "too short" in err

    def test_constant_price_series_reports_zero_policy(self, tmp_path, capsys):
        rng = np.random.default_rng(4)
        prices = 100 * np.exp(np.cumsum(rng.normal(0, 0.01, size=(4, 200)), axis=1))
        prices[2] = 50.0
        Panel(prices, ("A", "B", "C", "D")).to_csv(tmp_path / "prices.csv")
        code, _, err = run(capsys, "build-weights", "--panel", tmp_path / "prices.csv", "--prices", "--k", "2",
                           "--out-dir", tmp_path)
        # a constant series floors every zero and then has nothing to fit
        assert "zero policy" in err and "series C" in err
        assert code == 2

    def test_prices_converted_to_log_returns(self, tmp_path, capsys):
        rng = np.random.default_rng(5)
        returns = rng.normal(0, 0.01, size=(5, 300))
        prices = 100 * np.exp(np.cumsum(returns, axis=1))
        Panel(prices).to_csv(tmp_path / "prices.csv")
        Panel(np.diff(np.log(prices), axis=1)).to_csv(tmp_path / "returns.csv")
        assert run(capsys, "build-weights", "--panel", tmp_path / "prices.csv", "--prices", "--k", "2",
                   "--out-dir", tmp_path / "p")[0] == 0
        assert run(capsys, "build-weights", "--panel", tmp_path / "returns.csv", "--k", "2",
                   "--out-dir", tmp_path / "r")[0] == 0
        a = WeightMatrix.from_csv(tmp_path / "p" / "weights_k2.csv").values
        b = WeightMatrix.from_csv(tmp_path / "r" / "weights_k2.csv").values
        assert_array_equal(a, b)


class TestFit:
    def test_converged_json(self, simulated):
        for m in ("two", "one"):
            d = json.loads((simulated / f"fit_{m}_regime.json").read_text())
            assert d["converged"] is True
            assert {"estimates", "std_errors", "pvalues", "loglik", "bic", "options"} <= set(d)

    def test_bic_prefers_two_regime(self, simulated):
        two = json.loads((simulated / "fit_two_regime.json").read_text())
        one = json.loads((simulated / "fit_one_regime.json").read_text())
        assert two["bic"] < one["bic"]

    def test_dimension_mismatch(self, tmp_path, capsys):
        row_normalize(build_queen_grid(3, 9)).to_csv(tmp_path / "w27.csv")
        code, _, err = run(capsys, "fit", "--panel", FIXTURE, "--weights", tmp_path / "w27.csv", "--out-dir", tmp_path)
        assert code != 0
        assert "28" in err and "27x27" in err

    def test_bic_table_for_several_weights(self, tmp_path, capsys):
        assert run(capsys, "simulate", "--grid", "2x2", "--T", "120", "--seed", "2", "--out-dir", tmp_path)[0] == 0
        row_normalize(build_queen_grid(2, 2)).to_csv(tmp_path / "wa.csv")
        row_normalize(build_queen_grid(4, 1)).to_csv(tmp_path / "wb.csv")
        code, out, _ = run(capsys, "fit", "--panel", tmp_path / "panel.csv", "--weights", tmp_path / "wa.csv",
                           tmp_path / "wb.csv", "--mode", "one", "--out-dir", tmp_path)
        assert code == 0
        table = pd.read_csv(tmp_path / "bic_table.csv")
        assert list(table.weights) == ["wa", "wb"]
        assert (tmp_path / "fit_one_regime_wa.json").exists()


@pytest.fixture(scope="module")
def smoothed(simulated):
    assert cli.main([
        "smooth", "--panel", str(simulated / "panel.csv"), "--weights", str(simulated / "w.csv"),
        "--estimate", str(simulated / "fit_two_regime.json"), "--out-dir", str(simulated),
    ]) == 0
    return pd.read_csv(simulated / "smoothed.csv")


class TestSmooth:
    def test_recovers_path(self, simulated, smoothed):
        truth = RegimePath.from_csv(simulated / "regimes.csv").states
        est = RegimePath.from_csv(simulated / "regime_path.csv").states
        assert np.mean(truth == est) >= 0.9
        assert_array_equal(est, smoothed.state.to_numpy())

    def test_rows_sum_to_one(self, smoothed):
        assert_allclose(smoothed.xi1_filtered + smoothed.xi2_filtered, 1.0, atol=1e-10)
        assert_allclose(smoothed.xi1_smoothed + smoothed.xi2_smoothed, 1.0, atol=1e-10)

    def test_last_row(self, smoothed):
        last = smoothed.iloc[-1]
        assert last.xi1_smoothed == last.xi1_filtered and last.xi2_smoothed == last.xi2_filtered

    def test_missing_estimate(self, simulated, tmp_path, capsys):
        code, _, err = run(capsys, "smooth", "--panel", simulated / "panel.csv", "--weights", simulated / "w.csv",
                           "--estimate", tmp_path / "nope.json", "--out-dir", tmp_path)
        assert code != 0 and "nope.json" in err


class TestMcStudy:
    def _config(self, tmp_path, **kw):
        cfg = {"grid_dims": [[2, 2]], "horizons": [50], "replications": 2, "burn_in": 10,
               "fit_options": {"n_starts": 1}, **kw}
        path = tmp_path / "study.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_zero_replications(self, tmp_path, capsys):
        code, _, err = run(capsys, "mc-study", "--config", self._config(tmp_path, replications=0), "--out-dir", tmp_path)
        assert code == 1 and "replications" in err

    def test_malformed_field(self, tmp_path, capsys):
        code, _, err = run(capsys, "mc-study", "--config", self._config(tmp_path, horizons=[1]), "--out-dir", tmp_path)
        assert code == 1 and "horizons" in err

    def test_rerun_identical(self, tmp_path, capsys):
        cfg = self._config(tmp_path)
        assert run(capsys, "mc-study", "--config", cfg, "--seed", "9", "--out-dir", tmp_path / "a")[0] == 0
        assert run(capsys, "mc-study", "--config", cfg, "--seed", "9", "--out-dir", tmp_path / "b")[0] == 0
        for name in ("report_wide.csv", "report_tidy.csv", "replications.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    @pytest.mark.slow
    def test_desk_preset(self, desk_study):
        assert desk_study.exit_code == 0
        wide = pd.read_csv(desk_study.out_dir / "report_wide.csv", index_col=0)
        assert wide.shape == (13, 9)
        assert set(desk_study.tidy.n) == {36, 49, 100} and set(desk_study.tidy["T"]) == {200, 300, 500}
        assert len(desk_study.records) == 9 * 30


class TestRoundTrips:
    def test_panel_csv(self, tmp_path, rng):
        p = Panel(rng.standard_normal((3, 20)) * np.array([[1e-300], [1.0], [1e300]]), ("a", "b", "c"))
        p.to_csv(tmp_path / "p.csv")
        assert_array_equal(Panel.from_csv(tmp_path / "p.csv").values, p.values)

    def test_weights_csv(self, tmp_path, rng):
        w = row_normalize(WeightMatrix(rng.random((7, 7)) * (1 - np.eye(7))))
        w.to_csv(tmp_path / "w.csv", metadata=False)
        back = WeightMatrix.from_csv(tmp_path / "w.csv")
        assert_array_equal(back.values, w.values)
        assert back.row_normalized

    def test_fixture_matches_generator(self):
        assert_array_equal(load_synthetic_returns().values, make_synthetic_returns().values)
        panel = load_synthetic_returns()
        assert panel.values.shape == (28, 1000)
        assert 0.005 < np.std(panel.values) < 0.02
