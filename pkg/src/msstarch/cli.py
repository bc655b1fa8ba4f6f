"""Command-line front end: simulate, build-weights, fit, smooth, mc-study.

Exit codes: 0 success, 1 usage or validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .estimation import EstimationResult, FitOptions, fit_one_regime, fit_two_regime, significance_stars
from .filtering import FilterError, hamilton_filter, kim_smooth, probabilities_frame
from .model import LogSquaredPanel, ModelParams, Panel, ParameterError, log_square, study_dgp, simulate
from .montecarlo import ConfigError, StudyConfig, desk_preset, run_study
from .weights import (
    DegenerateInputError,
    WeightMatrix,
    ZeroPolicy,
    build_queen_grid,
    fit_log_arch,
    knn_weights,
    piccolo_matrix,
    row_normalize,
)

log = logging.getLogger("msstarch")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class OutputPaths:
    """Resolves output files under ``--out-dir`` and refuses to overwrite without ``--force``."""

    def __init__(self, out_dir, force: bool):
        self.root = Path(out_dir)
        self.force = force
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {self.root}: {exc}") from None

    def __call__(self, name: str) -> Path:
        path = self.root / name
        if path.exists() and not self.force:
            raise UsageError(f"{path} exists; pass --force to overwrite")
        return path


def _apply_config(args: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    """Fill unset flags from ``--config`` (JSON), then from ``defaults``. Flags win."""
    config = {}
    if getattr(args, "config", None):
        try:
            config = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"--config {args.config}: {exc}") from None
        if not isinstance(config, dict):
            raise UsageError("--config must hold a JSON object")
    for key, value in config.items():
        dest = key.replace("-", "_")
        if getattr(args, dest, None) is None:
            setattr(args, dest, value)
    for key, value in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    return args


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out-dir", help="output directory (created if missing)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--config", help="JSON file whose keys supply default flag values")


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid expects ROWSxCOLS, got {text!r}") from None
    return rows, cols


def _load_weights(path, n_expected: int | None = None) -> WeightMatrix:
    try:
        w = WeightMatrix.from_csv(path)
    except OSError as exc:
        raise UsageError(f"cannot read weights {path}: {exc}") from None
    if not w.row_normalized:
        w = row_normalize(w)
    if n_expected is not None and w.n != n_expected:
        raise UsageError(f"dimension mismatch: panel has {n_expected} locations but weights {path} are {w.n}x{w.n}")
    return w


def _load_log_squared(path, already: bool) -> LogSquaredPanel:
    try:
        panel = Panel.from_csv(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read panel {path}: {exc}") from None
    if already:
        return LogSquaredPanel(panel.values, panel.location_ids, panel.time_ids)
    logsq = log_square(panel)
    if logsq.zero_replacements:
        print(f"zero policy: floored {logsq.zero_replacements} zero observations", file=sys.stderr)
    return logsq


# ---------------------------------------------------------------- simulate

_PARAM_FLAGS = ("rho1", "gamma1", "delta1", "mu1", "rho2", "gamma2", "delta2", "mu2", "p", "q")


def _simulation_params(args) -> ModelParams:
    base = study_dgp().as_dict()
    if args.params:
        data = json.loads(Path(args.params).read_text())
        base.update({("phi" + k[2:] if k.startswith("mu") else k): v for k, v in data.items()})
    for flag in _PARAM_FLAGS:
        value = getattr(args, flag)
        if value is not None:
            base["phi" + flag[2:] if flag.startswith("mu") else flag] = value
    params = ModelParams.from_dict(base)
    params.validate()
    return params


def cmd_simulate(args) -> int:
    args = _apply_config(args, {"T": 300, "burn_in": 100, "seed": 0, "out_dir": ".", "grid": "10x10"})
    params = _simulation_params(args)
    if args.weights:
        w = _load_weights(args.weights)
    else:
        w = row_normalize(build_queen_grid(*_parse_grid(args.grid)))
    out = OutputPaths(args.out_dir, args.force)
    targets = [out("panel.csv"), out("log_squared.csv"), out("regimes.csv")]
    sim = simulate(params, w, int(args.T), burn_in=int(args.burn_in), seed=int(args.seed))
    sim.panel.to_csv(targets[0])
    sim.log_squared.to_csv(targets[1])
    sim.path.to_csv(targets[2], sim.panel.time_ids)
    print(f"simulated n={w.n} T={args.T} seed={args.seed}")
    return EXIT_OK


# ----------------------------------------------------------- build-weights


def prices_to_returns(panel: Panel) -> Panel:
    if np.any(panel.values <= 0):
        raise UsageError("prices must be strictly positive to take log returns")
    r = np.diff(np.log(panel.values), axis=1)
    return Panel(r, panel.location_ids, panel.time_ids[1:])


def cmd_build_weights(args) -> int:
    args = _apply_config(args, {"k": [5], "order": 1, "out_dir": "."})
    try:
        panel = Panel.from_csv(args.panel)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read panel {args.panel}: {exc}") from None
    if args.prices:
        panel = prices_to_returns(panel)
    ks = [int(k) for k in (args.k if isinstance(args.k, list) else [args.k])]
    for k in ks:
        if not 1 <= k <= panel.n - 1:
            raise UsageError(f"k={k} out of range: need 1 <= k <= n-1 = {panel.n - 1}")
    order = int(args.order)
    policy = ZeroPolicy()
    fits = []
    for series_id, series in zip(panel.location_ids, panel.values):
        if series.size <= order + 10:
            raise UsageError(f"series {series_id!r} has {series.size} observations, too short for order {order}")
        n_zero = int(np.sum(series == 0))
        if n_zero:
            print(f"zero policy: floored {n_zero} zero returns in series {series_id}", file=sys.stderr)
        fits.append(fit_log_arch(series, order, policy, series_id=series_id))
    dist = piccolo_matrix(fits)
    out = OutputPaths(args.out_dir, args.force)
    targets = {k: out(f"weights_k{k}.csv") for k in ks}
    if args.distances:
        dist.to_csv(out("distances.csv"))
    for k, path in targets.items():
        knn_weights(dist, k).to_csv(path, extra={"order": order, "series": [str(s) for s in panel.location_ids]})
        print(f"wrote {path} (n={panel.n}, k={k})")
    return EXIT_OK


# --------------------------------------------------------------------- fit


def _fit_options(args) -> FitOptions:
    return FitOptions(n_starts=int(args.starts), seed=int(args.seed))


def cmd_fit(args) -> int:
    args = _apply_config(args, {"mode": "both", "starts": 5, "seed": 0, "out_dir": "."})
    if args.mode not in ("one", "two", "both"):
        raise UsageError(f"--mode must be one, two or both, got {args.mode!r}")
    panel = _load_log_squared(args.panel, args.log_squared)
    weight_files = args.weights if isinstance(args.weights, list) else [args.weights]
    ws = [(Path(p).stem, _load_weights(p, panel.n)) for p in weight_files]
    out = OutputPaths(args.out_dir, args.force)
    modes = ("two", "one") if args.mode == "both" else (args.mode,)
    tag = (lambda stem: f"_{stem}") if len(ws) > 1 else (lambda stem: "")
    targets = {(stem, m): out(f"fit_{m}_regime{tag(stem)}.json") for stem, _ in ws for m in modes}
    table_path = out("bic_table.csv") if len(ws) > 1 else None
    rows = []
    for stem, w in ws:
        results = {}
        for m in modes:
            fitter = fit_two_regime if m == "two" else fit_one_regime
            res = fitter(panel, w, _fit_options(args))
            res.to_json(targets[(stem, m)])
            results[m] = res
            rows.append({"weights": stem, "model": res.model, "loglik": res.loglik, "bic": res.bic,
                         "n_params": res.n_params, "converged": res.converged})
            stars = {k: significance_stars(v) for k, v in (res.pvalues or {}).items()}
            est = ", ".join(f"{k}={v:.4f}{stars.get(k, '')}" for k, v in res.estimates().items())
            print(f"[{stem}] {res.model}: loglik={res.loglik:.3f} bic={res.bic:.3f} converged={res.converged}  {est}")
        if len(results) == 2:
            better = "two-regime" if results["two"].bic < results["one"].bic else "one-regime"
            print(f"[{stem}] BIC two-regime={results['two'].bic:.3f} one-regime={results['one'].bic:.3f} preferred={better}")
    if table_path is not None:
        pd.DataFrame(rows).to_csv(table_path, index=False, float_format="%.17g")
        print(f"wrote {table_path}")
    return EXIT_OK


# ------------------------------------------------------------------ smooth


def cmd_smooth(args) -> int:
    args = _apply_config(args, {"out_dir": "."})
    if not args.estimate or not Path(args.estimate).exists():
        raise UsageError(f"estimate file {args.estimate!r} not found")
    result = EstimationResult.from_json(args.estimate)
    panel = _load_log_squared(args.panel, args.log_squared)
    w = _load_weights(args.weights, panel.n)
    out = OutputPaths(args.out_dir, args.force)
    prob_path, path_path = out("smoothed.csv"), out("regime_path.csv")
    filt = hamilton_filter(panel, result.params, w)
    sm = kim_smooth(filt, result.params.transition)
    probabilities_frame(filt, sm, panel.time_ids).to_csv(prob_path, index=False, float_format="%.17g")
    sm.most_likely.to_csv(path_path, panel.time_ids)
    share = float(np.mean(sm.most_likely.states == 1))
    print(f"wrote {prob_path} and {path_path}; share of periods in regime 1: {share:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- mc-study


def cmd_mc_study(args) -> int:
    if args.config:
        try:
            config = StudyConfig.from_json(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    elif args.desk:
        config = desk_preset()
    else:
        config = StudyConfig()
    if args.desk:
        config.replications = 30
    if args.replications is not None:
        config.replications = args.replications
    if args.seed is not None:
        config.master_seed = args.seed
    if args.workers is not None:
        config.workers = args.workers
    config.validate()
    out = OutputPaths(args.out_dir or ".", args.force)
    for name in ("report_wide.csv", "report_tidy.csv", "replications.csv"):
        out(name)
    started = time.perf_counter()

    def progress(rec):
        log.info("n=%d T=%d rep=%d converged=%s", rec["n"], rec["T"], rec["replication"], rec["converged"])

    report = run_study(config, progress=progress)
    paths = report.write(out.root)
    print(report.wide().to_string())
    print(f"wrote {paths['wide']} and {paths['tidy']} in {time.perf_counter() - started:.1f}s")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msstarch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a two-regime panel")
    _common(p)
    p.add_argument("--params", help="JSON with rho1..q (intercepts as mu1, mu2)")
    for flag in _PARAM_FLAGS:
        p.add_argument(f"--{flag}", type=float)
    p.add_argument("--grid", help="queen grid ROWSxCOLS (default 10x10)")
    p.add_argument("--weights", help="weight CSV instead of a grid")
    p.add_argument("--T", type=int)
    p.add_argument("--burn-in", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("build-weights", help="k-NN weights from Piccolo distances of log-ARCH fits")
    _common(p)
    p.add_argument("--panel", required=True, help="returns (or prices) panel CSV")
    p.add_argument("--prices", action="store_true", help="input holds prices; convert to log returns")
    p.add_argument("--k", type=int, nargs="+")
    p.add_argument("--order", type=int)
    p.add_argument("--distances", action="store_true", help="also write distances.csv")
    p.set_defaults(func=cmd_build_weights)

    p = sub.add_parser("fit", help="QMLE of the one- and/or two-regime model")
    _common(p)
    p.add_argument("--panel", required=True, help="returns panel CSV")
    p.add_argument("--log-squared", action="store_true", help="panel already holds log y^2")
    p.add_argument("--weights", required=True, nargs="+")
    p.add_argument("--mode", choices=("one", "two", "both"))
    p.add_argument("--starts", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("smooth", help="filtered and smoothed regime probabilities")
    _common(p)
    p.add_argument("--panel", required=True)
    p.add_argument("--log-squared", action="store_true")
    p.add_argument("--weights", required=True)
    p.add_argument("--estimate", required=True, help="EstimationResult JSON from fit")
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("mc-study", help="Monte Carlo study over an (n, T) grid")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out-dir")
    p.add_argument("--force", action="store_true")
    p.add_argument("--config", help="StudyConfig JSON")
    p.add_argument("--desk", action="store_true", help="desk-scale preset (30 replications)")
    p.add_argument("--replications", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_mc_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; 2 is reserved for numerical failures here
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ParameterError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FilterError, DegenerateInputError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
