"""Command-line entry point: simulate, sample, fit, predict, check, bench.

Every command reads a single JSON config file (``--config``); a few common
flags override config values so sweeps can share one file.  Configs are
validated up front and unknown keys are rejected.  Exit codes: 0 converged,
2 stopped on the iteration cap, 3 infeasible measurements, 4 bad input,
5 divergence of the sampling-error solver.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import bench as bench_mod
from . import linkmodels as lm
from . import matio
from . import solver as hx
from . import solver2 as hx2
from .errors import (
    DivergenceError,
    HalsxError,
    InfeasibleMeasurementsError,
    ProjectionConvergenceError,
    RankDeficientFeaturesError,
)
from .identifiability import is_separable, is_strongly_boundary_close, IdentifiabilityReport
from .operators import (
    MeasurementOperator,
    load_measurements,
    load_operator,
    make_periodic_aggregates,
    make_random_aggregates,
    save_measurements,
    save_operator,
)

EXIT_OK = 0
EXIT_MAX_ITER = 2
EXIT_INFEASIBLE = 3
EXIT_BAD_INPUT = 4
EXIT_DIVERGENCE = 5


class BadInput(ValueError):
    pass


_ALLOWED_KEYS = {
    "simulate": {
        "n1", "n2", "k", "d1", "d2", "basis_dim_row", "basis_dim_col",
        "weight_scale", "noise", "seed", "out_dir", "preset",
    },
    "sample": {
        "matrix", "mask", "rate", "period", "seed", "noise",
        "out_mask", "out_measurements", "indices",
    },
    "fit": {
        "mask", "measurements", "features_row", "features_col", "solver",
        "rank", "link_row", "link_col", "max_outer_iter", "kkt_epsilon",
        "projection_tol", "spline_basis_dim", "kernel", "kernel_bandwidth",
        "kernel_ridge", "seed", "max_seconds", "rel_objective_tol", "out_dir",
    },
    "predict": {"model_dir", "features_row", "features_col", "out_dir"},
    "check": {"matrix", "tol", "max_exhaustive_cols", "out"},
    "bench": {
        "mode", "spec", "split", "methods", "ranks", "rates",
        "solver_overrides", "timing", "out", "plot",
    },
}


def _load_config(path, command, overrides):
    if path:
        with open(path) as fh:
            try:
                config = json.load(fh)
            except json.JSONDecodeError as exc:
                raise BadInput(f"config is not valid JSON: {exc}") from exc
        if not isinstance(config, dict):
            raise BadInput("config must be a JSON object")
    else:
        config = {}
    config.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(config) - _ALLOWED_KEYS[command]
    if unknown:
        raise BadInput(
            f"unknown config keys for {command!r}: {sorted(unknown)}"
        )
    return config


def _require(config, *keys):
    missing = [k for k in keys if k not in config]
    if missing:
        raise BadInput(f"missing required config keys: {missing}")


def _echo_config(config, path):
    with open(path, "w") as fh:
        json.dump(config, fh, indent=2)


# -- commands --------------------------------------------------------------------


def cmd_simulate(config):
    out_dir = config.get("out_dir", ".")
    os.makedirs(out_dir, exist_ok=True)
    if config.get("preset") == "paper":
        spec = bench_mod.paper_scale_spec(seed=config.get("seed", 0))
    else:
        fields = {k: config[k] for k in (
            "n1", "n2", "k", "d1", "d2", "basis_dim_row", "basis_dim_col",
            "weight_scale", "noise", "seed") if k in config}
        spec = bench_mod.SyntheticSpec(**fields)
    V, X_r, X_c, row_links, col_links = bench_mod.simulate(spec)
    matio.write_matrix(os.path.join(out_dir, "V_star.csv"), V)
    matio.write_matrix(os.path.join(out_dir, "X_r.csv"), X_r)
    matio.write_matrix(os.path.join(out_dir, "X_c.csv"), X_c)
    lm.save_links(row_links, os.path.join(out_dir, "true_row_links.json"))
    lm.save_links(col_links, os.path.join(out_dir, "true_col_links.json"))
    _echo_config(asdict(spec), os.path.join(out_dir, "spec.json"))
    print(f"wrote {spec.n1}x{spec.n2} matrix and features to {out_dir}")
    return EXIT_OK


def cmd_sample(config):
    _require(config, "matrix", "mask", "out_mask", "out_measurements")
    V = matio.read_matrix(config["matrix"])
    n1, n2 = V.shape
    mask = config["mask"]
    seed = config.get("seed")
    if mask == "complete":
        op = MeasurementOperator.complete(n1, n2)
    elif mask == "periodic":
        _require(config, "period")
        op = make_periodic_aggregates(n1, n2, int(config["period"]))
    elif mask == "random":
        _require(config, "rate")
        op = make_random_aggregates(n1, n2, float(config["rate"]), seed=seed)
    elif mask == "completion":
        if "indices" in config:
            op = MeasurementOperator.completion(n1, n2, config["indices"])
        else:
            _require(config, "rate")
            rng = np.random.default_rng(seed)
            count = max(1, int(round(float(config["rate"]) * n1 * n2)))
            flat = rng.choice(n1 * n2, size=count, replace=False)
            op = MeasurementOperator.completion(
                n1, n2, np.column_stack([flat // n2, flat % n2]))
    else:
        raise BadInput(f"unknown mask family {mask!r}")
    b = bench_mod.sample_measurements(op, V, noise=config.get("noise", 0.0),
                                      seed=seed)
    save_operator(op, config["out_mask"])
    save_measurements(b, config["out_measurements"])
    print(f"sampled {op.N} measurements ({mask}) from {config['matrix']}")
    return EXIT_OK


def _load_features(config, n1, n2):
    fr = config.get("features_row", "identity")
    fc = config.get("features_col", "identity")
    X_r = np.eye(n1) if fr == "identity" else matio.read_matrix(fr)
    X_c = np.eye(n2) if fc == "identity" else matio.read_matrix(fc)
    return lm.FeatureSet(X_r, X_c, identity_rows=fr == "identity",
                         identity_cols=fc == "identity")


def cmd_fit(config):
    _require(config, "mask", "measurements", "out_dir")
    op = load_operator(config["mask"])
    b = load_measurements(config["measurements"])
    solver_name = config.get("solver", "halsx")
    if solver_name not in ("halsx", "halsx2", "hals"):
        raise BadInput(f"unknown solver {solver_name!r}")
    if solver_name == "hals":
        config = dict(config, features_row="identity", features_col="identity")
    features = _load_features(config, op.n1, op.n2)
    solver_cfg = hx.SolverConfig(
        rank=int(config.get("rank", 2)),
        max_outer_iter=int(config.get("max_outer_iter", 200)),
        kkt_epsilon=float(config.get("kkt_epsilon", 1e-4)),
        projection_tol=float(config.get("projection_tol", 1e-8)),
        row_family=config.get("link_row", "linear"),
        col_family=config.get("link_col", "linear"),
        spline_basis_dim=int(config.get("spline_basis_dim", lm.DEFAULT_BASIS_DIM)),
        kernel=config.get("kernel", "rbf"),
        kernel_bandwidth=config.get("kernel_bandwidth"),
        kernel_ridge=float(config.get("kernel_ridge", 1e-8)),
        seed=config.get("seed"),
        max_seconds=float(config.get("max_seconds", 300.0)),
        rel_objective_tol=float(config.get("rel_objective_tol", 0.0)),
    )
    out_dir = config["out_dir"]
    exit_code = EXIT_OK
    try:
        if solver_name == "halsx2":
            model = hx2.fit2(op, b, features, solver_cfg)
        else:
            model = hx.fit(op, b, features, solver_cfg)
    except DivergenceError as exc:
        print(f"warning: {exc}", file=sys.stderr)
        model = exc.model
        exit_code = EXIT_DIVERGENCE
    if not model.converged and exit_code == EXIT_OK:
        exit_code = EXIT_MAX_ITER
    hx.save_model(model, out_dir)
    _echo_config(config, os.path.join(out_dir, "config.json"))
    print(f"fitted rank-{model.k} model in {model.n_iter} iterations "
          f"(converged={model.converged}); wrote {out_dir}")
    return exit_code


def cmd_predict(config):
    _require(config, "model_dir", "out_dir")
    model = hx.load_model(config["model_dir"])
    X_r_new = X_c_new = None
    if "features_row" in config:
        X_r_new = matio.read_matrix(config["features_row"])
    if "features_col" in config:
        X_c_new = matio.read_matrix(config["features_col"])
    if X_r_new is None and X_c_new is None:
        raise BadInput("predict needs features_row and/or features_col")
    blocks = hx.predict(model, X_r_new, X_c_new)
    out_dir = config["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name in ("row", "col", "rowcol"):
        block = getattr(blocks, name)
        if block is not None:
            path = os.path.join(out_dir, f"{name}_block.csv")
            matio.write_matrix(path, block)
            written.append(path)
    _echo_config(config, os.path.join(out_dir, "config.json"))
    print("wrote " + ", ".join(written))
    return EXIT_OK


def cmd_check(config):
    _require(config, "matrix", "out")
    M = matio.read_matrix(config["matrix"])
    tol = float(config.get("tol", 1e-9))
    cap = int(config.get("max_exhaustive_cols", 8))
    report = IdentifiabilityReport(
        separability=is_separable(M, tol),
        boundary_closeness=is_strongly_boundary_close(
            M, tol, max_exhaustive_cols=cap),
    )
    doc = report.to_dict()
    doc["config"] = config
    with open(config["out"], "w") as fh:
        json.dump(doc, fh, indent=2)
    bc = report.boundary_closeness
    verdict = {True: "yes", False: "no", None: "inconclusive"}[bc.satisfied]
    print(f"separable: {report.separability.separable}; "
          f"strongly boundary close: {verdict}"
          + (f" ({bc.reason})" if bc.reason else ""))
    return EXIT_OK


def cmd_bench(config):
    _require(config, "out")
    mode = config.get("mode", "sweep")
    if mode == "timing":
        timing = dict(config.get("timing", {}))
        rows = bench_mod.timing_sweep(**timing)
        cols = ["solver", "N", "n1", "n2", "rank", "iters",
                "total_seconds", "per_iter_seconds", "recovery_rrmse"]
        bench_mod.write_report(rows, config["out"], config_echo=config,
                               columns=cols)
        print(f"wrote timing table ({len(rows)} rows) to {config['out']}")
        return EXIT_OK
    _require(config, "spec", "split", "methods", "ranks", "rates")
    spec = bench_mod.SyntheticSpec(**config["spec"])
    split = bench_mod.SplitSpec(**config["split"])
    rows = bench_mod.run_experiment(
        spec, split, config["methods"], config["ranks"], config["rates"],
        solver_overrides=config.get("solver_overrides"),
    )
    bench_mod.write_report(rows, config["out"], config_echo=config)
    print(f"wrote report ({len(rows)} rows) to {config['out']}")
    if config.get("plot"):
        _plot_report(rows, config["out"])
    return EXIT_OK


def _plot_report(rows, csv_path):
    try:
        import matplotlib
        matplotlib.use("svg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise BadInput("plotting requires matplotlib") from exc
    base = os.path.splitext(csv_path)[0]
    for column in ("recovery_rrmse", "row_rrmse", "col_rrmse", "rowcol_rrmse"):
        fig, ax = plt.subplots()
        methods = sorted({r["method"] for r in rows})
        for method in methods:
            pts = sorted(
                (r["rate"], r[column]) for r in rows
                if r["method"] == method and np.isfinite(r.get(column, np.nan))
            )
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts],
                        marker="o", label=method)
        ax.set_xlabel("sampling rate")
        ax.set_ylabel(column)
        ax.legend()
        fig.savefig(f"{base}_{column}.svg")
        plt.close(fig)


# -- entry point --------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="halsx",
        description="nonnegative factorization with side information from "
                    "linear measurements",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "sample", "fit", "predict", "check", "bench"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        if "seed" in _ALLOWED_KEYS[name]:
            p.add_argument("--seed", type=int)
        if "out_dir" in _ALLOWED_KEYS[name]:
            p.add_argument("--out-dir", dest="out_dir")
        if name == "fit":
            p.add_argument("--solver", choices=["halsx", "halsx2", "hals"])
            p.add_argument("--link-row", dest="link_row",
                           choices=["linear", "spline", "kernel"])
            p.add_argument("--link-col", dest="link_col",
                           choices=["linear", "spline", "kernel"])
            p.add_argument("--rank", type=int)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {
        k: getattr(args, k)
        for k in ("seed", "out_dir", "solver", "link_row", "link_col", "rank")
        if hasattr(args, k)
    }
    handlers = {
        "simulate": cmd_simulate, "sample": cmd_sample, "fit": cmd_fit,
        "predict": cmd_predict, "check": cmd_check, "bench": cmd_bench,
    }
    try:
        config = _load_config(args.config, args.command, overrides)
        return handlers[args.command](config)
    except BadInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (InfeasibleMeasurementsError, ProjectionConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (RankDeficientFeaturesError, HalsxError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
