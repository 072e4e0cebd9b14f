"""Synthetic benchmark protocol: simulate, sample, fit, score, time.

The generative model draws Gaussian features, builds per-factor additive
spline maps with random weights, ramps them at zero and multiplies the two
factor matrices.  A linear measurement operator is applied to an upper-left
training submatrix; errors are reported as relative root-mean-squared error
(Frobenius ratio) for recovery on the training block and for prediction on
the three held-out blocks (new rows, new columns, both).

Runs are deterministic for fixed seeds (timing columns aside).  Independent
(method, rate, rank) runs could execute in parallel; this module runs them
sequentially and emits rows in a fixed order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import linkmodels as lm
from . import solver as hx
from . import solver2 as hx2
from .errors import DivergenceError, HalsxError
from .operators import (
    MaskKind,
    MeasurementOperator,
    make_periodic_aggregates,
    make_random_aggregates,
)

__all__ = [
    "SyntheticSpec",
    "SplitSpec",
    "REPORT_COLUMNS",
    "simulate",
    "sample_measurements",
    "rrmse",
    "combine_block_errors",
    "interpolation_baseline",
    "build_split_operator",
    "run_experiment",
    "timing_sweep",
    "write_report",
]

REPORT_COLUMNS = [
    "method", "mask", "rate", "rank", "recovery_rrmse",
    "row_rrmse", "col_rrmse", "rowcol_rrmse", "seconds", "iters",
]

KNOWN_METHODS = (
    "interpolation", "hals", "halsx_linear", "halsx_spline", "halsx_kernel",
    "halsx2", "interp_regression", "factor_regression",
)


@dataclass
class SyntheticSpec:
    """Desk-scale defaults; the 150x180 rank-20 scale is a preset, not the
    default."""

    n1: int = 60
    n2: int = 72
    k: int = 5
    d1: int = 3
    d2: int = 4
    basis_dim_row: int = 8
    basis_dim_col: int = 8
    weight_scale: float = 1.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.k > min(self.n1, self.n2):
            raise ValueError("rank must not exceed matrix dimensions")


def paper_scale_spec(seed=0):
    """The larger synthetic preset: 150x180, rank 20, 3+4 features."""
    return SyntheticSpec(n1=150, n2=180, k=20, d1=3, d2=4,
                         basis_dim_row=11, basis_dim_col=11, seed=seed)


@dataclass
class SplitSpec:
    """Upper-left ``m1 x m2`` training block plus the mask applied to it."""

    m1: int
    m2: int
    mask: str = "periodic"  # periodic | random | completion | complete
    rate: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.mask not in ("periodic", "random", "completion", "complete"):
            raise ValueError(f"unknown mask family {self.mask!r}")


# -- generative model ------------------------------------------------------------


def _random_spline_links(X, k, basis_dim, weight_scale, rng):
    # The intercept lifts each factor column above zero at the sample, so
    # the ramp is inactive at the truth and exact recovery is well posed;
    # weight_scale=0 keeps the maps identically zero.
    d = X.shape[1]
    bases = [lm.build_spline_basis(X[:, c], basis_dim) for c in range(d)]
    links = []
    for _ in range(k):
        terms = [
            lm.SplineTerm(knots=bases[c].knots,
                          coef=weight_scale * rng.standard_normal(basis_dim))
            for c in range(d)
        ]
        theta = np.zeros(1 + d)
        raw = sum(t.raw(X[:, c]) for c, t in enumerate(terms))
        spread = float(raw.max() - raw.min())
        if weight_scale > 0 and spread > 0:
            theta[0] = 0.05 * spread - float(raw.min())
        links.append(lm.SplineLink(theta, terms))
    return links


def simulate(spec):
    """Draw features and true links, and return the noiseless target matrix.

    Returns ``(V_star, X_r, X_c, row_links, col_links)``; the links are the
    true additive spline maps (one per factor and side), so the factors are
    their ramped evaluations on the features.
    """
    rng = np.random.default_rng(spec.seed)
    X_r = rng.standard_normal((spec.n1, spec.d1))
    X_c = rng.standard_normal((spec.n2, spec.d2))
    row_links = _random_spline_links(X_r, spec.k, spec.basis_dim_row,
                                     spec.weight_scale, rng)
    col_links = _random_spline_links(X_c, spec.k, spec.basis_dim_col,
                                     spec.weight_scale, rng)
    F_r = np.column_stack([l.evaluate(X_r) for l in row_links])
    F_c = np.column_stack([l.evaluate(X_c) for l in col_links])
    return F_r @ F_c.T, X_r, X_c, row_links, col_links


def sample_measurements(op, V, noise=0.0, seed=None):
    """Apply the operator; optional Gaussian noise relative to the RMS value."""
    b = op.apply(V)
    if noise > 0:
        rng = np.random.default_rng(seed)
        scale = noise * float(np.sqrt(np.mean(b**2)))
        b = b + scale * rng.standard_normal(op.N)
    return b


# -- error metric -----------------------------------------------------------------


def rrmse(V, V_ref):
    """Frobenius error ratio ``||V - V_ref||_F / ||V_ref||_F``."""
    V = np.asarray(V, dtype=float)
    V_ref = np.asarray(V_ref, dtype=float)
    if V.shape != V_ref.shape:
        raise ValueError(f"shape mismatch: {V.shape} vs {V_ref.shape}")
    denom = np.linalg.norm(V_ref)
    if denom == 0:
        raise ValueError("reference matrix has zero norm")
    return float(np.linalg.norm(V - V_ref) / denom)


def combine_block_errors(block_errors):
    """Recombine per-block RRMSEs into the full-matrix RRMSE.

    ``block_errors`` is a list of ``(rrmse, reference_block)`` pairs whose
    blocks partition the full reference matrix; the Frobenius norms add in
    squares, so the combined error is exact.
    """
    num = 0.0
    den = 0.0
    for err, ref in block_errors:
        nsq = float(np.linalg.norm(ref)) ** 2
        num += err**2 * nsq
        den += nsq
    return float(np.sqrt(num / den))


# -- baselines ---------------------------------------------------------------------


def interpolation_baseline(op, b):
    """Distribute each aggregate equally over its covered periods.

    Only defined for temporal-aggregate masks; uncovered cells are left at
    zero (callers flag partial coverage).
    """
    if op.kind is not MaskKind.TEMPORAL_AGGREGATE:
        raise ValueError("interpolation baseline needs a temporal-aggregate mask")
    b = op._check_vector(b)
    s, t0, h = op.spans
    out = np.zeros((op.n1, op.n2))
    for i in range(op.N):
        out[t0[i]: t0[i] + h[i], s[i]] = b[i] / h[i]
    return out


def coverage_complete(op):
    """True when every cell is covered by at least one mask."""
    return bool(np.all(op.adjoint(np.ones(op.N)) > 0))


def _per_column_spline_fits(X, Y, basis_dim, lambda_grid):
    """Fit one additive spline per column of Y on shared design; returns links."""
    bases = [lm.build_spline_basis(X[:, c], basis_dim) for c in range(X.shape[1])]
    design = lm.SplineDesign(bases, X)
    return [design.fit(Y[:, j], 1.0, lambda_grid) for j in range(Y.shape[1])]


def _links_matrix(links, X_new):
    return np.column_stack([l.evaluate(X_new) for l in links])


def interpolation_regression(op, b, X_r_train, X_c_train, X_r_new, X_c_new,
                             basis_dim=8, lambda_grid=None):
    """Interpolation recovery chained with per-column/per-row spline fits.

    Regressions on the row features predict the new-row block; regressions
    on the column features predict the new-column block; the row-column
    block regresses the predicted new-row values on the column features.
    """
    V_hat = interpolation_baseline(op, b)
    col_fits = _per_column_spline_fits(X_r_train, V_hat, basis_dim, lambda_grid)
    row_block = _links_matrix(col_fits, X_r_new)          # m1_new x m2
    row_fits = _per_column_spline_fits(X_c_train, V_hat.T, basis_dim, lambda_grid)
    col_block = _links_matrix(row_fits, X_c_new).T        # m1 x m2_new
    new_row_fits = _per_column_spline_fits(X_c_train, row_block.T,
                                           basis_dim, lambda_grid)
    rowcol_block = _links_matrix(new_row_fits, X_c_new).T
    return V_hat, row_block, col_block, rowcol_block


def factor_regression(op, b, rank, X_r_train, X_c_train, X_r_new, X_c_new,
                      config=None, basis_dim=8, lambda_grid=None):
    """Plain HALS followed by post-hoc spline regression on the factors."""
    if config is None:
        config = hx.SolverConfig(rank=rank)
    features = lm.FeatureSet.identity(op.n1, op.n2)
    model = hx.fit(op, b, features, config)
    row_fits = _per_column_spline_fits(X_r_train, model.F_r, basis_dim, lambda_grid)
    col_fits = _per_column_spline_fits(X_c_train, model.F_c, basis_dim, lambda_grid)
    F_r_new = _links_matrix(row_fits, X_r_new)
    F_c_new = _links_matrix(col_fits, X_c_new)
    V_hat = model.F_r @ model.F_c.T
    return (model, V_hat, F_r_new @ model.F_c.T,
            model.F_r @ F_c_new.T, F_r_new @ F_c_new.T)


# -- experiment sweep ---------------------------------------------------------------


def build_split_operator(split, rate=None, n1=None, n2=None):
    """Measurement operator for the training block at the given rate."""
    n1 = split.m1 if n1 is None else n1
    n2 = split.m2 if n2 is None else n2
    rate = split.rate if rate is None else rate
    if split.mask == "complete":
        return MeasurementOperator.complete(n1, n2)
    if split.mask == "periodic":
        period = max(1, round(1.0 / rate))
        return make_periodic_aggregates(n1, n2, period)
    if split.mask == "random":
        return make_random_aggregates(n1, n2, rate, seed=split.seed)
    rng = np.random.default_rng(split.seed)
    count = max(1, int(round(rate * n1 * n2)))
    flat = rng.choice(n1 * n2, size=count, replace=False)
    return MeasurementOperator.completion(
        n1, n2, np.column_stack([flat // n2, flat % n2])
    )


def _blank_row(method, split, rate, rank):
    return {
        "method": method, "mask": split.mask, "rate": rate, "rank": rank,
        "recovery_rrmse": np.nan, "row_rrmse": np.nan, "col_rrmse": np.nan,
        "rowcol_rrmse": np.nan, "seconds": np.nan, "iters": 0, "note": "",
    }


def _run_method(method, op, b, rank, blocks, feats, config, split, rate):
    """One (method, rate, rank) run; returns a report row dict."""
    V_train, V_row, V_col, V_rc = blocks
    X_r_train, X_c_train, X_r_new, X_c_new = feats
    row = _blank_row(method, split, rate, rank)
    start = time.perf_counter()
    if method == "interpolation":
        V_hat = interpolation_baseline(op, b)
        if not coverage_complete(op):
            row["note"] = "partial coverage; uncovered cells left at zero"
        row["recovery_rrmse"] = rrmse(V_hat, V_train)
    elif method == "interp_regression":
        V_hat, rb, cb, rcb = interpolation_regression(
            op, b, X_r_train, X_c_train, X_r_new, X_c_new,
            basis_dim=config.spline_basis_dim, lambda_grid=config.lambda_grid)
        row["recovery_rrmse"] = rrmse(V_hat, V_train)
        row["row_rrmse"] = rrmse(rb, V_row)
        row["col_rrmse"] = rrmse(cb, V_col)
        row["rowcol_rrmse"] = rrmse(rcb, V_rc)
    elif method == "factor_regression":
        model, V_hat, rb, cb, rcb = factor_regression(
            op, b, rank, X_r_train, X_c_train, X_r_new, X_c_new,
            config=config, basis_dim=config.spline_basis_dim,
            lambda_grid=config.lambda_grid)
        row["iters"] = model.n_iter
        row["recovery_rrmse"] = rrmse(V_hat, V_train)
        row["row_rrmse"] = rrmse(rb, V_row)
        row["col_rrmse"] = rrmse(cb, V_col)
        row["rowcol_rrmse"] = rrmse(rcb, V_rc)
    elif method == "hals":
        model = hx.fit(op, b, lm.FeatureSet.identity(op.n1, op.n2), config)
        row["iters"] = model.n_iter
        row["recovery_rrmse"] = rrmse(model.F_r @ model.F_c.T, V_train)
    elif method == "halsx2":
        features = lm.FeatureSet.identity(op.n1, op.n2)
        try:
            model = hx2.fit2(op, b, features, config)
        except DivergenceError as exc:
            model = exc.model
            row["note"] = "divergence detected"
        row["iters"] = model.n_iter
        row["recovery_rrmse"] = rrmse(model.F_r @ model.F_c.T, V_train)
    elif method.startswith("halsx_"):
        family = method.split("_", 1)[1]
        features = lm.FeatureSet(X_r_train, X_c_train)
        cfg = replace(config, row_family=family, col_family=family)
        model = hx.fit(op, b, features, cfg)
        row["iters"] = model.n_iter
        row["recovery_rrmse"] = rrmse(model.F_r @ model.F_c.T, V_train)
        pred = hx.predict(model, X_r_new, X_c_new)
        row["row_rrmse"] = rrmse(pred.row, V_row)
        row["col_rrmse"] = rrmse(pred.col, V_col)
        row["rowcol_rrmse"] = rrmse(pred.rowcol, V_rc)
    else:
        raise ValueError(f"unknown method {method!r}")
    row["seconds"] = time.perf_counter() - start
    return row


def run_experiment(spec, split, methods, ranks, rates, solver_overrides=None):
    """Sweep (method, rate) cells; per cell report the best rank by recovery.

    Failures of individual runs are recorded in the row's note and do not
    abort the sweep.  Returns a list of report-row dicts (the CSV schema
    plus a ``note`` key).
    """
    for m in methods:
        if m not in KNOWN_METHODS:
            raise ValueError(f"unknown method {m!r}")
    V_star, X_r, X_c, _, _ = simulate(spec)
    m1, m2 = split.m1, split.m2
    blocks = (
        V_star[:m1, :m2], V_star[m1:, :m2], V_star[:m1, m2:], V_star[m1:, m2:],
    )
    feats = (X_r[:m1], X_c[:m2], X_r[m1:], X_c[m2:])
    overrides = dict(solver_overrides or {})
    rows = []
    for rate in rates:
        op = build_split_operator(split, rate=rate)
        b = sample_measurements(op, blocks[0], noise=spec.noise,
                                seed=spec.seed + 1)
        for method in methods:
            candidates = []
            for rank in sorted(set(ranks)):
                config = hx.SolverConfig(rank=rank, seed=spec.seed, **overrides)
                try:
                    cand = _run_method(method, op, b, rank, blocks, feats,
                                       config, split, rate)
                except (HalsxError, ValueError, np.linalg.LinAlgError) as exc:
                    cand = _blank_row(method, split, rate, rank)
                    cand["note"] = f"failed: {exc}"
                candidates.append(cand)
                if method == "interpolation":
                    break  # rank-free method
            ok = [c for c in candidates if np.isfinite(c["recovery_rrmse"])]
            best = min(ok, key=lambda c: c["recovery_rrmse"]) if ok else candidates[0]
            rows.append(best)
    return rows


# -- timing -------------------------------------------------------------------------


def timing_sweep(n1, n2, k, Ns, iters=3, seed=0, mask="gaussian",
                 solvers=("fit", "fit2"), repeats=1):
    """Per-iteration and total wall time of the two solvers as N grows.

    ``mask="gaussian"`` gives exact control of the measurement count;
    ``mask="random_aggregate"`` draws aggregate masks at rate ``N/(n1*n2)``
    (approximate count).  Each timed run executes exactly ``iters`` outer
    iterations with stopping rules disabled; with ``repeats > 1`` the
    fastest repetition is kept.
    """
    rng = np.random.default_rng(seed)
    V = rng.uniform(size=(n1, k)) @ rng.uniform(size=(k, n2))
    rows = []
    for N in Ns:
        if mask == "gaussian":
            op = MeasurementOperator.gaussian_random(n1, n2, N, seed=seed)
        elif mask == "random_aggregate":
            op = make_random_aggregates(n1, n2, min(1.0, N / (n1 * n2)), seed=seed)
        else:
            raise ValueError(f"unknown timing mask {mask!r}")
        b = op.apply(V)
        config = hx.SolverConfig(
            rank=k, max_outer_iter=iters, kkt_epsilon=1e-300, seed=seed,
            rel_objective_tol=0.0, max_seconds=np.inf,
        )
        features = lm.FeatureSet.identity(n1, n2)
        for name in solvers:
            runner = hx.fit if name == "fit" else hx2.fit2
            best = None
            for _ in range(max(1, repeats)):
                t0 = time.perf_counter()
                model = runner(op, b, features, config)
                total = time.perf_counter() - t0
                if best is None or total < best[0]:
                    best = (total, model)
            total, model = best
            rows.append({
                "solver": name, "N": op.N, "n1": n1, "n2": n2, "rank": k,
                "iters": model.n_iter,
                "total_seconds": total,
                "per_iter_seconds": total / max(model.n_iter, 1),
                "recovery_rrmse": rrmse(model.F_r @ model.F_c.T, V),
            })
    return rows


# -- report output --------------------------------------------------------------------


def write_report(rows, path, config_echo=None, columns=None):
    """Write report rows as CSV, embedding the resolved config as a leading
    comment line for provenance."""
    columns = columns or REPORT_COLUMNS
    import json
    with open(path, "w") as fh:
        if config_echo is not None:
            fh.write("# config: " + json.dumps(config_echo) + "\n")
        fh.write(",".join(columns) + "\n")
        for row in sorted(rows, key=lambda r: tuple(str(r.get(c)) for c in columns)):
            cells = []
            for c in columns:
                v = row.get(c, "")
                if isinstance(v, float) and not np.isfinite(v):
                    cells.append("")
                else:
                    cells.append(str(v))
            fh.write(",".join(cells) + "\n")
