"""Alternating solver for factorization with a measurement-consistent slack.

The outer loop alternates an exact projection of the current product onto
``{V >= 0, A(V) = b}`` with hierarchical per-column refits of the row and
column link functions.  Each column update adds its rank-one term back into
the residual, refits the link on the reduced subproblem, ramps the fitted
values at zero and subtracts the new term, in fixed Gauss-Seidel order (all
k row columns, then all k column columns).  The stop rule is a stacked KKT
residual falling below ``kkt_epsilon`` times its initial value.

``fit`` runs on a single logical thread (the update order is part of the
algorithm); the returned model is immutable and ``predict`` is reentrant.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import linkmodels as lm
from . import matio
from .errors import DegenerateColumnError, DimensionMismatchError, NoSideInformationError
from .operators import project_polytope

__all__ = [
    "SolverConfig",
    "FactorModel",
    "PredictionBlocks",
    "fit",
    "kkt_residual",
    "predict",
    "save_model",
    "load_model",
]


@dataclass
class SolverConfig:
    """Knobs shared by both solvers; all tolerances must be positive."""

    rank: int = 2
    max_outer_iter: int = 200
    kkt_epsilon: float = 1e-4
    projection_tol: float = 1e-8
    projection_max_iter: int = 20_000
    descent_guard: bool = True
    row_family: str = "linear"
    col_family: str = "linear"
    spline_basis_dim: int = lm.DEFAULT_BASIS_DIM
    lambda_grid: np.ndarray | None = None
    kernel: str = "rbf"
    kernel_bandwidth: float | None = None
    kernel_ridge: float = 1e-8
    seed: int | None = None
    track_block_objectives: bool = False
    # sampling-error solver only:
    max_seconds: float = 300.0
    divergence_window: int = 5
    rel_objective_tol: float = 0.0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        for name in ("kkt_epsilon", "projection_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for fam in (self.row_family, self.col_family):
            if fam not in ("linear", "spline", "kernel"):
                raise ValueError(f"unknown link family {fam!r}")


@dataclass
class FactorModel:
    """Fitted factors, their links, the slack matrix and run diagnostics."""

    F_r: np.ndarray
    F_c: np.ndarray
    row_links: list
    col_links: list
    V: np.ndarray | None
    k: int
    trace: list
    converged: bool
    n_iter: int
    identity_rows: bool = False
    identity_cols: bool = False
    kkt_initial: float | None = None
    kkt_final: float | None = None
    block_objectives: list = field(default_factory=list)


@dataclass
class PredictionBlocks:
    row: np.ndarray | None = None
    col: np.ndarray | None = None
    rowcol: np.ndarray | None = None


# -- column fitters ------------------------------------------------------------


class _IdentityFitter:
    """Plain HALS update: the link is the target vector itself."""

    design_matrix = None

    def __init__(self, n):
        self.n = n

    def fit(self, target, weight):
        return lm.LinearLink(target), np.maximum(0.0, target)


class _LinearFitter:
    def __init__(self, X):
        self.design = lm.LinearDesign(X)
        self.X = self.design.X
        self.design_matrix = self.X

    def fit(self, target, weight):
        link = lm.fit_linear(self.design, target)
        return link, link.evaluate(self.X)


class _SplineFitter:
    def __init__(self, X, basis_dim, lambda_grid):
        bases = [lm.build_spline_basis(X[:, j], basis_dim) for j in range(X.shape[1])]
        self.sdesign = lm.SplineDesign(bases, X)
        self.X = self.sdesign.X_param
        self.lambda_grid = lambda_grid
        self.design_matrix = self.sdesign.D

    def fit(self, target, weight):
        link = self.sdesign.fit(target, weight, self.lambda_grid)
        return link, link.evaluate(self.X)


class _KernelFitter:
    def __init__(self, X, kernel, bandwidth, ridge):
        self.kdesign = lm.KernelDesign(X, kernel=kernel, bandwidth=bandwidth, ridge=ridge)
        self.X = self.kdesign.X
        self.design_matrix = lm._kernel_matrix(X, X, self.kdesign.kernel,
                                               self.kdesign.bandwidth)

    def fit(self, target, weight):
        link = self.kdesign.fit(target)
        return link, link.evaluate(self.X)


def _make_fitter(X, identity, family, config):
    if identity:
        if family != "linear":
            raise ValueError(
                f"{family!r} links need numeric features, not identity"
            )
        return _IdentityFitter(X.shape[0])
    if family == "linear":
        return _LinearFitter(X)
    if family == "spline":
        return _SplineFitter(X, config.spline_basis_dim, config.lambda_grid)
    return _KernelFitter(X, config.kernel, config.kernel_bandwidth,
                         config.kernel_ridge)


def _update_column(R_i, f_other, fitter, eps_col, old_link, old_col, guard):
    """One hierarchical column refit; applies the degenerate-column floor.

    When the partner column is zero the link cannot be refitted and the
    factor column is floored at ``eps_col``; when the refit ramps to all
    zeros the new link is kept but the column is floored, which temporarily
    breaks the column/link consistency to escape the flat region.

    With ``guard`` on, an update that strictly increases the block
    objective is rejected and the previous column kept.  Fit-then-ramp is
    an exact block minimizer only when the link design has full row rank;
    below that (fewer parameters than rows) the ramped fit can move uphill,
    and the guard restores the descent property the stopping theory
    expects.  Objectives are compared through the expansion
    ``||R_i - c f^T||^2 = const + w(||c||^2 - 2 c.y)``, so no extra matrix
    products are needed.
    """
    n = R_i.shape[0] if f_other.shape[0] == R_i.shape[1] else R_i.shape[1]
    try:
        target, weight = lm.reduce_subproblem(R_i, f_other)
    except DegenerateColumnError:
        return old_link, np.full(n, eps_col)
    link, col = fitter.fit(target, weight)
    if not np.any(col > 0):
        return link, np.full(n, eps_col)
    if guard and old_link is not None:
        q_new = float(col @ col - 2.0 * (col @ target))
        q_old = float(old_col @ old_col - 2.0 * (old_col @ target))
        if q_new > q_old:
            return old_link, old_col
    return link, col


# -- KKT residual -----------------------------------------------------------------


def kkt_residual(V, F_r, F_c, row_design=None, col_design=None):
    """Norm of the stacked first-order optimality blocks.

    Blocks: negative part of ``E = V - F_r F_c^T``; ``E * V`` (complementary
    slackness); the link-parameter gradients on each side, i.e. the masked
    residual gradients pulled back through the design matrices (identity
    when a side has no design).
    """
    E = V - F_r @ F_c.T
    b1 = np.minimum(E, 0.0)
    b2 = E * V
    g_row = (E @ F_c) * (F_r > 0)
    g_col = (E.T @ F_r) * (F_c > 0)
    if row_design is not None:
        g_row = row_design.T @ g_row
    if col_design is not None:
        g_col = col_design.T @ g_col
    sq = (
        np.sum(b1 * b1) + np.sum(b2 * b2)
        + np.sum(g_row * g_row) + np.sum(g_col * g_col)
    )
    return float(np.sqrt(sq))


# -- initialization -----------------------------------------------------------------


def _initialize(op, b, k, rng):
    """Uniform factors scaled so the product mean matches the per-cell mean
    implied by the measurements (falls back to 1 for sign-indefinite masks)."""
    F_r = rng.uniform(size=(op.n1, k))
    F_c = rng.uniform(size=(op.n2, k))
    coverage = float(np.sum(op.adjoint(np.ones(op.N))))
    cell_mean = float(np.sum(b)) / coverage if abs(coverage) > 1e-12 else 1.0
    if cell_mean <= 0:
        cell_mean = 1.0
    current = float(np.mean(F_r @ F_c.T))
    s = np.sqrt(cell_mean / current)
    return F_r * s, F_c * s


# -- main loop -----------------------------------------------------------------------


def fit(op, b, features, config, init=None):
    """Run the slack-variable alternating algorithm.

    Parameters
    ----------
    op : MeasurementOperator
    b : array of N measurements (or a MeasurementVector)
    features : FeatureSet
    config : SolverConfig
    init : optional ``(F_r0, F_c0)`` overriding the random initialization

    Returns a :class:`FactorModel`; ``model.converged`` tells whether the
    KKT rule (rather than the iteration cap) stopped the run.
    """
    b = op._check_vector(b)
    if features.n1 != op.n1 or features.n2 != op.n2:
        raise DimensionMismatchError("features and operator dimensions disagree")
    k = config.rank
    rng = np.random.default_rng(config.seed)
    if init is not None:
        F_r = np.array(init[0], dtype=float)
        F_c = np.array(init[1], dtype=float)
    else:
        F_r, F_c = _initialize(op, b, k, rng)

    row_fitter = _make_fitter(features.X_r, features.identity_rows,
                              config.row_family, config)
    col_fitter = _make_fitter(features.X_c, features.identity_cols,
                              config.col_family, config)
    row_links = [None] * k
    col_links = [None] * k

    def proj(W):
        return project_polytope(op, b, W, tol=config.projection_tol,
                                max_iter=config.projection_max_iter)

    track = config.track_block_objectives
    block_objs = []

    V = proj(F_r @ F_c.T)
    mean_v = float(np.mean(np.abs(V)))
    eps_col = 1e-16 * mean_v if mean_v > 0 else 1e-16
    kkt0 = kkt_residual(V, F_r, F_c, row_fitter.design_matrix,
                        col_fitter.design_matrix)
    trace = []
    converged = kkt0 == 0.0
    n_iter = 0
    kkt = kkt0
    for t in range(config.max_outer_iter):
        if converged:
            break
        if t > 0:
            V = proj(F_r @ F_c.T)
        if track:
            block_objs.append(float(np.sum((V - F_r @ F_c.T) ** 2)))
        R = V - F_r @ F_c.T
        for i in range(k):
            R_i = R + np.outer(F_r[:, i], F_c[:, i])
            link, col = _update_column(R_i, F_c[:, i], row_fitter, eps_col,
                                       row_links[i], F_r[:, i],
                                       config.descent_guard)
            row_links[i], F_r[:, i] = link, col
            R = R_i - np.outer(col, F_c[:, i])
            if track:
                block_objs.append(float(np.sum(R * R)))
        for i in range(k):
            R_i = R + np.outer(F_r[:, i], F_c[:, i])
            link, col = _update_column(R_i.T, F_r[:, i], col_fitter, eps_col,
                                       col_links[i], F_c[:, i],
                                       config.descent_guard)
            col_links[i], F_c[:, i] = link, col
            R = R_i - np.outer(F_r[:, i], col)
            if track:
                block_objs.append(float(np.sum(R * R)))
        objective = float(np.sum(R * R))
        kkt = kkt_residual(V, F_r, F_c, row_fitter.design_matrix,
                           col_fitter.design_matrix)
        n_iter = t + 1
        trace.append({"iter": n_iter, "objective": objective,
                      "kkt_residual": kkt})
        if kkt <= config.kkt_epsilon * kkt0:
            converged = True
    V = proj(F_r @ F_c.T)

    return FactorModel(
        F_r=F_r, F_c=F_c, row_links=row_links, col_links=col_links, V=V,
        k=k, trace=trace, converged=converged, n_iter=n_iter,
        identity_rows=features.identity_rows,
        identity_cols=features.identity_cols,
        kkt_initial=kkt0, kkt_final=kkt, block_objectives=block_objs,
    )


# -- prediction -----------------------------------------------------------------------


def _stack_links(links, X_new):
    return np.column_stack([link.evaluate(X_new) for link in links])


def predict(model, X_r_new=None, X_c_new=None):
    """Predict matrix blocks for new rows and/or columns.

    Row block is ``(f_r(X_r_new))_+ F_c^T``, column block ``F_r
    (f_c(X_c_new))_+^T``, and when both feature sets are given the
    row-column block ``(f_r(X_r_new))_+ (f_c(X_c_new))_+^T``.
    """
    if X_r_new is None and X_c_new is None:
        raise ValueError("provide features for at least one side")
    out = PredictionBlocks()
    F_r_new = F_c_new = None
    if X_r_new is not None:
        if model.identity_rows:
            raise NoSideInformationError(
                "model was fitted with identity row features; it cannot "
                "predict new rows"
            )
        F_r_new = _stack_links(model.row_links, np.asarray(X_r_new, dtype=float))
        out.row = F_r_new @ model.F_c.T
    if X_c_new is not None:
        if model.identity_cols:
            raise NoSideInformationError(
                "model was fitted with identity column features; it cannot "
                "predict new columns"
            )
        F_c_new = _stack_links(model.col_links, np.asarray(X_c_new, dtype=float))
        out.col = model.F_r @ F_c_new.T
    if F_r_new is not None and F_c_new is not None:
        out.rowcol = F_r_new @ F_c_new.T
    return out


# -- persistence -----------------------------------------------------------------------


def save_model(model, out_dir):
    """Persist factors (CSV), links (JSON) and the trace (CSV) to a directory."""
    os.makedirs(out_dir, exist_ok=True)
    matio.write_matrix(os.path.join(out_dir, "F_r.csv"), model.F_r)
    matio.write_matrix(os.path.join(out_dir, "F_c.csv"), model.F_c)
    if model.V is not None:
        matio.write_matrix(os.path.join(out_dir, "V.csv"), model.V)
    lm.save_links(model.row_links, os.path.join(out_dir, "row_links.json"))
    lm.save_links(model.col_links, os.path.join(out_dir, "col_links.json"))
    cols = list(model.trace[0].keys()) if model.trace else ["iter", "objective"]
    with open(os.path.join(out_dir, "trace.csv"), "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in model.trace:
            fh.write(",".join(
                str(row[c]) if c == "iter" else repr(float(row[c]))
                for c in cols) + "\n")
    meta = {
        "k": model.k,
        "converged": model.converged,
        "n_iter": model.n_iter,
        "identity_rows": model.identity_rows,
        "identity_cols": model.identity_cols,
        "kkt_initial": model.kkt_initial,
        "kkt_final": model.kkt_final,
        "has_slack": model.V is not None,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh)


def load_model(model_dir):
    with open(os.path.join(model_dir, "meta.json")) as fh:
        meta = json.load(fh)
    F_r = matio.read_matrix(os.path.join(model_dir, "F_r.csv"))
    F_c = matio.read_matrix(os.path.join(model_dir, "F_c.csv"))
    V = None
    if meta.get("has_slack"):
        V = matio.read_matrix(os.path.join(model_dir, "V.csv"))
    row_links = lm.load_links(os.path.join(model_dir, "row_links.json"))
    col_links = lm.load_links(os.path.join(model_dir, "col_links.json"))
    trace = []
    with open(os.path.join(model_dir, "trace.csv")) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            if line.strip():
                vals = line.strip().split(",")
                trace.append({
                    h: (int(v) if h == "iter" else float(v))
                    for h, v in zip(header, vals)
                })
    return FactorModel(
        F_r=F_r, F_c=F_c, row_links=row_links, col_links=col_links, V=V,
        k=meta["k"], trace=trace, converged=meta["converged"],
        n_iter=meta["n_iter"], identity_rows=meta["identity_rows"],
        identity_cols=meta["identity_cols"],
        kkt_initial=meta.get("kkt_initial"), kkt_final=meta.get("kkt_final"),
    )
