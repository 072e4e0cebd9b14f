"""Slack-free solver minimizing the sampling error directly.

Instead of carrying a measurement-consistent matrix, this variant keeps the
N-dimensional residual ``r = b - A(F_r F_c^T)`` and solves, for each factor
column, the symmetric normal system built from the mask-contracted vectors
``A_i f_c`` (pulled back through the feature matrix when side information
is present).  Singular systems are resolved by a generalized inverse.  The
ramp is applied after each solve; since that is not an exact block
minimizer of this objective, runs can diverge at low sampling rates, which
is detected and reported.

Only linear links (and identity features) are supported here; the normal
equations for spline or kernel links under a general mask are not provided.
"""

from __future__ import annotations

import time

import numpy as np

from . import linkmodels as lm
from .errors import DimensionMismatchError, DivergenceError
from .operators import MaskKind
from .solver import FactorModel

__all__ = ["build_normal_system", "solve_update", "fit2"]


def build_normal_system(op, f, b_res, X=None, side="row"):
    """Gram matrix and right-hand side of one column's normal system.

    For the row side the system is ``sum_i (A_i f)(A_i f)^T`` against
    ``sum_i r_i A_i f`` (``f`` being the partner column-side factor); with a
    feature matrix ``X`` the contracted vectors are ``X^T (A_i f)`` and the
    right-hand side gets the same pull-back.  Complete observation
    short-circuits to the closed form ``Gram = ||f||^2 I`` (or
    ``||f||^2 X^T X``).
    """
    f = np.asarray(f, dtype=float)
    b_res = np.asarray(b_res, dtype=float)
    if side not in ("row", "col"):
        raise ValueError("side must be 'row' or 'col'")
    if b_res.shape != (op.N,):
        raise DimensionMismatchError("residual length must equal N")
    if op.kind is MaskKind.COMPLETE:
        w = float(f @ f)
        Rmat = b_res.reshape(op.n1, op.n2)
        rhs = Rmat @ f if side == "row" else Rmat.T @ f
        if X is None:
            dim = op.n1 if side == "row" else op.n2
            return w * np.eye(dim), rhs
        X = np.asarray(X, dtype=float)
        return w * (X.T @ X), X.T @ rhs
    C = op.contract_cols(f) if side == "row" else op.contract_rows(f)
    if X is not None:
        C = C @ np.asarray(X, dtype=float)
    return C.T @ C, C.T @ b_res


def solve_update(Gram, rhs):
    """Solve ``Gram f = rhs``; minimum-norm solution when Gram is singular.

    Eigendecomposition with a relative cutoff of ``1e-12 * lambda_max``.
    """
    w, U = np.linalg.eigh(Gram)
    wmax = w[-1] if len(w) else 0.0
    cutoff = 1e-12 * max(wmax, 0.0)
    inv = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
    return U @ (inv * (U.T @ rhs))


def _column_solve(op, partner, r, X, side):
    """Unramped column update; exact HALS formula under complete observation.

    Returns ``(raw_values, coefficients)``; coefficients are None with
    identity features (the raw vector itself parameterizes the link), and
    the whole result is None when the system is all-zero (degenerate).
    """
    if op.kind is MaskKind.COMPLETE and X is None:
        w = float(partner @ partner)
        if w == 0.0:
            return None
        Rmat = r.reshape(op.n1, op.n2)
        raw = (Rmat @ partner) / w if side == "row" else (Rmat.T @ partner) / w
        return raw, None
    Gram, rhs = build_normal_system(op, partner, r, X=X, side=side)
    if not np.any(Gram):
        return None
    f = solve_update(Gram, rhs)
    if X is None:
        return f, None
    return np.asarray(X, dtype=float) @ f, f


def _apply_rank_one(op, f_r, f_c):
    if op.kind is MaskKind.COMPLETE:
        return np.outer(f_r, f_c).ravel()
    return op.contract_cols(f_c) @ f_r


def fit2(op, b, features, config, init=None):
    """Run the sampling-error alternating algorithm.

    The trace records per-iteration wall time alongside the objective
    ``||r||^2``.  Stops on the iteration cap, the wall-clock cap
    (``config.max_seconds``), or a relative objective change below
    ``config.rel_objective_tol`` (0 disables it).  Raises
    :class:`DivergenceError` (with the partial model attached) when the
    objective increases over ``config.divergence_window`` consecutive
    iterations.
    """
    b = op._check_vector(b)
    if features.n1 != op.n1 or features.n2 != op.n2:
        raise DimensionMismatchError("features and operator dimensions disagree")
    for fam, ident in ((config.row_family, features.identity_rows),
                       (config.col_family, features.identity_cols)):
        if fam != "linear":
            raise ValueError(
                "the sampling-error solver supports linear links only"
            )
    k = config.rank
    rng = np.random.default_rng(config.seed)
    if init is not None:
        F_r = np.array(init[0], dtype=float)
        F_c = np.array(init[1], dtype=float)
    else:
        from .solver import _initialize
        F_r, F_c = _initialize(op, b, k, rng)
    X_r = None if features.identity_rows else features.X_r
    X_c = None if features.identity_cols else features.X_c
    row_links = [None] * k
    col_links = [None] * k

    coverage = float(np.sum(op.adjoint(np.ones(op.N))))
    cell_mean = abs(float(np.sum(b)) / coverage) if abs(coverage) > 1e-12 else 1.0
    eps_col = 1e-16 * cell_mean if cell_mean > 0 else 1e-16

    r = b - op.apply(F_r @ F_c.T)
    trace = []
    start = time.perf_counter()
    prev_obj = float(r @ r)
    n_increases = 0
    n_iter = 0
    converged = False

    def make_model():
        return FactorModel(
            F_r=F_r, F_c=F_c, row_links=row_links, col_links=col_links,
            V=None, k=k, trace=trace, converged=converged, n_iter=n_iter,
            identity_rows=features.identity_rows,
            identity_cols=features.identity_cols,
        )

    for t in range(config.max_outer_iter):
        iter_start = time.perf_counter()
        for i in range(k):
            r = r + _apply_rank_one(op, F_r[:, i], F_c[:, i])
            sol = _column_solve(op, F_c[:, i], r, X_r, "row")
            if sol is None:
                col = np.full(op.n1, eps_col)
            else:
                raw, coef = sol
                col = np.maximum(0.0, raw)
                if not np.any(col > 0):
                    col = np.full(op.n1, eps_col)
                row_links[i] = lm.LinearLink(raw if coef is None else coef)
            F_r[:, i] = col
            r = r - _apply_rank_one(op, col, F_c[:, i])
        for i in range(k):
            r = r + _apply_rank_one(op, F_r[:, i], F_c[:, i])
            sol = _column_solve(op, F_r[:, i], r, X_c, "col")
            if sol is None:
                col = np.full(op.n2, eps_col)
            else:
                raw, coef = sol
                col = np.maximum(0.0, raw)
                if not np.any(col > 0):
                    col = np.full(op.n2, eps_col)
                col_links[i] = lm.LinearLink(raw if coef is None else coef)
            F_c[:, i] = col
            r = r - _apply_rank_one(op, F_r[:, i], col)
        objective = float(r @ r)
        n_iter = t + 1
        trace.append({
            "iter": n_iter,
            "objective": objective,
            "seconds": time.perf_counter() - iter_start,
        })
        if objective > prev_obj:
            n_increases += 1
            if n_increases >= config.divergence_window:
                raise DivergenceError(
                    f"objective increased over {n_increases} consecutive "
                    f"iterations (now {objective:.6e}); the sampling-error "
                    "solver is diverging at this sampling rate",
                    model=make_model(),
                )
        else:
            n_increases = 0
        if config.rel_objective_tol > 0 and prev_obj > 0:
            if abs(prev_obj - objective) <= config.rel_objective_tol * prev_obj:
                converged = True
                break
        prev_obj = objective
        if time.perf_counter() - start > config.max_seconds:
            break
    return make_model()
