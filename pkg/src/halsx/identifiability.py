"""Executable uniqueness checks for nonnegative factors.

Two sufficient-condition ingredients are checkable: *separability* (the
matrix contains a scaled permutation of the identity among its rows) and
*strong boundary closeness* (each orthant facet carries enough linearly
independent rows to pin the factor's cone).  A constructor emits feature
and coefficient matrices certified to produce a strongly boundary close
product with full-column-rank features.

All predicates are tolerance-based: an entry counts as zero iff it is at
most ``tol`` times its column maximum, and rank tests compare the smallest
singular value against ``tol`` times the largest.  Both predicates are
invariant under positive column scaling and row permutation.  Everything
here is a pure function, safe for parallel invocation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "SeparabilityReport",
    "BoundaryClosenessReport",
    "IdentifiabilityReport",
    "is_separable",
    "is_strongly_boundary_close",
    "construct_certified_features",
    "worked_example_k4",
]

DEFAULT_TOL = 1e-9
MAX_EXHAUSTIVE_COLS = 8


@dataclass
class SeparabilityReport:
    separable: bool
    witness_rows: list | None
    tolerance: float

    def to_dict(self):
        return {
            "separable": self.separable,
            "witness_rows": self.witness_rows,
            "tolerance": self.tolerance,
        }


@dataclass
class BoundaryClosenessReport:
    """``satisfied`` is None when the permutation search was inconclusive."""

    satisfied: bool | None
    permutation: list | None
    row_sets: list | None
    tolerance: float
    reason: str | None = None

    def to_dict(self):
        return {
            "strongly_boundary_close": self.satisfied,
            "permutation": self.permutation,
            "row_sets": self.row_sets,
            "tolerance": self.tolerance,
            "reason": self.reason,
        }


@dataclass
class IdentifiabilityReport:
    separability: SeparabilityReport
    boundary_closeness: BoundaryClosenessReport

    def to_dict(self):
        return {
            "separability": self.separability.to_dict(),
            "boundary_closeness": self.boundary_closeness.to_dict(),
        }


def _normalized(M):
    """Columns scaled by their max, making the tolerance relative."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    if np.any(M < 0):
        raise ValueError("matrix must be nonnegative")
    colmax = M.max(axis=0)
    safe = np.where(colmax > 0, colmax, 1.0)
    return M / safe


def is_separable(M, tol=DEFAULT_TOL):
    """Does ``M`` contain a positive-diagonal row per column, zeros elsewhere?

    Returns a report with one witnessing row index per column when the
    check passes (the rows forming the scaled permutation of the identity).
    """
    Mn = _normalized(M)
    m, n = Mn.shape
    witnesses = []
    for j in range(n):
        pos = Mn[:, j] > tol
        others = np.delete(Mn, j, axis=1)
        clean = np.all(others <= tol, axis=1)
        rows = np.flatnonzero(pos & clean)
        if rows.size == 0:
            return SeparabilityReport(False, None, tol)
        witnesses.append(int(rows[0]))
    return SeparabilityReport(True, witnesses, tol)


def _boundary_close(Mn, tol):
    # each column must touch its facet (have a zero row) and carry mass;
    # this is the per-column form consistent with the certified family
    has_zero = np.any(Mn <= tol, axis=0)
    has_pos = np.any(Mn > tol, axis=0)
    return bool(np.all(has_zero) and np.all(has_pos))


def _facet_witness(Mn, perm, pos, tol):
    """Rows vanishing at perm[pos] whose tail block has full rank, or None."""
    n = len(perm)
    need = n - pos - 1
    i_col = perm[pos]
    later = list(perm[pos + 1:])
    zero_rows = np.flatnonzero(Mn[:, i_col] <= tol)
    if zero_rows.size == 0:
        return None
    tail = Mn[np.ix_(zero_rows, later)]
    mass = np.any(tail > tol, axis=1)
    cand = zero_rows[mass]
    if cand.size < need:
        return None
    block = Mn[np.ix_(cand, later)]
    svals = scipy.linalg.svdvals(block)
    if len(svals) < need or svals[need - 1] <= tol * svals[0]:
        return None
    # pivoted QR on the transposed block picks a well-conditioned row subset
    _, _, piv = scipy.linalg.qr(block.T, pivoting=True)
    chosen = cand[piv[:need]]
    sub = Mn[np.ix_(chosen, later)]
    svals = scipy.linalg.svdvals(sub)
    if svals[-1] <= tol * svals[0]:
        return None
    return [int(r) for r in chosen]


def _check_permutation(Mn, perm, tol):
    row_sets = []
    n = len(perm)
    for pos in range(n - 1):
        rows = _facet_witness(Mn, perm, pos, tol)
        if rows is None:
            return None
        row_sets.append(rows)
    return row_sets


def is_strongly_boundary_close(M, tol=DEFAULT_TOL,
                               max_exhaustive_cols=MAX_EXHAUSTIVE_COLS):
    """Check strong boundary closeness, searching column permutations.

    Condition 1 requires every column to have both a (numerically) zero
    entry and a positive one.  Condition 2 asks for a column ordering under
    which, for each position ``i < n``, there are ``n - i`` rows vanishing
    at position ``i`` with positive mass afterwards whose trailing block
    has full numerical rank.  The permutation search is exhaustive up to
    ``max_exhaustive_cols`` columns; beyond that a most-zeros-first greedy
    ordering is tried and a failure is reported as inconclusive rather
    than false.
    """
    Mn = _normalized(M)
    n = Mn.shape[1]
    if not _boundary_close(Mn, tol):
        return BoundaryClosenessReport(
            False, None, None, tol, reason="a column lacks a zero or a positive entry"
        )
    if n <= max_exhaustive_cols:
        for perm in itertools.permutations(range(n)):
            row_sets = _check_permutation(Mn, perm, tol)
            if row_sets is not None:
                return BoundaryClosenessReport(True, list(perm), row_sets, tol)
        return BoundaryClosenessReport(
            False, None, None, tol, reason="no column permutation admits the witnesses"
        )
    zeros_per_col = np.sum(Mn <= tol, axis=0)
    greedy = list(np.argsort(-zeros_per_col, kind="stable"))
    row_sets = _check_permutation(Mn, tuple(greedy), tol)
    if row_sets is not None:
        return BoundaryClosenessReport(True, [int(c) for c in greedy], row_sets, tol)
    return BoundaryClosenessReport(
        None, None, None, tol,
        reason=f"search too large: {n} columns exceed the exhaustive cap of "
               f"{max_exhaustive_cols} and the greedy ordering found no witness",
    )


# -- certified constructor ---------------------------------------------------------


def _run_layout(k):
    """Start index and length of each coefficient column's positive run."""
    runs = [(0, 1)]
    for i in range(2, k + 1):
        start = (i - 1) * (i - 2) // 2 + 1
        runs.append((start, i - 1))
    return runs


def construct_certified_features(k, seed=None, n_rows=None, boundary_rows=0,
                                 max_tries=10):
    """Feature and coefficient matrices whose product is certified.

    For rank ``k >= 2`` builds ``X_r`` with ``d = k(k-1)/2 + 1`` columns.
    Its first ``d`` rows follow the structured pattern: the first row is
    zero then positive, the first column zero then positive, and for each
    ``i`` in ``2..k`` a block of ``i-1`` rows is positive exactly on the
    first ``(i-1)(i-2)/2 + 1`` columns.  The trailing columns of that
    structured block only overlap on the first row, so generic all-positive
    rows are appended (``n_rows`` defaults to ``d + k - 2``, the minimum
    restoring full column rank).  ``B_r`` puts a positive run of length
    ``i-1`` (length 1 for the first column) in its ``i``-th column so that
    each product column sums a distinct block of feature columns.
    Positive entries are drawn uniformly from [1, 10).  Returns
    ``(X_r, B_r, F_r)`` with ``F_r = X_r B_r`` strongly boundary close and
    ``X_r`` of full column rank.

    ``boundary_rows > 0`` appends, per factor, that many feature rows that
    vanish exactly on the factor's coefficient run and are positive
    elsewhere.  Each such row places a product row on one facet of the
    orthant with positive mass on all other coordinates, giving every
    ordered coordinate pair a same-row facet witness; without them,
    factorizations of this family are observably non-unique.
    """
    if k < 2:
        raise ValueError("need k >= 2")
    d = k * (k - 1) // 2 + 1
    base_rows = d + max(0, k - 2)
    if n_rows is None:
        n_rows = base_rows
    if n_rows < base_rows:
        raise ValueError(f"need at least {base_rows} rows for full column rank")
    rng = np.random.default_rng(seed)
    runs = _run_layout(k)
    for _ in range(max_tries):
        X = np.zeros((n_rows + boundary_rows * k, d))
        X[0, 1:] = rng.uniform(1.0, 10.0, d - 1)
        for i in range(2, k + 1):
            start, length = runs[i - 1]
            width = (i - 1) * (i - 2) // 2 + 1
            X[start:start + length, :width] = rng.uniform(1.0, 10.0, (length, width))
        X[d:n_rows] = rng.uniform(1.0, 10.0, (n_rows - d, d))
        r = n_rows
        for start, length in runs:
            for _ in range(boundary_rows):
                X[r] = rng.uniform(1.0, 10.0, d)
                X[r, start:start + length] = 0.0
                r += 1
        B = np.zeros((d, k))
        for j, (start, length) in enumerate(runs):
            B[start:start + length, j] = rng.uniform(1.0, 10.0, length)
        if np.linalg.matrix_rank(X) == d:
            return X, B, X @ B
    raise RuntimeError("failed to draw a full-rank feature matrix")


def worked_example_k4():
    """The hand-checkable k=4 instance of the certified family."""
    X_r = np.array([
        [0, 5, 14, 7, 9, 15, 13],
        [10, 0, 0, 0, 0, 0, 0],
        [4, 5, 0, 0, 0, 0, 0],
        [12, 4, 0, 0, 0, 0, 0],
        [10, 7, 10, 7, 0, 0, 0],
        [13, 10, 12, 9, 0, 0, 0],
        [12, 10, 16, 8, 0, 0, 0],
    ], dtype=float)
    B_r = np.array([
        [1, 0, 0, 0],
        [0, 1, 0, 0],
        [0, 0, 1, 0],
        [0, 0, 1, 0],
        [0, 0, 0, 1],
        [0, 0, 0, 1],
        [0, 0, 0, 1],
    ], dtype=float)
    return X_r, B_r, X_r @ B_r
