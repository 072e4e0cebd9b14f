"""Independent reference implementations used to check the library.

Everything here is deliberately written from the definitions, avoiding the
code paths under test: the QP projection oracle enumerates active sets, the
nonnegative column oracle goes through Lawson-Hanson NNLS on the stacked
design, and the plain HALS reference is a direct loop.
"""

import itertools

import numpy as np
import scipy.optimize


def qp_project_oracle(Amat, b, w):
    """Exact solution of min ||v - w||^2 s.t. Amat v = b, v >= 0.

    Enumerates every candidate active set (coordinates clamped at zero),
    solves the equality-constrained stationarity system, and keeps the
    feasible candidate with the smallest objective.  Exact for strictly
    convex objectives; intended for tiny instances (len(w) <= ~12).
    """
    n = len(w)
    m = Amat.shape[0]
    best = None
    best_obj = np.inf
    for r in range(n + 1):
        for clamped in itertools.combinations(range(n), r):
            E = np.zeros((len(clamped), n))
            for row, idx in enumerate(clamped):
                E[row, idx] = 1.0
            # stationarity: v - w + Amat^T lam + E^T mu = 0; Amat v = b; E v = 0
            K = np.block([
                [np.eye(n), Amat.T, E.T],
                [Amat, np.zeros((m, m)), np.zeros((m, len(clamped)))],
                [E, np.zeros((len(clamped), m)), np.zeros((len(clamped), len(clamped)))],
            ])
            rhs = np.concatenate([w, b, np.zeros(len(clamped))])
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
            v = sol[:n]
            if np.all(v >= -1e-9) and np.max(np.abs(Amat @ v - b)) < 1e-8:
                obj = float(np.sum((v - w) ** 2))
                if obj < best_obj - 1e-12:
                    best_obj = obj
                    best = v
    return best


def nnls_column_oracle(R, f_c):
    """min over f >= 0 of ||R - f f_c^T||_F^2 via Lawson-Hanson NNLS.

    Stacks the problem as ||vec(R) - (f_c kron I) f||^2 and returns the
    optimal objective value.
    """
    n1 = R.shape[0]
    design = np.kron(f_c[:, None], np.eye(n1))  # (n2*n1, n1), vec by columns
    y = R.T.ravel()  # matches column-major stacking of R
    f, _ = scipy.optimize.nnls(design, y)
    resid = R - np.outer(f, f_c)
    return float(np.sum(resid**2)), f


def plain_hals(V, F_r, F_c, n_iter):
    """Classical HALS on a fully observed matrix; returns the objective trace.

    Independent of the solver module: direct residual bookkeeping with the
    textbook column update max(0, R_i f / ||f||^2).
    """
    F_r = F_r.copy()
    F_c = F_c.copy()
    k = F_r.shape[1]
    trace = []
    for _ in range(n_iter):
        R = V - F_r @ F_c.T
        for i in range(k):
            R_i = R + np.outer(F_r[:, i], F_c[:, i])
            f = F_c[:, i]
            F_r[:, i] = np.maximum(0.0, (R_i @ f) / (f @ f))
            R = R_i - np.outer(F_r[:, i], F_c[:, i])
        for i in range(k):
            R_i = R + np.outer(F_r[:, i], F_c[:, i])
            f = F_r[:, i]
            F_c[:, i] = np.maximum(0.0, (R_i.T @ f) / (f @ f))
            R = R_i - np.outer(F_r[:, i], F_c[:, i])
        trace.append(float(np.sum(R * R)))
    return trace, F_r, F_c


def verify_separability_witness(M, rows, tol=1e-9):
    """Re-check a separability witness directly from the definition."""
    M = np.asarray(M, dtype=float)
    colmax = M.max(axis=0)
    n = M.shape[1]
    if rows is None or len(rows) != n or len(set(rows)) != n:
        return False
    for j, r in enumerate(rows):
        if not M[r, j] > tol * colmax[j]:
            return False
        for l in range(n):
            if l != j and not M[r, l] <= tol * colmax[l]:
                return False
    return True


def verify_sbc_witness(M, perm, row_sets, tol=1e-9):
    """Re-check a strong-boundary-closeness witness from the definition."""
    M = np.asarray(M, dtype=float)
    colmax = np.where(M.max(axis=0) > 0, M.max(axis=0), 1.0)
    n = M.shape[1]
    if perm is None or sorted(perm) != list(range(n)):
        return False
    if row_sets is None or len(row_sets) != n - 1:
        return False
    for pos in range(n - 1):
        rows = row_sets[pos]
        if len(rows) != n - pos - 1:
            return False
        i_col = perm[pos]
        later = [perm[q] for q in range(pos + 1, n)]
        block = []
        for r in rows:
            if not M[r, i_col] <= tol * colmax[i_col]:
                return False
            tail = M[r, later]
            if not np.any(tail > tol * colmax[later]):
                return False
            block.append(tail / colmax[later])
        svals = np.linalg.svd(np.asarray(block), compute_uv=False)
        if svals[-1] <= tol * svals[0]:
            return False
    return True


def align_components_error(F_r_hat, F_c_hat, F_r, F_c):
    """Best-permutation relative error between rank-one component sets.

    Components f_i g_i^T are invariant to the per-column scaling ambiguity,
    so this compares factorizations up to permutation and positive scaling.
    """
    k = F_r.shape[1]
    true_comps = [np.outer(F_r[:, i], F_c[:, i]) for i in range(k)]
    hat_comps = [np.outer(F_r_hat[:, i], F_c_hat[:, i]) for i in range(k)]
    best = np.inf
    for perm in itertools.permutations(range(k)):
        err = max(
            np.linalg.norm(hat_comps[p] - true_comps[i])
            / np.linalg.norm(true_comps[i])
            for i, p in enumerate(perm)
        )
        best = min(best, err)
    return best
