"""Linear measurement operators on matrices.

A measurement operator maps an ``n1 x n2`` matrix to ``N`` scalars, each the
Frobenius inner product of the matrix with a mask. Five mask families are
supported:

- ``complete``: every entry observed (masks are the canonical basis, in
  row-major order);
- ``completion``: a subset of entries observed;
- ``gaussian``: dense random sensing masks, stored explicitly;
- ``rank_one``: masks ``a b^T`` stored as the vector pair ``(a, b)``, never
  as the outer product;
- ``temporal_aggregate``: each measurement sums a run of consecutive entries
  of one column (a meter reading over a span of periods).

Operators are immutable after construction (payload arrays are marked
read-only) and safe to share across threads. ``apply``/``adjoint`` use fixed
numpy reduction order, so results are deterministic for fixed inputs.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatchError,
    InfeasibleMeasurementsError,
    ProjectionConvergenceError,
)

__all__ = [
    "MaskKind",
    "MeasurementOperator",
    "MeasurementVector",
    "project_polytope",
    "make_periodic_aggregates",
    "make_random_aggregates",
    "save_operator",
    "load_operator",
    "save_measurements",
    "load_measurements",
]


class MaskKind(str, enum.Enum):
    COMPLETE = "complete"
    COMPLETION = "completion"
    GAUSSIAN = "gaussian"
    RANK_ONE = "rank_one"
    TEMPORAL_AGGREGATE = "temporal_aggregate"


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class MeasurementOperator:
    """One of the five mask families, with application and adjoint.

    Use the classmethod constructors (:meth:`complete`, :meth:`completion`,
    :meth:`gaussian_sensing`, :meth:`rank_one`, :meth:`temporal_aggregate`)
    rather than ``__init__`` directly.
    """

    def __init__(self, kind, n1, n2, N, payload):
        self.kind = MaskKind(kind)
        self.n1 = int(n1)
        self.n2 = int(n2)
        self.N = int(N)
        self._payload = payload
        self._pinv = None  # lazy cache for the general projection path

    # -- constructors -------------------------------------------------------

    @classmethod
    def complete(cls, n1, n2):
        """Every entry observed; masks ordered row-major."""
        return cls(MaskKind.COMPLETE, n1, n2, n1 * n2, {})

    @classmethod
    def completion(cls, n1, n2, indices):
        """Observe the entries listed in ``indices`` (pairs ``(i, j)``)."""
        idx = np.asarray(indices, dtype=np.intp)
        if idx.ndim != 2 or idx.shape[1] != 2:
            raise DimensionMismatchError("indices must be an (N, 2) array of pairs")
        i, j = idx[:, 0], idx[:, 1]
        if np.any(i < 0) or np.any(i >= n1) or np.any(j < 0) or np.any(j >= n2):
            raise ValueError("completion index out of bounds")
        flat = i * n2 + j
        if len(np.unique(flat)) != len(flat):
            raise ValueError("completion indices must be unique")
        payload = {"rows": _readonly(i), "cols": _readonly(j)}
        return cls(MaskKind.COMPLETION, n1, n2, len(idx), payload)

    @classmethod
    def gaussian_sensing(cls, n1, n2, masks):
        """Dense sensing masks, shape ``(N, n1, n2)``."""
        A = np.asarray(masks, dtype=float)
        if A.ndim != 3 or A.shape[1:] != (n1, n2):
            raise DimensionMismatchError("masks must have shape (N, n1, n2)")
        return cls(MaskKind.GAUSSIAN, n1, n2, A.shape[0], {"masks": _readonly(A)})

    @classmethod
    def gaussian_random(cls, n1, n2, N, seed=None):
        rng = np.random.default_rng(seed)
        return cls.gaussian_sensing(n1, n2, rng.standard_normal((N, n1, n2)))

    @classmethod
    def rank_one(cls, n1, n2, alphas, betas):
        """Masks ``alphas[i] betas[i]^T``; only the vectors are stored."""
        a = np.asarray(alphas, dtype=float)
        b = np.asarray(betas, dtype=float)
        if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
            raise DimensionMismatchError("alphas and betas must be (N, n1) and (N, n2)")
        if a.shape[1] != n1 or b.shape[1] != n2:
            raise DimensionMismatchError("vector lengths must match matrix dims")
        payload = {"alphas": _readonly(a), "betas": _readonly(b)}
        return cls(MaskKind.RANK_ONE, n1, n2, a.shape[0], payload)

    @classmethod
    def rank_one_random(cls, n1, n2, N, seed=None):
        rng = np.random.default_rng(seed)
        return cls.rank_one(
            n1, n2, rng.standard_normal((N, n1)), rng.standard_normal((N, n2))
        )

    @classmethod
    def temporal_aggregate(cls, n1, n2, spans):
        """Spans ``(s, t0, h)``: sum rows ``t0 .. t0+h-1`` of column ``s``.

        Spans for a fixed column must be pairwise disjoint.
        """
        sp = np.asarray(spans, dtype=np.intp)
        if sp.ndim != 2 or sp.shape[1] != 3:
            raise DimensionMismatchError("spans must be an (N, 3) array of (s, t0, h)")
        s, t0, h = sp[:, 0], sp[:, 1], sp[:, 2]
        if np.any(s < 0) or np.any(s >= n2):
            raise ValueError("span column index out of bounds")
        if np.any(t0 < 0) or np.any(h < 1) or np.any(t0 + h > n1):
            raise ValueError("span must satisfy t0 >= 0, h >= 1, t0 + h <= n1")
        order = np.lexsort((t0, s))
        ss, tt, hh = s[order], t0[order], h[order]
        same_col = ss[1:] == ss[:-1]
        if np.any(same_col & (tt[1:] < tt[:-1] + hh[:-1])):
            raise ValueError("spans overlap within a column")
        payload = {"s": _readonly(s), "t0": _readonly(t0), "h": _readonly(h)}
        return cls(MaskKind.TEMPORAL_AGGREGATE, n1, n2, len(sp), payload)

    # -- basic protocol ------------------------------------------------------

    @property
    def shape(self):
        return (self.n1, self.n2)

    def __repr__(self):
        return (
            f"MeasurementOperator(kind={self.kind.value!r}, "
            f"n1={self.n1}, n2={self.n2}, N={self.N})"
        )

    def _check_matrix(self, M):
        M = np.asarray(M, dtype=float)
        if M.shape != (self.n1, self.n2):
            raise DimensionMismatchError(
                f"matrix has shape {M.shape}, operator expects {(self.n1, self.n2)}"
            )
        return M

    def _check_vector(self, b):
        b = np.asarray(getattr(b, "values", b), dtype=float)
        if b.shape != (self.N,):
            raise DimensionMismatchError(
                f"measurement vector has length {b.shape}, operator expects {self.N}"
            )
        return b

    # -- apply / adjoint -----------------------------------------------------

    def apply(self, M):
        """Measurements ``<M, A_i>`` for every mask, as a length-N vector."""
        M = self._check_matrix(M)
        k = self.kind
        if k is MaskKind.COMPLETE:
            return M.ravel().copy()
        if k is MaskKind.COMPLETION:
            p = self._payload
            return M[p["rows"], p["cols"]].copy()
        if k is MaskKind.GAUSSIAN:
            return np.einsum("nij,ij->n", self._payload["masks"], M)
        if k is MaskKind.RANK_ONE:
            p = self._payload
            return np.sum((p["alphas"] @ M) * p["betas"], axis=1)
        # temporal aggregates: prefix sums along each column
        p = self._payload
        P = np.zeros((self.n1 + 1, self.n2))
        np.cumsum(M, axis=0, out=P[1:])
        return P[p["t0"] + p["h"], p["s"]] - P[p["t0"], p["s"]]

    def adjoint(self, b):
        """The matrix ``sum_i b_i A_i`` for a length-N vector ``b``."""
        b = self._check_vector(b)
        k = self.kind
        if k is MaskKind.COMPLETE:
            return b.reshape(self.n1, self.n2).copy()
        if k is MaskKind.COMPLETION:
            p = self._payload
            out = np.zeros((self.n1, self.n2))
            np.add.at(out, (p["rows"], p["cols"]), b)
            return out
        if k is MaskKind.GAUSSIAN:
            return np.einsum("n,nij->ij", b, self._payload["masks"])
        if k is MaskKind.RANK_ONE:
            p = self._payload
            return (p["alphas"] * b[:, None]).T @ p["betas"]
        p = self._payload
        diff = np.zeros((self.n1 + 1, self.n2))
        np.add.at(diff, (p["t0"], p["s"]), b)
        np.add.at(diff, (p["t0"] + p["h"], p["s"]), -b)
        return np.cumsum(diff[:-1], axis=0)

    # -- contractions used by the sampling-error solver ----------------------

    def contract_cols(self, f_c):
        """Rows ``(A_i f_c)^T`` stacked into an ``(N, n1)`` array."""
        f_c = np.asarray(f_c, dtype=float)
        if f_c.shape != (self.n2,):
            raise DimensionMismatchError("f_c must have length n2")
        k = self.kind
        if k is MaskKind.COMPLETE:
            out = np.zeros((self.N, self.n1))
            i1 = np.repeat(np.arange(self.n1), self.n2)
            out[np.arange(self.N), i1] = np.tile(f_c, self.n1)
            return out
        if k is MaskKind.COMPLETION:
            p = self._payload
            out = np.zeros((self.N, self.n1))
            out[np.arange(self.N), p["rows"]] = f_c[p["cols"]]
            return out
        if k is MaskKind.GAUSSIAN:
            return np.einsum("nij,j->ni", self._payload["masks"], f_c)
        if k is MaskKind.RANK_ONE:
            p = self._payload
            return p["alphas"] * (p["betas"] @ f_c)[:, None]
        p = self._payload
        diff = np.zeros((self.N, self.n1 + 1))
        rows = np.arange(self.N)
        diff[rows, p["t0"]] = f_c[p["s"]]
        diff[rows, p["t0"] + p["h"]] -= f_c[p["s"]]
        return np.cumsum(diff[:, :-1], axis=1)

    def contract_rows(self, f_r):
        """Rows ``(A_i^T f_r)^T`` stacked into an ``(N, n2)`` array."""
        f_r = np.asarray(f_r, dtype=float)
        if f_r.shape != (self.n1,):
            raise DimensionMismatchError("f_r must have length n1")
        k = self.kind
        if k is MaskKind.COMPLETE:
            out = np.zeros((self.N, self.n2))
            i2 = np.tile(np.arange(self.n2), self.n1)
            out[np.arange(self.N), i2] = np.repeat(f_r, self.n2)
            return out
        if k is MaskKind.COMPLETION:
            p = self._payload
            out = np.zeros((self.N, self.n2))
            out[np.arange(self.N), p["cols"]] = f_r[p["rows"]]
            return out
        if k is MaskKind.GAUSSIAN:
            return np.einsum("nij,i->nj", self._payload["masks"], f_r)
        if k is MaskKind.RANK_ONE:
            p = self._payload
            return p["betas"] * (p["alphas"] @ f_r)[:, None]
        p = self._payload
        # span sum of f_r lands on the measured column
        csum = np.concatenate([[0.0], np.cumsum(f_r)])
        vals = csum[p["t0"] + p["h"]] - csum[p["t0"]]
        out = np.zeros((self.N, self.n2))
        out[np.arange(self.N), p["s"]] = vals
        return out

    # -- dense view and pseudo-inverse ---------------------------------------

    def flatten(self):
        """The operator as a dense ``(N, n1*n2)`` matrix of flattened masks."""
        k = self.kind
        n = self.n1 * self.n2
        if k is MaskKind.COMPLETE:
            return np.eye(n)
        if k is MaskKind.COMPLETION:
            p = self._payload
            out = np.zeros((self.N, n))
            out[np.arange(self.N), p["rows"] * self.n2 + p["cols"]] = 1.0
            return out
        if k is MaskKind.GAUSSIAN:
            return self._payload["masks"].reshape(self.N, n)
        if k is MaskKind.RANK_ONE:
            p = self._payload
            return np.einsum("ni,nj->nij", p["alphas"], p["betas"]).reshape(self.N, n)
        p = self._payload
        out = np.zeros((self.N, n))
        for i in range(self.N):
            s, t0, h = p["s"][i], p["t0"][i], p["h"][i]
            out[i, (np.arange(t0, t0 + h)) * self.n2 + s] = 1.0
        return out

    def pseudo_inverse(self):
        """Right pseudo-inverse of :meth:`flatten`, computed once and cached.

        Uses an SVD (rank revealing), so redundant mask lists are handled.
        """
        if self._pinv is None:
            self._pinv = scipy.linalg.pinv(self.flatten())
        return self._pinv

    # -- payload accessors (read-only views) ----------------------------------

    @property
    def completion_indices(self):
        p = self._payload
        return p["rows"], p["cols"]

    @property
    def spans(self):
        p = self._payload
        return p["s"], p["t0"], p["h"]

    @property
    def masks(self):
        return self._payload["masks"]

    @property
    def rank_one_vectors(self):
        return self._payload["alphas"], self._payload["betas"]


@dataclass(frozen=True)
class MeasurementVector:
    """Measurements paired with the operator that produced them."""

    values: np.ndarray
    operator: MeasurementOperator

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.operator.N,):
            raise DimensionMismatchError(
                f"got {v.shape[0] if v.ndim == 1 else v.shape} values, "
                f"operator has N={self.operator.N}"
            )
        object.__setattr__(self, "values", _readonly(v))


# -- aggregate generators ------------------------------------------------------


def make_periodic_aggregates(n1, n2, period):
    """Partition every column into consecutive spans of fixed length.

    The last span of a column is shorter when ``period`` does not divide
    ``n1``. Every period of every column is covered exactly once.
    """
    if not 1 <= period <= n1:
        raise ValueError(f"period must be in [1, {n1}], got {period}")
    spans = []
    for s in range(n2):
        t0 = 0
        while t0 < n1:
            h = min(period, n1 - t0)
            spans.append((s, t0, h))
            t0 += h
    return MeasurementOperator.temporal_aggregate(n1, n2, spans)


def make_random_aggregates(n1, n2, rate, seed=None):
    """Random span boundaries with expected measurement count ``rate*n1*n2``.

    Per column, each interior period boundary becomes a span breakpoint
    independently with probability ``rate``; breakpoints at 0 and ``n1`` are
    forced, so the spans of a column always cover it exactly once.
    """
    if not 0 < rate <= 1:
        raise ValueError(f"rate must be in (0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    spans = []
    for s in range(n2):
        cuts = np.flatnonzero(rng.random(n1 - 1) < rate) + 1
        bounds = np.concatenate([[0], cuts, [n1]])
        for t0, t1 in zip(bounds[:-1], bounds[1:]):
            spans.append((s, int(t0), int(t1 - t0)))
    return MeasurementOperator.temporal_aggregate(n1, n2, spans)


# -- projection onto {V >= 0, A(V) = b} ----------------------------------------


def _project_span_simplex(w, total):
    """Euclidean projection of ``w`` onto ``{v >= 0, sum(v) = total}``.

    Sort-based exact method, O(h log h).
    """
    if total < 0:
        raise InfeasibleMeasurementsError(
            f"aggregate value {total} < 0 is infeasible under nonnegativity"
        )
    if total == 0.0:
        return np.zeros_like(w)
    u = np.sort(w)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, len(w) + 1)
    rho = idx[u - css / idx > 0][-1]
    tau = css[rho - 1] / rho
    return np.maximum(w - tau, 0.0)


def _project_completion(op, b, W):
    if np.any(b < 0):
        raise InfeasibleMeasurementsError(
            "negative observed entries are infeasible under nonnegativity"
        )
    V = np.maximum(W, 0.0)
    if op.kind is MaskKind.COMPLETE:
        return b.reshape(op.n1, op.n2).copy()
    rows, cols = op.completion_indices
    V[rows, cols] = b
    return V


def _project_aggregates(op, b, W):
    V = np.maximum(W, 0.0)
    s, t0, h = op.spans
    for i in range(op.N):
        seg = W[t0[i] : t0[i] + h[i], s[i]]
        V[t0[i] : t0[i] + h[i], s[i]] = _project_span_simplex(seg, b[i])
    return V


def _project_general(op, b, W, tol, max_iter):
    # Dykstra with the affine step V + pinv(A)(b - A(V)); the correction
    # term is only needed on the non-affine (orthant) projection, so the
    # limit is the exact projection of W onto the intersection.
    pinv = op.pseudo_inverse()
    Amat = op.flatten()
    x = W.ravel().astype(float)
    q = np.zeros_like(x)
    prev = None
    residual = np.inf
    stalled = 0
    reason = f"no convergence within max_iter={max_iter}"
    for _ in range(max_iter):
        y = x + pinv @ (b - Amat @ x)
        y += pinv @ (b - Amat @ y)  # refinement pass tightens the affine step
        z = y + q
        x = np.maximum(z, 0.0)
        q = z - x
        residual = np.max(np.abs(Amat @ x - b)) if op.N else 0.0
        if residual <= tol:
            return x.reshape(op.n1, op.n2)
        if prev is not None:
            denom = max(np.linalg.norm(prev), 1.0)
            # a stall must persist; single slow steps are normal for
            # narrow-angle intersections
            stalled = stalled + 1 if np.linalg.norm(x - prev) <= 1e-9 * denom else 0
            if stalled >= 10:
                if np.linalg.norm(q) > 0:
                    # optimality has converged; drop the correction so the
                    # plain alternating tail polishes feasibility without
                    # moving the near-optimal iterate appreciably
                    q[:] = 0.0
                    stalled = 0
                else:
                    reason = "iterates stalled (infeasible constraints?)"
                    break
        prev = x.copy()
    raise ProjectionConvergenceError(
        f"alternating projection: {reason}; measurement residual "
        f"{residual:.3e} > tol {tol:.1e}",
        residual=residual,
    )


def project_polytope(op, b, W, tol=1e-8, max_iter=500, method="auto"):
    """Project ``W`` onto ``{V >= 0, A(V) = b}`` (nearly, in Frobenius norm).

    Fast exact paths exist for completion masks (overwrite observed entries,
    clamp the rest at zero) and temporal aggregates (per-span projection onto
    a scaled simplex). Other families use alternating projection between the
    affine set and the orthant, with the operator pseudo-inverse computed
    once and cached on the operator.

    ``method="general"`` forces the alternating-projection path regardless
    of the mask family.
    """
    b = op._check_vector(b)
    W = op._check_matrix(W)
    if method not in ("auto", "general"):
        raise ValueError(f"unknown projection method {method!r}")
    if method == "auto":
        if op.kind in (MaskKind.COMPLETE, MaskKind.COMPLETION):
            return _project_completion(op, b, W)
        if op.kind is MaskKind.TEMPORAL_AGGREGATE:
            return _project_aggregates(op, b, W)
    return _project_general(op, b, W, tol, max_iter)


# -- serialization --------------------------------------------------------------


def save_operator(op, path):
    """Write the operator to a JSON file, one record per measurement."""
    doc = {"kind": op.kind.value, "n1": op.n1, "n2": op.n2}
    if op.kind is MaskKind.COMPLETION:
        rows, cols = op.completion_indices
        doc["measurements"] = [[int(i), int(j)] for i, j in zip(rows, cols)]
    elif op.kind is MaskKind.GAUSSIAN:
        doc["measurements"] = op.masks.tolist()
    elif op.kind is MaskKind.RANK_ONE:
        alphas, betas = op.rank_one_vectors
        doc["measurements"] = [
            {"alpha": a.tolist(), "beta": b.tolist()} for a, b in zip(alphas, betas)
        ]
    elif op.kind is MaskKind.TEMPORAL_AGGREGATE:
        s, t0, h = op.spans
        doc["measurements"] = [
            [int(a), int(b_), int(c)] for a, b_, c in zip(s, t0, h)
        ]
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_operator(path):
    with open(path) as fh:
        doc = json.load(fh)
    kind = MaskKind(doc["kind"])
    n1, n2 = doc["n1"], doc["n2"]
    if kind is MaskKind.COMPLETE:
        return MeasurementOperator.complete(n1, n2)
    if kind is MaskKind.COMPLETION:
        return MeasurementOperator.completion(n1, n2, doc["measurements"])
    if kind is MaskKind.GAUSSIAN:
        return MeasurementOperator.gaussian_sensing(n1, n2, doc["measurements"])
    if kind is MaskKind.RANK_ONE:
        alphas = [m["alpha"] for m in doc["measurements"]]
        betas = [m["beta"] for m in doc["measurements"]]
        return MeasurementOperator.rank_one(n1, n2, alphas, betas)
    return MeasurementOperator.temporal_aggregate(n1, n2, doc["measurements"])


def save_measurements(values, path):
    """Write a measurement vector as CSV with header ``index,value``."""
    values = np.asarray(getattr(values, "values", values), dtype=float)
    with open(path, "w") as fh:
        fh.write("index,value\n")
        for i, v in enumerate(values):
            fh.write(f"{i},{float(v)!r}\n")


def load_measurements(path):
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "index,value":
            raise ValueError(f"expected header 'index,value', got {header!r}")
        vals = [float(line.split(",")[1]) for line in fh if line.strip()]
    return np.asarray(vals)
