"""Link functions mapping row/column features to factor columns.

Each factor column is tied to a regression model (a *link*) fitted against
features. Fitting a link on a residual matrix ``R`` paired with the other
side's factor column ``f_c`` reduces to a weighted vector regression:

    ||R - f(X) f_c^T||_F^2  =  w * ||f(X) - y||^2  +  const,

with ``y = R f_c / ||f_c||^2`` and ``w = ||f_c||^2``.  Three families are
supported: linear (closed form via a cached QR), additive penalized
regression splines (smoothness penalty chosen by generalized cross
validation), and kernel ridge.  Evaluation always follows the
evaluate-then-ramp contract: predictions handed to the factorization are
``max(0, f(x))`` elementwise.

Fitted links are immutable and safe to share; fitting itself is
single-threaded per column.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.interpolate import BSpline

from .errors import (
    DegenerateColumnError,
    DimensionMismatchError,
    RankDeficientFeaturesError,
)

__all__ = [
    "FeatureSet",
    "LinkModel",
    "LinearLink",
    "SplineLink",
    "KernelRidgeLink",
    "SplineBasis",
    "LinearDesign",
    "SplineDesign",
    "KernelDesign",
    "reduce_subproblem",
    "fit_linear",
    "build_spline_basis",
    "fit_spline",
    "fit_kernel_ridge",
    "evaluate",
    "save_links",
    "load_links",
]

DEFAULT_LAMBDA_GRID = np.logspace(-8.0, 4.0, 30)
DEFAULT_BASIS_DIM = 10


# -- features -------------------------------------------------------------------


class FeatureSet:
    """Row features (n1 x d1) and column features (n2 x d2).

    Identity features encode "no side information" for that side.  Feature
    matrices must have full column rank (linear fits rely on it); this is
    checked at construction.
    """

    def __init__(self, X_r, X_c, identity_rows=False, identity_cols=False):
        self.X_r = np.asarray(X_r, dtype=float)
        self.X_c = np.asarray(X_c, dtype=float)
        self.identity_rows = bool(identity_rows)
        self.identity_cols = bool(identity_cols)
        for name, X, ident in (
            ("X_r", self.X_r, self.identity_rows),
            ("X_c", self.X_c, self.identity_cols),
        ):
            if X.ndim != 2:
                raise DimensionMismatchError(f"{name} must be a 2-d matrix")
            if ident:
                continue  # the identity is trivially full rank
            if np.linalg.matrix_rank(X) < X.shape[1]:
                raise RankDeficientFeaturesError(
                    f"{name} does not have full column rank"
                )
        self._designs = {}

    @classmethod
    def identity(cls, n1, n2):
        return cls(np.eye(n1), np.eye(n2), identity_rows=True, identity_cols=True)

    @property
    def n1(self):
        return self.X_r.shape[0]

    @property
    def n2(self):
        return self.X_c.shape[0]

    def row_design(self):
        if "row" not in self._designs:
            self._designs["row"] = LinearDesign(self.X_r, identity=self.identity_rows)
        return self._designs["row"]

    def col_design(self):
        if "col" not in self._designs:
            self._designs["col"] = LinearDesign(self.X_c, identity=self.identity_cols)
        return self._designs["col"]


# -- link models ------------------------------------------------------------------


class LinkModel:
    """Base class; concrete families implement :meth:`raw`."""

    family = None

    def raw(self, X_new):
        raise NotImplementedError

    def evaluate(self, X_new):
        """Ramp-thresholded predictions, ``max(0, f(X_new))``."""
        return np.maximum(0.0, self.raw(X_new))


class LinearLink(LinkModel):
    family = "linear"

    def __init__(self, coefficients):
        self.coefficients = np.asarray(coefficients, dtype=float)

    def raw(self, X_new):
        X_new = np.asarray(X_new, dtype=float)
        if X_new.shape[1] != self.coefficients.shape[0]:
            raise DimensionMismatchError(
                f"expected {self.coefficients.shape[0]} features, got {X_new.shape[1]}"
            )
        return X_new @ self.coefficients


@dataclass
class SplineTerm:
    """One additive smooth: a cubic B-spline with its fitted coefficients."""

    knots: np.ndarray
    coef: np.ndarray

    def design_at(self, x):
        # beyond the training range the smooth extends as a constant
        x = np.clip(np.asarray(x, dtype=float), self.knots[3], self.knots[-4])
        return BSpline.design_matrix(x, self.knots, 3).toarray()

    def raw(self, x):
        return self.design_at(x) @ self.coef


class SplineLink(LinkModel):
    """Additive spline model: intercept + linear part + per-feature smooths."""

    family = "spline"

    def __init__(self, theta, terms, lambda_=None, weight=1.0, lambda_grid=None,
                 gcv_scores=None):
        self.theta = np.asarray(theta, dtype=float)  # intercept + linear coefs
        self.terms = list(terms)
        self.lambda_ = lambda_
        self.weight = weight
        self.lambda_grid = None if lambda_grid is None else np.asarray(lambda_grid)
        self.gcv_scores = None if gcv_scores is None else np.asarray(gcv_scores)

    @property
    def effective_penalty(self):
        """The penalty multiplier that entered the solved system."""
        return None if self.lambda_ is None else self.lambda_ / self.weight

    def raw(self, X_new):
        X_new = np.asarray(X_new, dtype=float)
        if X_new.ndim != 2 or X_new.shape[1] != len(self.terms):
            raise DimensionMismatchError(
                f"expected {len(self.terms)} features, got shape {X_new.shape}"
            )
        out = self.theta[0] + X_new @ self.theta[1:]
        for j, term in enumerate(self.terms):
            out = out + term.raw(X_new[:, j])
        return out


class KernelRidgeLink(LinkModel):
    family = "kernel"

    def __init__(self, X_train, dual, kernel="rbf", bandwidth=None, ridge=0.0):
        self.X_train = np.asarray(X_train, dtype=float)
        self.dual = np.asarray(dual, dtype=float)
        self.kernel = kernel
        self.bandwidth = bandwidth
        self.ridge = ridge

    def raw(self, X_new):
        X_new = np.asarray(X_new, dtype=float)
        if X_new.shape[1] != self.X_train.shape[1]:
            raise DimensionMismatchError(
                f"expected {self.X_train.shape[1]} features, got {X_new.shape[1]}"
            )
        K = _kernel_matrix(X_new, self.X_train, self.kernel, self.bandwidth)
        return K @ self.dual


# -- subproblem reduction ----------------------------------------------------------


def reduce_subproblem(R_i, f_c):
    """Collapse ``min_f ||R_i - f f_c^T||_F^2`` to a weighted vector target.

    Returns ``(target, weight)`` with ``target = R_i f_c / ||f_c||^2`` and
    ``weight = ||f_c||^2``; fitting any family against the pair solves the
    original matrix subproblem.
    """
    R_i = np.asarray(R_i, dtype=float)
    f_c = np.asarray(f_c, dtype=float)
    if R_i.shape[1] != f_c.shape[0]:
        raise DimensionMismatchError("R_i columns must match len(f_c)")
    weight = float(f_c @ f_c)
    if weight == 0.0:
        raise DegenerateColumnError("partner factor column is identically zero")
    return (R_i @ f_c) / weight, weight


# -- linear fitting -----------------------------------------------------------------


class LinearDesign:
    """A feature matrix with its QR factorization, computed once and reused."""

    def __init__(self, X, identity=False):
        self.X = np.asarray(X, dtype=float)
        self.identity = bool(identity)
        if not self.identity:
            self._Q, self._R = np.linalg.qr(self.X)
            diag = np.abs(np.diag(self._R))
            if diag.min() <= 1e-12 * max(diag.max(), 1.0):
                raise RankDeficientFeaturesError("feature matrix is rank deficient")

    def solve(self, target):
        if self.identity:
            return np.asarray(target, dtype=float)
        return scipy.linalg.solve_triangular(self._R, self._Q.T @ target)


def fit_linear(design, target):
    """Least-squares linear link; ``design`` is a matrix or a LinearDesign."""
    if not isinstance(design, LinearDesign):
        design = LinearDesign(design)
    return LinearLink(design.solve(np.asarray(target, dtype=float)))


# -- spline basis and fitting ---------------------------------------------------------


@dataclass
class SplineBasis:
    """Cubic B-spline basis on quantile knots, with a curvature penalty.

    ``design`` evaluates the ``L`` basis functions at the training feature
    values; ``penalty`` is the (PSD) Gram matrix of second derivatives, so
    ``beta^T penalty beta`` is the integrated squared curvature of the
    spline with coefficients ``beta``.
    """

    x: np.ndarray
    knots: np.ndarray
    dimension: int
    design: np.ndarray
    penalty: np.ndarray

    def design_at(self, x_new):
        x_new = np.clip(np.asarray(x_new, dtype=float), self.knots[3], self.knots[-4])
        return BSpline.design_matrix(x_new, self.knots, 3).toarray()


def build_spline_basis(x, L=DEFAULT_BASIS_DIM):
    """Cubic B-spline basis of dimension ``L`` with knots at quantiles of x."""
    x = np.asarray(x, dtype=float)
    if L < 4:
        raise ValueError(f"basis dimension must be >= 4, got {L}")
    if len(np.unique(x)) < L:
        raise ValueError(
            f"need at least {L} distinct feature values, got {len(np.unique(x))}"
        )
    lo, hi = float(x.min()), float(x.max())
    probs = np.linspace(0.0, 1.0, L - 2)[1:-1]
    interior = np.quantile(x, probs) if len(probs) else np.empty(0)
    knots = np.concatenate([[lo] * 4, interior, [hi] * 4])
    design = BSpline.design_matrix(x, knots, 3).toarray()
    penalty = _curvature_penalty(knots, L)
    return SplineBasis(x=x, knots=knots, dimension=L, design=design, penalty=penalty)


def _curvature_penalty(knots, L):
    # second derivatives of cubic B-splines are piecewise linear, so 3-point
    # Gauss-Legendre per knot span integrates their products exactly
    nodes, wts = np.polynomial.legendre.leggauss(3)
    d2 = BSpline(knots, np.eye(L), 3).derivative(2)
    S = np.zeros((L, L))
    uniq = np.unique(knots)
    for a, b in zip(uniq[:-1], uniq[1:]):
        half = (b - a) / 2.0
        pts = (a + b) / 2.0 + half * nodes
        B2 = d2(pts)
        S += half * (B2.T * wts) @ B2
    return (S + S.T) / 2.0


class SplineDesign:
    """Assembled additive-spline regression design, reusable across fits.

    Parametric block = intercept + raw linear columns.  Each smooth term is
    reparameterized to be empirically orthogonal to its own constant and
    linear trends (sum-to-zero and slope-zero constraints), which makes the
    penalized system nonsingular for every penalty value and leaves the
    best linear fit as the infinite-penalty limit.
    """

    def __init__(self, bases, X_param):
        self.X_param = np.asarray(X_param, dtype=float)
        if self.X_param.ndim != 2:
            raise DimensionMismatchError("X_param must be 2-d")
        n, d = self.X_param.shape
        if len(bases) != d:
            raise DimensionMismatchError(
                f"got {len(bases)} bases for {d} feature columns"
            )
        self.bases = list(bases)
        blocks = [np.ones((n, 1)), self.X_param]
        self.term_maps = []   # per-term null-space basis Z_j
        self.term_slices = []
        penalties = []
        col = 1 + d
        for j, basis in enumerate(self.bases):
            B = basis.design
            xj = self.X_param[:, j]
            C = np.vstack([np.ones(n) @ B, xj @ B])
            Z = scipy.linalg.null_space(C)
            Xt = B @ Z
            St = Z.T @ basis.penalty @ Z
            St = (St + St.T) / 2.0
            tr = np.trace(St)
            scale = np.trace(Xt.T @ Xt) / tr if tr > 0 else 1.0
            blocks.append(Xt)
            self.term_maps.append(Z)
            self.term_slices.append(slice(col, col + Xt.shape[1]))
            penalties.append(scale * St)
            col += Xt.shape[1]
        self.D = np.hstack(blocks)
        self.p = self.D.shape[1]
        self.DtD = self.D.T @ self.D
        # shared-multiplier penalty: trace-normalized per term, embedded
        self.P = np.zeros((self.p, self.p))
        for sl, Pj in zip(self.term_slices, penalties):
            self.P[sl, sl] = Pj

    def _solve(self, y, eff):
        M = self.DtD + eff * self.P
        Dty = self.D.T @ y
        gamma = scipy.linalg.solve(M, Dty, assume_a="pos")
        return gamma, M

    def fit(self, target, weight=1.0, lambda_grid=None):
        y = np.asarray(target, dtype=float)
        if weight <= 0:
            raise ValueError("weight must be positive")
        grid = DEFAULT_LAMBDA_GRID if lambda_grid is None else np.asarray(lambda_grid)
        n = len(y)
        if grid.size == 1:
            lam = float(grid[0])
            gamma, _ = self._solve(y, lam / weight)
            scores = None
        else:
            scores = np.empty(grid.size)
            best = None
            for g, lam_g in enumerate(grid):
                gamma_g, M = self._solve(y, lam_g / weight)
                resid = y - self.D @ gamma_g
                tr_hat = np.trace(scipy.linalg.solve(M, self.DtD, assume_a="pos"))
                dof = n - tr_hat
                scores[g] = (
                    n * (resid @ resid) / dof**2 if dof > 1e-8 else np.inf
                )
                if best is None or scores[g] < scores[best]:
                    best = g
            lam = float(grid[best])
            gamma, _ = self._solve(y, lam / weight)
        d = self.X_param.shape[1]
        theta = gamma[: 1 + d]
        terms = []
        for j, (sl, Z) in enumerate(zip(self.term_slices, self.term_maps)):
            coef = Z @ gamma[sl]
            terms.append(SplineTerm(knots=self.bases[j].knots, coef=coef))
        return SplineLink(
            theta, terms, lambda_=lam, weight=weight,
            lambda_grid=grid, gcv_scores=scores,
        )


def fit_spline(bases, X_param, target, weight=1.0, lambda_grid=None):
    """Penalized additive spline fit with GCV-selected smoothing.

    ``bases`` is one :class:`SplineBasis` per feature column (a single basis
    is accepted for one-dimensional features).  The smoothing level enters
    the normal equations as ``lambda / weight`` so that fitting against the
    reduced ``(target, weight)`` pair solves the matrix subproblem; GCV(λ) =
    n * RSS / (n - tr(H))^2 is minimized over the grid.
    """
    if isinstance(bases, SplineBasis):
        bases = [bases]
    X_param = np.asarray(X_param, dtype=float)
    if X_param.ndim == 1:
        X_param = X_param[:, None]
    return SplineDesign(bases, X_param).fit(target, weight, lambda_grid)


# -- kernel ridge ----------------------------------------------------------------------


def _kernel_matrix(X, Y, kernel, bandwidth):
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    if kernel == "linear":
        return X @ Y.T
    if kernel == "rbf":
        sq = (
            np.sum(X**2, axis=1)[:, None]
            + np.sum(Y**2, axis=1)[None, :]
            - 2.0 * X @ Y.T
        )
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * bandwidth**2))
    raise ValueError(f"unknown kernel {kernel!r}")


def median_heuristic_bandwidth(X):
    """Median pairwise distance, the usual default RBF bandwidth."""
    X = np.atleast_2d(X)
    sq = (
        np.sum(X**2, axis=1)[:, None]
        + np.sum(X**2, axis=1)[None, :]
        - 2.0 * X @ X.T
    )
    d = np.sqrt(np.maximum(sq[np.triu_indices_from(sq, k=1)], 0.0))
    d = d[d > 0]
    if d.size == 0:
        raise ValueError("all training points coincide; no usable bandwidth")
    return float(np.median(d))


class KernelDesign:
    """Gram matrix and its Cholesky factor, computed once per feature set."""

    def __init__(self, X, kernel="rbf", bandwidth=None, ridge=0.0):
        self.X = np.asarray(X, dtype=float)
        self.kernel = kernel
        self.ridge = float(ridge)
        if kernel == "rbf" and bandwidth is None:
            bandwidth = median_heuristic_bandwidth(self.X)
        if kernel == "linear" and self.ridge <= 0:
            raise ValueError("linear kernel requires a positive ridge")
        self.bandwidth = bandwidth
        K = _kernel_matrix(self.X, self.X, kernel, bandwidth)
        try:
            self._chol = scipy.linalg.cho_factor(
                K + self.ridge * np.eye(K.shape[0]), lower=True
            )
        except np.linalg.LinAlgError as exc:
            raise ValueError(
                "Gram matrix is not positive definite (bad bandwidth or "
                "duplicated points?)"
            ) from exc

    def fit(self, target):
        dual = scipy.linalg.cho_solve(self._chol, np.asarray(target, dtype=float))
        return KernelRidgeLink(
            self.X, dual, kernel=self.kernel,
            bandwidth=self.bandwidth, ridge=self.ridge,
        )


def fit_kernel_ridge(X, target, kernel="rbf", bandwidth=None, ridge=0.0):
    """Kernel ridge link: dual weights ``(K + ridge I)^{-1} target``."""
    return KernelDesign(X, kernel=kernel, bandwidth=bandwidth, ridge=ridge).fit(target)


def evaluate(link, X_new):
    """Ramp-thresholded link predictions (function form of ``link.evaluate``)."""
    return link.evaluate(X_new)


# -- serialization -----------------------------------------------------------------------


def _link_to_dict(link):
    if link.family == "linear":
        return {"family": "linear", "coefficients": link.coefficients.tolist()}
    if link.family == "spline":
        return {
            "family": "spline",
            "theta": link.theta.tolist(),
            "lambda": link.lambda_,
            "weight": link.weight,
            "terms": [
                {"knots": t.knots.tolist(), "coef": t.coef.tolist()}
                for t in link.terms
            ],
        }
    if link.family == "kernel":
        return {
            "family": "kernel",
            "kernel": link.kernel,
            "bandwidth": link.bandwidth,
            "ridge": link.ridge,
            "dual": link.dual.tolist(),
            "X_train": link.X_train.tolist(),
        }
    raise ValueError(f"cannot serialize link family {link.family!r}")


def _link_from_dict(doc):
    family = doc["family"]
    if family == "linear":
        return LinearLink(doc["coefficients"])
    if family == "spline":
        terms = [
            SplineTerm(knots=np.asarray(t["knots"]), coef=np.asarray(t["coef"]))
            for t in doc["terms"]
        ]
        return SplineLink(
            doc["theta"], terms, lambda_=doc["lambda"], weight=doc["weight"]
        )
    if family == "kernel":
        return KernelRidgeLink(
            doc["X_train"], doc["dual"], kernel=doc["kernel"],
            bandwidth=doc["bandwidth"], ridge=doc["ridge"],
        )
    raise ValueError(f"unknown link family {family!r}")


def save_links(links, path):
    """Serialize a list of fitted links to a JSON file."""
    with open(path, "w") as fh:
        json.dump([_link_to_dict(l) for l in links], fh)


def load_links(path):
    with open(path) as fh:
        return [_link_from_dict(doc) for doc in json.load(fh)]
