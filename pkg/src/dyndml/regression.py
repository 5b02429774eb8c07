"""Linear nuisance learners: OLS, ridge and lasso (coordinate descent).

All learners center features and target internally and report coefficients
on the original scale. The lasso objective is
``(1/2N) ||y - X b||^2 + lam * sum_j w_j |b_j|`` with unit weights unless a
caller leaves some coordinates unpenalized.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np

from . import _kernels
from .errors import ConvergenceError, ValidationError

__all__ = [
    "LinearModel",
    "LearnerSpec",
    "fit_ols",
    "fit_ridge",
    "fit_lasso",
    "fit",
    "fit_targets",
    "select_lambda",
    "lambda_max",
    "lambda_grid",
    "kkt_violation",
    "lasso_objective",
]

KINDS = ("auto", "ols", "ridge", "lasso", "zero")
SELECTIONS = ("fixed", "cv", "plugin")


@dataclass(frozen=True)
class LinearModel:
    """Fitted affine predictor ``x -> x @ coef + intercept``."""

    coef: np.ndarray
    intercept: float = 0.0
    lam: float = 0.0
    kind: str = "ols"
    rank_deficient: bool = False
    n_iter: int = 0

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.coef.size == 0:
            return np.full(X.shape[0], self.intercept)
        return X @ self.coef + self.intercept

    def to_dict(self):
        return {
            "kind": self.kind,
            "coef": self.coef.tolist(),
            "intercept": float(self.intercept),
            "lambda": float(self.lam),
            "rank_deficient": bool(self.rank_deficient),
            "n_iter": int(self.n_iter),
        }


@dataclass(frozen=True)
class LearnerSpec:
    """How to fit one nuisance regression.

    ``kind="auto"`` uses OLS when the feature count is below
    ``ols_ratio * N`` and cross-validated lasso otherwise. Cross-validation
    paths run at the looser ``cv_tol`` and stop after ``cv_patience`` grid
    points without a new validation minimum; the refit at the chosen
    penalty always runs at ``tol``.
    """

    kind: str = "auto"
    selection: str = "cv"
    lam: float = 0.0
    grid: Optional[tuple] = None
    n_grid: int = 50
    grid_min_ratio: float = 1e-4
    cv_folds: int = 5
    plugin_c: float = 1.0
    tol: float = 1e-7
    max_iter: int = 10000
    fit_intercept: bool = True
    ols_ratio: float = 0.25
    cv_patience: Optional[int] = 5
    cv_tol: Optional[float] = 1e-5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        if self.selection not in SELECTIONS:
            raise ValidationError(f"unknown lambda selection {self.selection!r}")
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.grid is not None:
            grid = tuple(float(g) for g in self.grid)
            if not grid:
                raise ValidationError("lambda grid is empty")
            if any(g <= 0 for g in grid):
                raise ValidationError("lambda grid values must be positive")
            object.__setattr__(self, "grid", grid)
        if self.cv_folds < 2:
            raise ValidationError("cv_folds must be >= 2")
        if self.cv_patience is not None and self.cv_patience < 1:
            raise ValidationError("cv_patience must be >= 1 or None")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValidationError("tol must be positive and max_iter >= 1")

    def resolve(self, n_samples: int, n_features: int) -> "LearnerSpec":
        """Replace ``auto`` by the concrete learner for this problem size."""
        if self.kind != "auto":
            return self
        kind = "ols" if n_features < self.ols_ratio * n_samples else "lasso"
        return LearnerSpec(**{**self.to_dict(), "kind": kind})

    def to_dict(self):
        out = asdict(self)
        if self.grid is not None:
            out["grid"] = list(self.grid)
        return out

    @classmethod
    def from_dict(cls, payload):
        payload = dict(payload or {})
        if payload.get("grid") is not None:
            payload["grid"] = tuple(payload["grid"])
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown learner field(s): {sorted(unknown)}")
        return cls(**payload)


def _as_xy(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.shape[0]:
        raise ValidationError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if X.shape[0] < 1:
        raise ValidationError("need at least one sample")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValidationError("X and y must be finite")
    return X, y


def _center(X, y, fit_intercept):
    if not fit_intercept:
        return X, y, np.zeros(X.shape[1]), 0.0
    xm = X.mean(axis=0)
    ym = y.mean(axis=0)
    return X - xm, y - ym, xm, ym


def fit_ols(X, y, fit_intercept: bool = True) -> LinearModel:
    """Least squares; minimum-norm solution when ``X'X`` is singular."""
    X, y = _as_xy(X, y)
    Xc, yc, xm, ym = _center(X, y, fit_intercept)
    q = X.shape[1]
    if q == 0:
        return LinearModel(np.zeros(0), float(ym), 0.0, "ols")
    coef, _, rank, _ = np.linalg.lstsq(Xc, yc, rcond=None)
    return LinearModel(coef, float(ym - xm @ coef), 0.0, "ols", rank_deficient=bool(rank < q))


def fit_ridge(X, y, lam: float, fit_intercept: bool = True) -> LinearModel:
    """Minimizes ``(1/2N)||y - Xb||^2 + (lam/2)||b||^2``."""
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    X, y = _as_xy(X, y)
    Xc, yc, xm, ym = _center(X, y, fit_intercept)
    N, q = Xc.shape
    if q == 0:
        return LinearModel(np.zeros(0), float(ym), lam, "ridge")
    G = Xc.T @ Xc / N + lam * np.eye(q)
    coef = np.linalg.lstsq(G, Xc.T @ yc / N, rcond=None)[0]
    return LinearModel(coef, float(ym - xm @ coef), lam, "ridge")


def _lasso_gram(G, c, lam, weights, tol, max_iter, beta=None):
    q = G.shape[0]
    beta = np.zeros(q) if beta is None else np.array(beta, dtype=float)
    n_iter, change, converged = _kernels.cd_gram(G, c, lam, weights, beta, tol, max_iter)
    if not converged:
        raise ConvergenceError(
            f"lasso did not converge in {max_iter} sweeps (last max coefficient change {change:.3g})",
            last_change=change,
        )
    return beta, n_iter


def fit_lasso(X, y, lam: float, tol: float = 1e-7, max_iter: int = 10000,
              weights=None, fit_intercept: bool = True) -> LinearModel:
    """Coordinate-descent lasso.

    Args:
        weights: optional per-coefficient penalty multipliers; 0 leaves a
            coefficient unpenalized.

    Raises:
        ConvergenceError: if ``max_iter`` sweeps do not reach ``tol``.
    """
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    X, y = _as_xy(X, y)
    Xc, yc, xm, ym = _center(X, y, fit_intercept)
    N, q = Xc.shape
    if q == 0:
        return LinearModel(np.zeros(0), float(ym), lam, "lasso")
    w = np.ones(q) if weights is None else np.asarray(weights, dtype=float)
    G = Xc.T @ Xc / N
    c = Xc.T @ yc / N
    beta, n_iter = _lasso_gram(G, c, lam, w, tol, max_iter)
    return LinearModel(beta, float(ym - xm @ beta), lam, "lasso", n_iter=n_iter)


def lasso_objective(X, y, model: LinearModel, weights=None) -> float:
    X, y = _as_xy(X, y)
    r = y - model.predict(X)
    w = np.ones(X.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    return float(r @ r / (2 * len(y)) + model.lam * np.sum(w * np.abs(model.coef)))


def kkt_violation(X, y, model: LinearModel, weights=None) -> float:
    """Largest violation of the lasso optimality conditions for ``model``.

    Active ``j``: ``|X_j'r/N - lam w_j sign(b_j)|``; inactive ``j``: excess of
    ``|X_j'r/N|`` over ``lam w_j``. Residuals use the fitted intercept.
    """
    X, y = _as_xy(X, y)
    r = y - model.predict(X)
    Xc = X - X.mean(axis=0)
    g = Xc.T @ r / len(y)
    w = np.ones(X.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    thr = model.lam * w
    active = model.coef != 0
    viol = np.where(active, np.abs(g - thr * np.sign(model.coef)), np.maximum(np.abs(g) - thr, 0.0))
    return float(viol.max()) if viol.size else 0.0


def lambda_max(X, y, weights=None) -> float:
    """Smallest lambda giving an all-zero lasso solution (centered data)."""
    X, y = _as_xy(X, y)
    Xc, yc, _, _ = _center(X, y, True)
    g = np.abs(Xc.T @ yc) / len(y)
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        g = np.where(w > 0, g / np.where(w > 0, w, 1.0), 0.0)
    return float(g.max()) if g.size else 0.0


def lambda_grid(lam_max: float, n_grid: int = 50, min_ratio: float = 1e-4) -> np.ndarray:
    """Descending log-spaced grid ``lam_max * [1, ..., min_ratio]``."""
    return lam_max * np.logspace(0.0, math.log10(min_ratio), n_grid)


# ---------------------------------------------------------------------------
# Cross-validation on shared Gram sums


class _FoldSums:
    """Per-fold raw moment sums of globally pre-centered features.

    Training-set Gram matrices for every CV fold are obtained as
    "total minus held-out fold" without touching the rows again.
    """

    def __init__(self, X, folds, n_folds):
        self.xbar = X.mean(axis=0)
        self.Xc = X - self.xbar
        self.folds = folds
        self.n_folds = n_folds
        self.idx = [np.flatnonzero(folds == k) for k in range(n_folds)]
        self.Sxx = [self.Xc[i].T @ self.Xc[i] for i in self.idx]
        self.sx = [self.Xc[i].sum(axis=0) for i in self.idx]
        self.Sxx_all = sum(self.Sxx)
        self.N = X.shape[0]

    def train_gram(self, k):
        Nk = self.N - len(self.idx[k])
        sx = -self.sx[k]  # total sum of Xc is zero
        mx = sx / Nk
        G = (self.Sxx_all - self.Sxx[k]) / Nk - np.outer(mx, mx)
        return G, mx, Nk


def _path(G, c, yy, grid, weights, tol, max_iter, n_train, val=None, patience=None):
    """Warm-started lasso path with early termination.

    Stops when the training fit explains more than 99.9% of the variance,
    when the explained fraction improves by less than 1e-5 (relative), when
    the active set reaches ``n_train - 1`` or when a point fails to converge.
    With ``val = (X_val, y_val)`` and ``patience``, it also stops after
    ``patience`` consecutive points without a new minimum of the validation
    error. Returns ``(coefs, val_sse)`` for the points actually computed.
    """
    q = G.shape[0]
    beta = np.zeros(q)
    out, errs = [], []
    prev = 0.0
    best, since_best = np.inf, 0
    for lam in grid:
        _, _, converged = _kernels.cd_gram(G, c, float(lam), weights, beta, tol, max_iter)
        if not converged:
            break
        out.append(beta.copy())
        if val is not None:
            r = val[1] - val[0] @ beta
            err = float(r @ r)
            errs.append(err)
            if err < best:
                best, since_best = err, 0
            else:
                since_best += 1
            if patience is not None and since_best >= patience:
                break
        if yy <= 0:
            break
        rss = yy - 2 * float(c @ beta) + float(beta @ G @ beta)
        frac = 1.0 - rss / yy
        if frac > 0.999 or (len(out) > 1 and frac - prev < 1e-5 * max(frac, 1e-300)) \
                or np.count_nonzero(beta) >= n_train - 1:
            break
        prev = frac
    return np.array(out).reshape(len(out), q), np.array(errs)


def _cv_errors(sums: _FoldSums, Y, grids, weights, spec):
    """Out-of-fold MSE for every target column and grid point, shape (K, L).

    Grid points past a fold's early-termination point get infinite error.
    """
    K = Y.shape[1]
    L = grids.shape[1]
    sse = np.zeros((K, L))
    for k in range(sums.n_folds):
        G, mx, Nk = sums.train_gram(k)
        test = sums.idx[k]
        train_mask = sums.folds != k
        Xtest = sums.Xc[test] - mx
        Ytr = Y[train_mask]
        ym = Ytr.mean(axis=0)
        Yc = Ytr - ym
        Ctr = (sums.Xc[train_mask] - mx).T @ Yc / Nk
        yy = np.einsum("ij,ij->j", Yc, Yc) / Nk
        for col in range(K):
            tol = spec.cv_tol if spec.cv_tol is not None else spec.tol
            _, errs = _path(G, Ctr[:, col], yy[col], grids[col], weights, tol, spec.max_iter, Nk,
                            (Xtest, Y[test, col] - ym[col]), spec.cv_patience)
            sse[col, : len(errs)] += errs
            sse[col, len(errs):] = np.inf
    return sse / sums.N


def _choose(errors, grid):
    best = errors.min()
    ok = np.flatnonzero(errors <= best * (1 + 1e-12) + 1e-300)
    # grid is descending: the first qualifying entry is the largest lambda
    i = ok[np.argmax(grid[ok])]
    return float(grid[i]), int(i)


def _cv_folds(N, n_folds, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(N)
    folds = np.empty(N, dtype=np.int64)
    folds[perm] = np.arange(N) % n_folds
    return folds


def select_lambda(X, y, spec: LearnerSpec, seed=0, weights=None) -> float:
    """Pick the lasso penalty per ``spec.selection``.

    ``plugin``: ``c * sd(y) * sqrt(log q / N)``. ``cv``: grid value with the
    smallest K-fold out-of-fold MSE; ties go to the larger lambda.
    """
    X, y = _as_xy(X, y)
    N, q = X.shape
    if spec.selection == "fixed":
        return float(spec.lam)
    if spec.selection == "plugin":
        sd = float(np.std(y))
        return float(spec.plugin_c * sd * math.sqrt(max(math.log(q), 0.0) / N)) if q > 0 else 0.0
    w = np.ones(q) if weights is None else np.asarray(weights, dtype=float)
    if spec.grid is not None:
        grid = np.sort(np.asarray(spec.grid, dtype=float))[::-1]
    else:
        lmax = lambda_max(X, y, w)
        if lmax <= 0:
            return 0.0
        grid = lambda_grid(lmax, spec.n_grid, spec.grid_min_ratio)
    if len(grid) == 0:
        raise ValidationError("lambda grid is empty")
    n_folds = min(spec.cv_folds, N)
    if n_folds < 2:
        raise ValidationError("need at least 2 samples for cross-validation")
    sums = _FoldSums(X, _cv_folds(N, n_folds, seed), n_folds)
    errors = _cv_errors(sums, y[:, None], grid[None, :], w, spec)[0]
    return _choose(errors, grid)[0]


def fit(X, y, spec: LearnerSpec, seed=0, weights=None) -> LinearModel:
    """Fit one target with the learner described by ``spec``."""
    return fit_targets(X, np.asarray(y, dtype=float)[:, None], spec, seed, weights)[0]


def fit_targets(X, Y, spec: LearnerSpec, seed=0, weights=None) -> List[LinearModel]:
    """Fit every column of ``Y`` on the same design, reusing the Gram matrix.

    CV fold assignments are shared across targets; each target picks its own
    penalty.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    _as_xy(X, Y)
    N, q = X.shape
    K = Y.shape[1]
    spec = spec.resolve(N, q)
    if spec.kind == "zero":
        return [LinearModel(np.zeros(q), 0.0, 0.0, "zero") for _ in range(K)]
    if spec.kind == "ols" or q == 0:
        Xc, _, xm, _ = _center(X, Y[:, 0], spec.fit_intercept)
        ym = Y.mean(axis=0) if spec.fit_intercept else np.zeros(K)
        if q == 0:
            return [LinearModel(np.zeros(0), float(ym[c]), 0.0, "ols") for c in range(K)]
        coefs, _, rank, _ = np.linalg.lstsq(Xc, Y - ym, rcond=None)
        return [LinearModel(coefs[:, c], float(ym[c] - xm @ coefs[:, c]), 0.0, "ols",
                            rank_deficient=bool(rank < q)) for c in range(K)]
    if spec.kind == "ridge":
        return [fit_ridge(X, Y[:, c], spec.lam, spec.fit_intercept) for c in range(K)]

    w = np.ones(q) if weights is None else np.asarray(weights, dtype=float)
    xm = X.mean(axis=0)
    Xc = X - xm
    ym = Y.mean(axis=0)
    Yc = Y - ym
    G = Xc.T @ Xc / N
    C = Xc.T @ Yc / N
    lams = np.zeros(K)
    grids = None
    if spec.selection == "fixed":
        lams[:] = spec.lam
    elif spec.selection == "plugin":
        lams[:] = [select_lambda(X, Y[:, c], spec, seed, w) for c in range(K)]
    else:
        scaled = np.abs(C) / np.where(w > 0, w, np.inf)[:, None]
        lmaxes = scaled.max(axis=0)
        if spec.grid is not None:
            base = np.sort(np.asarray(spec.grid, dtype=float))[::-1]
            grids = np.tile(base, (K, 1))
        else:
            grids = np.stack([lambda_grid(lm, spec.n_grid, spec.grid_min_ratio) for lm in lmaxes])
        n_folds = min(spec.cv_folds, N)
        live = lmaxes > 0 if spec.grid is None else np.ones(K, dtype=bool)
        if live.any():
            sums = _FoldSums(X, _cv_folds(N, n_folds, seed), n_folds)
            errs = np.zeros((K, grids.shape[1]))
            errs[live] = _cv_errors(sums, Y[:, live], grids[live], w, spec)
        for c in range(K):
            lams[c] = _choose(errs[c], grids[c])[0] if live[c] else 0.0
    models = []
    for c in range(K):
        if not np.any(Yc[:, c]):
            models.append(LinearModel(np.zeros(q), float(ym[c]), float(lams[c]), "lasso"))
            continue
        if grids is not None:
            path = grids[c][grids[c] >= lams[c]]
            beta = np.zeros(q)
            n_iter = 0
            for lam in path:
                it, change, conv = _kernels.cd_gram(G, C[:, c], float(lam), w, beta, spec.tol, spec.max_iter)
                n_iter += it
            if not conv:
                raise ConvergenceError(f"lasso did not converge at lambda={lams[c]:.3g} "
                                       f"(last max coefficient change {change:.3g})", last_change=change)
        else:
            beta, n_iter = _lasso_gram(G, C[:, c], lams[c], w, spec.tol, spec.max_iter)
        models.append(LinearModel(beta, float(ym[c] - xm @ beta), float(lams[c]), "lasso", n_iter=n_iter))
    return models
