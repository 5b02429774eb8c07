"""Heterogeneous effects ``psi_t(x0) = Theta_t' a(x0)`` by recursive square loss.

Each stage regresses the calibrated outcome on the interaction of the
feature map ``a(x0)`` with the stage treatment residual, which is an exact
least-squares solve.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import IdentificationError, ValidationError
from .residualize import ResidualSet

__all__ = ["FeatureMap", "HeteroModel", "fit_dynamic_rlearner", "predict_effect", "stage_gradients"]


@dataclass(frozen=True)
class FeatureMap:
    """``a(x0)``: ``constant`` (1), ``linear`` (1, x0[cols]) or ``polynomial``
    (1 and per-column powers up to ``degree``)."""

    kind: str = "linear"
    columns: Optional[tuple] = None
    degree: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "polynomial"):
            raise ValidationError(f"unknown feature map {self.kind!r}")
        if self.degree < 1:
            raise ValidationError("degree must be >= 1")
        if self.columns is not None:
            object.__setattr__(self, "columns", tuple(int(c) for c in self.columns))

    def __call__(self, x0) -> np.ndarray:
        x0 = np.asarray(x0, dtype=float)
        if x0.ndim == 1:
            x0 = x0[:, None] if self.kind != "constant" else x0.reshape(-1, 1)
        n = x0.shape[0]
        ones = np.ones((n, 1))
        if self.kind == "constant":
            return ones
        cols = list(range(x0.shape[1])) if self.columns is None else list(self.columns)
        base = x0[:, cols]
        if self.kind == "linear":
            return np.hstack([ones, base])
        powers = [base ** p for p in range(1, self.degree + 1)]
        return np.hstack([ones] + powers)

    def dim(self, k_raw: int) -> int:
        if self.kind == "constant":
            return 1
        c = k_raw if self.columns is None else len(self.columns)
        return 1 + c * (1 if self.kind == "linear" else self.degree)

    def to_dict(self):
        return {"kind": self.kind, "columns": None if self.columns is None else list(self.columns),
                "degree": self.degree}


@dataclass(frozen=True)
class HeteroModel:
    """Per-period coefficient matrices ``theta[t - 1]`` of shape (k, r)."""

    theta: np.ndarray
    feature_map: FeatureMap
    n: int
    ridge: float = 0.0

    @property
    def m(self) -> int:
        return self.theta.shape[0]

    def effect(self, x0, t: int) -> np.ndarray:
        """Effects for rows of ``x0``: shape (n, r)."""
        return self.feature_map(x0) @ self.theta[t - 1]

    def to_dict(self):
        return {"feature_map": self.feature_map.to_dict(), "n": self.n, "ridge": self.ridge,
                "theta": {str(t + 1): self.theta[t].tolist() for t in range(self.m)}}


def _interactions(a, T):
    # column kk * r + rr holds a[:, kk] * T[:, rr]
    return (a[:, :, None] * T[:, None, :]).reshape(a.shape[0], -1)


def _calibrated(res: ResidualSet, a, theta, t):
    ybar = res.y_resid[t].copy()
    for j in range(t + 1, res.m + 1):
        psi_j = a @ theta[j - 1]
        ybar -= np.einsum("ir,ir->i", psi_j, res.t_resid[(t, j)])
    return ybar


def fit_dynamic_rlearner(res: ResidualSet, exo_features, feature_map: Optional[FeatureMap] = None,
                         ridge: float = 0.0, eps_sing: Optional[float] = None) -> HeteroModel:
    """Backward recursion over periods with heterogeneous stage effects.

    Earlier-stage effects ``psi_j(x0)`` (``j > t``) are evaluated in-sample on
    the same units.

    Raises:
        IdentificationError: the interaction Gram matrix of a stage is singular.
    """
    feature_map = feature_map or FeatureMap("linear")
    exo = np.asarray(exo_features, dtype=float)
    if exo.ndim == 1:
        exo = exo[:, None]
    if exo.shape[0] != res.n:
        raise ValidationError(f"exo_features has {exo.shape[0]} rows, residuals have {res.n}")
    a = feature_map(exo)
    k, r, n = a.shape[1], res.r, res.n
    if n <= k * r:
        raise ValidationError(f"need n > k * r = {k * r} units, got {n}")
    if ridge > 0:
        warnings.warn(f"rlearner: ridge penalty {ridge:g} added to every stage")
    theta = np.zeros((res.m, k, r))
    for t in range(res.m, 0, -1):
        Z = _interactions(a, res.t_resid[(t, t)])
        G = Z.T @ Z / n
        ybar = _calibrated(res, a, theta, t)
        b = Z.T @ ybar / n
        thresh = eps_sing if eps_sing is not None else 1e-10 * float(np.trace(G)) / G.shape[0]
        min_eig = float(np.linalg.eigvalsh(G)[0])
        if min_eig <= thresh and ridge == 0:
            raise IdentificationError(f"stage {t}: interaction design is singular (min eigenvalue {min_eig:.3g})",
                                      stage=t, min_eigenvalue=min_eig)
        sol = linalg.solve(G + ridge * np.eye(G.shape[0]), b, assume_a="sym")
        theta[t - 1] = sol.reshape(k, r)
    return HeteroModel(theta, feature_map, n, ridge)


def stage_gradients(res: ResidualSet, model: HeteroModel, exo_features) -> np.ndarray:
    """Gradient of each stage's empirical square loss at the fitted coefficients, shape (m, k*r)."""
    a = model.feature_map(np.asarray(exo_features, dtype=float))
    out = []
    for t in range(1, res.m + 1):
        Z = _interactions(a, res.t_resid[(t, t)])
        e = _calibrated(res, a, model.theta, t) - Z @ model.theta[t - 1].reshape(-1)
        out.append(-2 * Z.T @ e / res.n)
    return np.array(out)


def predict_effect(model: HeteroModel, x0, t: int) -> np.ndarray:
    """``Theta_t' a(x0)`` for one exogenous vector ``x0``; shape (r,)."""
    if not 1 <= t <= model.m:
        raise ValidationError(f"t must lie in 1..{model.m}")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).reshape(1, -1)
    a = model.feature_map(x0)
    if a.shape[1] != model.theta.shape[1]:
        raise ValidationError(f"x0 gives {a.shape[1]} features but the model has {model.theta.shape[1]}")
    return (a @ model.theta[t - 1])[0]
