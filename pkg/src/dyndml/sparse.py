"""Recursive l1-penalized final stage for high-dimensional blip parameterizations.

Stage ``t`` minimizes ``(1/n) sum (Ybar_t - psi'T_tt)^2 + kappa_t ||psi||_1``,
optionally inside the ball ``||psi||_1 <= radius``. The penalty ``kappa_t`` is
chosen per stage by K-fold cross-validation (default), by a theory-shaped
schedule, or fixed by the caller.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import _kernels
from .errors import ConstraintError, ConvergenceError, ValidationError
from .gestimate import calibrated_outcomes
from .residualize import ResidualSet

__all__ = ["SparseOptions", "SparseEstimate", "fit_sparse", "stage_kappa_max", "stage_kkt_violation",
           "theory_schedule"]

SCHEDULES = ("cv", "theory", "fixed")


@dataclass(frozen=True)
class SparseOptions:
    """Penalty schedule and constraint settings.

    Attributes:
        schedule: ``cv``, ``theory`` or ``fixed``.
        kappas: per-period penalties for ``fixed`` (index ``t - 1``), or a scalar.
        radius: l1-ball radius; ``inf`` means pure penalty.
        c0, zeta: multiplier and confidence level of the plug-in
            ``delta = c0 * sqrt(log(m r / zeta) / n)``.
        beta: multiplier on the cross-period coupling constants in the theory schedule.
        n_grid, grid_min_ratio: cross-validation grid, as a fraction of the stage maximum.
        folds: cross-validation folds.
    """

    schedule: str = "cv"
    kappas: Optional[tuple] = None
    radius: float = math.inf
    c0: float = 1.0
    zeta: float = 0.05
    beta: float = 1.0
    n_grid: int = 30
    grid_min_ratio: float = 1e-3
    folds: int = 5
    seed: int = 0
    tol: float = 1e-10
    max_iter: int = 100000

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValidationError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.schedule == "fixed" and self.kappas is None:
            raise ValidationError("fixed schedule needs kappas")
        if self.kappas is not None:
            k = np.atleast_1d(np.asarray(self.kappas, dtype=float))
            if np.any(k < 0) or not np.all(np.isfinite(k)):
                raise ValidationError("kappas must be finite and >= 0")
            object.__setattr__(self, "kappas", tuple(k.tolist()))
        if not self.radius > 0:
            raise ValidationError("radius must be > 0")
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")

    def kappa_for(self, t: int, m: int) -> float:
        k = self.kappas
        return float(k[0]) if len(k) == 1 else float(k[t - 1])

    def to_dict(self):
        return {"schedule": self.schedule, "kappas": None if self.kappas is None else list(self.kappas),
                "radius": None if math.isinf(self.radius) else self.radius, "c0": self.c0, "zeta": self.zeta,
                "beta": self.beta, "n_grid": self.n_grid, "grid_min_ratio": self.grid_min_ratio,
                "folds": self.folds, "seed": self.seed}


@dataclass(frozen=True)
class SparseEstimate:
    psi: np.ndarray
    kappas: np.ndarray
    rescaled: tuple
    n_iter: tuple
    options: SparseOptions
    n: int

    @property
    def m(self) -> int:
        return self.psi.shape[0]

    @property
    def supports(self) -> List[np.ndarray]:
        return [np.flatnonzero(row) for row in self.psi]

    def to_dict(self):
        return {
            "method": "sparse",
            "n": self.n,
            "options": self.options.to_dict(),
            "stages": {
                str(t + 1): {
                    "kappa": float(self.kappas[t]),
                    "support": self.supports[t].tolist(),
                    "values": self.psi[t, self.supports[t]].tolist(),
                    "rescaled": bool(self.rescaled[t]),
                    "n_iter": int(self.n_iter[t]),
                }
                for t in range(self.m)
            },
        }


def _moments(T, ybar):
    n = T.shape[0]
    return T.T @ T / n, T.T @ ybar / n


def stage_kappa_max(res: ResidualSet, psi_later: np.ndarray, t: int) -> float:
    """Smallest ``kappa_t`` for which the stage-``t`` solution is exactly zero."""
    _, c = _moments(res.t_resid[(t, t)], calibrated_outcomes(res, psi_later, t))
    return 2.0 * float(np.max(np.abs(c))) if c.size else 0.0


def stage_kkt_violation(G, c, psi_t, kappa) -> float:
    """Largest KKT violation of the stage program, scaled like its gradient."""
    grad = 2.0 * (G @ psi_t - c)
    active = psi_t != 0
    v_act = np.abs(grad[active] + kappa * np.sign(psi_t[active]))
    v_zero = np.maximum(np.abs(grad[~active]) - kappa, 0.0)
    return float(max(v_act.max(initial=0.0), v_zero.max(initial=0.0)))


def _solve(G, c, kappa, opts, beta0=None):
    beta = np.zeros(G.shape[0]) if beta0 is None else beta0.copy()
    weights = np.ones(G.shape[0])
    n_iter, change, ok = _kernels.cd_gram(G, c, kappa / 2.0, weights, beta, opts.tol, opts.max_iter)
    if not ok:
        raise ConvergenceError(f"coordinate descent stopped after {n_iter} sweeps (last change {change:.3g})",
                               last_change=change)
    return beta, n_iter


def theory_schedule(res: ResidualSet, opts: SparseOptions) -> np.ndarray:
    """Scale-free penalty multipliers ``delta * sum_{j=t}^{m} (beta * c_t)^(m - j)``.

    ``delta = c0 * sqrt(log(m r / zeta) / n)`` and ``c_t`` is the largest
    entry of the cross-period blocks ``J_{t,j}``, ``j > t``, relative to the
    largest diagonal entry of ``J_{t,t}``. :func:`fit_sparse` multiplies these
    by the score scale of each stage.
    """
    m, r, n = res.m, res.r, res.n
    delta = opts.c0 * math.sqrt(math.log(m * r / opts.zeta) / n)
    out = np.zeros(m)
    for t in range(1, m + 1):
        Ttt = res.t_resid[(t, t)]
        diag = float(np.max(np.sum(Ttt ** 2, axis=0) / n))
        c_hat = 0.0
        for j in range(t + 1, m + 1):
            c_hat = max(c_hat, float(np.max(np.abs(Ttt.T @ res.t_resid[(t, j)] / n))))
        ratio = opts.beta * (c_hat / diag if diag > 0 else 0.0)
        out[t - 1] = delta * sum(ratio ** (m - j) for j in range(t, m + 1))
    return out


def _score_scale(T, ybar):
    # the squared-loss gradient is 2 T'e / n, of order 2 sd(e) sd(T)
    return 4.0 * float(np.std(ybar)) * float(np.max(np.std(T, axis=0)))


def _cv_kappa(T, ybar, opts, seed):
    n = T.shape[0]
    G, c = _moments(T, ybar)
    kmax = 2.0 * float(np.max(np.abs(c)))
    if kmax == 0:
        return 0.0
    grid = kmax * np.logspace(0, math.log10(opts.grid_min_ratio), opts.n_grid)
    labels = np.random.default_rng(seed).permutation(n) % opts.folds
    err = np.zeros(len(grid))
    weights = np.ones(T.shape[1])
    for f in range(opts.folds):
        tr, te = labels != f, labels == f
        Gf, cf = _moments(T[tr], ybar[tr])
        coefs, _, _ = _kernels.cd_path(Gf, cf, grid / 2.0, weights, None, 1e-7, opts.max_iter)
        resid = ybar[te][:, None] - T[te] @ coefs.T
        err += np.sum(resid ** 2, axis=0)
    best = err.min()
    # ties go to the larger penalty; the grid is descending
    return float(grid[np.flatnonzero(err <= best * (1 + 1e-12))[0]])


def fit_sparse(res: ResidualSet, options: Optional[SparseOptions] = None) -> SparseEstimate:
    """Backward recursion with a lasso solve at every stage.

    Raises:
        ConvergenceError: coordinate descent did not converge.
        ConstraintError: the ball constraint could not be met.
    """
    opts = options or SparseOptions()
    m, r = res.m, res.r
    psi = np.zeros((m, r))
    kappas = np.zeros(m)
    rescaled, iters = [False] * m, [0] * m
    theory = theory_schedule(res, opts) if opts.schedule == "theory" else None
    for t in range(m, 0, -1):
        T = res.t_resid[(t, t)]
        ybar = calibrated_outcomes(res, psi, t)
        if opts.schedule == "fixed":
            kappa = opts.kappa_for(t, m)
        elif opts.schedule == "theory":
            kappa = float(theory[t - 1]) * _score_scale(T, ybar)
        else:
            kappa = _cv_kappa(T, ybar, opts, int(np.random.SeedSequence([opts.seed, t]).generate_state(1)[0]))
        G, c = _moments(T, ybar)
        sol, n_iter = _solve(G, c, kappa, opts)
        l1 = float(np.abs(sol).sum())
        if l1 > opts.radius:
            sol = sol * (opts.radius / l1)
            rescaled[t - 1] = True
            if float(np.abs(sol).sum()) > opts.radius * (1 + 1e-12):
                raise ConstraintError(f"stage {t}: rescaling failed to meet ||psi||_1 <= {opts.radius}")
        psi[t - 1] = sol
        kappas[t - 1] = kappa
        iters[t - 1] = n_iter
    return SparseEstimate(psi, kappas, tuple(rescaled), tuple(iters), opts, res.n)
