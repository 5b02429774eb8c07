"""Final stage: backward peeling, sandwich covariance and confidence intervals.

Parameters are stacked period by period: ``psi[t - 1]`` is the effect of
the period-``t`` treatment on the final outcome, and linear functionals
``nu`` have length ``m * r`` in the same order.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy import linalg, special
from scipy.optimize import brentq

from .errors import ConstraintError, IdentificationError, NumericalError, ValidationError
from .residualize import ResidualSet

__all__ = [
    "StructuralEstimate",
    "Diagnostics",
    "PolicyValue",
    "peel",
    "calibrated_outcomes",
    "stage_moments",
    "estimate_covariance",
    "confidence_interval",
    "normal_quantile",
    "policy_value_static",
    "diagnostics",
    "fit_dyndml",
]


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"probability must lie in [0, 1], got {p}")
    return float(special.ndtri(p))


# ---------------------------------------------------------------------------
# Peeling


def _stage_design(res: ResidualSet, t: int):
    Ttt = res.t_resid[(t, t)]
    return Ttt.T @ Ttt / res.n, Ttt


def calibrated_outcomes(res: ResidualSet, psi: np.ndarray, t: int) -> np.ndarray:
    """``Ybar_t = Ytilde_t - sum_{j>t} psi_j' Ttilde_{j,t}``."""
    out = res.y_resid[t].copy()
    for j in range(t + 1, res.m + 1):
        out -= res.t_resid[(t, j)] @ psi[j - 1]
    return out


def _ball_solve(G, b, radius):
    """argmin over ||x||_2 <= radius of ``x'Gx - 2 b'x`` (trust-region subproblem)."""
    w, U = np.linalg.eigh(G)
    beta = U.T @ b
    pos = w > 0

    def norm_at(nu):
        return math.sqrt(float(np.sum((beta / (w + nu)) ** 2)))

    if np.all(pos):
        x = U @ (beta / w)
        if np.linalg.norm(x) <= radius:
            return x, 0.0
    lo = max(0.0, -w.min()) + 1e-15
    if norm_at(lo) <= radius:
        # degenerate direction with zero gradient: any norm-filling point is optimal
        x = U @ (beta / (w + lo))
        return x, lo
    hi = lo + max(1.0, np.abs(beta).sum() / radius)
    while norm_at(hi) > radius:
        hi *= 2
    nu = brentq(lambda v: norm_at(v) - radius, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=500)
    return U @ (beta / (w + nu)), nu


def peel(res: ResidualSet, mode: str = "linear_system", radius: Optional[float] = None,
         ridge: float = 0.0, eps_sing: Optional[float] = None, info: Optional[dict] = None) -> np.ndarray:
    """Backward recursion ``t = m, ..., 1`` solving each stage's moment equation.

    Args:
        mode: ``"linear_system"`` solves the stage normal equations exactly;
            ``"constrained"`` minimizes the stage square loss within the
            l2-ball of ``radius``.
        ridge: optional explicit ``ridge * I`` added to each stage matrix.
            It biases the estimate and is reported with a warning.
        eps_sing: singularity threshold; default ``1e-10 * trace / r``.
        info: optional dict that receives per-stage solver details.

    Returns:
        Array of shape ``(m, r)`` with row ``t - 1`` holding the period-``t`` effect.

    Raises:
        IdentificationError: a stage matrix has minimum eigenvalue below ``eps_sing``.
    """
    if mode not in ("linear_system", "constrained"):
        raise ValidationError(f"unknown peel mode {mode!r}")
    if mode == "constrained" and (radius is None or radius <= 0):
        raise ValidationError("constrained mode needs a positive radius")
    if ridge < 0:
        raise ValidationError("ridge must be >= 0")
    if ridge > 0:
        warnings.warn(f"peel: adding ridge {ridge:g} * I to every stage matrix; the covariance formulas "
                      "no longer describe this estimator exactly")
    m, r = res.m, res.r
    psi = np.zeros((m, r))
    stages = {}
    for t in range(m, 0, -1):
        G, Ttt = _stage_design(res, t)
        ybar = calibrated_outcomes(res, psi, t)
        b = Ttt.T @ ybar / res.n
        tr = float(np.trace(G))
        thresh = eps_sing if eps_sing is not None else 1e-10 * tr / r
        min_eig = float(np.linalg.eigvalsh(G)[0]) if r > 0 else 0.0
        if min_eig <= thresh and ridge == 0:
            raise IdentificationError(
                f"stage {t}: treatment residual second-moment matrix is singular "
                f"(min eigenvalue {min_eig:.3g} <= {thresh:.3g})", stage=t, min_eigenvalue=min_eig)
        Gs = G + ridge * np.eye(r)
        if mode == "linear_system":
            psi[t - 1] = linalg.solve(Gs, b, assume_a="sym")
            stages[t] = {"min_eigenvalue": min_eig, "multiplier": 0.0}
        else:
            x, nu = _ball_solve(Gs, b, radius)
            if np.linalg.norm(x) > radius * (1 + 1e-8):
                raise ConstraintError(f"stage {t}: could not satisfy ||psi|| <= {radius}")
            psi[t - 1] = x
            stages[t] = {"min_eigenvalue": min_eig, "multiplier": float(nu), "active": nu > 0}
    if info is not None:
        info.update({"mode": mode, "ridge": ridge, "stages": stages})
    return psi


def stage_moments(res: ResidualSet, psi: np.ndarray) -> np.ndarray:
    """Empirical stage moments ``(1/n) sum (Ybar_t - psi_t'Ttilde_tt) Ttilde_tt``, shape (m, r)."""
    out = np.zeros((res.m, res.r))
    for t in range(1, res.m + 1):
        Ttt = res.t_resid[(t, t)]
        e = calibrated_outcomes(res, psi, t) - Ttt @ psi[t - 1]
        out[t - 1] = Ttt.T @ e / res.n
    return out


# ---------------------------------------------------------------------------
# Covariance and inference


@dataclass(frozen=True)
class Diagnostics:
    """Empirical conditioning constants of the peeling recursion."""

    lambda_hat: float
    kappa_hat: float
    condition_numbers: tuple
    exponential_regime: bool

    def to_dict(self):
        return {
            "lambda_hat": self.lambda_hat,
            "kappa_hat": self.kappa_hat if math.isfinite(self.kappa_hat) else None,
            "condition_numbers": list(self.condition_numbers),
            "exponential_regime": self.exponential_regime,
        }


@dataclass(frozen=True)
class StructuralEstimate:
    """Point estimates with the sandwich covariance ``V = J^-1 Sigma J^-T``."""

    psi: np.ndarray
    J: np.ndarray
    Sigma: np.ndarray
    V: np.ndarray
    n: int
    method: str = "dyndml"
    diagnostics: Optional[Diagnostics] = None
    extras: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.psi.shape[0]

    @property
    def r(self) -> int:
        return self.psi.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.psi.reshape(-1)

    def stderr(self) -> np.ndarray:
        """Standard error of every stacked coordinate, ``sqrt(diag(V) / n)``."""
        return np.sqrt(np.clip(np.diag(self.V), 0, None) / self.n).reshape(self.m, self.r)

    def intervals(self, alpha: float = 0.05) -> np.ndarray:
        """Marginal intervals, shape (m, r, 2)."""
        z = normal_quantile(1 - alpha / 2) if alpha < 1 else 0.0
        se = self.stderr()
        return np.stack([self.psi - z * se, self.psi + z * se], axis=-1)

    def to_dict(self, alpha: float = 0.05):
        ci = self.intervals(alpha)
        out = {
            "method": self.method,
            "n": int(self.n),
            "m": self.m,
            "r": self.r,
            "psi": {str(t + 1): self.psi[t].tolist() for t in range(self.m)},
            "stderr": {str(t + 1): self.stderr()[t].tolist() for t in range(self.m)},
            "ci": {str(t + 1): ci[t].tolist() for t in range(self.m)},
            "alpha": alpha,
            "V": self.V.tolist(),
        }
        if self.diagnostics is not None:
            out["diagnostics"] = self.diagnostics.to_dict()
        if self.extras:
            out["extras"] = self.extras
        return out


def _blocks(res: ResidualSet, psi):
    m, r, n = res.m, res.r, res.n
    J = np.zeros((m * r, m * r))
    scores = np.zeros((n, m * r))
    for t in range(1, m + 1):
        Ttt = res.t_resid[(t, t)]
        for j in range(t, m + 1):
            J[(t - 1) * r: t * r, (j - 1) * r: j * r] = Ttt.T @ res.t_resid[(t, j)] / n
        e = calibrated_outcomes(res, psi, t) - Ttt @ psi[t - 1]
        scores[:, (t - 1) * r: t * r] = e[:, None] * Ttt
    return J, scores


def sandwich(J: np.ndarray, Sigma: np.ndarray) -> np.ndarray:
    """``J^-1 Sigma J^-T`` after checking that ``J`` is invertible."""
    if J.size == 0:
        return np.zeros_like(J)
    sv = np.linalg.svd(J, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1e-300):
        raise NumericalError(f"J is numerically singular (min singular value {sv[-1]:.3g})")
    Jinv = np.linalg.inv(J)
    V = Jinv @ Sigma @ Jinv.T
    return (V + V.T) / 2


def estimate_covariance(res: ResidualSet, psi: np.ndarray, method: str = "dyndml",
                        with_diagnostics: bool = True) -> StructuralEstimate:
    """Fill ``J``, ``Sigma`` and ``V`` from the residuals and the peeled estimate.

    ``J[t, j] = 1{j >= t} mean(Ttilde_tt Ttilde_jt')`` and
    ``Sigma[t, j] = mean(e_t e_j Ttilde_tt Ttilde_jj')`` with final-stage
    residuals ``e_t = Ybar_t - psi_t'Ttilde_tt``.
    """
    psi = np.asarray(psi, dtype=float).reshape(res.m, res.r)
    J, scores = _blocks(res, psi)
    Sigma = scores.T @ scores / res.n
    Sigma = (Sigma + Sigma.T) / 2
    V = sandwich(J, Sigma)
    diag = diagnostics(res) if with_diagnostics else None
    return StructuralEstimate(psi, J, Sigma, V, res.n, method, diag)


def confidence_interval(est: StructuralEstimate, nu, alpha: float = 0.05):
    """Interval ``nu'psi +/- z_{1-alpha/2} sqrt(nu'V nu / n)``.

    Raises:
        NumericalError: ``nu'V nu`` is negative beyond round-off.
    """
    nu = np.asarray(nu, dtype=float).reshape(-1)
    if nu.shape[0] != est.V.shape[0]:
        raise ValidationError(f"nu has length {nu.shape[0]}, expected {est.V.shape[0]}")
    if not 0 < alpha <= 1:
        raise ValidationError("alpha must lie in (0, 1]")
    center = float(nu @ est.flat)
    var = float(nu @ est.V @ nu)
    scale = float(np.abs(np.diag(est.V)).sum() * (nu @ nu)) or 1.0
    if var < -1e-8 * scale:
        raise NumericalError(f"nu'V nu = {var:.3g} is negative")
    z = normal_quantile(1 - alpha / 2) if alpha < 1 else 0.0
    half = z * math.sqrt(max(var, 0.0) / est.n)
    return center - half, center + half


@dataclass(frozen=True)
class PolicyValue:
    value: float
    lo: float
    hi: float
    stderr: float

    def to_dict(self):
        return {"value": self.value, "ci": [self.lo, self.hi], "stderr": self.stderr}


def policy_value_static(est: StructuralEstimate, tau, alpha: float = 0.05) -> PolicyValue:
    """Value ``sum_t psi_t'tau_t`` of a fixed treatment sequence, relative to all-zero."""
    tau = np.asarray(tau, dtype=float)
    if tau.ndim == 1:
        tau = tau[:, None] if est.r == 1 else tau[None, :]
    if tau.shape != est.psi.shape:
        raise ValidationError(f"tau has shape {tau.shape}, expected {est.psi.shape}")
    nu = tau.reshape(-1)
    lo, hi = confidence_interval(est, nu, alpha)
    se = math.sqrt(max(float(nu @ est.V @ nu), 0.0) / est.n)
    return PolicyValue(float(nu @ est.flat), lo, hi, se)


def diagnostics(res: ResidualSet) -> Diagnostics:
    """Empirical ``lambda_hat``, ``kappa_hat`` and per-stage condition numbers.

    ``lambda_hat`` is the smallest eigenvalue of any stage matrix ``J_tt``;
    ``kappa_hat = max_t (2 / lambda_hat) sum_{j>t} ||J_tj||_op``. A value
    above one means estimation errors can grow exponentially along the
    recursion.
    """
    m, n = res.m, res.n
    eigs, conds, cross = [], [], []
    for t in range(1, m + 1):
        Ttt = res.t_resid[(t, t)]
        w = np.linalg.eigvalsh(Ttt.T @ Ttt / n)
        eigs.append(float(w[0]))
        conds.append(float(w[-1] / w[0]) if w[0] > 0 else math.inf)
        total = 0.0
        for j in range(t + 1, m + 1):
            total += float(np.linalg.norm(Ttt.T @ res.t_resid[(t, j)] / n, 2))
        cross.append(total)
    lam = min(eigs)
    if max(cross) == 0:
        kappa = 0.0
    elif lam > 0:
        kappa = 2 * max(cross) / lam
    else:
        kappa = math.inf
    return Diagnostics(lam, kappa, tuple(conds), kappa > 1)


def fit_dyndml(panel, learner=None, split=None, featurizer=None, mode: str = "linear_system",
               radius: Optional[float] = None, seed: int = 0, folds: int = 2) -> StructuralEstimate:
    """Residualize, peel and estimate the covariance in one call."""
    from .data import split as make_split
    from .residualize import residualize_markov

    split = split or make_split(panel, seed, folds)
    res = residualize_markov(panel, learner, split, featurizer)
    info: Dict = {}
    psi = peel(res, mode=mode, radius=radius, info=info)
    est = estimate_covariance(res, psi)
    return StructuralEstimate(est.psi, est.J, est.Sigma, est.V, est.n, "dyndml", est.diagnostics,
                              {"peel": {"mode": mode}, "warnings": list(res.warnings)})
