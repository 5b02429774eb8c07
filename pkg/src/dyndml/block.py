"""Dynamic effects from one long time series.

The series is cut into ``B`` blocks of ``m`` periods. Nuisances for block
``b`` are trained only on blocks ``1..b-1``; the moment sums run over the
second half ``b = B/2..B`` (1-indexed), so each block's residuals depend on
the past alone.

Lag ``k`` effects are reported as ``theta[k] = psi_{m-k}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import SingleSeries
from .errors import ValidationError
from .gestimate import StructuralEstimate, _blocks, peel, sandwich
from .regression import LearnerSpec, fit_targets
from .residualize import HistoryFeaturizer, ResidualSet, stage_seed

__all__ = ["BlockEstimate", "fit_block", "check_progressive", "discounted_value", "evaluation_blocks"]


def evaluation_blocks(n_blocks: int) -> np.ndarray:
    """0-based indices of the blocks entering the moment sums."""
    return np.arange(n_blocks // 2 - 1, n_blocks)


@dataclass(frozen=True)
class BlockEstimate:
    estimate: StructuralEstimate
    n_blocks: int
    eval_blocks: np.ndarray
    residuals: ResidualSet = field(repr=False)

    @property
    def psi(self) -> np.ndarray:
        return self.estimate.psi

    @property
    def theta(self) -> np.ndarray:
        """Row ``k`` is the lag-``k`` effect ``psi_{m-k}``."""
        return self.estimate.psi[::-1].copy()

    @property
    def m(self) -> int:
        return self.estimate.m

    def stderr(self):
        return self.estimate.stderr()

    def to_dict(self, alpha: float = 0.05):
        out = self.estimate.to_dict(alpha)
        out["n_blocks"] = self.n_blocks
        out["eval_blocks"] = [int(self.eval_blocks[0]) + 1, int(self.eval_blocks[-1]) + 1]
        out["theta"] = {str(k): self.theta[k].tolist() for k in range(self.m)}
        return out


def fit_block(series: SingleSeries, learner: Optional[LearnerSpec] = None,
              featurizer: Optional[HistoryFeaturizer] = None, seed: int = 0,
              ridge: float = 0.0) -> BlockEstimate:
    """Progressive nuisance fitting, peeling and a block-diagonal covariance.

    ``Sigma`` keeps only the within-period blocks ``mean(e_t^2 T_tt T_tt')``:
    across periods the block scores are martingale increments.

    Raises:
        IdentificationError: a stage design is singular.
    """
    learner = learner or LearnerSpec()
    featurizer = featurizer or HistoryFeaturizer("markov")
    panel = series.as_blocks()
    B, m, d = panel.n, panel.m, panel.d
    if B < 4:
        raise ValidationError(f"need at least 4 blocks, got {B}")
    ev = evaluation_blocks(B)
    y = panel.final_outcome
    y_res, t_res, records = {}, {}, []
    for t in range(1, m + 1):
        F = featurizer(panel, t)
        targets = np.column_stack([y] + [panel.T(j) for j in range(t, m + 1)])
        resid = np.empty((len(ev), targets.shape[1]))
        for i, b in enumerate(ev):
            train = np.arange(b)
            models = fit_targets(F[train], targets[train], learner, stage_seed(seed, t, int(b)))
            resid[i] = targets[b] - np.array([mdl.predict(F[b:b + 1])[0] for mdl in models])
            records.append({"t": t, "block": int(b), "train_index": train, "predict_index": np.array([b])})
        y_res[t] = resid[:, 0]
        for k, j in enumerate(range(t, m + 1)):
            t_res[(t, j)] = resid[:, 1 + k * d: 1 + (k + 1) * d]
    prov = {"path": "block", "learner": learner.to_dict(), "featurizer": featurizer.name,
            "eval_blocks": ev, "fits": records}
    res = ResidualSet(m, d, len(ev), y_res, t_res, ev.copy(), prov)
    psi = peel(res, ridge=ridge)
    J, scores = _blocks(res, psi)
    Sigma = np.zeros_like(J)
    for t in range(m):
        sl = slice(t * d, (t + 1) * d)
        Sigma[sl, sl] = scores[:, sl].T @ scores[:, sl] / res.n
    V = sandwich(J, Sigma)
    est = StructuralEstimate(psi, J, Sigma, V, res.n, "block", None,
                             {"n_blocks": B, "block_length": m})
    return BlockEstimate(est, B, ev, res)


def check_progressive(est: BlockEstimate) -> bool:
    """True when every residual of block ``b`` came from a model trained on blocks ``< b``."""
    fits = est.residuals.provenance.get("fits", [])
    if not fits:
        return False
    for rec in fits:
        pred = np.asarray(rec["predict_index"])
        train = np.asarray(rec["train_index"])
        if train.size and train.max() >= pred.min():
            return False
    return True


def discounted_value(est, gamma: float, tau) -> float:
    """``V(tau) = sum_{t=0}^{m-1} gamma^t sum_{q<=t} theta_{t-q}' tau_q``.

    ``est`` is a :class:`BlockEstimate` or an array of lag effects (row ``k``
    = lag ``k``). Ignoring lags beyond ``m - 1`` changes the value by
    ``O(gamma^m)``.
    """
    if not 0 < gamma < 1:
        raise ValidationError("gamma must lie in (0, 1)")
    theta = est.theta if isinstance(est, BlockEstimate) else np.asarray(est, dtype=float)
    if theta.ndim == 1:
        theta = theta[:, None]
    m, d = theta.shape
    tau = np.asarray(tau, dtype=float)
    if tau.ndim == 1:
        tau = tau[:, None] if d == 1 else tau[None, :]
    if tau.shape[0] > m or tau.shape[1] != d:
        raise ValidationError(f"tau must have at most {m} rows of length {d}, got shape {tau.shape}")
    total = 0.0
    for t in range(m):
        inner = sum(float(theta[t - q] @ tau[q]) for q in range(min(t, tau.shape[0] - 1) + 1))
        total += gamma ** t * inner
    return total
