"""Cross-fitted first stage: outcome and treatment residuals for every period pair.

For each conditioning period ``t`` and every later (or equal) period ``j``
the first stage produces the out-of-fold residuals

    y_resid[t]       = Y - q_t(history_t)
    t_resid[(t, j)]  = target_j - p_{j,t}(history_t)

where ``target_j`` is the raw treatment ``T_j`` (Markov path) or the
structural feature difference ``Q_{j,t}`` (structural-nested path).
Keys of ``t_resid`` are ``(t, j)`` with ``1 <= t <= j <= m``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .data import PanelDataset, SplitAssignment
from .errors import EstimationError, ValidationError
from .regression import LearnerSpec, fit_targets

__all__ = [
    "ResidualSet",
    "HistoryFeaturizer",
    "residualize_markov",
    "residualize_snmm",
    "crossfit_predictions",
    "stage_seed",
]


def stage_seed(split_seed: int, t: int, fold: int) -> int:
    """Seed for the inner CV of the fold-``fold`` nuisance fit at period ``t``."""
    ss = np.random.SeedSequence([int(split_seed) & 0xFFFFFFFF, int(t), int(fold)])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class ResidualSet:
    """Out-of-fold residuals consumed by every final stage."""

    m: int
    r: int
    n: int
    y_resid: Dict[int, np.ndarray]
    t_resid: Dict[Tuple[int, int], np.ndarray]
    folds: np.ndarray
    provenance: dict = field(default_factory=dict)
    warnings: tuple = ()

    def __post_init__(self):
        for t in range(1, self.m + 1):
            if t not in self.y_resid:
                raise ValidationError(f"missing outcome residual for period {t}")
            for j in range(t, self.m + 1):
                arr = self.t_resid.get((t, j))
                if arr is None:
                    raise ValidationError(f"missing treatment residual for pair (t={t}, j={j})")
                if arr.shape != (self.n, self.r):
                    raise ValidationError(f"residual ({t},{j}) has shape {arr.shape}, expected {(self.n, self.r)}")
                if not np.all(np.isfinite(arr)):
                    raise EstimationError(f"non-finite treatment residual for pair ({t},{j})")
            if not np.all(np.isfinite(self.y_resid[t])):
                raise EstimationError(f"non-finite outcome residual at period {t}")
        extra = [k for k in self.t_resid if not (1 <= k[0] <= k[1] <= self.m)]
        if extra:
            raise ValidationError(f"unexpected residual keys {extra}")

    def treatment_residual(self, j: int, t: int) -> np.ndarray:
        """Residual of period-``j`` target given period-``t`` history (``j >= t``)."""
        return self.t_resid[(t, j)]

    def subset(self, index) -> "ResidualSet":
        index = np.asarray(index)
        return ResidualSet(
            self.m, self.r, len(np.arange(self.n)[index]),
            {t: v[index] for t, v in self.y_resid.items()},
            {k: v[index] for k, v in self.t_resid.items()},
            self.folds[index], dict(self.provenance), self.warnings,
        )

    def with_outcome_residuals(self, y_resid) -> "ResidualSet":
        return ResidualSet(self.m, self.r, self.n, dict(y_resid), self.t_resid, self.folds,
                           self.provenance, self.warnings)

    def check_out_of_fold(self) -> bool:
        """True when no unit was in the training set of the model that predicted it."""
        records = self.provenance.get("fits", [])
        for rec in records:
            train = set(np.asarray(rec["train_index"]).tolist())
            pred = set(np.asarray(rec["predict_index"]).tolist())
            if train & pred:
                return False
        return True

    def save(self, path) -> None:
        """Write all residual arrays to a ``.npz`` archive."""
        arrays = {"folds": self.folds, "meta": np.array([self.m, self.r, self.n])}
        for t, v in self.y_resid.items():
            arrays[f"y_{t}"] = v
        for (t, j), v in self.t_resid.items():
            arrays[f"t_{t}_{j}"] = v
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "ResidualSet":
        with np.load(path) as z:
            m, r, n = (int(v) for v in z["meta"])
            y = {t: z[f"y_{t}"] for t in range(1, m + 1)}
            tr = {(t, j): z[f"t_{t}_{j}"] for t in range(1, m + 1) for j in range(t, m + 1)}
            return cls(m, r, n, y, tr, z["folds"])


class HistoryFeaturizer:
    """Maps a panel and a period ``t`` to the regressors of the period-``t`` nuisances.

    Modes:
        ``markov``: ``X_t``.
        ``markov_lag``: ``X_t`` and ``T_{t-1}``.
        ``markov_exo``: ``X_t``, ``T_{t-1}``, exogenous features and their
        products with ``X_t`` and ``T_{t-1}``.
        ``full_history``: ``X_1..X_t``, ``T_1..T_{t-1}`` and exogenous features.
        A callable ``fn(panel, t) -> (n, q)`` is used as given.
    """

    MODES = ("markov", "markov_lag", "markov_exo", "full_history")

    def __init__(self, mode: Union[str, Callable] = "markov", name: Optional[str] = None):
        if callable(mode):
            self.fn = mode
            self.mode = "custom"
        elif mode in self.MODES:
            self.fn = None
            self.mode = mode
        else:
            raise ValidationError(f"unknown featurizer mode {mode!r}; expected one of {self.MODES}")
        self.name = name or self.mode

    @property
    def includes_exo(self) -> bool:
        return self.mode in ("markov_exo", "full_history")

    def __call__(self, panel: PanelDataset, t: int) -> np.ndarray:
        if self.fn is not None:
            out = np.asarray(self.fn(panel, t), dtype=float)
            if out.ndim == 1:
                out = out[:, None]
            return out
        X_t = panel.X(t)
        if self.mode == "markov":
            return X_t
        lag = panel.T(t - 1)
        if self.mode == "markov_lag":
            return np.hstack([X_t, lag])
        exo = panel.exo_features if panel.exo_features is not None else np.zeros((panel.n, 0))
        if self.mode == "markov_exo":
            base = np.hstack([X_t, lag])
            inter = (exo[:, :, None] * base[:, None, :]).reshape(panel.n, -1)
            return np.hstack([base, exo, inter])
        parts = [panel.states[:, :t].reshape(panel.n, -1),
                 panel.treatments[:, : t - 1].reshape(panel.n, -1), exo]
        return np.hstack(parts)

    def __repr__(self):
        return f"HistoryFeaturizer({self.name!r})"


def crossfit_predictions(features: np.ndarray, targets: np.ndarray, learner: LearnerSpec,
                         split: SplitAssignment, t: int, overrides=None, column_keys=None):
    """Out-of-fold predictions of every target column.

    Returns ``(predictions, fit_records, warning_messages)``. Columns sharing
    a learner spec are fitted together on one Gram matrix.
    """
    n, K = targets.shape
    preds = np.empty((n, K))
    records = []
    notes = []
    groups: Dict[LearnerSpec, list] = {}
    for c in range(K):
        spec = learner
        if overrides and column_keys is not None:
            spec = overrides.get(column_keys[c], learner)
        groups.setdefault(spec, []).append(c)
    for k in range(split.n_folds):
        train = split.train_index(k)
        test = split.test_index(k)
        Xtr = features[train]
        seed = stage_seed(split.seed, t, k)
        for spec, cols in groups.items():
            Ytr = targets[np.ix_(train, cols)]
            const = np.ptp(Ytr, axis=0) == 0 if len(train) else np.ones(len(cols), bool)
            for c, flag in zip(cols, const):
                if flag:
                    key = column_keys[c] if column_keys is not None else c
                    notes.append(f"period {t}, fold {k}: target {key} is constant on the training fold")
            models = fit_targets(Xtr, Ytr, spec, seed)
            Xte = features[test]
            for c, model in zip(cols, models):
                preds[test, c] = model.predict(Xte)
            records.append({"t": t, "fold": k, "train_index": train, "predict_index": test,
                            "kinds": sorted({mdl.kind for mdl in models}),
                            "lambdas": [mdl.lam for mdl in models]})
    return preds, records, notes


def _assemble(panel, m, r, y_res, t_res, split, records, notes, extra):
    prov = {"split_seed": split.seed, "n_folds": split.n_folds, "fits": records}
    prov.update(extra)
    for msg in notes:
        warnings.warn(msg)
    return ResidualSet(m, r, panel.n, y_res, t_res, split.folds.copy(), prov, tuple(notes))


def _check_split(panel, split):
    if split.folds.shape != (panel.n,):
        raise ValidationError(f"split covers {split.folds.shape[0]} units but the panel has {panel.n}")


def residualize_markov(panel: PanelDataset, learner: Optional[LearnerSpec] = None,
                       split: Optional[SplitAssignment] = None,
                       featurizer: Optional[HistoryFeaturizer] = None,
                       overrides: Optional[Mapping] = None) -> ResidualSet:
    """Residuals of ``Y`` and ``T_j`` (``j >= t``) given the period-``t`` state.

    Args:
        overrides: optional per-nuisance learner specs keyed ``("y", t)`` for
            the outcome model or ``(t, j)`` for treatment ``j``.
    """
    from .data import split as make_split

    learner = learner or LearnerSpec()
    split = split or make_split(panel, 0)
    featurizer = featurizer or HistoryFeaturizer("markov")
    _check_split(panel, split)
    m, d = panel.m, panel.d
    y = panel.final_outcome
    y_res, t_res, records, notes = {}, {}, [], []
    for t in range(1, m + 1):
        F = featurizer(panel, t)
        targets = np.column_stack([y] + [panel.T(j) for j in range(t, m + 1)])
        keys = [("y", t)] + [(t, j) for j in range(t, m + 1) for _ in range(d)]
        preds, rec, msg = crossfit_predictions(F, targets, learner, split, t, overrides, keys)
        resid = targets - preds
        y_res[t] = resid[:, 0]
        for i, j in enumerate(range(t, m + 1)):
            t_res[(t, j)] = resid[:, 1 + i * d: 1 + (i + 1) * d]
        records += rec
        notes += msg
    extra = {"path": "markov", "learner": learner.to_dict(), "featurizer": featurizer.name}
    return _assemble(panel, m, d, y_res, t_res, split, records, notes, extra)


def residualize_snmm(panel: PanelDataset, blip, policy, learner: Optional[LearnerSpec] = None,
                     split: Optional[SplitAssignment] = None,
                     featurizer: Optional[HistoryFeaturizer] = None,
                     overrides: Optional[Mapping] = None, factorize: Optional[bool] = None) -> ResidualSet:
    """Residuals of ``Y`` and the gated structural differences ``Q_{j,t}``.

    When the blip is ``treatment x a(exo)`` and the policy depends only on
    exogenous features that the featurizer also sees, ``a(exo)`` and the
    policy term are known given the history, so the residual of ``Q_{j,t}``
    is ``(T_j - E[T_j | history]) x a(exo)``; this "factorized" route fits
    ``d`` instead of ``r`` columns per period. ``factorize=None`` picks it
    automatically when valid.
    """
    from .data import split as make_split
    from .snmm import build_Q

    learner = learner or LearnerSpec()
    split = split or make_split(panel, 0)
    featurizer = featurizer or HistoryFeaturizer("full_history")
    _check_split(panel, split)
    m, d = panel.m, panel.d
    r = blip.r
    can_factor = (blip.treatment_factor is not None and getattr(policy, "exo_only", False)
                  and featurizer.includes_exo and panel.exo_features is not None)
    if factorize is None:
        factorize = can_factor
    elif factorize and not can_factor:
        raise ValidationError("factorized residuals need an exogenous-factor blip, an exo-only policy "
                              "and a featurizer that includes exogenous features")
    y = panel.final_outcome
    y_res, t_res, records, notes = {}, {}, [], []
    if factorize:
        a = np.asarray(blip.treatment_factor(panel.exo_features), dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        for t in range(1, m + 1):
            F = featurizer(panel, t)
            targets = np.column_stack([y] + [panel.T(j) for j in range(t, m + 1)])
            keys = [("y", t)] + [(t, j) for j in range(t, m + 1) for _ in range(d)]
            preds, rec, msg = crossfit_predictions(F, targets, learner, split, t, overrides, keys)
            resid = targets - preds
            y_res[t] = resid[:, 0]
            for i, j in enumerate(range(t, m + 1)):
                tr = resid[:, 1 + i * d: 1 + (i + 1) * d]
                t_res[(t, j)] = (tr[:, :, None] * a[:, None, :]).reshape(panel.n, -1)
            records += rec
            notes += msg
    else:
        Q = build_Q(panel, blip, policy)
        for t in range(1, m + 1):
            F = featurizer(panel, t)
            targets = np.column_stack([y] + [Q.gated(j, t) for j in range(t, m + 1)])
            keys = [("y", t)] + [(t, j) for j in range(t, m + 1) for _ in range(r)]
            preds, rec, msg = crossfit_predictions(F, targets, learner, split, t, overrides, keys)
            resid = targets - preds
            y_res[t] = resid[:, 0]
            for i, j in enumerate(range(t, m + 1)):
                t_res[(t, j)] = resid[:, 1 + i * r: 1 + (i + 1) * r]
            records += rec
            notes += msg
    extra = {"path": "snmm", "learner": learner.to_dict(), "featurizer": featurizer.name,
             "blip": blip.name, "policy": policy.name, "factorized": bool(factorize)}
    return _assemble(panel, m, r, y_res, t_res, split, records, notes, extra)
