"""Blip parameterizations, target policies and off-policy evaluation.

A blip spec maps the history up to period ``t`` together with a candidate
period-``t`` treatment to a feature vector of length ``r``; the blip is
linear in those features. The structural differences

    Q_j = phi_j(history, observed T_j) - phi_j(history, pi_j(history))

drive both the estimating equations and the off-policy value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .data import PanelDataset, SplitAssignment
from .errors import ValidationError
from .gestimate import StructuralEstimate, estimate_covariance, normal_quantile, peel

__all__ = [
    "BlipSpec",
    "DynamicPolicy",
    "QArrays",
    "OffPolicyValue",
    "linear_blip",
    "exo_interaction_blip",
    "state_interaction_blip",
    "feature_blip",
    "check_baseline_zero",
    "build_Q",
    "gestimate_snmm",
    "off_policy_value",
    "make_blip",
    "make_policy",
    "register_blip",
    "random_exo_policies",
]


@dataclass(frozen=True)
class BlipSpec:
    """Blip features ``fn(panel, t, treatment) -> (n, r)``.

    ``treatment`` is an ``(n, d)`` array standing in for period-``t``
    treatment; the rest of the history comes from ``panel``. If the features
    factor as ``treatment x a(exo)``, ``treatment_factor`` holds ``a``.
    """

    r: int
    fn: Callable
    name: str = "custom"
    params: dict = field(default_factory=dict)
    treatment_factor: Optional[Callable] = None

    def evaluate(self, panel: PanelDataset, t: int, treatment) -> np.ndarray:
        try:
            out = np.asarray(self.fn(panel, t, np.asarray(treatment, dtype=float)), dtype=float)
        except Exception as exc:
            raise ValidationError(f"blip {self.name!r} failed at period {t}: {exc}") from exc
        if out.ndim == 1:
            out = out[:, None]
        if out.shape != (panel.n, self.r):
            raise ValidationError(f"blip {self.name!r} returned shape {out.shape} at period {t}, "
                                  f"expected {(panel.n, self.r)}")
        bad = ~np.all(np.isfinite(out), axis=1)
        if bad.any():
            raise ValidationError(f"blip {self.name!r} is not finite for unit {int(np.flatnonzero(bad)[0])} "
                                  f"at period {t}")
        return out


def linear_blip(d: int) -> BlipSpec:
    """``phi_t = tau_t``: one coefficient per treatment and period."""
    spec = BlipSpec(d, lambda panel, t, tau: tau, "linear", {"d": d},
                    treatment_factor=lambda exo: np.ones((exo.shape[0], 1)))
    return spec


def _kron_rows(tau, a):
    return (tau[:, :, None] * a[:, None, :]).reshape(tau.shape[0], -1)


def exo_interaction_blip(d: int, k: int, columns=None) -> BlipSpec:
    """``phi_t = tau_t x (1, x0)``; coefficient of treatment ``i`` and factor ``c`` at ``i*K + c``."""
    cols = list(range(k)) if columns is None else list(columns)

    def factor(exo):
        exo = np.asarray(exo, dtype=float)
        return np.hstack([np.ones((exo.shape[0], 1)), exo[:, cols]])

    def fn(panel, t, tau):
        if panel.exo_features is None:
            raise ValidationError("exo_interaction blip needs exogenous features")
        return _kron_rows(tau, factor(panel.exo_features))

    return BlipSpec(d * (1 + len(cols)), fn, "exo_interaction", {"d": d, "columns": cols},
                    treatment_factor=factor)


def state_interaction_blip(d: int, state_columns) -> BlipSpec:
    """``phi_t = tau_t x (1, X_t[cols])`` using the current state."""
    cols = list(state_columns)

    def fn(panel, t, tau):
        a = np.hstack([np.ones((panel.n, 1)), panel.X(t)[:, cols]])
        return _kron_rows(tau, a)

    return BlipSpec(d * (1 + len(cols)), fn, "state_interaction", {"d": d, "columns": cols})


def feature_blip(fn: Callable, r: int, name: str = "custom", probe: Optional[PanelDataset] = None) -> BlipSpec:
    """Wrap a user feature map; with ``probe`` the baseline-zero check runs on it."""
    spec = BlipSpec(r, fn, name)
    if probe is not None:
        check_baseline_zero(spec, probe)
    return spec


def check_baseline_zero(blip: BlipSpec, panel: PanelDataset, n_draws: int = 20, seed: int = 0,
                        atol: float = 1e-12) -> bool:
    """Randomized check that ``phi_t(history, 0) = 0`` on perturbed histories.

    Raises:
        ValidationError: a history with nonzero baseline features was found.
    """
    rng = np.random.default_rng(seed)
    zeros = np.zeros((panel.n, panel.d))
    for draw in range(n_draws):
        scale = 1.0 + draw
        probe = PanelDataset(
            states=panel.states + scale * rng.standard_normal(panel.states.shape),
            treatments=panel.treatments + scale * rng.standard_normal(panel.treatments.shape),
            final_outcome=panel.final_outcome,
            exo_features=None if panel.exo_features is None
            else panel.exo_features + scale * rng.standard_normal(panel.exo_features.shape),
        )
        for t in range(1, panel.m + 1):
            out = blip.evaluate(probe, t, zeros)
            if np.max(np.abs(out)) > atol:
                unit = int(np.argmax(np.max(np.abs(out), axis=1)))
                raise ValidationError(f"blip {blip.name!r} is nonzero at the baseline treatment "
                                      f"(unit {unit}, period {t})")
    return True


@dataclass(frozen=True)
class DynamicPolicy:
    """Deterministic target policy ``pi_t(history) -> (n, d)``.

    Kinds: ``zero``, ``static`` (``params["tau"]`` of shape (m, d)),
    ``replay`` (the observed treatments), ``exo_threshold``
    (``1{x0 @ w + b > 0}`` per treatment) and ``custom``.
    """

    kind: str
    params: dict = field(default_factory=dict)
    fn: Optional[Callable] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("zero", "static", "replay", "exo_threshold", "custom"):
            raise ValidationError(f"unknown policy kind {self.kind!r}")
        if self.kind == "custom" and self.fn is None:
            raise ValidationError("custom policy needs fn(panel, t)")
        if not self.name:
            object.__setattr__(self, "name", self.kind)

    @property
    def exo_only(self) -> bool:
        """True when the action depends on exogenous features only."""
        return self.kind in ("zero", "static", "exo_threshold") or bool(self.params.get("exo_only"))

    def __call__(self, panel: PanelDataset, t: int) -> np.ndarray:
        n, d = panel.n, panel.d
        if self.kind == "zero":
            return np.zeros((n, d))
        if self.kind == "replay":
            return panel.T(t).copy()
        if self.kind == "static":
            tau = np.asarray(self.params["tau"], dtype=float).reshape(panel.m, d)
            return np.broadcast_to(tau[t - 1], (n, d)).copy()
        if self.kind == "exo_threshold":
            if panel.exo_features is None:
                raise ValidationError("exo_threshold policy needs exogenous features")
            w = np.atleast_2d(np.asarray(self.params["weights"], dtype=float))
            b = np.broadcast_to(np.asarray(self.params.get("bias", 0.0), dtype=float), (d,))
            w = np.broadcast_to(w, (d, panel.k))
            return (panel.exo_features @ w.T + b > 0).astype(float)
        out = np.asarray(self.fn(panel, t), dtype=float)
        return out.reshape(n, d)

    def to_dict(self):
        def clean(v):
            return v.tolist() if isinstance(v, np.ndarray) else v
        return {"kind": self.kind, "name": self.name, "params": {k: clean(v) for k, v in self.params.items()}}


@dataclass(frozen=True)
class QArrays:
    """Observed and policy blip features per period; ``Q[j] = phi_obs[j] - phi_pol[j]``."""

    phi_obs: Dict[int, np.ndarray]
    phi_pol: Dict[int, np.ndarray]

    @property
    def m(self) -> int:
        return len(self.phi_obs)

    def Q(self, j: int) -> np.ndarray:
        return self.phi_obs[j] - self.phi_pol[j]

    def gated(self, j: int, t: int) -> np.ndarray:
        """``Q_{j,t}``: the full difference for ``j > t``, observed features for ``j = t``."""
        if j < t:
            raise ValidationError("gated Q needs j >= t")
        return self.phi_obs[j] if j == t else self.Q(j)

    def stacked(self) -> np.ndarray:
        """Ungated ``(Q_1, ..., Q_m)`` per unit, shape (n, m * r)."""
        return np.hstack([self.Q(j) for j in range(1, self.m + 1)])


def build_Q(panel: PanelDataset, blip: BlipSpec, policy: DynamicPolicy) -> QArrays:
    """Evaluate the blip at the observed and at the policy treatment for every period."""
    obs, pol = {}, {}
    for j in range(1, panel.m + 1):
        obs[j] = blip.evaluate(panel, j, panel.T(j))
        try:
            action = policy(panel, j)
        except ValidationError:
            raise
        except Exception as exc:
            raise ValidationError(f"policy {policy.name!r} failed at period {j}: {exc}") from exc
        pol[j] = blip.evaluate(panel, j, action)
    return QArrays(obs, pol)


def gestimate_snmm(panel: PanelDataset, blip: BlipSpec, policy: DynamicPolicy, learner=None,
                   split: Optional[SplitAssignment] = None, featurizer=None, mode: str = "linear_system",
                   radius=None, factorize=None) -> StructuralEstimate:
    """First stage on the gated structural differences, then peel and sandwich."""
    from .residualize import residualize_snmm

    res = residualize_snmm(panel, blip, policy, learner, split, featurizer, factorize=factorize)
    psi = peel(res, mode=mode, radius=radius)
    est = estimate_covariance(res, psi, method="snmm")
    return StructuralEstimate(est.psi, est.J, est.Sigma, est.V, est.n, "snmm", est.diagnostics,
                              {"blip": blip.name, "policy": policy.name,
                               "factorized": res.provenance.get("factorized", False)})


@dataclass(frozen=True)
class OffPolicyValue:
    value: float
    lo: float
    hi: float
    stderr: float
    gamma: float
    mu: float

    def to_dict(self):
        return {"value": self.value, "ci": [self.lo, self.hi], "stderr": self.stderr,
                "gamma": self.gamma, "mu": self.mu}


def off_policy_value(panel: PanelDataset, est: StructuralEstimate, Q: QArrays,
                     alpha: float = 0.05) -> OffPolicyValue:
    """Plug-in value ``mean(Y - psi'Q)`` of the target policy with its interval.

    The variance is ``(gamma + mu) / n`` with ``gamma`` the sample variance
    of ``Y - Q'psi`` and ``mu = mean(Q)' V mean(Q)``.
    """
    Qs = Q.stacked()
    if Qs.shape[1] != est.V.shape[0]:
        raise ValidationError(f"Q has {Qs.shape[1]} columns but the estimate has {est.V.shape[0]} parameters")
    if not 0 < alpha <= 1:
        raise ValidationError("alpha must lie in (0, 1]")
    y = panel.final_outcome
    n = y.shape[0]
    h = y - Qs @ est.flat
    value = float(h.mean())
    gamma = float(np.mean((h - value) ** 2))
    qbar = Qs.mean(axis=0)
    mu = float(qbar @ est.V @ qbar)
    se = math.sqrt(max(gamma + mu, 0.0) / n)
    z = normal_quantile(1 - alpha / 2) if alpha < 1 else 0.0
    return OffPolicyValue(value, value - z * se, value + z * se, se, gamma, mu)


# ---------------------------------------------------------------------------
# Registries for config-driven runs

_CUSTOM_BLIPS: Dict[str, BlipSpec] = {}


def register_blip(spec: BlipSpec, probe: PanelDataset) -> None:
    """Make ``spec`` selectable by name in run configs after checking its baseline."""
    check_baseline_zero(spec, probe)
    _CUSTOM_BLIPS[spec.name] = spec


def make_blip(descriptor, d: int, k: int = 0) -> BlipSpec:
    """Build a blip from ``{"name": ..., ...}`` or a bare name."""
    if isinstance(descriptor, str):
        descriptor = {"name": descriptor}
    name = descriptor.get("name", "linear")
    if name in _CUSTOM_BLIPS:
        return _CUSTOM_BLIPS[name]
    if name == "linear":
        return linear_blip(d)
    if name == "exo_interaction":
        return exo_interaction_blip(d, k, descriptor.get("columns"))
    if name == "state_interaction":
        return state_interaction_blip(d, descriptor.get("columns", [0]))
    raise ValidationError(f"unknown blip {name!r}")


def make_policy(descriptor) -> DynamicPolicy:
    if isinstance(descriptor, str):
        descriptor = {"kind": descriptor}
    descriptor = dict(descriptor)
    kind = descriptor.pop("kind", "zero")
    name = descriptor.pop("name", "")
    return DynamicPolicy(kind, descriptor.get("params", descriptor), name=name)


def random_exo_policies(count: int, k: int, seed: int = 0, bias_scale: float = 0.5):
    """``count`` threshold policies ``1{x0 @ w + b > 0}`` with Gaussian ``w`` and ``b``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        w = rng.standard_normal(k)
        b = float(bias_scale * rng.standard_normal())
        out.append(DynamicPolicy("exo_threshold", {"weights": w, "bias": b}, name=f"exo_policy_{i}"))
    return out
