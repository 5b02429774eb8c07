"""Linear state-space simulator with closed-form truth and a Monte Carlo harness.

The process, for ``t = 1..m`` with ``X_0 = T_0 = 0``::

    X_t = A T_{t-1} + B X_{t-1} + sigma_eta * eta_t
    T_t = C T_{t-1} + D X_t + sigma_zeta * zeta_t
    Y_t = theta(x0)' T_t + mu' X_t + sigma_eps * eps_t

with standard normal shocks. ``theta(x0) = theta0 + beta0' x0`` (the same
shift for every treatment) when heterogeneity is switched on, where
``x0 = X_1[hetero_index]`` is exported as the panel's exogenous features.
"""
from __future__ import annotations

import csv
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Optional

import numpy as np

from .data import PanelDataset, SingleSeries, split as make_split
from .errors import DynDMLError, UnsupportedConfigError, ValidationError
from .gestimate import estimate_covariance, normal_quantile, peel
from .regression import LearnerSpec, fit
from .residualize import HistoryFeaturizer, crossfit_predictions, residualize_markov

__all__ = [
    "DGPConfig",
    "paper_instance",
    "benchmark_instance",
    "sparse_instance",
    "generate",
    "generate_series",
    "true_effects",
    "true_blip_coefficients",
    "true_kappa",
    "true_policy_value",
    "GaussianLinearModel",
    "MonteCarloReport",
    "monte_carlo",
    "run_pipeline",
    "BenchmarkReport",
    "benchmarks",
    "BENCHMARK_METHODS",
]


def _mat(v, shape, name):
    arr = np.asarray(v, dtype=float)
    if arr.shape != shape:
        try:
            arr = np.broadcast_to(arr, shape).copy()
        except ValueError:
            raise ValidationError(f"{name} must have shape {shape}, got {arr.shape}") from None
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class DGPConfig:
    """Parameters of the simulated process; matrices follow the module docstring."""

    n: int
    m: int
    d: int
    p: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    mu: np.ndarray
    theta0: np.ndarray
    beta0: Optional[np.ndarray] = None
    hetero_index: tuple = ()
    sigma_eps: float = 1.0
    sigma_zeta: float = 1.0
    sigma_eta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.m < 1 or self.d < 1 or self.p < 0:
            raise ValidationError("need n >= 2, m >= 1, d >= 1, p >= 0")
        p, d = self.p, self.d
        object.__setattr__(self, "A", _mat(self.A, (p, d), "A"))
        object.__setattr__(self, "B", _mat(self.B, (p, p), "B"))
        object.__setattr__(self, "C", _mat(self.C, (d, d), "C"))
        object.__setattr__(self, "D", _mat(self.D, (d, p), "D"))
        object.__setattr__(self, "mu", _mat(self.mu, (p,), "mu"))
        object.__setattr__(self, "theta0", _mat(self.theta0, (d,), "theta0"))
        idx = tuple(int(i) for i in self.hetero_index)
        if any(i < 0 or i >= p for i in idx):
            raise ValidationError(f"hetero_index {idx} out of range for p={p}")
        object.__setattr__(self, "hetero_index", idx)
        if self.beta0 is not None:
            object.__setattr__(self, "beta0", _mat(self.beta0, (len(idx),), "beta0"))
        for name in ("sigma_eps", "sigma_zeta", "sigma_eta"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")

    @property
    def k(self) -> int:
        return len(self.hetero_index)

    @property
    def heterogeneous(self) -> bool:
        return self.beta0 is not None and bool(np.any(self.beta0 != 0))

    def with_(self, **changes) -> "DGPConfig":
        return replace(self, **changes)

    def to_dict(self):
        out = {}
        for key, val in asdict(self).items():
            out[key] = val.tolist() if isinstance(val, np.ndarray) else (list(val) if isinstance(val, tuple) else val)
        return out

    @classmethod
    def from_dict(cls, payload):
        payload = dict(payload)
        if "instance" in payload:
            kind = payload.pop("instance")
            builder = {"paper": paper_instance, "benchmark": benchmark_instance, "sparse": sparse_instance}.get(kind)
            if builder is None:
                raise ValidationError(f"unknown instance {kind!r}")
            return builder(**payload)
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown DGP field(s): {sorted(unknown)}")
        if "hetero_index" in payload:
            payload["hetero_index"] = tuple(payload["hetero_index"])
        return cls(**payload)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def paper_instance(n: int = 500, n_t: int = 2, n_x: int = 450, s: int = 2, m: int = 3,
                   sigma_eps: float = 1.0, sigma_zeta: float = 0.5, sigma_eta: float = 1.0,
                   C: float = 0.2, theta0: float = 1.0, hetero: bool = False, beta0: float = 1.0,
                   hetero_index=(0,), seed: int = 0, exo: Optional[bool] = None) -> DGPConfig:
    """The experimental instance: ``A = .5``, ``B = .5 I``, ``C = c I``,
    ``D[:, :s] = .4`` and ``mu[:s] = .8``.

    ``theta0`` and ``beta0`` are scalars applied to every treatment and every
    heterogeneity coordinate. ``exo`` (default: ``hetero``) exports
    ``X_1[hetero_index]`` as exogenous features.
    """
    p, d = n_x, n_t
    A = np.full((p, d), 0.5)
    B = 0.5 * np.eye(p)
    Cm = C * np.eye(d)
    D = np.zeros((d, p))
    D[:, :s] = 0.4
    mu = np.zeros(p)
    mu[:s] = 0.8
    exo = hetero if exo is None else exo
    idx = tuple(hetero_index) if exo else ()
    b0 = np.full(len(idx), beta0 if hetero else 0.0) if exo else None
    return DGPConfig(n=n, m=m, d=d, p=p, A=A, B=B, C=Cm, D=D, mu=mu, theta0=np.full(d, theta0),
                     beta0=b0, hetero_index=idx, sigma_eps=sigma_eps, sigma_zeta=sigma_zeta,
                     sigma_eta=sigma_eta, seed=seed)


def benchmark_instance(n: int = 400, n_t: int = 1, n_x: int = 100, s: int = 10, m: int = 3,
                       sigma: float = 0.5, seed: int = 0) -> DGPConfig:
    """Single-instance comparison setting: all noise scales ``sigma`` and ``C = 0``."""
    return paper_instance(n=n, n_t=n_t, n_x=n_x, s=s, m=m, sigma_eps=sigma, sigma_zeta=sigma,
                          sigma_eta=sigma, C=0.0, seed=seed)


def sparse_instance(n: int = 500, m: int = 2, r: int = 200, s: int = 2, p: int = 4,
                    sigma: float = 1.0, seed: int = 0) -> DGPConfig:
    """Many treatments, few of which matter.

    The last-period effect is nonzero on treatments ``s..2s-1`` and the
    lagged effects on treatments ``0..s-1`` (through states ``0..s-1``).
    Every treatment responds to the first ``s`` states, so the states confound
    all of them.
    """
    if p < s or r < 2 * s:
        raise ValidationError("sparse instance needs p >= s and r >= 2 s")
    A = np.zeros((p, r))
    A[np.arange(s), np.arange(s)] = 0.5
    D = np.zeros((r, p))
    D[:, :s] = 0.4
    mu = np.zeros(p)
    mu[:s] = 0.8
    theta0 = np.zeros(r)
    theta0[s:2 * s] = 1.0
    return DGPConfig(n=n, m=m, d=r, p=p, A=A, B=0.5 * np.eye(p), C=np.zeros((r, r)), D=D, mu=mu,
                     theta0=theta0, sigma_eps=sigma, sigma_zeta=sigma, sigma_eta=sigma, seed=seed)


# ---------------------------------------------------------------------------
# Generation


def _policy_action(policy, x0, t, n, d, m):
    kind = policy.kind
    if kind == "zero":
        return np.zeros((n, d))
    if kind == "static":
        tau = np.asarray(policy.params["tau"], dtype=float).reshape(m, d)
        return np.broadcast_to(tau[t - 1], (n, d))
    if kind == "exo_threshold":
        w = np.broadcast_to(np.atleast_2d(np.asarray(policy.params["weights"], dtype=float)), (d, x0.shape[1]))
        b = np.broadcast_to(np.asarray(policy.params.get("bias", 0.0), dtype=float), (d,))
        return (x0 @ w.T + b > 0).astype(float)
    raise UnsupportedConfigError(f"cannot simulate under policy kind {kind!r}")


def generate(config: DGPConfig, policy=None, seed: Optional[int] = None) -> PanelDataset:
    """Draw ``config.n`` independent trajectories.

    With ``policy`` (zero, static or exo_threshold) treatments follow the
    target policy instead of the observational one; used to check
    counterfactual values by simulation.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n, m, d, p = cfg.n, cfg.m, cfg.d, cfg.p
    eta = rng.standard_normal((n, m, p)) * cfg.sigma_eta
    zeta = rng.standard_normal((n, m, d)) * cfg.sigma_zeta
    eps = rng.standard_normal((n, m)) * cfg.sigma_eps
    X = np.zeros((n, m, p))
    T = np.zeros((n, m, d))
    Y = np.zeros((n, m))
    x_prev = np.zeros((n, p))
    t_prev = np.zeros((n, d))
    x0 = None
    theta = np.broadcast_to(cfg.theta0, (n, d))
    for t in range(m):
        x_t = t_prev @ cfg.A.T + x_prev @ cfg.B.T + eta[:, t]
        if t == 0 and cfg.k:
            x0 = x_t[:, list(cfg.hetero_index)].copy()
            if cfg.beta0 is not None:
                theta = cfg.theta0[None, :] + (x0 @ cfg.beta0)[:, None]
        if policy is None:
            t_t = t_prev @ cfg.C.T + x_t @ cfg.D.T + zeta[:, t]
        else:
            t_t = np.array(_policy_action(policy, x0, t + 1, n, d, m), dtype=float)
        Y[:, t] = np.sum(theta * t_t, axis=1) + x_t @ cfg.mu + eps[:, t]
        X[:, t] = x_t
        T[:, t] = t_t
        x_prev, t_prev = x_t, t_t
    return PanelDataset(states=X, treatments=T, final_outcome=Y[:, -1], exo_features=x0,
                        per_period_outcomes=Y)


def generate_series(config: DGPConfig, n_blocks: int, burn_in: int = 200,
                    seed: Optional[int] = None) -> SingleSeries:
    """One long homogeneous trajectory of ``n_blocks * m`` periods after ``burn_in``."""
    cfg = config
    if cfg.heterogeneous:
        raise UnsupportedConfigError("single-series simulation supports homogeneous effects only")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    L = n_blocks * cfg.m + burn_in
    d, p = cfg.d, cfg.p
    X = np.zeros((L, p))
    T = np.zeros((L, d))
    Y = np.zeros(L)
    x_prev = np.zeros(p)
    t_prev = np.zeros(d)
    for s in range(L):
        x = cfg.A @ t_prev + cfg.B @ x_prev + cfg.sigma_eta * rng.standard_normal(p)
        tr = cfg.C @ t_prev + cfg.D @ x + cfg.sigma_zeta * rng.standard_normal(d)
        Y[s] = cfg.theta0 @ tr + cfg.mu @ x + cfg.sigma_eps * rng.standard_normal()
        X[s], T[s] = x, tr
        x_prev, t_prev = x, tr
    if not np.all(np.isfinite(Y)) or np.abs(Y).max() > 1e12:
        raise UnsupportedConfigError("the process is not stable; choose matrices with spectral radius < 1")
    return SingleSeries(X[burn_in:], T[burn_in:], Y[burn_in:], cfg.m)


# ---------------------------------------------------------------------------
# Ground truth


def true_effects(config: DGPConfig) -> np.ndarray:
    """Effects on the final outcome, shape (m, d): row ``m-1`` is ``theta0``,
    row ``t-1`` is ``mu' B^(m-t-1) A``.

    Under heterogeneity the last row is the effect at ``x0 = 0``; see
    :func:`true_blip_coefficients` for the full parameterization.
    """
    m = config.m
    out = np.zeros((m, config.d))
    out[m - 1] = config.theta0
    Bpow = np.eye(config.p)
    for t in range(m - 1, 0, -1):
        out[t - 1] = config.mu @ Bpow @ config.A
        Bpow = Bpow @ config.B
    return out


def true_blip_coefficients(config: DGPConfig, blip: str = "exo_interaction") -> np.ndarray:
    """Truth for ``phi_t = tau_t x (1, x0)`` (or ``linear``), shape (m, r)."""
    psi = true_effects(config)
    if blip == "linear":
        return psi
    if blip != "exo_interaction":
        raise UnsupportedConfigError(f"no closed-form truth for blip {blip!r}")
    K = 1 + config.k
    out = np.zeros((config.m, config.d * K))
    for i in range(config.d):
        out[:, i * K] = psi[:, i]
        if config.beta0 is not None:
            out[config.m - 1, i * K + 1: (i + 1) * K] = config.beta0
    return out


def true_kappa(config: DGPConfig):
    """Exact error-propagation constant and its operator-norm bound.

    Requires one treatment and ``C = 0``, so the policy is ``gamma' x + zeta``.
    Then ``Cov(T_t, T_j | X_t) = sigma_zeta^2 gamma' Delta^(j-t-1) alpha`` with
    ``Delta = alpha gamma' + B`` and ``lambda = sigma_zeta^2``, giving
    ``kappa = 2 max_t sum_{j>t} |gamma' Delta^(j-t-1) alpha|``.

    Returns:
        ``(kappa, bound)`` with
        ``bound = 2 |gamma| |alpha| (|Delta|^(m-1) - 1) / (|Delta| - 1)``.

    Raises:
        UnsupportedConfigError: ``d > 1``, ``C != 0`` or ``sigma_zeta = 0``.
    """
    if config.d != 1 or np.any(config.C != 0):
        raise UnsupportedConfigError("true_kappa needs d = 1 and C = 0; use gestimate.diagnostics "
                                     "for the empirical kappa_hat instead")
    if config.sigma_zeta == 0:
        raise UnsupportedConfigError("true_kappa needs sigma_zeta > 0")
    alpha = config.A[:, 0]
    gamma = config.D[0]
    Delta = np.outer(alpha, gamma) + config.B
    m = config.m
    terms = []
    v = alpha.copy()
    for _ in range(max(m - 1, 0)):
        terms.append(abs(float(gamma @ v)))
        v = Delta @ v
    # the sum for t = 1 has the most terms; all terms are shared prefixes
    kappa = 2 * float(sum(terms)) if terms else 0.0
    nd = float(np.linalg.norm(Delta, 2)) if config.p else 0.0
    if m <= 1:
        geo = 0.0
    elif abs(nd - 1) < 1e-12:
        geo = float(m - 1)
    else:
        geo = (nd ** (m - 1) - 1) / (nd - 1)
    bound = 2 * float(np.linalg.norm(gamma)) * float(np.linalg.norm(alpha)) * geo
    return kappa, bound


def true_policy_value(config: DGPConfig, policy) -> float:
    """Counterfactual mean of the final outcome under a zero, static or
    exogenous-threshold policy (the all-zero policy has value 0)."""
    psi = true_effects(config)
    m, d = config.m, config.d
    if policy.kind == "zero":
        return 0.0
    if policy.kind == "static":
        tau = np.asarray(policy.params["tau"], dtype=float).reshape(m, d)
        return float(np.sum(psi * tau))
    if policy.kind != "exo_threshold":
        raise UnsupportedConfigError(f"no closed-form value for policy kind {policy.kind!r}")
    if config.k == 0:
        raise UnsupportedConfigError("exo_threshold policies need exogenous features")
    # x0 ~ N(0, s^2 I) with s = sigma_eta since X_1 = sigma_eta * eta_1
    s_x = config.sigma_eta
    w = np.broadcast_to(np.atleast_2d(np.asarray(policy.params["weights"], dtype=float)), (d, config.k))
    b = np.broadcast_to(np.asarray(policy.params.get("bias", 0.0), dtype=float), (d,))
    beta0 = config.beta0 if config.beta0 is not None else np.zeros(config.k)
    total = 0.0
    for i in range(d):
        sd = s_x * float(np.linalg.norm(w[i]))
        if sd == 0:
            prob = float(b[i] > 0)
            shift = 0.0
        else:
            z = b[i] / sd
            prob = 0.5 * math.erfc(-z / math.sqrt(2))
            dens = math.exp(-z * z / 2) / math.sqrt(2 * math.pi)
            # E[x0 1{w'x0 + b > 0}] = s_x^2 w phi(z) / sd
            shift = float(beta0 @ w[i]) * s_x ** 2 * dens / sd
        total += psi[m - 1, i] * prob + shift
        total += float(np.sum(psi[: m - 1, i])) * prob
    return float(total)


class GaussianLinearModel:
    """Every homogeneous-process variable as a linear form in the shock vector.

    Shocks are ordered ``(eta_t, zeta_t, eps_t)`` for ``t = 1..m``; covariances
    are ``a' diag(var) b``. Used to compute population nuisances exactly.
    """

    def __init__(self, config: DGPConfig):
        if config.heterogeneous:
            raise UnsupportedConfigError("the linear representation needs homogeneous effects")
        cfg = config
        m, d, p = cfg.m, cfg.d, cfg.p
        block = p + d + 1
        S = m * block
        self.var = np.concatenate([np.r_[np.full(p, cfg.sigma_eta ** 2), np.full(d, cfg.sigma_zeta ** 2),
                                         cfg.sigma_eps ** 2] for _ in range(m)])
        self.X, self.T, self.Y = {}, {}, {}
        x_prev = np.zeros((p, S))
        t_prev = np.zeros((d, S))
        self.X[0], self.T[0] = x_prev, t_prev
        for t in range(1, m + 1):
            off = (t - 1) * block
            E_eta = np.zeros((p, S))
            E_eta[:, off: off + p] = np.eye(p)
            E_zeta = np.zeros((d, S))
            E_zeta[:, off + p: off + p + d] = np.eye(d)
            e_eps = np.zeros(S)
            e_eps[off + p + d] = 1.0
            x_t = cfg.A @ t_prev + cfg.B @ x_prev + E_eta
            t_t = cfg.C @ t_prev + cfg.D @ x_t + E_zeta
            self.X[t], self.T[t] = x_t, t_t
            self.Y[t] = cfg.theta0 @ t_t + cfg.mu @ x_t + e_eps
            x_prev, t_prev = x_t, t_t
        self.m = m

    def cov(self, a, b) -> np.ndarray:
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        return (a * self.var) @ b.T

    def features(self, t: int, mode: str = "markov") -> np.ndarray:
        if mode == "markov":
            return self.X[t]
        if mode == "markov_lag":
            return np.vstack([self.X[t], self.T[t - 1]])
        raise UnsupportedConfigError(f"no population features for mode {mode!r}")

    def projection(self, target, t: int, mode: str = "markov") -> np.ndarray:
        """Coefficients of ``E[target | features_t]`` (all variables are mean zero)."""
        F = self.features(t, mode)
        return np.linalg.lstsq(self.cov(F, F), self.cov(F, target), rcond=None)[0].T

    def nuisances(self, mode: str = "markov"):
        """``{"q": {t: coef}, "p": {(t, j): coef}}`` for outcome and treatments."""
        q, pj = {}, {}
        for t in range(1, self.m + 1):
            q[t] = self.projection(self.Y[self.m], t, mode)[0]
            for j in range(t, self.m + 1):
                pj[(t, j)] = self.projection(self.T[j], t, mode)
        return {"q": q, "p": pj}


# ---------------------------------------------------------------------------
# Monte Carlo


def _rep_seeds(master: int, rep: int):
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, int(rep)])
    a, b = ss.generate_state(2)
    return int(a), int(b)


def _policies_from(descriptor, config):
    from .snmm import make_policy, random_exo_policies

    if not descriptor:
        return []
    if isinstance(descriptor, dict) and "random_exo" in descriptor:
        return random_exo_policies(int(descriptor["random_exo"]), config.k, int(descriptor.get("seed", 0)),
                                   float(descriptor.get("bias_scale", 0.5)))
    return [p if hasattr(p, "kind") else make_policy(p) for p in descriptor]


def run_pipeline(panel: PanelDataset, pipeline: dict, split_seed: int, config: DGPConfig,
                 policies=()) -> dict:
    """Fit one estimator variant; returns flat estimates, standard errors and policy values."""
    from .snmm import build_Q, gestimate_snmm, linear_blip, make_blip, make_policy, off_policy_value

    variant = pipeline.get("variant", "dyndml")
    learner = LearnerSpec.from_dict(pipeline.get("learner", {}))
    folds = int(pipeline.get("folds", 2))
    sp = make_split(panel, split_seed, folds)
    if variant == "oracle":
        truth = true_effects(config).reshape(-1)
        scale = float(pipeline.get("se", 1e6))
        return {"estimates": truth.copy(), "stderr": np.full(truth.shape, scale)}
    if variant == "dyndml":
        feat = HistoryFeaturizer(pipeline.get("featurizer", "markov"))
        res = residualize_markov(panel, learner, sp, feat)
        psi = peel(res, mode=pipeline.get("mode", "linear_system"), radius=pipeline.get("radius"))
        est = estimate_covariance(res, psi, with_diagnostics=False)
        blip = linear_blip(panel.d)
    elif variant == "snmm":
        blip = make_blip(pipeline.get("blip", "linear"), panel.d, panel.k)
        feat = HistoryFeaturizer(pipeline.get("featurizer", "full_history"))
        est = gestimate_snmm(panel, blip, make_policy(pipeline.get("policy", "zero")), learner, sp, feat)
    else:
        raise ValidationError(f"unknown Monte Carlo variant {variant!r}")
    out = {"estimates": est.flat.copy(), "stderr": est.stderr().reshape(-1)}
    if policies:
        vals, ses = [], []
        for pol in policies:
            opv = off_policy_value(panel, est, build_Q(panel, blip, pol))
            vals.append(opv.value)
            ses.append(opv.stderr)
        out["policy_values"] = np.array(vals)
        out["policy_stderr"] = np.array(ses)
    return out


def _validate_pipeline(pipeline):
    # configuration mistakes must fail fast instead of being recorded as failed reps
    variant = pipeline.get("variant", "dyndml")
    if variant not in ("oracle", "dyndml", "snmm"):
        raise ValidationError(f"unknown Monte Carlo variant {variant!r}")
    LearnerSpec.from_dict(pipeline.get("learner", {}))
    if "featurizer" in pipeline:
        HistoryFeaturizer(pipeline["featurizer"])


def _one_rep(args):
    config, pipeline, master, rep, policies = args
    data_seed, split_seed = _rep_seeds(master, rep)
    try:
        panel = generate(config, seed=data_seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = run_pipeline(panel, pipeline, split_seed, config, policies)
        out["rep"] = rep
        return out
    except DynDMLError as exc:
        return {"rep": rep, "error": f"{type(exc).__name__}: {exc}"}


def _truth_for(config, pipeline):
    variant = pipeline.get("variant", "dyndml")
    if variant == "snmm":
        blip = pipeline.get("blip", "linear")
        name = blip if isinstance(blip, str) else blip.get("name", "linear")
        return true_blip_coefficients(config, name)
    return true_effects(config)


def _param_names(m, r):
    return [f"psi_{t}[{c}]" for t in range(1, m + 1) for c in range(r)]


@dataclass
class MonteCarloReport:
    """Per-replication estimates with helpers for coverage, bias and RMSE."""

    names: list
    truth: np.ndarray
    estimates: np.ndarray
    stderr: np.ndarray
    alpha: float
    reps: int
    failures: list
    runtime: float
    config: dict
    pipeline: dict
    policy_names: list = field(default_factory=list)
    policy_truth: np.ndarray = field(default_factory=lambda: np.zeros(0))
    policy_values: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    policy_stderr: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def n_ok(self) -> int:
        return self.estimates.shape[0]

    def coverage_at(self, alpha: Optional[float] = None) -> np.ndarray:
        a = self.alpha if alpha is None else alpha
        z = normal_quantile(1 - a / 2)
        if self.n_ok == 0:
            return np.full(len(self.names), np.nan)
        return np.mean(np.abs(self.estimates - self.truth) <= z * self.stderr, axis=0)

    def policy_coverage_at(self, alpha: Optional[float] = None) -> np.ndarray:
        a = self.alpha if alpha is None else alpha
        z = normal_quantile(1 - a / 2)
        if self.policy_values.size == 0:
            return np.zeros(0)
        return np.mean(np.abs(self.policy_values - self.policy_truth) <= z * self.policy_stderr, axis=0)

    @property
    def coverage(self) -> np.ndarray:
        return self.coverage_at()

    @property
    def bias(self) -> np.ndarray:
        return self.estimates.mean(axis=0) - self.truth

    @property
    def rmse(self) -> np.ndarray:
        return np.sqrt(np.mean((self.estimates - self.truth) ** 2, axis=0))

    def summary_rows(self):
        cov = self.coverage
        rows = []
        for i, name in enumerate(self.names):
            rows.append({
                "parameter": name,
                "truth": float(self.truth[i]),
                "mean": float(self.estimates[:, i].mean()) if self.n_ok else float("nan"),
                "sd": float(self.estimates[:, i].std(ddof=1)) if self.n_ok > 1 else float("nan"),
                "bias": float(self.bias[i]) if self.n_ok else float("nan"),
                "rmse": float(self.rmse[i]) if self.n_ok else float("nan"),
                "mean_stderr": float(self.stderr[:, i].mean()) if self.n_ok else float("nan"),
                "coverage": float(cov[i]),
            })
        pcov = self.policy_coverage_at()
        for i, name in enumerate(self.policy_names):
            vals = self.policy_values[:, i]
            rows.append({
                "parameter": name,
                "truth": float(self.policy_truth[i]),
                "mean": float(vals.mean()),
                "sd": float(vals.std(ddof=1)) if len(vals) > 1 else float("nan"),
                "bias": float(vals.mean() - self.policy_truth[i]),
                "rmse": float(np.sqrt(np.mean((vals - self.policy_truth[i]) ** 2))),
                "mean_stderr": float(self.policy_stderr[:, i].mean()),
                "coverage": float(pcov[i]),
            })
        return rows

    def to_dict(self, include_timing: bool = True):
        out = {
            "reps": self.reps,
            "n_ok": self.n_ok,
            "n_failed": len(self.failures),
            "failures": self.failures,
            "alpha": self.alpha,
            "parameters": self.summary_rows(),
            "coverage": {name: float(c) for name, c in zip(self.names, self.coverage)},
            "config": self.config,
            "pipeline": self.pipeline,
        }
        if self.policy_names:
            out["policy_coverage"] = {nm: float(c) for nm, c in zip(self.policy_names, self.policy_coverage_at())}
        if include_timing:
            out["timing"] = {"runtime_seconds": self.runtime}
        return out

    def write_json(self, path, include_timing: bool = True):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(include_timing), fh, indent=2, sort_keys=True)

    def write_csv(self, path):
        rows = self.summary_rows()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)

    def write_plot_data(self, path):
        """Long-format per-replication estimates for external histograms."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rep", "parameter", "estimate", "stderr", "truth", "covered"])
            z = normal_quantile(1 - self.alpha / 2)
            for r in range(self.n_ok):
                for i, name in enumerate(self.names):
                    e, s, tr = self.estimates[r, i], self.stderr[r, i], self.truth[i]
                    writer.writerow([r, name, repr(float(e)), repr(float(s)), repr(float(tr)),
                                     int(abs(e - tr) <= z * s)])


def _pool_map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def monte_carlo(config: DGPConfig, reps: int, pipeline: Optional[dict] = None, alpha: float = 0.05,
                seed: int = 0, workers: int = 1, policies=None) -> MonteCarloReport:
    """Independent replications of simulate -> fit -> interval.

    Replication ``i`` draws its data and split seeds from
    ``SeedSequence([seed, i])``, so results do not depend on ``workers``.
    Replications whose estimator raises are recorded in ``failures``.
    """
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    pipeline = dict(pipeline or {"variant": "dyndml"})
    _validate_pipeline(pipeline)
    pols = _policies_from(policies, config)
    start = time.perf_counter()
    results = _pool_map(_one_rep, [(config, pipeline, seed, i, pols) for i in range(reps)], workers)
    runtime = time.perf_counter() - start
    ok = [r for r in results if "error" not in r]
    failures = [{"rep": r["rep"], "error": r["error"]} for r in results if "error" in r]
    truth = _truth_for(config, pipeline)
    names = _param_names(*truth.shape)
    P = truth.size
    est = np.array([r["estimates"] for r in ok]).reshape(len(ok), P)
    se = np.array([r["stderr"] for r in ok]).reshape(len(ok), P)
    report = MonteCarloReport(names, truth.reshape(-1), est, se, alpha, reps, failures, runtime,
                              config.to_dict(), pipeline)
    if pols:
        report.policy_names = [p.name for p in pols]
        report.policy_truth = np.array([true_policy_value(config, p) for p in pols])
        report.policy_values = np.array([r["policy_values"] for r in ok]).reshape(len(ok), len(pols))
        report.policy_stderr = np.array([r["policy_stderr"] for r in ok]).reshape(len(ok), len(pols))
    return report


# ---------------------------------------------------------------------------
# Benchmarks against period-by-period and non-orthogonal regressions

BENCHMARK_METHODS = ("dyndml", "no-ctrls", "init-ctrls", "init-ctrls-dml", "fin-ctrls", "fin-ctrls-dml", "direct")
NON_ORTHOGONAL = ("no-ctrls", "init-ctrls", "fin-ctrls", "direct")


def _direct_coef(y, T, W, learner, seed):
    """Coefficient on ``T`` in a regression of ``y`` on ``[T, W]`` (``T`` unpenalized)."""
    Z = np.hstack([T, W])
    spec = learner.resolve(*Z.shape)
    weights = np.r_[np.zeros(T.shape[1]), np.ones(W.shape[1])]
    model = fit(Z, y, spec, seed, weights=weights)
    return model.coef[: T.shape[1]]


def _dml_coef(y, T, W, learner, seed):
    """Cross-fitted partialling-out of ``W`` followed by OLS of residuals."""
    sp = make_split(len(y), seed, 2)
    targets = np.column_stack([y, T])
    preds, _, _ = crossfit_predictions(W, targets, learner, sp, t=0)
    res = targets - preds
    yt, Tt = res[:, 0], res[:, 1:]
    return np.linalg.lstsq(Tt, yt, rcond=None)[0]


def _benchmark_rep(args):
    config, learner_dict, master, rep = args
    data_seed, split_seed = _rep_seeds(master, rep)
    learner = LearnerSpec.from_dict(learner_dict)
    panel = generate(config, seed=data_seed)
    m, d = panel.m, panel.d
    y = panel.final_outcome
    out = {name: np.zeros((m, d)) for name in BENCHMARK_METHODS}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sp = make_split(panel, split_seed, 2)
        res = residualize_markov(panel, learner, sp)
        psi = peel(res)
        est = estimate_covariance(res, psi, with_diagnostics=False)
        se = est.stderr()
        ones = np.ones((panel.n, 0))
        peeled = y.copy()
        for lag in range(m):
            s = m - lag  # period of the treatment whose lag-`lag` effect is estimated
            T_s = panel.T(s)
            out["dyndml"][lag] = psi[s - 1]
            out["no-ctrls"][lag] = _direct_coef(y, T_s, ones, LearnerSpec(kind="ols"), split_seed)
            out["init-ctrls"][lag] = _direct_coef(y, T_s, panel.X(s), learner, split_seed)
            out["init-ctrls-dml"][lag] = _dml_coef(y, T_s, panel.X(s), learner, split_seed)
            out["fin-ctrls"][lag] = _direct_coef(y, T_s, panel.X(m), learner, split_seed)
            out["fin-ctrls-dml"][lag] = _dml_coef(y, T_s, panel.X(m), learner, split_seed)
            hist = [panel.T(j) for j in range(s - 1, 0, -1)] + [panel.states[:, :s].reshape(panel.n, -1)]
            coef = _direct_coef(peeled, T_s, np.hstack(hist), learner, split_seed)
            out["direct"][lag] = coef
            peeled = peeled - T_s @ coef
    dyn_se = np.array([se[m - 1 - lag] for lag in range(m)])
    return {"rep": rep, "estimates": out, "dyndml_stderr": dyn_se}


@dataclass
class BenchmarkReport:
    """Estimates per method, replication and lag; lag ``k`` is the effect of ``T_{m-k}``."""

    methods: tuple
    truth: np.ndarray
    estimates: Dict[str, np.ndarray]
    dyndml_stderr: np.ndarray
    reps: int
    runtime: float
    config: dict

    def abs_error(self, method):
        return np.abs(self.estimates[method] - self.truth[None])

    def win_rate(self, baseline: str, lag: int) -> float:
        """Fraction of reps where Dynamic DML's absolute error at ``lag`` is strictly
        below ``baseline``'s (averaged over treatment coordinates)."""
        ours = self.abs_error("dyndml")[:, lag]
        theirs = self.abs_error(baseline)[:, lag]
        return float(np.mean(ours < theirs))

    def dyndml_coverage(self, alpha: float = 0.05) -> np.ndarray:
        z = normal_quantile(1 - alpha / 2)
        return np.mean(self.abs_error("dyndml") <= z * self.dyndml_stderr, axis=0)

    def rows(self):
        rows = []
        for method in self.methods:
            est = self.estimates[method]
            for lag in range(self.truth.shape[0]):
                for c in range(self.truth.shape[1]):
                    vals = est[:, lag, c]
                    row = {"method": method, "lag": lag, "coord": c, "truth": float(self.truth[lag, c]),
                           "mean": float(vals.mean()), "bias": float(vals.mean() - self.truth[lag, c]),
                           "mean_abs_error": float(np.mean(np.abs(vals - self.truth[lag, c]))),
                           "rmse": float(np.sqrt(np.mean((vals - self.truth[lag, c]) ** 2)))}
                    if method in NON_ORTHOGONAL:
                        row["dyndml_win_rate"] = float(np.mean(
                            self.abs_error("dyndml")[:, lag, c] < self.abs_error(method)[:, lag, c]))
                    else:
                        row["dyndml_win_rate"] = None
                    rows.append(row)
        return rows

    def to_dict(self, include_timing: bool = True):
        out = {"reps": self.reps, "methods": list(self.methods), "table": self.rows(),
               "config": self.config,
               "dyndml_coverage": self.dyndml_coverage().tolist()}
        if include_timing:
            out["timing"] = {"runtime_seconds": self.runtime}
        return out

    def write_csv(self, path):
        rows = self.rows()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


def benchmarks(config: DGPConfig, reps: int, seed: int = 0, learner: Optional[LearnerSpec] = None,
               workers: int = 1) -> BenchmarkReport:
    """Dynamic DML against the static and non-orthogonal baselines on the same draws."""
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    learner = learner or LearnerSpec()
    start = time.perf_counter()
    results = _pool_map(_benchmark_rep, [(config, learner.to_dict(), seed, i) for i in range(reps)], workers)
    runtime = time.perf_counter() - start
    psi = true_effects(config)
    truth = np.stack([psi[config.m - 1 - lag] for lag in range(config.m)])
    est = {meth: np.stack([r["estimates"][meth] for r in results]) for meth in BENCHMARK_METHODS}
    se = np.stack([r["dyndml_stderr"] for r in results])
    return BenchmarkReport(BENCHMARK_METHODS, truth, est, se, reps, runtime, config.to_dict())
