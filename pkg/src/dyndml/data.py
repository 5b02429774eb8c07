"""Panel and single-series containers, sample splitting and CSV/JSON I/O.

Periods are 1-indexed in every public API (``t`` in ``1..m``); arrays are
stored 0-indexed, so period ``t`` lives at position ``t - 1``.
"""
from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import ParseError, SchemaError, ShapeError, ValidationError

__all__ = [
    "PanelDataset",
    "SingleSeries",
    "SplitAssignment",
    "PanelSchema",
    "split",
    "load_panel_csv",
    "write_panel_csv",
    "load_panel_json",
    "write_panel_json",
    "load_series_csv",
    "write_series_csv",
]


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise ValidationError(f"{name} has a non-finite entry at index {tuple(int(i) for i in bad)}")


@dataclass(frozen=True)
class PanelDataset:
    """``n`` independent trajectories of length ``m``.

    states : (n, m, p), treatments : (n, m, d), final_outcome : (n,).
    ``exo_features`` (n, k) holds time-invariant unit characteristics and
    ``per_period_outcomes`` (n, m) the optional outcome at every period.
    """

    states: np.ndarray
    treatments: np.ndarray
    final_outcome: np.ndarray
    exo_features: Optional[np.ndarray] = None
    per_period_outcomes: Optional[np.ndarray] = None
    unit_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        treatments = np.asarray(self.treatments, dtype=float)
        y = np.asarray(self.final_outcome, dtype=float).reshape(-1)
        if treatments.ndim == 2:
            treatments = treatments[:, :, None]
        if states.ndim == 2:
            states = states[:, :, None]
        if states.ndim != 3 or treatments.ndim != 3:
            raise ShapeError("states and treatments must be (n, m, p) and (n, m, d) arrays")
        n, m, d = treatments.shape
        if states.shape[:2] != (n, m):
            raise ShapeError(f"states shape {states.shape} does not match treatments {treatments.shape}")
        if y.shape != (n,):
            raise ShapeError(f"final_outcome must have length {n}, got {y.shape}")
        if n < 2 or m < 1 or d < 1:
            raise ShapeError(f"need n >= 2, m >= 1, d >= 1; got n={n}, m={m}, d={d}")
        _check_finite("states", states)
        _check_finite("treatments", treatments)
        _check_finite("final_outcome", y)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "treatments", treatments)
        object.__setattr__(self, "final_outcome", y)
        if self.exo_features is not None:
            exo = np.asarray(self.exo_features, dtype=float)
            if exo.ndim == 1:
                exo = exo[:, None]
            if exo.shape[0] != n:
                raise ShapeError(f"exo_features must have {n} rows, got {exo.shape[0]}")
            _check_finite("exo_features", exo)
            object.__setattr__(self, "exo_features", exo)
        if self.per_period_outcomes is not None:
            ys = np.asarray(self.per_period_outcomes, dtype=float)
            if ys.shape != (n, m):
                raise ShapeError(f"per_period_outcomes must be ({n}, {m}), got {ys.shape}")
            _check_finite("per_period_outcomes", ys)
            if not np.array_equal(ys[:, -1], y):
                raise ValidationError("last column of per_period_outcomes must equal final_outcome")
            object.__setattr__(self, "per_period_outcomes", ys)
        if self.unit_ids is not None:
            ids = np.asarray(self.unit_ids)
            if ids.shape != (n,):
                raise ShapeError("unit_ids must have one entry per unit")
            object.__setattr__(self, "unit_ids", ids)
        for arr in (self.states, self.treatments, self.final_outcome,
                    self.exo_features, self.per_period_outcomes):
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.treatments.shape[0]

    @property
    def m(self) -> int:
        return self.treatments.shape[1]

    @property
    def d(self) -> int:
        return self.treatments.shape[2]

    @property
    def p(self) -> int:
        return self.states.shape[2]

    @property
    def k(self) -> int:
        return 0 if self.exo_features is None else self.exo_features.shape[1]

    def X(self, t: int) -> np.ndarray:
        """State at period ``t`` (1-indexed), shape (n, p)."""
        return self.states[:, t - 1]

    def T(self, t: int) -> np.ndarray:
        """Treatment at period ``t`` (1-indexed), shape (n, d); ``T(0)`` is zero."""
        if t == 0:
            return np.zeros((self.n, self.d))
        return self.treatments[:, t - 1]

    def subset(self, index) -> "PanelDataset":
        index = np.asarray(index)
        return PanelDataset(
            states=self.states[index],
            treatments=self.treatments[index],
            final_outcome=self.final_outcome[index],
            exo_features=None if self.exo_features is None else self.exo_features[index],
            per_period_outcomes=None if self.per_period_outcomes is None else self.per_period_outcomes[index],
            unit_ids=None if self.unit_ids is None else self.unit_ids[index],
        )

    def with_outcome(self, y) -> "PanelDataset":
        """Copy with a replaced final outcome (per-period outcomes dropped)."""
        return PanelDataset(self.states, self.treatments, np.asarray(y, dtype=float),
                            exo_features=self.exo_features, unit_ids=self.unit_ids)


@dataclass(frozen=True)
class SingleSeries:
    """One long trajectory cut into consecutive blocks of ``block_length`` periods.

    Trailing periods that do not fill a block are dropped, and the block count
    is reduced to an even number, with a warning.
    """

    states: np.ndarray
    treatments: np.ndarray
    outcomes: np.ndarray
    block_length: int

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        treatments = np.asarray(self.treatments, dtype=float)
        outcomes = np.asarray(self.outcomes, dtype=float).reshape(-1)
        if states.ndim == 1:
            states = states[:, None]
        if treatments.ndim == 1:
            treatments = treatments[:, None]
        L = outcomes.shape[0]
        if states.shape[0] != L or treatments.shape[0] != L:
            raise ShapeError("states, treatments and outcomes must share their length")
        m = int(self.block_length)
        if m < 1:
            raise ValidationError("block_length must be >= 1")
        for name, arr in (("states", states), ("treatments", treatments), ("outcomes", outcomes)):
            _check_finite(name, arr)
        B = L // m
        if B % 2:
            B -= 1
        if B < 4:
            raise ShapeError(f"series of length {L} gives {B} blocks of length {m}; need at least 4")
        if B * m != L:
            warnings.warn(f"dropping {L - B * m} trailing periods to get an even block count B={B}")
        keep = B * m
        object.__setattr__(self, "states", states[:keep])
        object.__setattr__(self, "treatments", treatments[:keep])
        object.__setattr__(self, "outcomes", outcomes[:keep])
        object.__setattr__(self, "block_length", m)

    @property
    def length(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.length // self.block_length

    def as_blocks(self) -> PanelDataset:
        """Reshape into a panel with one row per block (block b at row b - 1)."""
        B, m = self.n_blocks, self.block_length
        ys = self.outcomes.reshape(B, m)
        return PanelDataset(
            states=self.states.reshape(B, m, -1),
            treatments=self.treatments.reshape(B, m, -1),
            final_outcome=ys[:, -1],
            per_period_outcomes=ys,
        )


@dataclass(frozen=True)
class SplitAssignment:
    """Fold label (0-based) for every unit."""

    folds: np.ndarray
    n_folds: int
    seed: int

    def train_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.folds != k)

    def test_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.folds == k)

    def sizes(self):
        return np.bincount(self.folds, minlength=self.n_folds)

    def swapped(self, perm: Sequence[int]) -> "SplitAssignment":
        """Relabel folds: new label of fold ``k`` is ``perm[k]``."""
        perm = np.asarray(perm)
        return SplitAssignment(perm[self.folds], self.n_folds, self.seed)


def split(dataset, seed: int, folds: int = 2) -> SplitAssignment:
    """Uniformly random partition into ``folds`` parts of near-equal size.

    ``dataset`` may be a PanelDataset or a unit count. Sizes differ by at
    most one; the first folds receive the extra units.
    """
    n = dataset if isinstance(dataset, (int, np.integer)) else dataset.n
    if folds < 2:
        raise ValidationError("folds must be >= 2")
    if folds > n:
        raise ValidationError(f"cannot split {n} units into {folds} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    labels = np.empty(n, dtype=np.int64)
    labels[perm] = np.arange(n) % folds
    return SplitAssignment(labels, folds, seed)


# ---------------------------------------------------------------------------
# CSV / JSON


@dataclass
class PanelSchema:
    """Column mapping for panel files; ``None`` lists are inferred from prefixes."""

    unit: str = "unit"
    period: str = "period"
    y: str = "y"
    treatments: Optional[list] = None
    states: Optional[list] = None
    exo: Optional[list] = None

    def resolve(self, columns):
        def by_prefix(prefix):
            pat = re.compile(rf"^{prefix}(\d+)$")
            hits = [(int(pat.match(c).group(1)), c) for c in columns if pat.match(c)]
            return [c for _, c in sorted(hits)]

        treatments = self.treatments if self.treatments is not None else by_prefix("t_")
        states = self.states if self.states is not None else by_prefix("x_")
        exo = self.exo if self.exo is not None else by_prefix("x0_")
        required = [self.unit, self.period, self.y] + list(treatments) + list(states) + list(exo)
        missing = [c for c in required if c not in columns]
        if missing:
            raise SchemaError(f"missing column(s): {', '.join(missing)}")
        if not treatments:
            raise SchemaError("no treatment columns (t_1..t_d) found")
        return list(treatments), list(states), list(exo)


def _numeric_frame(df: pd.DataFrame, cols) -> np.ndarray:
    out = np.empty((len(df), len(cols)))
    for j, col in enumerate(cols):
        raw = df[col]
        try:
            # numpy's string parser round-trips %.17g exactly; pandas' fast parser does not
            vals = raw.to_numpy(dtype=str).astype(float)
        except ValueError:
            vals = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(vals)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ParseError(f"row {row} column '{col}': value {raw.iloc[row]!r} is not a finite number")
        out[:, j] = vals
    return out


def _panel_from_frame(df: pd.DataFrame, schema: Optional[PanelSchema]) -> PanelDataset:
    schema = schema or PanelSchema()
    t_cols, x_cols, x0_cols = schema.resolve(list(df.columns))
    periods = _numeric_frame(df, [schema.period])[:, 0]
    units = df[schema.unit].to_numpy()
    try:
        unit_keys = pd.to_numeric(pd.Series(units), errors="raise").to_numpy()
    except (ValueError, TypeError):
        unit_keys = units.astype(str)
    uniq = np.unique(unit_keys)
    period_values = np.unique(periods)
    m = len(period_values)
    if not np.array_equal(period_values, np.arange(1, m + 1)):
        raise ShapeError(f"periods must be contiguous 1..m, found {period_values.tolist()}")
    counts = {u: 0 for u in uniq}
    for u in unit_keys:
        counts[u] += 1
    for u in uniq:
        if counts[u] != m:
            raise ShapeError(f"unit {u} has {counts[u]} rows, expected m={m}")
    order = np.lexsort((periods, unit_keys))
    df = df.iloc[order].reset_index(drop=True)
    periods = periods[order]
    unit_keys = unit_keys[order]
    n = len(uniq)
    expected = np.tile(np.arange(1, m + 1), n)
    if not np.array_equal(periods, expected):
        bad = int(np.flatnonzero(periods != expected)[0]) // m
        raise ShapeError(f"unit {uniq[bad]} has duplicate or missing periods")
    y = _numeric_frame(df, [schema.y]).reshape(n, m)
    T = _numeric_frame(df, t_cols).reshape(n, m, len(t_cols))
    X = _numeric_frame(df, x_cols).reshape(n, m, len(x_cols)) if x_cols else np.zeros((n, m, 0))
    exo = None
    if x0_cols:
        exo_all = _numeric_frame(df, x0_cols).reshape(n, m, len(x0_cols))
        if not np.all(exo_all == exo_all[:, :1]):
            raise ValidationError("exogenous features x0_* must be constant within each unit")
        exo = exo_all[:, 0]
    return PanelDataset(states=X, treatments=T, final_outcome=y[:, -1], exo_features=exo,
                        per_period_outcomes=y, unit_ids=uniq)


def load_panel_csv(path, schema: Optional[PanelSchema] = None) -> PanelDataset:
    """Read a long-format panel CSV (one row per unit-period)."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"file not found: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    return _panel_from_frame(df, schema)


def _panel_frame(panel: PanelDataset) -> pd.DataFrame:
    n, m = panel.n, panel.m
    ids = panel.unit_ids if panel.unit_ids is not None else np.arange(1, n + 1)
    ys = panel.per_period_outcomes
    if ys is None:
        ys = np.zeros((n, m))
        ys[:, -1] = panel.final_outcome
    cols = {
        "unit": np.repeat(ids, m),
        "period": np.tile(np.arange(1, m + 1), n),
        "y": ys.reshape(-1),
    }
    for j in range(panel.d):
        cols[f"t_{j + 1}"] = panel.treatments[:, :, j].reshape(-1)
    for j in range(panel.p):
        cols[f"x_{j + 1}"] = panel.states[:, :, j].reshape(-1)
    for j in range(panel.k):
        cols[f"x0_{j + 1}"] = np.repeat(panel.exo_features[:, j], m)
    return pd.DataFrame(cols)


def write_panel_csv(panel: PanelDataset, path) -> None:
    """Write ``panel`` in the long CSV layout; floats use round-trip precision."""
    _panel_frame(panel).to_csv(path, index=False, float_format="%.17g")


def load_panel_json(path, schema: Optional[PanelSchema] = None) -> PanelDataset:
    """Read the JSON mirror of the CSV layout: ``{"columns": {name: [values...]}}``."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    columns = payload.get("columns", payload)
    df = pd.DataFrame({k: [str(v) for v in vals] for k, vals in columns.items()})
    return _panel_from_frame(df, schema)


def write_panel_json(panel: PanelDataset, path) -> None:
    df = _panel_frame(panel)
    columns = {c: df[c].tolist() for c in df.columns}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"columns": columns}, fh)


def load_series_csv(path, block_length: int) -> SingleSeries:
    """Read a single-unit series (``period,y,t_*,x_*``, no unit column)."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    schema = PanelSchema()
    if "period" not in df.columns or "y" not in df.columns:
        raise SchemaError("series CSV needs 'period' and 'y' columns")
    df = df.assign(unit="1")
    t_cols, x_cols, _ = schema.resolve(list(df.columns))
    periods = _numeric_frame(df, ["period"])[:, 0]
    order = np.argsort(periods, kind="stable")
    df = df.iloc[order].reset_index(drop=True)
    y = _numeric_frame(df, ["y"])[:, 0]
    T = _numeric_frame(df, t_cols)
    X = _numeric_frame(df, x_cols) if x_cols else np.zeros((len(df), 0))
    return SingleSeries(states=X, treatments=T, outcomes=y, block_length=block_length)


def write_series_csv(series: SingleSeries, path) -> None:
    cols = {"period": np.arange(1, series.length + 1), "y": series.outcomes}
    for j in range(series.treatments.shape[1]):
        cols[f"t_{j + 1}"] = series.treatments[:, j]
    for j in range(series.states.shape[1]):
        cols[f"x_{j + 1}"] = series.states[:, j]
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g")
