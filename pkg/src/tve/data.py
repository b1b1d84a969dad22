"""Observation data model, simulated data-generating distributions, CSV
ingestion and the positivity-filtered resampling harness."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from .errors import EmptyDataError, InputError, InvalidSizeError, PositivityError, SchemaError
from .rng import stream


@dataclass(frozen=True)
class Dataset:
    """n observations of (W, A, Y) with binary A and Y."""

    w: np.ndarray
    a: np.ndarray
    y: np.ndarray
    names: tuple = ()
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        a = np.asarray(self.a)
        y = np.asarray(self.y)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise InvalidSizeError(f"covariates must be n x p with n, p >= 1, got {w.shape}")
        n = w.shape[0]
        if a.shape != (n,) or y.shape != (n,):
            raise InvalidSizeError("w, a and y must share the same number of rows")
        if not np.all(np.isfinite(w)):
            raise InputError("covariates contain non-finite values")
        for label, v in (("treatment", a), ("outcome", y)):
            if not np.all((v == 0) | (v == 1)):
                raise SchemaError(f"{label} must contain only 0 or 1")
        names = tuple(self.names) if len(self.names) else tuple(f"W{j + 1}" for j in range(w.shape[1]))
        if len(names) != w.shape[1]:
            raise SchemaError(f"{len(names)} names for {w.shape[1]} covariates")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "a", a.astype(np.int64))
        object.__setattr__(self, "y", y.astype(np.int64))
        object.__setattr__(self, "names", names)

    @property
    def n(self):
        return self.w.shape[0]

    @property
    def p(self):
        return self.w.shape[1]

    def subset(self, rows):
        rows = np.asarray(rows)
        return Dataset(self.w[rows], self.a[rows], self.y[rows], self.names)

    def to_frame(self, oracle=None):
        df = pd.DataFrame(self.w, columns=list(self.names))
        df["A"] = self.a
        df["Y"] = self.y
        if oracle is not None:
            df["g1_true"] = oracle.g1_true
            df["qbar1_true"] = oracle.qbar1_true
            df["qbar0_true"] = oracle.qbar0_true
        return df


class DgdKind(str, enum.Enum):
    SIMPLE = "simple"
    COMPLEX = "complex"


@dataclass(frozen=True)
class DgdSpec:
    kind: DgdKind = DgdKind.SIMPLE
    beta_p: float = -2.0
    beta_psi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", DgdKind(self.kind))
        if not (math.isfinite(self.beta_p) and math.isfinite(self.beta_psi)):
            raise InputError("beta_p and beta_psi must be finite")


@dataclass(frozen=True)
class OracleNuisance:
    g1_true: np.ndarray
    qbar1_true: np.ndarray
    qbar0_true: np.ndarray


def propensity_lp(spec, w1, w2, w3):
    """Linear predictor of P(A=1 | W)."""
    bp = spec.beta_p
    lp = bp - (bp + 2.5) * w1 + 1.75 * w2 + (bp + 3.2) * w3
    if spec.kind is DgdKind.COMPLEX:
        lp = lp - 0.75 * w1 * w2 + 0.75 * w2**2
    return lp


def outcome_lp(spec, w1, w2, w3, a):
    """Linear predictor of P(Y=1 | A, W)."""
    if spec.kind is DgdKind.COMPLEX:
        lp = 0.1 + 0.1 * w1 + 0.1 * w2 + 0.2 * w3 - 0.5 * w1 * w3 + 0.3 * w1**2
    else:
        lp = 0.1 + 0.1 * w1 + 0.1 * w2 + 0.1 * w3
    return lp + spec.beta_psi * a


def true_nuisances(spec, w):
    """Exact g(1|W), Q(1,W), Q(0,W) at the rows of ``w``."""
    w1, w2, w3 = w[:, 0], w[:, 1], w[:, 2]
    return OracleNuisance(
        g1_true=expit(propensity_lp(spec, w1, w2, w3)),
        qbar1_true=expit(outcome_lp(spec, w1, w2, w3, 1.0)),
        qbar0_true=expit(outcome_lp(spec, w1, w2, w3, 0.0)),
    )


def simulate(spec, n, seed, rep=None):
    """Draw ``n`` observations from the DGD; deterministic in (seed, rep).

    Returns ``(Dataset, OracleNuisance)``.
    """
    if n < 1:
        raise InvalidSizeError(f"n must be >= 1, got {n}")
    keys = ("simulate",) if rep is None else ("simulate", rep)
    rng = stream(seed, *keys)
    w = rng.random((n, 3))
    oracle = true_nuisances(spec, w)
    a = (rng.random(n) < oracle.g1_true).astype(np.int64)
    q = np.where(a == 1, oracle.qbar1_true, oracle.qbar0_true)
    y = (rng.random(n) < q).astype(np.int64)
    return Dataset(w, a, y, ("W1", "W2", "W3")), oracle


# --------------------------------------------------------------------------
# CSV


def _numeric_column(series, label):
    """Exact float parse (NaN where missing); pandas' fast parser is not round-trip safe."""
    probe = pd.to_numeric(series, errors="coerce")
    bad = probe.isna() & series.notna()
    if bad.any():
        raise SchemaError(f"column {label!r} has non-numeric values, e.g. {series[bad].iloc[0]!r}")
    return series.astype(float)


def _binary_column(series, label):
    vals = _numeric_column(series, label)
    ok = vals.dropna()
    if not ok.isin([0, 1]).all():
        raise SchemaError(f"column {label!r} must be binary 0/1, found {ok[~ok.isin([0, 1])].iloc[0]!r}")
    return vals


def load_csv(path, treatment_col="A", outcome_col="Y", covariate_cols=None):
    """Read a header-first CSV into a `Dataset`.

    Rows with a missing value in any selected column are dropped; the count
    is stored in ``dataset.meta["n_dropped"]``. ``covariate_cols=None``
    uses every column other than treatment and outcome.
    """
    raw = pd.read_csv(path, dtype=str, keep_default_na=True, encoding="utf-8")
    missing = [c for c in (treatment_col, outcome_col) if c not in raw.columns]
    if covariate_cols is None:
        covariate_cols = [c for c in raw.columns if c not in (treatment_col, outcome_col)]
    missing += [c for c in covariate_cols if c not in raw.columns]
    if missing:
        raise SchemaError(f"missing columns: {missing}")
    if not covariate_cols:
        raise SchemaError("no covariate columns")

    a = _binary_column(raw[treatment_col], treatment_col)
    y = _binary_column(raw[outcome_col], outcome_col)
    w = {}
    for c in covariate_cols:
        w[c] = _numeric_column(raw[c], c)
    frame = pd.DataFrame(w)
    frame["__a"] = a
    frame["__y"] = y
    keep = frame.notna().all(axis=1)
    n_dropped = int((~keep).sum())
    frame = frame[keep]
    if len(frame) == 0:
        raise EmptyDataError(f"{path}: no usable rows")
    wm = frame[list(covariate_cols)].to_numpy(dtype=float)
    if not np.all(np.isfinite(wm)):
        raise SchemaError("covariates contain non-finite values")
    return Dataset(
        wm,
        frame["__a"].to_numpy().astype(np.int64),
        frame["__y"].to_numpy().astype(np.int64),
        tuple(str(c) for c in covariate_cols),
        meta={"n_dropped": n_dropped, "source": str(path)},
    )


def write_csv(d, path, oracle=None):
    """Write ``d`` (and optionally the oracle columns) with 17 significant digits."""
    d.to_frame(oracle).to_csv(path, index=False, float_format="%.17g")


# --------------------------------------------------------------------------
# resampling harness


@dataclass(frozen=True)
class Rejected:
    proportion: float
    reason: str = "below-threshold"


def default_trunc_level(m):
    """``5 / (sqrt(m) * log(m))``, about 0.036 at m = 500."""
    return 5.0 / (math.sqrt(m) * math.log(m))


def truncation_proportion(g1, level):
    g1 = np.asarray(g1)
    return float(np.mean((g1 < level) | (g1 > 1.0 - level)))


def resample_filtered(source, m, trunc_level=None, min_prop=0.01, learner=None, seed=0):
    """Subsample ``m`` rows and keep it only if positivity is strained enough.

    The propensity score is re-fit on the subsample. The subsample is
    returned iff the share of fitted g1 outside ``[t, 1 - t]`` exceeds
    ``min_prop``; otherwise a `Rejected` carrying that share.
    """
    from .learners import LearnerSpec, fit_propensity

    if m < 2 or m > source.n:
        raise InvalidSizeError(f"m must be in [2, {source.n}], got {m}")
    if trunc_level is None:
        trunc_level = default_trunc_level(m)
    if not 0.0 < trunc_level < 0.5:
        raise InputError("trunc_level must lie in (0, 0.5)")
    rows = np.sort(stream(seed, "resample").choice(source.n, size=m, replace=False))
    sub = source.subset(rows)
    try:
        g1 = fit_propensity(sub, learner or LearnerSpec(), seed=seed)
    except PositivityError:
        return Rejected(float("nan"), "single-arm")
    prop = truncation_proportion(g1, trunc_level)
    if prop > min_prop:
        sub.meta.update(rows=rows, trunc_proportion=prop, trunc_level=trunc_level)
        return sub
    return Rejected(prop)
