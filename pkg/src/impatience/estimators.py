"""Counterfactual estimators over randomized logs.

Exact importance-weighted (IPS) totals, their linearized first-order
marginals, marginal ROI per cluster, and user-level bootstrap
confidence intervals. All estimators are pure folds over users; the
headline reductions use compensated summation so that partitioned
and serial evaluation agree to ~1e-10 relative.

User subsets must be declared over pre-randomization state (the
exposure cluster fixed at collection start): this is what makes the
importance weights unbiased. Subsets built from post-randomization
fields are rejected unless constructed through the explicitly unsafe
escape hatch, which exists to demonstrate the resulting bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .domain import (
    ClusterRow,
    IndependenceViolationError,
    PolicySpec,
    RandomizationSpec,
    RandomizedLog,
    ValidationError,
)

METRICS = ("cost", "value_observed", "value_predicted")


def _check_metric(selector: str) -> str:
    if selector not in METRICS:
        raise ValidationError(f"unknown metric selector {selector!r}; expected one of {METRICS}")
    return selector


def exact_weight(theta, spec: RandomizationSpec, alpha: float):
    """Likelihood ratio of the alpha-scaled exploration law vs the logged one.

    exp((2 ln(alpha) (ln(theta) - mu) - ln(alpha)^2) / (2 sigma^2));
    reweighting logged outcomes by it estimates the counterfactual
    total under multiplier alpha without bias.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta <= 0):
        raise ValidationError("theta must be > 0")
    if not alpha > 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}")
    la = math.log(alpha)
    out = np.exp((2 * la * (np.log(theta) - spec.mu) - la * la) / (2 * spec.sigma**2))
    return float(out) if out.ndim == 0 else out


def linear_weight(theta, spec: RandomizationSpec):
    """Derivative of the exact weight in alpha at alpha = 1: (ln(theta) - mu) / sigma^2."""
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta <= 0):
        raise ValidationError("theta must be > 0")
    out = (np.log(theta) - spec.mu) / spec.sigma**2
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class UserSubset:
    """A set of users declared over pre-randomization state only.

    Safe constructors select by exposure cluster. The unsafe
    constructor accepts an arbitrary membership mask and taints the
    subset; estimators reject tainted subsets unless explicitly told
    not to.
    """

    clusters: frozenset[int] | None = None
    unsafe_mask: tuple[bool, ...] | None = None

    @classmethod
    def all_users(cls) -> "UserSubset":
        return cls()

    @classmethod
    def from_clusters(cls, clusters) -> "UserSubset":
        return cls(clusters=frozenset(int(c) for c in clusters))

    @classmethod
    def unsafe_from_mask(cls, mask) -> "UserSubset":
        """Escape hatch: membership from arbitrary (possibly
        post-randomization) state. Estimates over such subsets are
        biased; see the independence demonstration tests."""
        return cls(unsafe_mask=tuple(bool(b) for b in mask))

    @property
    def is_unsafe(self) -> bool:
        return self.unsafe_mask is not None

    def mask(self, log: RandomizedLog) -> np.ndarray:
        if self.unsafe_mask is not None:
            m = np.asarray(self.unsafe_mask, dtype=bool)
            if len(m) != len(log):
                raise ValidationError(f"mask length {len(m)} != log size {len(log)}")
            return m
        if self.clusters is None:
            return np.ones(len(log), dtype=bool)
        return np.isin(log.arrays["cluster"], sorted(self.clusters))


def _resolve_subset(subset, log: RandomizedLog, allow_unsafe: bool) -> np.ndarray:
    if subset is None:
        subset = UserSubset.all_users()
    if not isinstance(subset, UserSubset):
        raise IndependenceViolationError(
            "user subsets must be UserSubset instances declared over "
            "exposure_at_start/cluster; raw predicates cannot be checked for "
            "independence from theta"
        )
    if subset.is_unsafe and not allow_unsafe:
        raise IndependenceViolationError(
            "subset was built from arbitrary (post-randomization) state; "
            "pass allow_unsafe=True only to demonstrate the resulting bias"
        )
    return subset.mask(log)


def compensated_sum(values) -> float:
    """Error-free-transformation sum (exactly rounded)."""
    return math.fsum(np.asarray(values, dtype=np.float64))


def ips_estimate(
    log: RandomizedLog,
    selector: str,
    subset: UserSubset | None = None,
    policy: PolicySpec | None = None,
    allow_unsafe: bool = False,
) -> float:
    """Exact-IPS counterfactual total of a metric under per-cluster multipliers.

    Sum over the subset of m_i * exact_weight(theta_i, alpha_cluster(i));
    with no policy (all multipliers one) this is the raw logged total.
    """
    _check_metric(selector)
    mask = _resolve_subset(subset, log, allow_unsafe)
    arr = log.arrays
    m = arr[selector][mask]
    if m.size == 0:
        return 0.0
    if policy is None:
        return compensated_sum(m)
    alphas = policy.multiplier_array(log.n_clusters)
    theta = arr["theta"][mask]
    cluster = arr["cluster"][mask]
    la = np.log(alphas[cluster])
    w = np.exp((2 * la * (np.log(theta) - log.spec.mu) - la * la) / (2 * log.spec.sigma**2))
    return compensated_sum(m * w)


def marginal_estimate(
    log: RandomizedLog,
    selector: str,
    cluster: int | Sequence[int] | None = None,
) -> float:
    """Linearized estimate of d(total metric)/d(alpha) at alpha = 1 on a cluster."""
    _check_metric(selector)
    if cluster is None:
        subset = UserSubset.all_users()
    elif isinstance(cluster, (int, np.integer)):
        subset = UserSubset.from_clusters([cluster])
    else:
        subset = UserSubset.from_clusters(cluster)
    mask = subset.mask(log)
    arr = log.arrays
    m = arr[selector][mask]
    if m.size == 0:
        return 0.0
    lw = (np.log(arr["theta"][mask]) - log.spec.mu) / log.spec.sigma**2
    return compensated_sum(m * lw)


@dataclass(frozen=True)
class MarginalRoi:
    """Ratio of value and cost derivatives; undefined when the cost
    derivative is degenerate (the raw numerator/denominator are kept)."""

    value: float | None
    numerator: float
    denominator: float

    @property
    def defined(self) -> bool:
        return self.value is not None


def marginal_roi(
    log: RandomizedLog,
    cluster: int | None,
    value_selector: str = "value_predicted",
    rel_threshold: float = 1e-9,
) -> MarginalRoi:
    """Marginal ROI on a cluster: marginal value per marginal unit of spend."""
    _check_metric(value_selector)
    num = marginal_estimate(log, value_selector, cluster)
    den = marginal_estimate(log, "cost", cluster)
    mask = UserSubset.all_users().mask(log) if cluster is None else (log.arrays["cluster"] == cluster)
    scale = float(np.abs(log.arrays["cost"][mask]).sum())
    if abs(den) < rel_threshold * scale or scale == 0.0:
        return MarginalRoi(value=None, numerator=num, denominator=den)
    return MarginalRoi(value=num / den, numerator=num, denominator=den)


@dataclass(frozen=True)
class BootstrapResult:
    low: float | np.ndarray
    high: float | np.ndarray
    point: float | np.ndarray


def bootstrap_ci(
    estimator: Callable[[np.ndarray], float | np.ndarray],
    log: RandomizedLog,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> BootstrapResult:
    """Percentile interval from whole-user resamples with replacement.

    `estimator` maps an index array into the log's users to a scalar
    or vector statistic; the user is the independence unit, so
    resampling never splits a user's records.
    """
    if n_resamples < 100:
        raise ValidationError("n_resamples must be >= 100")
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    n = len(log)
    rng = np.random.default_rng(seed)
    point = np.asarray(estimator(np.arange(n)), dtype=np.float64)
    stats = np.empty((n_resamples,) + point.shape)
    for r in range(n_resamples):
        idx = rng.integers(0, n, n)
        stats[r] = estimator(idx)
    tail = (1 - level) / 2
    low = np.quantile(stats, tail, axis=0)
    high = np.quantile(stats, 1 - tail, axis=0)
    if point.ndim == 0:
        return BootstrapResult(float(low), float(high), float(point))
    return BootstrapResult(low, high, point)


def cluster_estimates(
    log: RandomizedLog,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    value_selector: str = "value_predicted",
    rel_threshold: float = 1e-9,
) -> list[ClusterRow]:
    """Per-cluster marginal cost/value derivatives, marginal ROI, and CIs."""
    _check_metric(value_selector)
    arr = log.arrays
    nc = log.n_clusters
    lw = (np.log(arr["theta"]) - log.spec.mu) / log.spec.sigma**2
    cost_w = arr["cost"] * lw
    value_w = arr[value_selector] * lw
    cluster = arr["cluster"]
    scale = np.bincount(cluster, weights=np.abs(arr["cost"]), minlength=nc)

    def stat(idx: np.ndarray) -> np.ndarray:
        c = cluster[idx]
        dcost = np.bincount(c, weights=cost_w[idx], minlength=nc)
        dvalue = np.bincount(c, weights=value_w[idx], minlength=nc)
        with np.errstate(divide="ignore", invalid="ignore"):
            mroi = np.where(np.abs(dcost) > rel_threshold * scale, dvalue / dcost, np.nan)
        return np.concatenate([dcost, dvalue, mroi])

    ci = bootstrap_ci(stat, log, n_resamples=n_resamples, level=level, seed=seed)
    n_users = np.bincount(cluster, minlength=nc)
    rows = []
    for c in range(nc):
        # point estimates use compensated sums; bootstrap spread is noise-dominated
        dcost = marginal_estimate(log, "cost", c)
        dvalue = marginal_estimate(log, value_selector, c)
        roi = marginal_roi(log, c, value_selector, rel_threshold)
        mroi_ci = None
        lo, hi = ci.low[2 * nc + c], ci.high[2 * nc + c]
        if np.isfinite(lo) and np.isfinite(hi):
            mroi_ci = (float(lo), float(hi))
        rows.append(
            ClusterRow(
                cluster=c,
                n_users=int(n_users[c]),
                dcost=dcost,
                dvalue=dvalue,
                mroi=roi.value,
                dcost_ci=(float(ci.low[c]), float(ci.high[c])),
                dvalue_ci=(float(ci.low[nc + c]), float(ci.high[nc + c])),
                mroi_ci=mroi_ci,
            )
        )
    return rows


@dataclass(frozen=True)
class WeightProfileRow:
    alpha: float
    std_exact: float
    std_linear: float


def weight_std_profile(
    spec: RandomizationSpec,
    alphas: Sequence[float],
    n_samples: int = 100_000,
    seed: int = 0,
) -> list[WeightProfileRow]:
    """Empirical spread of exact vs linearized importance weights per alpha.

    The exact-weight std explodes as alpha moves away from 1 (it is
    sqrt(exp(ln(alpha)^2 / sigma^2) - 1) in truth); the linearized
    counterpart |alpha - 1| * std((ln(theta) - mu) / sigma^2) grows
    linearly.
    """
    rng = np.random.default_rng(seed)
    theta = rng.lognormal(spec.mu, spec.sigma, n_samples)
    lin_std = float(np.std(linear_weight(theta, spec), ddof=1))
    rows = []
    for alpha in alphas:
        if not alpha > 0:
            raise ValidationError(f"alpha must be > 0, got {alpha}")
        w = exact_weight(theta, spec, alpha)
        rows.append(
            WeightProfileRow(
                alpha=float(alpha),
                std_exact=float(np.std(w, ddof=1)),
                std_linear=abs(alpha - 1) * lin_std,
            )
        )
    return rows


def exact_weight_std_analytic(spec: RandomizationSpec, alpha: float) -> float:
    """Closed-form std of the exact weight from lognormal moments."""
    la = math.log(alpha)
    return math.sqrt(math.exp(la * la / spec.sigma**2) - 1.0)
