"""Generative world of repeated second-price auctions with display fatigue.

Produces randomized logs under the lognormally randomized impatient
bidder, and serves as the ground-truth oracle for any policy: an
offline estimate is validated by re-simulating the counterfactual
world directly.

Mechanics per user: draw a starting ad exposure, a lognormal bid
multiplier theta, and a Poisson auction count whose mean scales with
the user's activity level (heavily exposed users are heavy browsers
and generate more future bid requests). Each auction is second-price
against an i.i.d. competing bid; the impatient bid is
value_per_conversion * p0 * gamma^k at current exposure k, times theta
and any per-cluster policy multiplier. Winning increments exposure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import Distribution
from .domain import (
    DEFAULT_BUCKETS,
    PolicyOutcome,
    PolicySpec,
    RandomizationSpec,
    RandomizedLog,
    UserRecord,
    ValidationError,
    assign_clusters,
)

_CHUNK = 1 << 17  # users simulated per vectorized block (fixed for determinism)


@dataclass(frozen=True)
class SimConfig:
    """Parameters of the simulated auction world."""

    n_users: int
    auctions_per_user: Distribution
    value_per_conversion: float
    base_conversion_prob: float
    fatigue_decay: float
    competition: Distribution
    initial_exposure: tuple[float, ...]
    activity_by_exposure: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "initial_exposure", tuple(float(p) for p in self.initial_exposure))
        if self.activity_by_exposure is not None:
            object.__setattr__(
                self, "activity_by_exposure", tuple(float(w) for w in self.activity_by_exposure)
            )
        if self.n_users < 0:
            raise ValidationError("n_users must be >= 0")
        if self.auctions_per_user.kind not in ("poisson", "constant"):
            raise ValidationError("auctions_per_user must be poisson or constant")
        if not self.value_per_conversion > 0:
            raise ValidationError("value_per_conversion must be > 0")
        if not 0 < self.base_conversion_prob < 1:
            raise ValidationError("base_conversion_prob must lie in (0, 1)")
        if not 0 < self.fatigue_decay <= 1:
            raise ValidationError("fatigue_decay must lie in (0, 1]")
        probs = np.asarray(self.initial_exposure)
        if probs.ndim != 1 or len(probs) == 0 or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-9:
            raise ValidationError("initial_exposure must be a probability vector")
        if self.activity_by_exposure is not None:
            w = np.asarray(self.activity_by_exposure)
            if len(w) != len(probs) or np.any(w <= 0):
                raise ValidationError(
                    "activity_by_exposure must be positive and match initial_exposure length"
                )
            if self.auctions_per_user.kind != "poisson":
                raise ValidationError("activity_by_exposure requires poisson auction counts")

    def _activity_multipliers(self) -> np.ndarray:
        """Per-exposure-level auction-intensity multipliers, mean-one."""
        probs = np.asarray(self.initial_exposure)
        if self.activity_by_exposure is None:
            return np.ones(len(probs))
        w = np.asarray(self.activity_by_exposure, dtype=np.float64)
        return w / float(w @ probs)

    def to_json(self) -> dict:
        out = {
            "n_users": self.n_users,
            "auctions_per_user": self.auctions_per_user.to_json(),
            "value_per_conversion": self.value_per_conversion,
            "base_conversion_prob": self.base_conversion_prob,
            "fatigue_decay": self.fatigue_decay,
            "competition": self.competition.to_json(),
            "initial_exposure": list(self.initial_exposure),
        }
        if self.activity_by_exposure is not None:
            out["activity_by_exposure"] = list(self.activity_by_exposure)
        return out

    @classmethod
    def from_json(cls, raw: dict) -> "SimConfig":
        known = {
            "n_users",
            "auctions_per_user",
            "value_per_conversion",
            "base_conversion_prob",
            "fatigue_decay",
            "competition",
            "initial_exposure",
            "activity_by_exposure",
        }
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown sim config keys {sorted(unknown)}")
        try:
            return cls(
                n_users=int(raw["n_users"]),
                auctions_per_user=Distribution.from_json(raw["auctions_per_user"]),
                value_per_conversion=float(raw["value_per_conversion"]),
                base_conversion_prob=float(raw["base_conversion_prob"]),
                fatigue_decay=float(raw["fatigue_decay"]),
                competition=Distribution.from_json(raw["competition"]),
                initial_exposure=tuple(raw["initial_exposure"]),
                activity_by_exposure=(
                    tuple(raw["activity_by_exposure"]) if "activity_by_exposure" in raw else None
                ),
            )
        except KeyError as exc:
            raise ValidationError(f"missing sim config key {exc}") from exc


def default_config(n_users: int = 100_000) -> SimConfig:
    """Desk-scale world: 10^5 users, ~20 auctions each, visible fatigue."""
    return SimConfig(
        n_users=n_users,
        auctions_per_user=Distribution(kind="poisson", mean=20.0),
        value_per_conversion=10.0,
        base_conversion_prob=0.05,
        fatigue_decay=0.8,
        competition=Distribution(kind="lognormal", mu=float(np.log(0.4)), sigma=1.2),
        initial_exposure=(0.30, 0.20, 0.15, 0.12, 0.10, 0.13),
        activity_by_exposure=(1.0, 2.0, 4.0, 8.0, 16.0, 32.0),
    )


def default_randomization() -> RandomizationSpec:
    return RandomizationSpec(mu=0.0, sigma=0.3)


@dataclass(frozen=True)
class BidPolicy:
    """The bidder under simulation.

    `impatient_randomized` bids theta_i times the impatient value; the
    `cluster_multiplier` kind further scales by alpha_S where S is the
    user's exposure cluster (fixed at collection start, or looked up
    from the current exposure when `dynamic` is set).
    """

    kind: str
    randomization: RandomizationSpec
    multipliers: tuple[float, ...] | None = None
    dynamic: bool = False

    def __post_init__(self):
        if self.kind not in ("impatient_randomized", "cluster_multiplier"):
            raise ValidationError(f"unknown policy kind {self.kind!r}")
        if self.kind == "cluster_multiplier":
            if self.multipliers is None:
                raise ValidationError("cluster_multiplier policy requires multipliers")
            object.__setattr__(self, "multipliers", tuple(float(a) for a in self.multipliers))
            if any(a < 0 for a in self.multipliers):
                raise ValidationError("multipliers must be >= 0")
        elif self.multipliers is not None:
            raise ValidationError("impatient_randomized policy takes no multipliers")

    @classmethod
    def impatient(cls, spec: RandomizationSpec) -> "BidPolicy":
        return cls(kind="impatient_randomized", randomization=spec)

    @classmethod
    def from_policy_spec(
        cls,
        spec: RandomizationSpec,
        policy: PolicySpec,
        n_clusters: int,
        dynamic: bool = False,
    ) -> "BidPolicy":
        return cls(
            kind="cluster_multiplier",
            randomization=spec,
            multipliers=tuple(policy.multiplier_array(n_clusters)),
            dynamic=dynamic,
        )


def _simulate_population(
    config: SimConfig,
    spec: RandomizationSpec,
    seed: int,
    bucket_boundaries: tuple[int, ...] = DEFAULT_BUCKETS,
    multipliers: np.ndarray | None = None,
    dynamic: bool = False,
    collect_displays: bool = False,
) -> dict[str, np.ndarray]:
    """Vectorized simulation; one sequential RNG stream, chunked for memory.

    All randomness for a chunk is drawn up front in a fixed order, so
    outcomes for a user are a deterministic function of the draws and
    the policy: scaling a bid up never consumes different randomness.
    """
    rng = np.random.default_rng(seed)
    gamma = config.fatigue_decay
    p0 = config.base_conversion_prob
    vpc = config.value_per_conversion
    levels = np.arange(len(config.initial_exposure))
    probs = np.asarray(config.initial_exposure)
    act = config._activity_multipliers()

    out: dict[str, list[np.ndarray]] = {
        k: [] for k in ("theta", "exposure_at_start", "cluster", "cost", "value_observed",
                        "value_predicted", "n_auctions", "n_wins")
    }
    disp_exposure: list[np.ndarray] = []
    disp_converted: list[np.ndarray] = []

    remaining = config.n_users
    while remaining > 0:
        n = min(remaining, _CHUNK)
        remaining -= n

        e0 = rng.choice(levels, p=probs, size=n)
        theta = rng.lognormal(spec.mu, spec.sigma, n)
        if config.auctions_per_user.kind == "poisson":
            m = rng.poisson(config.auctions_per_user.mean * act[e0], n)
        else:
            m = np.full(n, int(config.auctions_per_user.value))
        mmax = int(m.max()) if n else 0
        comp = config.competition.sample(rng, (n, mmax))
        conv_u = rng.random((n, mmax))

        cluster = assign_clusters(e0, bucket_boundaries)
        if multipliers is None:
            alpha = np.ones(n)
        else:
            alpha = np.asarray(multipliers)[cluster]

        k = e0.astype(np.float64).copy()
        cost = np.zeros(n)
        vobs = np.zeros(n)
        vpred = np.zeros(n)
        wins = np.zeros(n, dtype=np.int64)
        for t in range(mmax):
            active = m > t
            p_k = p0 * gamma**k
            if dynamic and multipliers is not None:
                cur = assign_clusters(k.astype(np.int64), bucket_boundaries)
                alpha_t = np.asarray(multipliers)[cur]
            else:
                alpha_t = alpha
            bid = alpha_t * theta * vpc * p_k
            won = active & (bid > comp[:, t])
            cost += np.where(won, comp[:, t], 0.0)
            vpred += np.where(won, vpc * p_k, 0.0)
            converted = won & (conv_u[:, t] < p_k)
            vobs += np.where(converted, vpc, 0.0)
            if collect_displays and won.any():
                disp_exposure.append(k[won].astype(np.int64))
                disp_converted.append(converted[won])
            k += won
            wins += won

        out["theta"].append(theta)
        out["exposure_at_start"].append(e0)
        out["cluster"].append(cluster)
        out["cost"].append(cost)
        out["value_observed"].append(vobs)
        out["value_predicted"].append(vpred)
        out["n_auctions"].append(m.astype(np.int64))
        out["n_wins"].append(wins)

    result = {k: (np.concatenate(v) if v else np.array([])) for k, v in out.items()}
    if collect_displays:
        result["display_exposure"] = (
            np.concatenate(disp_exposure) if disp_exposure else np.array([], dtype=np.int64)
        )
        result["display_converted"] = (
            np.concatenate(disp_converted) if disp_converted else np.array([], dtype=bool)
        )
    return result


def simulate_log(
    config: SimConfig,
    spec: RandomizationSpec,
    seed: int,
    bucket_boundaries: tuple[int, ...] = DEFAULT_BUCKETS,
) -> RandomizedLog:
    """Run one randomized collection period and aggregate it per user."""
    pop = _simulate_population(config, spec, seed, bucket_boundaries)
    users = tuple(
        UserRecord(
            user_id=f"u{i:08d}",
            theta=float(pop["theta"][i]),
            exposure_at_start=int(pop["exposure_at_start"][i]),
            cluster=int(pop["cluster"][i]),
            cost=float(pop["cost"][i]),
            value_observed=float(pop["value_observed"][i]),
            value_predicted=float(pop["value_predicted"][i]),
            n_auctions=int(pop["n_auctions"][i]),
            n_wins=int(pop["n_wins"][i]),
        )
        for i in range(config.n_users)
    )
    return RandomizedLog(spec=spec, users=users, bucket_boundaries=bucket_boundaries)


def simulate_display_trace(
    config: SimConfig,
    spec: RandomizationSpec,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-display debug trace for predictor training.

    Returns (exposure_at_display, converted) over all won displays.
    """
    pop = _simulate_population(config, spec, seed, collect_displays=True)
    return pop["display_exposure"], pop["display_converted"]


def _rep_seed(seed: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(rep)])


def _policy_totals(
    config: SimConfig,
    policy: BidPolicy,
    seed,
    bucket_boundaries: tuple[int, ...],
    per_cluster: bool,
) -> tuple[np.ndarray, np.ndarray]:
    mult = None if policy.kind == "impatient_randomized" else np.asarray(policy.multipliers)
    pop = _simulate_population(
        config,
        policy.randomization,
        seed,
        bucket_boundaries,
        multipliers=mult,
        dynamic=policy.dynamic,
    )
    if not per_cluster:
        return np.array([pop["value_predicted"].sum()]), np.array([pop["cost"].sum()])
    nc = len(bucket_boundaries) + 1
    val = np.bincount(pop["cluster"], weights=pop["value_predicted"], minlength=nc)
    cost = np.bincount(pop["cluster"], weights=pop["cost"], minlength=nc)
    return val, cost


def oracle_policy_outcome(
    config: SimConfig,
    policy: BidPolicy,
    n_reps: int,
    seed: int,
    bucket_boundaries: tuple[int, ...] = DEFAULT_BUCKETS,
) -> PolicyOutcome:
    """Ground-truth policy outcome: mean totals over independent populations."""
    if n_reps < 1:
        raise ValidationError("n_reps must be >= 1")
    vals, costs = [], []
    for r in range(n_reps):
        v, c = _policy_totals(config, policy, _rep_seed(seed, r), bucket_boundaries, False)
        vals.append(v[0])
        costs.append(c[0])
    vals = np.asarray(vals)
    costs = np.asarray(costs)
    ddof = 1 if n_reps > 1 else 0
    return PolicyOutcome(
        value=float(vals.mean()),
        cost=float(costs.mean()),
        source="oracle",
        n_reps=n_reps,
        value_se=float(vals.std(ddof=ddof) / np.sqrt(n_reps)),
        cost_se=float(costs.std(ddof=ddof) / np.sqrt(n_reps)),
    )


def oracle_cluster_outcomes(
    config: SimConfig,
    policy: BidPolicy,
    n_reps: int,
    seed: int,
    bucket_boundaries: tuple[int, ...] = DEFAULT_BUCKETS,
) -> dict[str, np.ndarray]:
    """Per-cluster oracle totals (means and standard errors over reps)."""
    if n_reps < 1:
        raise ValidationError("n_reps must be >= 1")
    vals, costs = [], []
    for r in range(n_reps):
        v, c = _policy_totals(config, policy, _rep_seed(seed, r), bucket_boundaries, True)
        vals.append(v)
        costs.append(c)
    vals = np.stack(vals)
    costs = np.stack(costs)
    ddof = 1 if n_reps > 1 else 0
    return {
        "value": vals.mean(axis=0),
        "cost": costs.mean(axis=0),
        "value_se": vals.std(axis=0, ddof=ddof) / np.sqrt(n_reps),
        "cost_se": costs.std(axis=0, ddof=ddof) / np.sqrt(n_reps),
    }


@dataclass(frozen=True)
class TwoAuctionResult:
    best_first_bid: float
    bids: np.ndarray
    expected_profit: np.ndarray


def two_auction_demo(
    ticket_value: float,
    competition: Distribution,
    grid_step: float,
    second_competition: Distribution | None = None,
) -> TwoAuctionResult:
    """Morning/afternoon second-price auctions for a single prize.

    The afternoon bid is truthful: the ticket value if the morning
    auction was lost, zero otherwise. Expected profit is computed in
    closed form per grid point; ties break toward the truthful
    (highest) bid.
    """
    if grid_step <= 0:
        raise ValidationError("grid_step must be > 0")
    comp2 = second_competition if second_competition is not None else competition
    n = max(1, int(round(ticket_value / grid_step)))
    bids = np.linspace(0.0, ticket_value, n + 1)
    afternoon_if_lost = comp2.expected_second_price_profit(ticket_value, ticket_value)
    profit = np.array(
        [
            competition.expected_second_price_profit(b, ticket_value)
            + (1.0 - competition.cdf(b)) * afternoon_if_lost
            for b in bids
        ]
    )
    best = len(profit) - 1 - int(np.argmax(profit[::-1]))
    return TwoAuctionResult(best_first_bid=float(bids[best]), bids=bids, expected_profit=profit)
