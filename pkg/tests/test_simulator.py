import io

import numpy as np
import pytest

from impatience import (
    BidPolicy,
    Distribution,
    PolicySpec,
    RandomizationSpec,
    SimConfig,
    ValidationError,
    default_config,
    default_randomization,
    oracle_policy_outcome,
    simulate_log,
    two_auction_demo,
    write_log,
)


def small_config(**overrides) -> SimConfig:
    base = dict(
        n_users=4000,
        auctions_per_user=Distribution(kind="poisson", mean=8.0),
        value_per_conversion=10.0,
        base_conversion_prob=0.05,
        fatigue_decay=0.8,
        competition=Distribution(kind="lognormal", mu=float(np.log(0.4)), sigma=1.2),
        initial_exposure=(0.4, 0.3, 0.3),
        activity_by_exposure=None,
    )
    base.update(overrides)
    return SimConfig(**base)


SPEC = RandomizationSpec(0.0, 0.3)


def log_bytes(log) -> str:
    buf = io.StringIO()
    write_log(log, buf)
    return buf.getvalue()


class TestConfigValidation:
    def test_rejects_bad_probs(self):
        with pytest.raises(ValidationError):
            small_config(initial_exposure=(0.5, 0.1))

    def test_rejects_gamma_above_one(self):
        with pytest.raises(ValidationError):
            small_config(fatigue_decay=1.5)

    def test_json_roundtrip(self):
        cfg = default_config()
        assert SimConfig.from_json(cfg.to_json()) == cfg

    def test_unknown_key_rejected(self):
        raw = default_config().to_json()
        raw["budget"] = 10
        with pytest.raises(ValidationError, match="unknown"):
            SimConfig.from_json(raw)


class TestSimulateLog:
    def test_deterministic_identical_bytes(self):
        cfg = small_config()
        a = simulate_log(cfg, SPEC, seed=123)
        b = simulate_log(cfg, SPEC, seed=123)
        assert log_bytes(a) == log_bytes(b)
        c = simulate_log(cfg, SPEC, seed=124)
        assert log_bytes(a) != log_bytes(c)

    def test_unwinnable_competition_gives_no_wins(self):
        # competition lower bound above any possible bid
        cfg = small_config(competition=Distribution(kind="uniform", low=1e6, high=2e6))
        log = simulate_log(cfg, SPEC, seed=5)
        arr = log.arrays
        assert arr["n_wins"].sum() == 0
        assert arr["cost"].sum() == 0.0
        assert arr["value_observed"].sum() == 0.0

    def test_degenerate_competition_single_auction(self):
        # gamma=1, one auction per user, constant competing bid c that always loses
        c = 0.01
        cfg = small_config(
            n_users=20_000,
            fatigue_decay=1.0,
            auctions_per_user=Distribution(kind="constant", value=1),
            competition=Distribution(kind="constant", value=c),
            initial_exposure=(1.0,),
        )
        log = simulate_log(cfg, SPEC, seed=11)
        arr = log.arrays
        # bid = theta * 10 * 0.05 = 0.5 * theta > c for every plausible theta
        assert arr["n_wins"].sum() == cfg.n_users
        assert np.allclose(arr["cost"], c)
        expected = cfg.value_per_conversion * cfg.base_conversion_prob
        assert np.allclose(arr["value_predicted"], expected)
        # realized conversions average to the predicted value
        se = arr["value_observed"].std() / np.sqrt(cfg.n_users)
        assert abs(arr["value_observed"].mean() - expected) < 3 * se

    def test_value_proxy_is_conditionally_unbiased(self):
        cfg = small_config(n_users=60_000)
        log = simulate_log(cfg, SPEC, seed=21)
        arr = log.arrays
        diff = arr["value_observed"] - arr["value_predicted"]
        se = diff.std(ddof=1) / np.sqrt(len(diff))
        assert abs(diff.mean()) < 3 * se

    def test_value_predicted_exact_identity(self):
        # gamma=1 makes value_predicted = n_wins * vpc * p0 exactly
        cfg = small_config(fatigue_decay=1.0)
        log = simulate_log(cfg, SPEC, seed=3)
        arr = log.arrays
        expected = arr["n_wins"] * cfg.value_per_conversion * cfg.base_conversion_prob
        assert np.allclose(arr["value_predicted"], expected, rtol=1e-12)

    def test_fatigue_caps_value_predicted(self):
        # per-win value is vpc * p0 * gamma^k <= vpc * p0
        cfg = small_config()
        log = simulate_log(cfg, SPEC, seed=9)
        arr = log.arrays
        cap = arr["n_wins"] * cfg.value_per_conversion * cfg.base_conversion_prob
        assert np.all(arr["value_predicted"] <= cap + 1e-12)

    def test_payment_below_bid_cost_bound(self):
        # second price: per-user cost is below theta * sum of per-win values
        cfg = small_config()
        log = simulate_log(cfg, SPEC, seed=13)
        for u in log.users:
            max_bid = u.theta * cfg.value_per_conversion * cfg.base_conversion_prob
            assert u.cost <= u.n_wins * max_bid + 1e-9

    def test_win_monotonicity_in_theta(self):
        # same seed and competition draws; scaling mu up scales every theta up
        cfg = small_config()
        lo = simulate_log(cfg, RandomizationSpec(-0.2, 0.3), seed=17)
        hi = simulate_log(cfg, RandomizationSpec(0.3, 0.3), seed=17)
        wins_lo = lo.arrays["n_wins"]
        wins_hi = hi.arrays["n_wins"]
        assert np.all(wins_hi >= wins_lo)
        assert np.all(hi.arrays["cost"] >= lo.arrays["cost"] - 1e-12)

    def test_exposure_start_distribution(self):
        cfg = small_config(n_users=30_000)
        log = simulate_log(cfg, SPEC, seed=19)
        counts = np.bincount(log.arrays["exposure_at_start"], minlength=3) / len(log)
        assert np.allclose(counts, cfg.initial_exposure, atol=0.01)

    def test_log_theta_mean_matches_mu(self):
        cfg = small_config(n_users=50_000)
        spec = RandomizationSpec(0.15, 0.3)
        log = simulate_log(cfg, spec, seed=23)
        lt = np.log(log.arrays["theta"])
        assert abs(lt.mean() - spec.mu) < 3 * lt.std() / np.sqrt(len(log))


class TestOraclePolicyOutcome:
    def test_identity_policy_matches_baseline(self):
        cfg = small_config(n_users=20_000)
        base = oracle_policy_outcome(cfg, BidPolicy.impatient(SPEC), n_reps=6, seed=1)
        ident = BidPolicy.from_policy_spec(SPEC, PolicySpec({c: 1.0 for c in range(6)}), 6)
        same = oracle_policy_outcome(cfg, ident, n_reps=6, seed=1)
        # identical seeds and multipliers 1: the two policies are the same world
        assert same.value == base.value
        assert same.cost == base.cost

    def test_zero_multiplier_spends_nothing(self):
        cfg = small_config()
        zero = BidPolicy(kind="cluster_multiplier", randomization=SPEC, multipliers=(0.0,) * 6)
        out = oracle_policy_outcome(cfg, zero, n_reps=2, seed=2)
        assert out.cost == 0.0
        assert out.value == 0.0

    def test_uniform_bid_raise_increases_cost(self):
        cfg = small_config(fatigue_decay=1.0, n_users=20_000)
        base = oracle_policy_outcome(cfg, BidPolicy.impatient(SPEC), n_reps=5, seed=3)
        up = BidPolicy(kind="cluster_multiplier", randomization=SPEC, multipliers=(1.1,) * 6)
        treated = oracle_policy_outcome(cfg, up, n_reps=5, seed=3)
        assert treated.cost > base.cost

    def test_outcome_carries_replication_metadata(self):
        cfg = small_config(n_users=2000)
        out = oracle_policy_outcome(cfg, BidPolicy.impatient(SPEC), n_reps=3, seed=4)
        assert out.source == "oracle"
        assert out.n_reps == 3
        assert out.value_se is not None and out.cost_se is not None


class TestTwoAuctionDemo:
    def test_unwinnable_second_auction_bids_truthfully(self):
        comp1 = Distribution(kind="uniform", low=0.0, high=100.0)
        comp2 = Distribution(kind="uniform", low=500.0, high=600.0)
        res = two_auction_demo(100.0, comp1, grid_step=0.5, second_competition=comp2)
        assert res.best_first_bid == 100.0

    def test_repeated_auction_shades_below_value(self):
        comp = Distribution(kind="uniform", low=0.0, high=100.0)
        res = two_auction_demo(100.0, comp, grid_step=0.25)
        assert res.best_first_bid < 100.0
        # uniform [0,100] both rounds: analytic optimum is 50
        assert res.best_first_bid == pytest.approx(50.0, abs=0.25)

    def test_profit_curve_matches_monte_carlo(self):
        comp = Distribution(kind="uniform", low=0.0, high=100.0)
        res = two_auction_demo(100.0, comp, grid_step=10.0)
        rng = np.random.default_rng(0)
        n = 200_000
        c1 = rng.uniform(0, 100, n)
        c2 = rng.uniform(0, 100, n)
        for bid, analytic in zip(res.bids, res.expected_profit):
            won = bid > c1
            profit = np.where(won, 100.0 - c1, np.where(100.0 > c2, 100.0 - c2, 0.0))
            se = profit.std(ddof=1) / np.sqrt(n)
            assert abs(profit.mean() - analytic) < 3 * se

    def test_closed_form_profit_matches_quadrature(self):
        for comp in (
            Distribution(kind="uniform", low=0.0, high=100.0),
            Distribution(kind="lognormal", mu=3.0, sigma=0.8),
        ):
            for bid in (5.0, 40.0, 99.0):
                exact = comp.expected_second_price_profit(bid, 100.0)
                quad = comp.expected_second_price_profit_quad(bid, 100.0)
                assert exact == pytest.approx(quad, rel=1e-8, abs=1e-10)
