"""Command-line driver for the randomize/estimate/optimize/validate recipe.

Subcommands cover the full loop: simulate a randomized log, compute
per-cluster marginal ROI, solve the capped cost-neutral reallocation,
predict the policy's effect offline, and validate against a simulated
A/B split. All numeric output goes to files (CSV/JSON with provenance
comments); a short human-readable summary goes to stdout. Outputs are
byte-identical across reruns with the same config and seeds.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from .distributions import Distribution
from .domain import (
    DEFAULT_BUCKETS,
    LogFormatError,
    PolicySpec,
    RandomizationSpec,
    RandomizedLog,
    ValidationError,
    read_log,
    write_log,
)
from .estimators import bootstrap_ci, cluster_estimates, weight_std_profile
from .optimizer import ReallocationProblem, predict_policy_delta, solve_reallocation_detailed
from .predictor import ConvergenceError, calibration_curve, events_from_trace, fit_ctr
from .simulator import (
    BidPolicy,
    SimConfig,
    default_config,
    oracle_policy_outcome,
    simulate_display_trace,
    simulate_log,
    two_auction_demo,
)

POLICY_SCHEMA = "impatience-policy/1"
DEFAULT_SWEEP = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3)
DEFAULT_PROFILE_ALPHAS = (0.5, 0.8, 0.9, 1.0, 1.1, 1.2, 1.5, 2.0)


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Experiment-level knobs shared across subcommands."""

    sim: SimConfig
    randomization: RandomizationSpec
    bucket_boundaries: tuple[int, ...] = DEFAULT_BUCKETS
    resamples: int = 1000
    cap_delta: float = 0.2
    sweep: tuple[float, ...] = DEFAULT_SWEEP
    seed: int = 0

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.bucket_boundaries, self.bucket_boundaries[1:])):
            raise ValidationError("bucket_boundaries must be strictly increasing")

    def to_json(self) -> dict:
        return {
            "sim": self.sim.to_json(),
            "randomization": {"mu": self.randomization.mu, "sigma": self.randomization.sigma},
            "bucket_boundaries": list(self.bucket_boundaries),
            "resamples": self.resamples,
            "cap_delta": self.cap_delta,
            "sweep": list(self.sweep),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, raw: dict) -> "ExperimentConfig":
        known = {"sim", "randomization", "bucket_boundaries", "resamples", "cap_delta", "sweep", "seed"}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        if "sim" not in raw or "randomization" not in raw:
            raise ValidationError("config requires 'sim' and 'randomization' sections")
        rand = raw["randomization"]
        return cls(
            sim=SimConfig.from_json(raw["sim"]),
            randomization=RandomizationSpec(float(rand["mu"]), float(rand["sigma"])),
            bucket_boundaries=tuple(raw.get("bucket_boundaries", DEFAULT_BUCKETS)),
            resamples=int(raw.get("resamples", 1000)),
            cap_delta=float(raw.get("cap_delta", 0.2)),
            sweep=tuple(raw.get("sweep", DEFAULT_SWEEP)),
            seed=int(raw.get("seed", 0)),
        )


def default_experiment_config() -> ExperimentConfig:
    return ExperimentConfig(sim=default_config(), randomization=RandomizationSpec(0.0, 0.3))


def _file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_config(path: str | None) -> tuple[ExperimentConfig, str]:
    if path is None:
        raise UsageError("--config is required for this command")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_json(raw), _file_sha256(path)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_csv(path: str, provenance: dict[str, str], header: list[str], rows: list[list]) -> None:
    with open(path, "w") as fh:
        fh.write(f"# tool=impatience/{__version__}\n")
        for key in sorted(provenance):
            fh.write(f"# {key}={provenance[key]}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _read_marginals_csv(path: str) -> tuple[list[dict], dict[str, str]]:
    provenance: dict[str, str] = {}
    rows = []
    header: list[str] | None = None
    try:
        fh = open(path)
    except FileNotFoundError:
        raise UsageError(f"marginals file not found: {path}") from None
    with fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    provenance[k] = v
                continue
            cells = line.split(",")
            if header is None:
                header = cells
                continue
            rows.append(dict(zip(header, cells)))
    if header is None:
        raise UsageError(f"marginals file {path} has no header row")
    return rows, provenance


def _write_policy(path: str, policy: PolicySpec, provenance: dict, diagnostic: str | None) -> None:
    doc = {
        "schema": POLICY_SCHEMA,
        "cap_delta": policy.cap_delta,
        "multipliers": {str(k): v for k, v in sorted(policy.multipliers.items())},
        "provenance": dict(sorted(provenance.items())),
    }
    if diagnostic:
        doc["diagnostic"] = diagnostic
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_policy(path: str) -> PolicySpec:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"policy file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"policy file {path} is not valid JSON: {exc}") from None
    if doc.get("schema") != POLICY_SCHEMA:
        raise UsageError(f"unsupported policy schema {doc.get('schema')!r}")
    return PolicySpec(
        multipliers={int(k): float(v) for k, v in doc["multipliers"].items()},
        cap_delta=float(doc["cap_delta"]),
    )


def _read_log_checked(path: str | None) -> tuple[RandomizedLog, str]:
    if path is None:
        raise UsageError("--log is required for this command")
    try:
        log = read_log(path)
    except FileNotFoundError:
        raise UsageError(f"log file not found: {path}") from None
    return log, _file_sha256(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg, cfg_hash = _load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    log = simulate_log(cfg.sim, cfg.randomization, seed, cfg.bucket_boundaries)
    write_log(log, args.out)
    arr = log.arrays
    print(f"simulate: wrote {len(log)} users to {args.out} (seed={seed}, config={cfg_hash[:12]})")
    print(
        f"  totals: cost={arr['cost'].sum():.2f} value_observed={arr['value_observed'].sum():.2f} "
        f"value_predicted={arr['value_predicted'].sum():.2f} "
        f"win_rate={arr['n_wins'].sum() / max(arr['n_auctions'].sum(), 1):.3f}"
    )
    return 0


def cmd_marginals(args) -> int:
    cfg, cfg_hash = _load_config(args.config)
    log, log_hash = _read_log_checked(args.log)
    resamples = cfg.resamples if args.resamples is None else args.resamples
    seed = cfg.seed if args.seed is None else args.seed
    rows = cluster_estimates(log, n_resamples=resamples, seed=seed)
    out_rows = []
    for r in rows:
        out_rows.append(
            [
                r.cluster,
                r.n_users,
                r.dcost,
                r.dvalue,
                r.mroi,
                r.dcost_ci[0],
                r.dcost_ci[1],
                r.dvalue_ci[0],
                r.dvalue_ci[1],
                r.mroi_ci[0] if r.mroi_ci else None,
                r.mroi_ci[1] if r.mroi_ci else None,
            ]
        )
    _write_csv(
        args.out,
        {"config_sha256": cfg_hash, "log_sha256": log_hash, "seed": str(seed)},
        [
            "cluster",
            "n_users",
            "dcost",
            "dvalue",
            "mroi",
            "dcost_ci_low",
            "dcost_ci_high",
            "dvalue_ci_low",
            "dvalue_ci_high",
            "mroi_ci_low",
            "mroi_ci_high",
        ],
        out_rows,
    )
    print(f"marginals: wrote {len(rows)} clusters to {args.out}")
    for r in rows:
        roi = "undefined" if r.mroi is None else f"{r.mroi:.4f}"
        print(f"  cluster {r.cluster}: n={r.n_users} dcost={r.dcost:.2f} dvalue={r.dvalue:.2f} mROI={roi}")
    return 0


def cmd_optimize(args) -> int:
    rows, prov = _read_marginals_csv(args.marginals)
    cluster_rows = []
    for r in rows:
        cluster_rows.append(
            (
                int(r["cluster"]),
                float(r["dcost"]),
                float(r["dvalue"]),
                r["mroi"] != "",
            )
        )
    eligible = tuple((c, dc, dv) for c, dc, dv, ok in cluster_rows if ok and dc > 0)
    pinned = tuple(c for c, dc, dv, ok in cluster_rows if not (ok and dc > 0))
    problem = ReallocationProblem(clusters=eligible, cap_delta=args.cap, pinned=pinned)
    result = solve_reallocation_detailed(problem)
    provenance = {
        "marginals_sha256": _file_sha256(args.marginals),
        "tool": f"impatience/{__version__}",
    }
    if "log_sha256" in prov:
        provenance["log_sha256"] = prov["log_sha256"]
    _write_policy(args.out, result.policy, provenance, result.diagnostic)
    alphas = ", ".join(f"{c}:{a:.4f}" for c, a in sorted(result.policy.multipliers.items()))
    print(f"optimize: cap={args.cap} objective(dV_linear)={result.objective:.4f}")
    print(f"  multipliers: {alphas}")
    if result.diagnostic:
        print(f"optimize: {result.diagnostic}", file=sys.stderr)
        return 2
    return 0


def _policy_from_cap(log: RandomizedLog, cap: float) -> tuple[PolicySpec, float]:
    from .estimators import marginal_estimate, marginal_roi

    rows = []
    for c in range(log.n_clusters):
        dcost = marginal_estimate(log, "cost", c)
        dvalue = marginal_estimate(log, "value_predicted", c)
        roi = marginal_roi(log, c)
        rows.append((c, dcost, dvalue, roi.defined))
    eligible = tuple((c, dc, dv) for c, dc, dv, ok in rows if ok and dc > 0)
    pinned = tuple(c for c, dc, dv, ok in rows if not (ok and dc > 0))
    result = solve_reallocation_detailed(ReallocationProblem(eligible, cap, pinned))
    return result.policy, result.objective


def _delta_bootstrap(log: RandomizedLog, policy: PolicySpec, resamples: int, seed: int):
    arr = log.arrays
    alphas = policy.multiplier_array(log.n_clusters)
    x = alphas[arr["cluster"]] - 1.0
    lw = (np.log(arr["theta"]) - log.spec.mu) / log.spec.sigma**2
    la = np.log(alphas[arr["cluster"]])
    w_minus_1 = np.exp((2 * la * (np.log(arr["theta"]) - log.spec.mu) - la * la) / (2 * log.spec.sigma**2)) - 1.0
    per_user = np.stack(
        [
            x * arr["value_predicted"] * lw,
            x * arr["cost"] * lw,
            arr["value_predicted"] * w_minus_1,
            arr["cost"] * w_minus_1,
        ],
        axis=1,
    )

    def stat(idx: np.ndarray) -> np.ndarray:
        return per_user[idx].sum(axis=0)

    return bootstrap_ci(stat, log, n_resamples=resamples, seed=seed)


def cmd_offline_eval(args) -> int:
    cfg, cfg_hash = _load_config(args.config)
    log, log_hash = _read_log_checked(args.log)
    resamples = cfg.resamples if args.resamples is None else args.resamples
    seed = cfg.seed if args.seed is None else args.seed
    names = ("dvalue_linear", "dcost_linear", "dvalue_exact", "dcost_exact")
    out_rows = []
    if args.policy:
        policies = [(None, _read_policy(args.policy))]
    else:
        sweep = tuple(args.sweep) if args.sweep else cfg.sweep
        policies = [(delta, _policy_from_cap(log, delta)[0]) for delta in sweep]
    for delta, policy in policies:
        cap = policy.cap_delta if delta is None else delta
        ci = _delta_bootstrap(log, policy, resamples, seed)
        row = [cap]
        for j in range(4):
            row.extend([ci.point[j], ci.low[j], ci.high[j]])
        out_rows.append(row)
        pred = predict_policy_delta(log, policy)
        print(
            f"offline-eval: delta={cap:g} dV_lin={pred.dvalue_linear:.2f} "
            f"dC_lin={pred.dcost_linear:.2e} dV_exact={pred.dvalue_exact:.2f} "
            f"dC_exact={pred.dcost_exact:.2f}"
        )
    header = ["delta"]
    for name in names:
        header.extend([name, f"{name}_ci_low", f"{name}_ci_high"])
    _write_csv(
        args.out,
        {"config_sha256": cfg_hash, "log_sha256": log_hash, "seed": str(seed)},
        header,
        out_rows,
    )
    print(f"offline-eval: wrote {len(out_rows)} rows to {args.out}")
    return 0


def _relative_delta(treated, baseline):
    dv = treated.value / baseline.value - 1.0
    dc = treated.cost / baseline.cost - 1.0
    dv_se = np.hypot(treated.value_se / baseline.value, treated.value * baseline.value_se / baseline.value**2)
    dc_se = np.hypot(treated.cost_se / baseline.cost, treated.cost * baseline.cost_se / baseline.cost**2)
    return dv, dv_se, dc, dc_se


def cmd_ab(args) -> int:
    cfg, cfg_hash = _load_config(args.config)
    policy = _read_policy(args.policy)
    seed = cfg.seed if args.seed is None else args.seed
    sim = cfg.sim
    if args.users_per_arm is not None:
        raw = sim.to_json()
        raw["n_users"] = args.users_per_arm
        sim = SimConfig.from_json(raw)
    n_clusters = len(cfg.bucket_boundaries) + 1
    baseline_policy = BidPolicy.impatient(cfg.randomization)
    fixed = BidPolicy.from_policy_spec(cfg.randomization, policy, n_clusters)
    dynamic = BidPolicy.from_policy_spec(cfg.randomization, policy, n_clusters, dynamic=True)
    outcomes = {}
    for name, pol, arm_seed in (
        ("baseline", baseline_policy, seed),
        ("fixed_factor", fixed, seed + 1),
        ("dynamic_factor", dynamic, seed + 2),
    ):
        outcomes[name] = oracle_policy_outcome(sim, pol, args.reps, arm_seed, cfg.bucket_boundaries)
    report = {"tool": f"impatience/{__version__}", "config_sha256": cfg_hash, "seed": seed,
              "n_reps": args.reps, "users_per_arm": sim.n_users, "arms": {}}
    for name, out in outcomes.items():
        report["arms"][name] = {
            "value": out.value,
            "cost": out.cost,
            "value_se": out.value_se,
            "cost_se": out.cost_se,
        }
    print(f"ab: {sim.n_users} users/arm x {args.reps} reps")
    for name in ("fixed_factor", "dynamic_factor"):
        dv, dv_se, dc, dc_se = _relative_delta(outcomes[name], outcomes["baseline"])
        report["arms"][name]["rel_dvalue"] = dv
        report["arms"][name]["rel_dvalue_se"] = dv_se
        report["arms"][name]["rel_dcost"] = dc
        report["arms"][name]["rel_dcost_se"] = dc_se
        print(f"  {name}: dV={dv:+.4%} (se {dv_se:.4%})  dC={dc:+.4%} (se {dc_se:.4%})")
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"ab: wrote report to {args.out}")
    return 0


def cmd_weight_profile(args) -> int:
    cfg, cfg_hash = _load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    alphas = tuple(args.alphas) if args.alphas else DEFAULT_PROFILE_ALPHAS
    rows = weight_std_profile(cfg.randomization, alphas, n_samples=args.samples, seed=seed)
    _write_csv(
        args.out,
        {"config_sha256": cfg_hash, "seed": str(seed), "n_samples": str(args.samples)},
        ["alpha", "std_exact", "std_linear"],
        [[r.alpha, r.std_exact, r.std_linear] for r in rows],
    )
    print(f"weight-profile: wrote {len(rows)} rows to {args.out}")
    for r in rows:
        print(f"  alpha={r.alpha:g}: std_exact={r.std_exact:.4f} std_linear={r.std_linear:.4f}")
    return 0


def cmd_two_auctions(args) -> int:
    try:
        comp = Distribution.from_json(json.loads(args.competition))
        comp2 = Distribution.from_json(json.loads(args.competition2)) if args.competition2 else None
    except json.JSONDecodeError as exc:
        raise UsageError(f"competition spec is not valid JSON: {exc}") from None
    result = two_auction_demo(args.value, comp, args.step, comp2)
    _write_csv(
        args.out,
        {"best_first_bid": repr(result.best_first_bid), "ticket_value": repr(args.value)},
        ["bid", "expected_profit"],
        [[b, p] for b, p in zip(result.bids, result.expected_profit)],
    )
    print(f"two-auctions: best first bid {result.best_first_bid:g} (ticket value {args.value:g})")
    print(f"two-auctions: wrote profit curve to {args.out}")
    return 0


def cmd_fit_ctr(args) -> int:
    cfg, cfg_hash = _load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    exposure, converted = simulate_display_trace(cfg.sim, cfg.randomization, seed)
    events = events_from_trace(exposure, converted)
    out_rows = []
    for name, include in (("no_fatigue", False), ("fatigue", True)):
        model = fit_ctr(events, include_fatigue=include, l2=args.l2,
                        fatigue_boundaries=cfg.bucket_boundaries)
        for row in calibration_curve(model, events):
            out_rows.append([name, row.bucket, row.n, row.empirical_rate, row.mean_predicted])
    _write_csv(
        args.out,
        {"config_sha256": cfg_hash, "seed": str(seed), "n_events": str(len(events))},
        ["model", "bucket", "n", "empirical_rate", "mean_predicted"],
        out_rows,
    )
    print(f"fit-ctr: {len(events)} display events; wrote calibration curves to {args.out}")
    return 0


def cmd_init_config(args) -> int:
    cfg = default_experiment_config()
    with open(args.out, "w") as fh:
        json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"init-config: wrote default config to {args.out}")
    return 0


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="impatience", description=__doc__)
    parser.add_argument("--version", action="version", version=f"impatience {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--threads", type=int, default=None,
                       help="parallelism hint; results are independent of it")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        return p

    p = add("init-config", cmd_init_config, "write the default experiment config")
    p.add_argument("--out", required=True)

    p = add("simulate", cmd_simulate, "simulate a randomized log")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = add("marginals", cmd_marginals, "per-cluster marginal ROI with bootstrap CIs")
    p.add_argument("--config", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resamples", type=int, default=None)

    p = add("optimize", cmd_optimize, "solve the capped cost-neutral reallocation")
    p.add_argument("--marginals", required=True)
    p.add_argument("--cap", type=float, default=0.2)
    p.add_argument("--out", required=True)

    p = add("offline-eval", cmd_offline_eval, "offline policy deltas across an amplitude sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", default=None, help="evaluate this policy instead of a sweep")
    p.add_argument("--sweep", type=float, nargs="+", default=None)
    p.add_argument("--resamples", type=int, default=None)

    p = add("ab", cmd_ab, "simulated A/B: baseline vs fixed- and dynamic-factor policy")
    p.add_argument("--config", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--users-per-arm", type=int, default=None)

    p = add("weight-profile", cmd_weight_profile, "importance-weight std vs multiplier")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alphas", type=float, nargs="+", default=None)
    p.add_argument("--samples", type=int, default=100_000)

    p = add("two-auctions", cmd_two_auctions, "repeated-auction bid shading illustration")
    p.add_argument("--value", type=float, default=100.0)
    p.add_argument("--competition", required=True, help='JSON, e.g. {"kind":"uniform","low":0,"high":100}')
    p.add_argument("--competition2", default=None, help="second-auction competition (defaults to the first)")
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--out", required=True)

    p = add("fit-ctr", cmd_fit_ctr, "fit CTR models with/without fatigue; calibration curves")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--l2", type=float, default=0.0)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, LogFormatError, ValidationError) as exc:
        print(f"impatience: error: {exc}", file=sys.stderr)
        return 1
    except ConvergenceError as exc:
        print(f"impatience: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
