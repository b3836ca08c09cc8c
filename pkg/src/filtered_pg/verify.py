"""Acceptance checks shared by the ``verify`` command and the acceptance tests.

Each check returns a :class:`CheckResult`; none of them raise on failure.
"""
from __future__ import annotations

import filecmp
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .env import DeployedOutput, Proposal
from .estimator import (
    EpisodeState,
    RewardPredictor,
    loo_marginal_contribution,
    routing_marginal_contribution,
)
from .harness import ExperimentConfig, emit_results, run_experiment
from .mechanism import Aggregator, Router, log_observation, route_probabilities
from .optimizer import (
    OptimizerConfig,
    capture_snapshot,
    group_normalized_advantages,
    grpo_gradient,
    make_group,
    reinforce_gradient,
)
from .oracle import (
    ExactQuantities,
    bernoulli,
    exact_counterfactual_gradient,
    exact_return_gradient,
    exact_marginal_contribution,
    exact_routing_dr_expectation,
    finite_difference_gradient,
    gradient_variance_report,
    point_mass,
    reward_outcomes,
    risk_sensitivity_demo,
    routing_contribution,
    shared_reward_counterexample,
    system_objective_of_agent,
    uniform_policies,
)
from .policy import (
    ReplacementPolicy,
    action_probabilities,
    encode_for,
    init_policies,
    joint_distribution,
)
from .presets import PRESETS, get_preset
from .rollout import complete_proposals, continue_from


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    seconds: float
    limit: float
    detail: dict = field(default_factory=dict)

    @property
    def within_time(self) -> bool:
        return self.seconds < self.limit

    @property
    def ok(self) -> bool:
        return self.passed and self.within_time

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        timing = f"{self.seconds:.1f}s/{self.limit:.0f}s"
        return f"[{status}] {self.number}. {self.name} ({timing}) {self.summary()}"

    def summary(self) -> str:
        return self.detail.get("summary", "")


def _timed(number: int, name: str, limit: float, fn: Callable[[], tuple]) -> CheckResult:
    start = time.perf_counter()
    passed, detail = fn()
    return CheckResult(number, name, bool(passed), time.perf_counter() - start, limit, detail)


# -- 1. doubly-robust routing credit is unbiased ------------------------------------

def _dr_presets_worst(seed: int = 0) -> tuple:
    rng = np.random.default_rng(seed)
    worst = {"propensity": 0.0, "model": 0.0}
    n_cases = 0
    for name in ("routing-basic", "routing-multiturn"):
        env = get_preset(name)
        pols = init_policies(env.K, env.V, env.d, "independent", 1.0, rng)
        router = Router(rng.normal(size=(env.d, env.K * env.V)), env.K, env.V, tau=0.8, epsilon=0.05)
        ex = ExactQuantities(pols, router, env)
        arbitrary = RewardPredictor(rng.normal(size=(env.d, env.K * env.V)), env.K, env.V)
        for t in range(env.T):
            q = ex.q_table(t)
            exact_model = RewardPredictor(
                np.stack([[q[c, env.output_index((i, v))] for i in range(env.K) for v in range(env.V)]
                          for c in range(env.n_contexts)]), env.K, env.V)
            for c in range(env.n_contexts):
                ctx = env.context(c)
                for props, _ in joint_distribution(pols, ctx):
                    p = route_probabilities(router, ctx, props)

                    def make(j, g, props=props, p=p, ctx=ctx, t=t):
                        return log_observation(ctx, props, p, j, g, 0, t)

                    if t + 1 < env.T:
                        # the estimate is linear in G, so its mean only needs E[G_t | selected]
                        def law(j, props=props, c=c, q=q):
                            return [(q[c, env.output_index((props[j].agent, props[j].token))], 1.0)]
                    else:
                        def law(j, props=props, ctx=ctx):
                            return reward_outcomes(env, ctx, DeployedOutput((props[j].agent, props[j].token)))
                    other_law = rng.dirichlet(np.ones(env.K))
                    for i in range(env.K):
                        target = routing_contribution(ex, ctx, props, i, t)
                        est_a = exact_routing_dr_expectation(
                            make, p, law, lambda o: routing_marginal_contribution(o, i, arbitrary, router).value)
                        est_b = exact_routing_dr_expectation(
                            make, other_law, law, lambda o: routing_marginal_contribution(o, i, exact_model, router).value)
                        worst["propensity"] = max(worst["propensity"], abs(est_a - target))
                        worst["model"] = max(worst["model"], abs(est_b - target))
                        n_cases += 1
    return worst, n_cases


def check_dr_unbiased() -> CheckResult:
    def run():
        worst, n = _dr_presets_worst()
        ok = worst["propensity"] <= 1e-12 and worst["model"] <= 1e-12
        return ok, {"max_abs_error": worst, "cases": n,
                    "summary": f"max |E[est] - oracle| propensity {worst['propensity']:.1e}, "
                               f"model {worst['model']:.1e} over {n} cases (tol 1e-12)"}
    return _timed(1, "DR routing credit unbiased", 10, run)


# -- 2. leave-one-out credit is unbiased --------------------------------------------

LOO_CASES = (
    # preset, agent, context, prefix tokens, own token
    ("collab-interaction", 1, 1, (0,), 1),
    ("collab-independent", 0, 0, (), 1),
    ("collab-multiturn", 0, 1, (), 0),
)


def loo_monte_carlo(name: str, i: int, c: int, prefix_tokens, token: int, n: int, seed: int) -> dict:
    env = get_preset(name)
    rng = np.random.default_rng(seed)
    pols = init_policies(env.K, env.V, env.d, PRESETS[name].conditioning, 0.7, rng)
    agg = Aggregator(PRESETS[name].mechanism)
    q = ReplacementPolicy.uniform(i, env.V)
    ctx = env.context(c)
    prefix = [Proposal(k, a) for k, a in enumerate(prefix_tokens)]
    oracle = exact_marginal_contribution(pols, agg, env, q, i, ctx, prefix, token)
    samples = np.empty(n)
    for k in range(n):
        props = complete_proposals(pols, ctx, prefix + [Proposal(i, token)], rng)
        g = continue_from(env, pols, agg, ctx, props, 0, rng)
        state = EpisodeState(ctx, tuple(props), 0, g)
        samples[k] = loo_marginal_contribution(state, i, q, pols, agg, env, rng).value
    se = samples.std() / np.sqrt(n)
    return {"preset": name, "agent": i, "oracle": oracle, "mean": float(samples.mean()), "se": float(se),
            "z": float((samples.mean() - oracle) / se) if se > 0 else 0.0}


def check_loo_unbiased(n: int = 100_000) -> CheckResult:
    def run():
        rows = [loo_monte_carlo(*case, n=n, seed=17 + k) for k, case in enumerate(LOO_CASES)]
        ok = all(abs(r["z"]) <= 3 for r in rows)
        worst = max(abs(r["z"]) for r in rows)
        return ok, {"cases": rows, "summary": f"max |z| = {worst:.2f} over {len(rows)} presets at n={n} (tol 3)"}
    return _timed(2, "LOO credit unbiased", 60, run)


# -- 3. counterfactual gradient identity ---------------------------------------------

def gradient_identity_errors(n_inits: int = 20, seed: int = 3) -> list:
    rng = np.random.default_rng(seed)
    rows = []
    for name in ("collab-interaction", "routing-multiturn"):
        env = get_preset(name)
        preset = PRESETS[name]
        for k in range(n_inits):
            pols = init_policies(env.K, env.V, env.d, preset.conditioning, 1.0, rng)
            if preset.mechanism == "router":
                mech = Router(rng.normal(size=(env.d, env.K * env.V)), env.K, env.V, 0.9, 0.05)
            else:
                mech = Aggregator(preset.mechanism)
            i = k % env.K
            analytic = exact_counterfactual_gradient(pols, mech, env, i)
            numeric = finite_difference_gradient(system_objective_of_agent(pols, mech, env, i), pols[i].theta, 1e-5)
            rel = float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))
            rows.append({"preset": name, "init": k, "agent": i, "relative_error": rel})
    return rows


def check_gradient_identity() -> CheckResult:
    def run():
        rows = gradient_identity_errors()
        worst = max(r["relative_error"] for r in rows)
        return worst < 1e-4, {"max_relative_error": worst, "instances": len(rows),
                              "summary": f"max relative error {worst:.1e} over {len(rows)} instances (tol 1e-4)"}
    return _timed(3, "Counterfactual gradient = finite differences of J", 60, run)


# -- 4. mean identity and variance ordering -------------------------------------------

VARIANCE_PRESET, VARIANCE_AGENT = "collab-interaction", 2


def check_variance_ordering(n: int = 100_000) -> CheckResult:
    def run():
        env = get_preset(VARIANCE_PRESET)
        pols = uniform_policies(env)
        agg = Aggregator(PRESETS[VARIANCE_PRESET].mechanism)
        exact_gap = float(np.max(np.abs(
            exact_return_gradient(pols, agg, env, VARIANCE_AGENT)
            - exact_counterfactual_gradient(pols, agg, env, VARIANCE_AGENT))))
        rep = gradient_variance_report(pols, agg, env, VARIANCE_AGENT, n, np.random.default_rng(12))
        diff = np.array(rep["mean_diff_shared_loo"])
        se = np.array(rep["mean_diff_shared_loo_se"])
        z_mean = float(np.max(np.abs(diff) / np.where(se > 0, se, np.inf)))
        g1, g2 = rep["gap_shared_loo"], rep["gap_loo_delta"]
        z1, z2 = g1["gap"] / g1["se"], g2["gap"] / g2["se"]
        dec = rep["decomposition"]
        z_res = abs(dec["residual"]) / dec["var_shared_se"]
        ok = exact_gap <= 1e-10 and z_mean <= 3 and z1 > 5 and z2 > 5 and z_res < 3
        tv = rep["total_variance"]
        return ok, {
            "total_variance": tv, "exact_mean_gap": exact_gap, "mean_max_z": z_mean, "gap_z": [z1, z2], "residual_z": z_res,
            "summary": (f"Var shared {tv['shared']:.3f} > LOO {tv['loo']:.3f} > delta {tv['delta']:.3f} "
                        f"(gaps {z1:.0f} sigma, {z2:.0f} sigma); exact mean gap {exact_gap:.0e}, "
                        f"sampled max |z| {z_mean:.2f}; "
                        f"residual {z_res:.2f} sigma"),
        }
    return _timed(4, "Mean identity and variance ordering", 120, run)


# -- 5. risk-sensitive incentives ---------------------------------------------------------

def check_risk_sensitivity() -> CheckResult:
    def run():
        def square(r):
            return r * r

        a, b = point_mass(0.5), bernoulli(0.5)
        ua, ub = risk_sensitivity_demo(square, a, b, tau=1.0, epsilon=0.0)
        gap = abs(ua - ub)
        ca, cb = risk_sensitivity_demo(lambda r: 0.3, a, b, tau=1.0, epsilon=0.0)
        flat_gap = abs(ca - cb)
        taus = [1.0, 2.0, 5.0, 10.0, 100.0, 1e3, 1e4]
        sweep = [abs(np.subtract(*risk_sensitivity_demo(square, a, b, tau=t))) for t in taus]
        monotone = all(x > y for x, y in zip(sweep, sweep[1:]))
        ok = gap > 1e-4 and flat_gap < 1e-12 and monotone
        return ok, {"U_point_mass": ua, "U_bernoulli": ub, "gap": gap, "constant_score_gap": flat_gap,
                    "tau_sweep": dict(zip(map(str, taus), sweep)),
                    "summary": f"gap {gap:.4f}; constant score gap {flat_gap:.1e}; "
                               f"tau sweep monotone={monotone} (last {sweep[-1]:.1e})"}
    return _timed(5, "Risk-sensitive routing incentives", 5, run)


# -- 6. shared reward does not identify contribution ----------------------------------------

def counterexample_monte_carlo(name: str, own_token: int, n: int, seed: int) -> dict:
    env = get_preset(name)
    rng = np.random.default_rng(seed)
    pols = uniform_policies(env)
    agg = Aggregator("tuple-identity")
    q = ReplacementPolicy.uniform(0, env.V)
    ctx = env.context(0)
    vals = np.empty(n)
    for k in range(n):
        props = complete_proposals(pols, ctx, [Proposal(0, own_token)], rng)
        g = continue_from(env, pols, agg, ctx, props, 0, rng)
        vals[k] = loo_marginal_contribution(EpisodeState(ctx, tuple(props), 0, g), 0, q, pols, agg, env, rng).value
    return {"mean": float(vals.mean()), "se": float(vals.std() / np.sqrt(n))}


def check_counterexample(n: int = 100_000) -> CheckResult:
    def run():
        rep = shared_reward_counterexample()
        r, rp = rep["mechanisms"]["r"], rep["mechanisms"]["r_prime"]
        exact_ok = (r["reward_law"]["P(reward=1)"] == 0.5 and rp["reward_law"]["P(reward=1)"] == 0.5
                    and r["agent0_marginal"] == {"0": -0.5, "1": 0.5}
                    and rp["agent0_marginal"] == {"0": 0.0, "1": 0.0})
        mc = {}
        mc_ok = True
        for label, name, target in (("r", "counterexample-prop2", lambda a: a - 0.5),
                                    ("r_prime", "counterexample-prop2-alt", lambda a: 0.0)):
            for a in (0, 1):
                est = counterexample_monte_carlo(name, a, n // 2, seed=100 + 2 * a + (label == "r"))
                est["target"] = target(a)
                se = max(est["se"], 1e-15)
                mc_ok &= abs(est["mean"] - est["target"]) <= 3 * se or (est["se"] == 0 and est["mean"] == est["target"])
                mc[f"{label}/a={a}"] = est
        desc = ", ".join(f"{k}: {v['mean']:+.3f}" for k, v in mc.items())
        return exact_ok and mc_ok, {"exact": rep, "monte_carlo": mc,
                                    "summary": f"both reward laws P(1)=0.5; LOO means {desc}"}
    return _timed(6, "Shared reward does not identify contribution", 30, run)


# -- 7. training benchmark -------------------------------------------------------------------

def benchmark_runs(seeds=range(5), estimators=("dr", "wta", "frozen"), **overrides) -> dict:
    out = {}
    for est in estimators:
        finals = []
        for s in seeds:
            series, _ = run_experiment(ExperimentConfig(env="routing-basic", estimator=est, seed=s, **overrides))
            finals.append(series[-1])
        out[est] = finals
    return out


def check_training_benchmark(seeds=range(5)) -> CheckResult:
    def run():
        runs = benchmark_runs(seeds)
        ret = {k: np.array([r.mean_return for r in v]) for k, v in runs.items()}
        reg = {k: np.array([r.regret for r in v]) for k, v in runs.items()}
        diff = ret["dr"] - ret["wta"]
        se = float(diff.std(ddof=1) / np.sqrt(len(diff)))
        gap = float(diff.mean())
        order = ret["dr"].mean() > ret["wta"].mean() > ret["frozen"].mean()
        regret_wins = int(np.sum(reg["dr"] <= reg["wta"]))
        ok = order and gap > se and regret_wins >= 4
        means = {k: float(v.mean()) for k, v in ret.items()}
        return ok, {
            "mean_final_return": means, "per_seed_return": {k: v.tolist() for k, v in ret.items()},
            "per_seed_regret": {k: v.tolist() for k, v in reg.items()}, "gap": gap, "gap_se": se,
            "regret_wins": regret_wins,
            "summary": (f"return dr {means['dr']:.3f} / wta {means['wta']:.3f} / frozen {means['frozen']:.3f}; "
                        f"gap {gap:+.3f} (se {se:.3f}); dr regret <= wta on {regret_wins}/5 seeds"),
        }
    return _timed(7, "Routing benchmark: DR > WTA > frozen", 600, run)


# -- 8. GRPO mechanics -----------------------------------------------------------------------------

def check_grpo_mechanics() -> CheckResult:
    def run():
        rng = np.random.default_rng(5)
        env = get_preset("routing-basic")
        pol = init_policies(1, env.V, env.d, "independent", 0.5, rng)[0]
        ctx = env.context(2)
        z = encode_for(pol, ctx, [])
        zero_adv = np.max(np.abs(group_normalized_advantages([0.7] * 4)))

        tokens = [0, 3, 3, 5]
        signals = [0.2, 1.0, 0.4, -0.3]
        old = capture_snapshot(pol)
        group = make_group(ctx, [z] * 4, tokens, signals, old)
        cfg = OptimizerConfig(kl_beta=0.0)
        g_grpo = grpo_gradient(pol, [group], old, cfg)
        adv = group_normalized_advantages(signals, cfg.norm_delta)
        g_ref = reinforce_gradient(pol, list(zip([z] * 4, tokens, adv)))
        match = float(np.max(np.abs(g_grpo - g_ref)))

        # move the policy so the sampled token's ratio is exactly 1 + 2 * clip_eps
        p_old = action_probabilities(pol, z)[3]
        target = (1 + 2 * cfg.clip_eps) * p_old
        bump = np.log(target / (1 - target)) - np.log(p_old / (1 - p_old))
        theta = pol.theta.copy()
        theta[:, 3] += bump * z.encoded / np.dot(z.encoded, z.encoded)
        moved = pol.with_theta(theta)
        rho = action_probabilities(moved, z)[3] / p_old
        # advantages (+1, -1) on the same token: the positive one is saturated,
        # so only the negative sample's unclipped term may remain
        pair = make_group(ctx, [z, z], [3, 3], [1.0, 0.0], old)
        full = grpo_gradient(moved, [pair], old, cfg)
        probs = action_probabilities(moved, z)
        score = -probs
        score[3] += 1.0
        negative_adv = group_normalized_advantages([1.0, 0.0], cfg.norm_delta)[1]
        negative_only = np.outer(z.encoded, negative_adv * rho * score) / 2
        residual = float(np.max(np.abs(full - negative_only)))
        ok = zero_adv == 0.0 and match <= 1e-9 and abs(rho - (1 + 2 * cfg.clip_eps)) < 1e-9 and residual <= 1e-9
        return ok, {"constant_group_max_advantage": float(zero_adv), "grpo_vs_reinforce": match,
                    "rho": float(rho), "saturated_residual": residual,
                    "summary": f"constant-group advantages {zero_adv:.0e}; GRPO vs REINFORCE {match:.1e}; "
                               f"saturated-sample residual {residual:.1e}"}
    return _timed(8, "GRPO mechanics", 5, run)


# -- 9. determinism ----------------------------------------------------------------------------

def check_determinism() -> CheckResult:
    def run():
        configs = [
            ExperimentConfig(env="routing-basic", estimator="dr", seed=7),
            ExperimentConfig(env="collab-interaction", estimator="loo", seed=7, n_updates=40),
            ExperimentConfig(env="routing-multiturn", estimator="dr", optimizer="reinforce", seed=7, n_updates=40),
        ]
        same = True
        with tempfile.TemporaryDirectory() as tmp:
            for k, cfg in enumerate(configs):
                dirs = []
                for rep in range(2):
                    series, report = run_experiment(cfg)
                    d = Path(tmp) / f"{k}_{rep}"
                    emit_results(series, report, d)
                    dirs.append(d)
                for fname in ("metrics.csv", "report.json"):
                    same &= filecmp.cmp(dirs[0] / fname, dirs[1] / fname, shallow=False)
        return same, {"configs": len(configs), "summary": f"{len(configs)} configs, outputs byte-identical={same}"}
    return _timed(9, "Determinism", 60, run)


CHECKS = {
    1: check_dr_unbiased,
    2: check_loo_unbiased,
    3: check_gradient_identity,
    4: check_variance_ordering,
    5: check_risk_sensitivity,
    6: check_counterexample,
    7: check_training_benchmark,
    8: check_grpo_mechanics,
    9: check_determinism,
}


def run_checks(numbers=None, echo: Callable[[str], None] = print) -> list:
    results = []
    for n in numbers or sorted(CHECKS):
        res = CHECKS[n]()
        echo(res.line())
        results.append(res)
    return results
