import numpy as np
import pytest
from hypothesis import given, strategies as st

from filtered_pg.env import Context, DeployedOutput, EnvSpec, Proposal, reward
from filtered_pg.errors import ConfigError, UsageError
from filtered_pg.estimator import (
    EpisodeState, MarginalContribution, ReplayBuffer, RewardPredictor, dr_candidate_return,
    ips_weight, loo_marginal_contribution, mr_estimate, predict_return,
    routing_marginal_contribution, shared_signal, update_predictor, winner_take_all_signal,
)
from filtered_pg.mechanism import Aggregator, Router, log_observation, route_probabilities, select
from filtered_pg.oracle import (
    ExactQuantities, candidate_returns, exact_routing_dr_expectation, reward_outcomes,
    routing_contribution, uniform_policies,
)
from filtered_pg.policy import ReplacementPolicy, init_policies
from filtered_pg.presets import get_preset


def obs_for(ctx, candidates, probs, selected, G, turn=0):
    return log_observation(ctx, candidates, probs, selected, G, 0, turn)


def test_zero_predictor_predicts_zero():
    pred = RewardPredictor.zeros(3, 2, 4)
    assert predict_return(pred, Context(0, np.array([1.0, -2.0, 0.5])), Proposal(1, 3)) == 0.0


def test_prediction_ignores_other_candidates():
    pred = RewardPredictor(np.random.default_rng(0).normal(size=(2, 6)), 3, 2)
    ctx = Context(0, np.array([0.3, 0.9]))
    cand = Proposal(1, 1)
    a = obs_for(ctx, [Proposal(0, 0), cand, Proposal(2, 1)], (0.2, 0.3, 0.5), 0, 1.0)
    b = obs_for(ctx, [Proposal(0, 1), cand, Proposal(2, 0)], (0.6, 0.3, 0.1), 2, 0.0)
    assert dr_candidate_return(a, 1, pred).value == dr_candidate_return(b, 1, pred).value


@pytest.mark.parametrize("p,expected", [(1.0, 1.0), (0.01, 3.0), (0.5, 2.0), (0.25, 3.0)])
def test_ips_weight(p, expected):
    assert ips_weight(p, 0.05, 3.0) == expected


def uniform_router_logs(env, n, rng):
    K, V = env.K, env.V
    logs = []
    for _ in range(n):
        c = int(rng.integers(env.n_contexts))
        ctx = env.context(c)
        cand = [Proposal(i, int(rng.integers(V))) for i in range(K)]
        sel = int(rng.integers(K))
        G = env.expected_reward(ctx, DeployedOutput((sel, cand[sel].token)))
        logs.append(obs_for(ctx, cand, [1.0 / K] * K, sel, G))
    return logs


def fitted_predictor(steps):
    env = EnvSpec("fit", 2, 2, 2, 2, 1, "proposal", [[0.1, 0.9, 0.4, 0.6], [0.8, 0.2, 0.3, 0.5]])
    rng = np.random.default_rng(11)
    buf = ReplayBuffer(10_000, uniform_router_logs(env, 4_000, rng))
    pred = RewardPredictor.zeros(2, 2, 2)
    for _ in range(steps):
        pred = update_predictor(pred, buf, rng)
    return env, pred


def test_predictor_converges_on_realizable_target():
    env, pred = fitted_predictor(5_000)
    mse = np.mean([(predict_return(pred, env.context(c), Proposal(i, v)) - env.rewards[c, i * 2 + v]) ** 2
                   for c in range(2) for i in range(2) for v in range(2)])
    assert mse < 1e-3


def test_noiseless_linear_fit_is_exact():
    env, pred = fitted_predictor(1_000)
    for c in range(2):
        for i in range(2):
            for v in range(2):
                assert predict_return(pred, env.context(c), Proposal(i, v)) == pytest.approx(
                    env.rewards[c, i * 2 + v], abs=1e-6)


def test_predictor_only_learns_selected_candidates():
    ctx = Context(0, np.ones(1))
    buf = ReplayBuffer(10, [obs_for(ctx, [Proposal(0, 0), Proposal(1, 1)], (1.0, 0.0), 0, 1.0)])
    pred = update_predictor(RewardPredictor.zeros(1, 2, 2), buf, np.random.default_rng(0))
    assert pred.psi[0, 0] > 0
    assert np.all(pred.psi[0, 1:] == 0)


def test_update_predictor_needs_data():
    with pytest.raises(UsageError):
        update_predictor(RewardPredictor.zeros(1, 2, 2), ReplayBuffer(5), np.random.default_rng(0))


def test_replay_buffer_fifo():
    ctx = Context(0, np.ones(1))
    buf = ReplayBuffer(5)
    recs = [obs_for(ctx, [Proposal(0, 0)], (1.0,), 0, float(k)) for k in range(8)]
    for r in recs:
        buf.add(r)
    assert len(buf) == 5
    assert [r.observed_return for r in buf] == [3.0, 4.0, 5.0, 6.0, 7.0]


def test_unselected_dr_estimate_is_model_prediction():
    pred = RewardPredictor(np.array([[0.3, 0.7, 0.2, 0.9]]), 2, 2)
    ctx = Context(0, np.ones(1))
    obs = obs_for(ctx, [Proposal(0, 1), Proposal(1, 0)], (0.4, 0.6), 0, 1.0)
    assert dr_candidate_return(obs, 1, pred).value == pytest.approx(0.2)


def test_selected_with_unit_propensity_recovers_return():
    ctx = Context(0, np.ones(1))
    obs = obs_for(ctx, [Proposal(0, 1), Proposal(1, 0)], (1.0, 0.0), 0, 0.37)
    assert dr_candidate_return(obs, 0, RewardPredictor.zeros(1, 2, 2)).value == 0.37


def test_zero_propensity_selection_rejected():
    ctx = Context(0, np.ones(1))
    obs = obs_for(ctx, [Proposal(0, 1), Proposal(1, 0)], (0.0, 1.0), 0, 0.37)
    with pytest.raises(ConfigError):
        dr_candidate_return(obs, 0, RewardPredictor.zeros(1, 2, 2))


def routing_case(seed):
    env = get_preset("routing-basic")
    rng = np.random.default_rng(seed)
    ctx = env.context(int(rng.integers(env.n_contexts)))
    cand = [Proposal(i, int(rng.integers(env.V))) for i in range(env.K)]
    router = Router(rng.normal(size=(env.d, env.K * env.V)), env.K, env.V, 0.8, 0.05)
    pred = RewardPredictor(rng.normal(size=(env.d, env.K * env.V)), env.K, env.V)
    return env, ctx, cand, router, pred


@pytest.mark.parametrize("seed", range(5))
def test_dr_candidate_return_is_unbiased(seed):
    env, ctx, cand, router, pred = routing_case(seed)
    p = route_probabilities(router, ctx, cand)
    for j in range(env.K):
        truth = env.expected_reward(ctx, DeployedOutput((j, cand[j].token)))
        mean = exact_routing_dr_expectation(
            lambda s, g: obs_for(ctx, cand, p, s, g), p,
            lambda s: reward_outcomes(env, ctx, DeployedOutput((s, cand[s].token))),
            lambda o: dr_candidate_return(o, j, pred).value,
        )
        assert mean == pytest.approx(truth, abs=1e-12)


def test_two_agent_contribution_by_substitution():
    g1, g2 = 0.8, 0.35
    pred = RewardPredictor(np.array([[0.0, 0.0, g2, 0.0]]), 2, 2)
    router = Router(np.zeros((1, 4)), 2, 2)
    ctx = Context(0, np.ones(1))
    obs = obs_for(ctx, [Proposal(0, 0), Proposal(1, 0)], (1.0, 0.0), 0, g1)
    assert routing_marginal_contribution(obs, 0, pred, router).value == pytest.approx(g1 - g2, abs=1e-15)


def test_symmetric_candidates_have_zero_contribution():
    K = 3
    pred = RewardPredictor(np.full((1, K), 0.4), K, 1)
    router = Router(np.zeros((1, K)), K, 1, 1.0, 0.1)
    ctx = Context(0, np.ones(1))
    obs = obs_for(ctx, [Proposal(j, 0) for j in range(K)], [1 / 3] * 3, 1, 0.4)
    for i in range(K):
        assert abs(routing_marginal_contribution(obs, i, pred, router).value) < 1e-12


def test_routing_contribution_needs_two_candidates():
    ctx = Context(0, np.ones(1))
    obs = obs_for(ctx, [Proposal(0, 0)], (1.0,), 0, 1.0)
    with pytest.raises(UsageError):
        routing_marginal_contribution(obs, 0, RewardPredictor.zeros(1, 1, 1), Router.uniform(1, 1, 1))


def test_routing_contribution_monte_carlo_matches_enumeration():
    env, ctx, cand, router, pred = routing_case(7)
    pols = uniform_policies(env)
    ex = ExactQuantities(pols, router, env)
    rng = np.random.default_rng(21)
    p = route_probabilities(router, ctx, cand)
    i = 1
    vals = np.empty(100_000)
    for k in range(len(vals)):
        sel = select(p, rng)
        G = reward(env, ctx, DeployedOutput((sel, cand[sel].token)), rng)
        vals[k] = routing_marginal_contribution(obs_for(ctx, cand, p, sel, G), i, pred, router).value
    truth = routing_contribution(ex, ctx, cand, i)
    G_true = candidate_returns(ex, ctx, cand)
    assert truth == pytest.approx(p @ G_true - np.delete(G_true, i) @
                                  route_probabilities(router, ctx, [c for j, c in enumerate(cand) if j != i]))
    assert abs(vals.mean() - truth) < 3 * vals.std() / np.sqrt(len(vals))


def test_winner_take_all_signal():
    ctx = Context(0, np.ones(1))
    obs = obs_for(ctx, [Proposal(j, 0) for j in range(3)], [0.2, 0.5, 0.3], 1, 0.6)
    signals = [winner_take_all_signal(obs, i).value for i in range(3)]
    assert signals == [0.0, 0.6, 0.0]
    assert sum(signals) == obs.observed_return


def test_shared_signal():
    assert [m.value for m in shared_signal(0.7, 3)] == [0.7, 0.7, 0.7]


def test_non_finite_contribution_rejected():
    with pytest.raises(ValueError):
        MarginalContribution(0, 0, float("nan"), "loo")


def test_identical_counterfactual_gives_zero(rng):
    env = EnvSpec("det", 1, 1, 2, 2, 1, "tuple", [[0.1, 0.5, 0.3, 0.9]])
    pols = init_policies(2, 2, 1)
    ctx = env.context(0)
    props = (Proposal(0, 1), Proposal(1, 0))
    G = env.expected_reward(ctx, DeployedOutput((1, 0)))
    state = EpisodeState(ctx, props, 0, G)
    q = ReplacementPolicy.fixed(1, 2, 0)
    for _ in range(20):
        assert loo_marginal_contribution(state, 1, q, pols, Aggregator(), env, rng).value == 0.0


def conditional_loo_mean(name, a_first, n=20_000, seed=0):
    env = get_preset(name)
    pols = uniform_policies(env)
    rng = np.random.default_rng(seed)
    ctx = env.context(0)
    q = ReplacementPolicy.uniform(0, 2)
    vals = np.empty(n)
    for k in range(n):
        props = (Proposal(0, a_first), Proposal(1, int(rng.integers(2))))
        G = env.expected_reward(ctx, DeployedOutput(tuple(p.token for p in props)))
        vals[k] = loo_marginal_contribution(EpisodeState(ctx, props, 0, G), 0, q, pols, Aggregator(), env, rng).value
    return vals


@pytest.mark.parametrize("a_first", [0, 1])
def test_leave_one_out_on_reward_of_other_agent_is_zero(a_first):
    vals = conditional_loo_mean("counterexample-prop2-alt", a_first)
    assert abs(vals.mean()) <= 3 * vals.std() / np.sqrt(len(vals))


@pytest.mark.parametrize("a_first", [0, 1])
def test_leave_one_out_on_own_reward(a_first):
    vals = conditional_loo_mean("counterexample-prop2", a_first)
    assert abs(vals.mean() - (a_first - 0.5)) <= 3 * vals.std() / np.sqrt(len(vals))


def test_leave_one_out_refuses_router(rng):
    env = get_preset("routing-basic")
    state = EpisodeState(env.context(0), tuple(Proposal(i, 0) for i in range(3)), 0, 1.0)
    with pytest.raises(UsageError):
        loo_marginal_contribution(state, 0, ReplacementPolicy.uniform(0, env.V),
                                  uniform_policies(env), Router.uniform(env.d, 3, env.V), env, rng)


def test_return_estimate_single_turn_is_reward(rng):
    env = get_preset("routing-basic")
    ctx = env.context(2)
    y = DeployedOutput((1, 3))
    for n in (1, 7):
        assert mr_estimate(ctx, y, uniform_policies(env), Router.uniform(env.d, 3, env.V), env, n, rng) \
            == env.expected_reward(ctx, y)


def deterministic_two_turn():
    trans = np.zeros((2, 1, 2))
    trans[0, 0, 1] = trans[1, 0, 0] = 1.0
    env = EnvSpec("det2", 2, 2, 1, 1, 2, "proposal", [[0.25], [0.5]], transitions=trans)
    return env, init_policies(1, 1, 2), Router.uniform(2, 1, 1)


def test_return_estimate_deterministic_continuation(rng):
    env, pols, router = deterministic_two_turn()
    y = DeployedOutput((0, 0))
    a = mr_estimate(env.context(0), y, pols, router, env, 1, rng)
    b = mr_estimate(env.context(0), y, pols, router, env, 100, rng)
    assert a == b == 0.75


def test_return_estimate_error_scales_with_rollouts():
    env = get_preset("routing-multiturn")
    pols = uniform_policies(env)
    router = Router.uniform(env.d, env.K, env.V, 1.0, 0.05)
    rng = np.random.default_rng(3)
    ctx, y = env.context(0), DeployedOutput((0, 1))
    ns = np.array([1, 4, 16, 64])
    sds = [np.std([mr_estimate(ctx, y, pols, router, env, int(n), rng) for _ in range(400)]) for n in ns]
    slope = np.polyfit(np.log(ns), np.log(sds), 1)[0]
    assert -0.6 <= slope <= -0.4


def test_return_estimate_rejects_zero_rollouts(rng):
    env, pols, router = deterministic_two_turn()
    with pytest.raises(ConfigError):
        mr_estimate(env.context(0), DeployedOutput((0, 0)), pols, router, env, 0, rng)


@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=5), st.floats(0, 1))
def test_dr_model_branch_unbiased_for_any_propensities(weights, truth):
    K = len(weights)
    p = np.array(weights) / np.sum(weights)
    ctx = Context(0, np.ones(1))
    cand = [Proposal(j, 0) for j in range(K)]
    pred = RewardPredictor(np.full((1, K), truth), K, 1)
    mean = exact_routing_dr_expectation(
        lambda s, g: obs_for(ctx, cand, p, s, g), p, lambda s: [(truth, 1.0)],
        lambda o: dr_candidate_return(o, 0, pred).value)
    assert mean == pytest.approx(truth, abs=1e-12)
