import numpy as np
import pytest
from hypothesis import given, strategies as st

from filtered_pg.env import Context, EnvSpec
from filtered_pg.errors import ConfigError
from filtered_pg.mechanism import Aggregator
from filtered_pg.optimizer import (
    CONFIG_PRESETS, OptimizerConfig, capture_snapshot, group_normalized_advantages, grpo_gradient,
    grpo_objective, grpo_update, kl_divergence, make_group, reinforce_gradient, reinforce_update,
)
from filtered_pg.oracle import finite_difference_gradient, system_objective_of_agent
from filtered_pg.policy import (
    action_probabilities, encode_for, init_policies, load_policies, logprob_grad, propose, save_policies,
)
from filtered_pg.rollout import continue_from


def test_constant_signals_give_zero_advantages():
    np.testing.assert_array_equal(group_normalized_advantages([0.3] * 5), 0.0)


def test_two_sample_advantages():
    np.testing.assert_allclose(group_normalized_advantages([0.0, 1.0], 1e-12), [-1.0, 1.0], atol=1e-10)


def test_advantages_need_two_samples():
    with pytest.raises(ConfigError):
        group_normalized_advantages([1.0])


signal_lists = st.lists(st.floats(-10, 10), min_size=2, max_size=12)


@given(signal_lists)
def test_advantages_are_centred(signals):
    assert abs(group_normalized_advantages(signals).mean()) < 1e-12


@given(signal_lists, st.floats(-50, 50))
def test_advantages_shift_invariant(signals, shift):
    a = group_normalized_advantages(signals)
    b = group_normalized_advantages([s + shift for s in signals])
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_optimizer_config_validation():
    for bad in (dict(clip_eps=1.5), dict(kl_beta=-1), dict(norm_delta=0), dict(learning_rate=0)):
        with pytest.raises(ConfigError):
            OptimizerConfig(**bad)
    assert CONFIG_PRESETS["paper-llm"].learning_rate == 1e-5
    assert CONFIG_PRESETS["default"] == OptimizerConfig(0.2, 0.02, 0.05, 1e-8, 1.0)


def single_context_policy(V=2, d=1, theta=None):
    pol = init_policies(1, V, d)[0]
    if theta is not None:
        pol = pol.with_theta(theta)
    return pol, Context(0, np.ones(d))


def test_zero_signals_leave_parameters_unchanged():
    pol, ctx = single_context_policy()
    z = encode_for(pol, ctx)
    assert reinforce_update(pol, [(z, 0, 0.0), (z, 1, 0.0)]) is pol


def test_reinforce_solves_two_armed_bandit():
    pol, ctx = single_context_policy()
    rng = np.random.default_rng(0)
    rewards = (1.0, 0.0)
    for _ in range(2_000):
        z = encode_for(pol, ctx)
        batch = []
        for _ in range(4):
            prop, _ = propose(pol, z, rng)
            batch.append((z, prop, rewards[prop.token]))
        pol = reinforce_update(pol, batch, lr=0.05)
    assert action_probabilities(pol, encode_for(pol, ctx))[0] > 0.99


def test_reinforce_batch_gradient_matches_finite_differences():
    env = EnvSpec("bandit", 1, 1, 2, 3, 1, "tuple", [[0.1, 0.7, 0.3, 0.9, 0.0, 0.4, 0.6, 0.2, 0.8]])
    rng = np.random.default_rng(3)
    pols = init_policies(2, 3, 1, scale=0.5, rng=rng)
    agg = Aggregator()
    i = 0
    ctx = env.context(0)
    batch = []
    for _ in range(100_000):
        props = []
        for p in pols:
            props.append(propose(p, encode_for(p, ctx, props), rng)[0])
        G = continue_from(env, pols, agg, ctx, props, 0, rng)
        batch.append((encode_for(pols[i], ctx), props[i], G))
    estimate = reinforce_gradient(pols[i], batch)
    fd = finite_difference_gradient(system_objective_of_agent(pols, agg, env, i), pols[i].theta)
    assert np.linalg.norm(estimate - fd) / np.linalg.norm(fd) < 0.05


def grpo_setup(seed=0, V=4, d=2, n=6):
    rng = np.random.default_rng(seed)
    pol = init_policies(1, V, d, scale=0.5, rng=rng)[0]
    ctx = Context(0, rng.normal(size=d))
    z = encode_for(pol, ctx)
    tokens = [propose(pol, z, rng)[0].token for _ in range(n)]
    signals = rng.normal(size=n)
    old = capture_snapshot(pol)
    return pol, ctx, z, tokens, signals, old


def test_grpo_at_old_policy_without_kl_is_normalized_reinforce():
    pol, ctx, z, tokens, signals, old = grpo_setup()
    cfg = OptimizerConfig(kl_beta=0.0)
    group = make_group(ctx, [z] * len(tokens), tokens, signals, old)
    adv = group_normalized_advantages(signals, cfg.norm_delta)
    expected = reinforce_gradient(pol, [(z, t, a) for t, a in zip(tokens, adv)])
    np.testing.assert_allclose(grpo_gradient(pol, [group], old, cfg), expected, atol=1e-9)


def test_saturated_clip_removes_sample_gradient():
    pol, ctx = single_context_policy(V=4, d=1)
    z = encode_for(pol, ctx)
    cfg = OptimizerConfig(kl_beta=0.0)
    old = capture_snapshot(pol)
    group = make_group(ctx, [z, z], [3, 0], [1.0, 0.0], old)
    # move the live policy so that rho on token 3 is exactly 1 + 2*eps
    target = (1 + 2 * cfg.clip_eps) * 0.25
    logit = np.log(target * 3 / (1 - target))
    live = pol.with_theta(np.array([[0.0, 0.0, 0.0, logit]]))
    probs = action_probabilities(live, z)
    assert probs[3] / 0.25 == pytest.approx(1 + 2 * cfg.clip_eps)
    adv = group_normalized_advantages([1.0, 0.0], cfg.norm_delta)
    rho_neg = probs[0] / 0.25
    score = -probs
    score[0] += 1.0
    expected = np.outer(z.encoded, adv[1] * rho_neg * score) / 2
    np.testing.assert_allclose(grpo_gradient(live, [group], old, cfg), expected, atol=1e-12)


def test_grpo_gradient_matches_finite_differences_of_objective():
    pol, ctx, z, tokens, signals, old = grpo_setup(seed=4)
    cfg = OptimizerConfig(clip_eps=0.2, kl_beta=0.3)
    group = make_group(ctx, [z] * len(tokens), tokens, signals, old)
    ref = capture_snapshot(pol.with_theta(pol.theta + 0.3))
    live = pol.with_theta(pol.theta + 0.01)
    fd = finite_difference_gradient(lambda th: grpo_objective(live.with_theta(th), [group], ref, cfg), live.theta)
    np.testing.assert_allclose(grpo_gradient(live, [group], ref, cfg), fd, atol=1e-7)


def test_strong_kl_pulls_policy_to_reference():
    pol, ctx, z, tokens, signals, old = grpo_setup(seed=2)
    ref = capture_snapshot(pol)
    cfg = OptimizerConfig(kl_beta=10.0)
    live = pol.with_theta(pol.theta + np.random.default_rng(1).normal(size=pol.theta.shape))
    start = kl_divergence(action_probabilities(live, z), ref.probabilities(z))
    for _ in range(100):
        snap = capture_snapshot(live)
        group = make_group(ctx, [z] * len(tokens), tokens, signals, snap)
        live = grpo_update(live, [group], snap, ref, cfg)
    end = kl_divergence(action_probabilities(live, z), ref.probabilities(z))
    assert end < start or end < 1e-6


def test_grpo_update_checks_old_snapshot():
    pol, ctx, z, tokens, signals, old = grpo_setup()
    group = make_group(ctx, [z] * len(tokens), tokens, signals, old)
    other = capture_snapshot(pol.with_theta(pol.theta + np.random.default_rng(0).normal(size=pol.theta.shape)))
    with pytest.raises(ConfigError):
        grpo_update(pol, [group], other, old)


def test_grpo_group_needs_two_samples():
    pol, ctx, z, tokens, signals, old = grpo_setup()
    with pytest.raises(ConfigError):
        make_group(ctx, [z], tokens[:1], signals[:1], old)


def test_unclipped_grpo_direction_matches_reinforce_for_large_groups():
    pol, ctx = single_context_policy(V=4, d=1)
    pol = pol.with_theta(np.array([[0.3, -0.2, 0.1, 0.0]]))
    z = encode_for(pol, ctx)
    rewards = np.array([0.9, 0.1, 0.5, 0.3])
    rng = np.random.default_rng(9)
    tokens = [propose(pol, z, rng)[0].token for _ in range(512)]
    old = capture_snapshot(pol)
    group = make_group(ctx, [z] * 512, tokens, rewards[tokens], old)
    g = grpo_gradient(pol, [group], old, OptimizerConfig(clip_eps=float("inf"), kl_beta=0.0)).ravel()
    probs = action_probabilities(pol, z)
    exact = sum(probs[a] * rewards[a] * logprob_grad(pol, z, a) for a in range(4)).ravel()
    assert g @ exact / (np.linalg.norm(g) * np.linalg.norm(exact)) > 0.99


@given(st.floats(-20, 20))
def test_grpo_update_invariant_to_signal_shift(shift):
    pol, ctx, z, tokens, signals, old = grpo_setup(seed=5)
    ref = capture_snapshot(pol)
    a = make_group(ctx, [z] * len(tokens), tokens, signals, old)
    b = make_group(ctx, [z] * len(tokens), tokens, signals + shift, old)
    np.testing.assert_allclose(grpo_update(pol, [a], old, ref).theta, grpo_update(pol, [b], old, ref).theta, atol=1e-6)


def test_gradient_norm_is_clipped():
    pol, ctx, z, tokens, signals, old = grpo_setup(seed=6)
    cfg = OptimizerConfig(learning_rate=1.0, grad_clip_norm=1e-3, kl_beta=0.0)
    group = make_group(ctx, [z] * len(tokens), tokens, signals, old)
    new = grpo_update(pol, [group], old, old, cfg)
    assert np.linalg.norm(new.theta - pol.theta) <= 1e-3 + 1e-12


def test_snapshot_is_independent_of_later_changes():
    pol, ctx = single_context_policy(V=3)
    snap = capture_snapshot(pol)
    z = encode_for(pol, ctx)
    before = snap.probabilities(z).copy()
    pol = pol.with_theta(pol.theta + np.array([[2.0, 0.0, -1.0]]))
    np.testing.assert_array_equal(snap.probabilities(z), before)
    again = capture_snapshot(snap)
    np.testing.assert_array_equal(again.probabilities(z), before)


def test_snapshot_survives_serialization(tmp_path):
    pols = init_policies(2, 3, 2, scale=1.0, rng=np.random.default_rng(0))
    snaps = [capture_snapshot(p) for p in pols]
    save_policies([s.policy for s in snaps], tmp_path / "snap.txt")
    back = load_policies(tmp_path / "snap.txt")
    ctx = Context(0, np.array([0.4, -1.0]))
    for s, b in zip(snaps, back):
        z = encode_for(b, ctx)
        np.testing.assert_allclose(s.probabilities(z), action_probabilities(b, z), atol=1e-12)

