import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from filtered_pg.env import Context, DeployedOutput, Proposal
from filtered_pg.errors import ConfigError, UsageError
from filtered_pg.mechanism import (
    Aggregator, AllocationRule, LoggedObservation, Router, aggregate, allocation,
    log_observation, read_log, register_aggregation_rule, route_probabilities,
    route_probabilities_without, routed_output, select, select_with_seed, write_log,
)

E_OVER_E_PLUS_ONE = 0.7310585786300049


def scored_router(scores, tau=1.0, epsilon=0.0):
    """Router over K agents with V=1 whose score for agent j is ``scores[j]`` at context 0."""
    K = len(scores)
    return Router(np.array([scores], dtype=float), K, 1, tau, epsilon)


def cands(K):
    return [Proposal(j, 0) for j in range(K)]


CTX = Context(0, np.ones(1))


def test_full_exploration_is_uniform():
    p = route_probabilities(scored_router([5.0, -1.0, 2.0], epsilon=1.0), CTX, cands(3))
    np.testing.assert_allclose(p, 1 / 3)


@pytest.mark.parametrize("tau,eps", [(1.0, 0.0), (0.3, 0.1), (4.0, 0.5)])
def test_equal_scores_uniform(tau, eps):
    p = route_probabilities(scored_router([0.4] * 4, tau, eps), CTX, cands(4))
    np.testing.assert_allclose(p, 0.25)


def test_two_candidate_softmax_value():
    p = route_probabilities(scored_router([1.0, 0.0]), CTX, cands(2))
    assert p[0] == pytest.approx(E_OVER_E_PLUS_ONE, abs=1e-15)
    assert p[1] == pytest.approx(1 - E_OVER_E_PLUS_ONE, abs=1e-15)


def test_non_positive_temperature_rejected():
    with pytest.raises(ConfigError):
        scored_router([0.0, 1.0], tau=0.0)


def test_removal_from_two_leaves_certainty():
    p = route_probabilities_without(scored_router([3.0, 0.0], epsilon=0.05), CTX, cands(2), 0)
    np.testing.assert_allclose(p, [1.0])


@pytest.mark.parametrize("removed", [0, 1, 2])
def test_removal_with_equal_scores(removed):
    p = route_probabilities_without(scored_router([1.0] * 3, epsilon=0.2), CTX, cands(3), removed)
    np.testing.assert_allclose(p, 0.5)


def test_cannot_remove_sole_agent():
    with pytest.raises(UsageError, match="cannot remove sole agent"):
        route_probabilities_without(scored_router([1.0]), CTX, cands(1), 0)


score_lists = st.lists(st.floats(-5, 5), min_size=2, max_size=6)


@given(score_lists, st.floats(0.05, 20), st.floats(0, 1))
def test_probabilities_respect_exploration_floor(scores, tau, eps):
    K = len(scores)
    p = route_probabilities(scored_router(scores, tau, eps), CTX, cands(K))
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(p >= eps / K - 1e-12)


@given(score_lists)
def test_high_temperature_approaches_uniform(scores):
    K = len(scores)
    p = route_probabilities(scored_router(scores, 1e4), CTX, cands(K))
    assert np.max(np.abs(p - 1 / K)) < 1e-3


@given(score_lists, st.floats(0.1, 5), st.floats(0, 1), st.data())
def test_removal_matches_deleted_list(scores, tau, eps, data):
    K = len(scores)
    i = data.draw(st.integers(0, K - 1))
    router = scored_router(scores, tau, eps)
    rest = [c for j, c in enumerate(cands(K)) if j != i]
    np.testing.assert_allclose(
        route_probabilities_without(router, CTX, cands(K), i),
        route_probabilities(router, CTX, rest), atol=1e-12,
    )


def test_select_point_mass(rng):
    assert all(select(np.array([0.0, 1.0, 0.0]), rng) == 1 for _ in range(100))


def test_select_uniform_frequencies(rng):
    draws = np.array([select(np.full(4, 0.25), rng) for _ in range(100_000)])
    se = np.sqrt(0.25 * 0.75 / len(draws))
    for k in range(4):
        assert abs(np.mean(draws == k) - 0.25) < 3 * se


def test_select_rejects_unnormalized(rng):
    with pytest.raises(ConfigError):
        select(np.array([0.5, 0.6]), rng)


def test_seeded_selection_is_reproducible():
    p = np.array([0.2, 0.3, 0.5])
    assert [select_with_seed(p, s) for s in range(20)] == [select_with_seed(p, s) for s in range(20)]


def test_tuple_identity_key():
    y = aggregate(Aggregator("tuple-identity"), CTX, [Proposal(0, 1), Proposal(1, 0)])
    assert y.key == (1, 0)
    assert str(y) == "(1,0)"


def test_select_max_score_unique_max():
    agg = Aggregator("select-max-score", scores=[[0.1, 0.9], [0.5, 0.2]])
    y = aggregate(agg, CTX, [Proposal(0, 1), Proposal(1, 0)])
    assert y.key == (0, 1)


def test_custom_aggregation_rule():
    register_aggregation_rule("sum-mod-2", lambda ctx, props: (sum(p.token for p in props) % 2,))
    y = aggregate(Aggregator("sum-mod-2"), CTX, [Proposal(0, 1), Proposal(1, 1)])
    assert y.key == (0,)
    with pytest.raises(ConfigError):
        register_aggregation_rule("tuple-identity", lambda c, p: ())


def test_unknown_rule_rejected():
    with pytest.raises(ConfigError):
        Aggregator("majority-vote")


def test_routed_output_key():
    assert routed_output([Proposal(0, 2), Proposal(1, 3)], 1) == DeployedOutput((1, 3))


def test_selected_indicator_allocation():
    np.testing.assert_array_equal(allocation(AllocationRule("selected-indicator"), 3, 1), [0, 1, 0])


def test_uniform_share_allocation():
    np.testing.assert_allclose(allocation(AllocationRule("uniform-share"), 4), 0.25)


def test_indicator_allocation_needs_selection():
    with pytest.raises(UsageError):
        allocation(AllocationRule("selected-indicator"), 3)


def test_indicator_allocation_picks_selected_reward():
    rewards = np.array([0.2, 0.7, 0.4])
    assert allocation(AllocationRule("selected-indicator"), 3, 2) @ rewards == 0.4


def make_obs(selected=1, probs=(0.25, 0.75)):
    ctx = Context(3, np.array([0.1, 1.0 / 3.0]))
    return log_observation(ctx, cands(2), probs, selected, 0.123456789, 2**40 + 7, turn=1)


def test_log_roundtrip_is_exact(tmp_path):
    obs = make_obs()
    write_log([obs, make_obs(0)], tmp_path / "log.jsonl")
    back = read_log(tmp_path / "log.jsonl")
    assert back[0].to_record() == obs.to_record()
    assert back[0].ctx.features.tolist() == obs.ctx.features.tolist()


def test_log_rejects_bad_selection():
    with pytest.raises(ConfigError):
        make_obs(selected=2)


def test_logged_propensities_are_copied():
    probs = np.array([0.4, 0.6])
    obs = make_obs(probs=probs)
    probs[:] = [1.0, 0.0]
    assert obs.propensities == (0.4, 0.6)


def test_log_rejects_unknown_schema_version():
    rec = make_obs().to_record()
    rec["schema_version"] = 99
    with pytest.raises(ConfigError):
        LoggedObservation.from_record(rec)


def test_log_exposes_only_the_selected_return():
    names = {f.name for f in dataclasses.fields(LoggedObservation)}
    assert names == {"ctx", "candidates", "selected", "propensities", "observed_return", "mech_seed", "turn"}
    obs = make_obs()
    with pytest.raises((AttributeError, TypeError)):
        obs.candidate_rewards = [0.1, 0.2]
    with pytest.raises(dataclasses.FrozenInstanceError):
        obs.observed_return = 1.0
    assert not hasattr(obs, "__dict__")
    assert math.isclose(obs.observed_return, 0.123456789)
