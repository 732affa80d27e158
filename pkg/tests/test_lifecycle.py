import numpy as np
import pytest

from oclreid.lifecycle import (
    CONF_UNAVAILABLE,
    FOLLOWING,
    ID_SWITCH_GUARD,
    LOST,
    REID_SUCCESS,
    TRAIN_SKIPPED,
    ContractViolation,
    LifecycleState,
    Thresholds,
    event_record,
    label_frame,
    step,
)

from .conftest import make_obs


def frame(rng, scores):
    """Observations for the tracks in ``scores`` plus a score function reading it."""
    obs = [make_obs(rng, track_id=tid) for tid in sorted(scores)]
    return obs, lambda o: scores[o.track_id]


def run_trace(rng, state, trace):
    out = []
    for scores in trace:
        obs, fn = frame(rng, scores)
        state, decision, request = step(state, obs, fn)
        out.append((state, decision, request))
    return out


def test_following_above_switch_trains(rng):
    obs, fn = frame(rng, {3: 0.40, 5: 0.1})
    state, decision, request = step(LifecycleState.following(3), obs, fn)
    assert state.mode == FOLLOWING and state.target_id == 3
    assert decision.target_position == obs[0].bbox
    assert decision.trained_this_frame
    assert request.target.label == 1 and request.target.track_id == 3
    assert [o.track_id for o in request.negatives] == [5]
    assert all(o.label == 0 for o in request.negatives)


@pytest.mark.parametrize("s", [0.30, 0.35])
def test_switch_guard(rng, s):
    obs, fn = frame(rng, {3: s, 5: 0.9})
    state, decision, request = step(LifecycleState.following(3), obs, fn)
    assert state.mode == LOST and state.target_id is None
    assert event_record(0, state, decision)["target_id"] == -1
    assert decision.target_position is None and not decision.trained_this_frame
    assert ID_SWITCH_GUARD in decision.events
    assert request is None


def test_target_absent_goes_lost_without_guard(rng):
    obs, fn = frame(rng, {5: 0.9})
    state, decision, request = step(LifecycleState.following(3), obs, fn)
    assert state.mode == LOST and decision.events == () and request is None


def test_reid_after_exactly_five_frames(rng):
    results = run_trace(rng, LifecycleState(), [{7: 0.75, 2: 0.1}] * 5)
    for k, (state, decision, request) in enumerate(results[:4]):
        assert state.mode == LOST
        assert state.reid_streaks[7] == k + 1
        assert request is None
    state, decision, request = results[4]
    assert state.mode == FOLLOWING and state.target_id == 7
    assert REID_SUCCESS in decision.events
    assert decision.target_position is not None
    assert request is None


def test_streak_reset(rng):
    trace = [{7: 0.75}] * 4 + [{7: 0.60}] + [{7: 0.75}] * 5
    results = run_trace(rng, LifecycleState(), trace)
    assert all(s.mode == LOST for s, _, _ in results[:9])
    assert results[4][0].reid_streaks.get(7, 0) == 0
    assert results[9][0].mode == FOLLOWING
    assert sum(REID_SUCCESS in d.events for _, d, _ in results) == 1


def test_streak_reset_when_track_absent(rng):
    trace = [{7: 0.75}] * 4 + [{8: 0.1}] + [{7: 0.75}] * 4
    results = run_trace(rng, LifecycleState(), trace)
    assert all(s.mode == LOST for s, _, _ in results)


def test_threshold_is_strict(rng):
    results = run_trace(rng, LifecycleState(), [{7: 0.7}] * 10)
    assert all(s.mode == LOST and not s.reid_streaks for s, _, _ in results)


def test_tie_break_lowest_track(rng):
    results = run_trace(rng, LifecycleState(), [{9: 0.9, 4: 0.8}] * 5)
    assert results[-1][0].target_id == 4


def test_no_training_while_lost(rng):
    trace = [{1: 0.99, 2: 0.5}] * 4 + [{1: 0.2}] * 3
    results = run_trace(rng, LifecycleState(), trace)
    assert all(r is None for _, _, r in results)


def test_conf_unavailable_while_lost(rng):
    obs, fn = frame(rng, {1: None, 2: float("nan")})
    state, decision, _ = step(LifecycleState(reid_streaks={1: 3}), obs, fn)
    assert decision.events.count(CONF_UNAVAILABLE) == 2
    assert state.reid_streaks == {}


def test_conf_unavailable_while_following_is_guard(rng):
    obs, fn = frame(rng, {1: None})
    state, decision, _ = step(LifecycleState.following(1), obs, fn)
    assert state.mode == LOST
    assert decision.events == (CONF_UNAVAILABLE, ID_SWITCH_GUARD)


def test_bootstrap_trusts_target(rng):
    state = LifecycleState.following(1, bootstrap=2)
    results = run_trace(rng, state, [{1: 0.0, 2: 0.0}] * 3)
    assert [r is not None for _, _, r in results] == [True, True, False]
    assert results[-1][0].mode == LOST


def test_training_disallowed(rng):
    obs, fn = frame(rng, {1: 0.9})
    state, decision, request = step(LifecycleState.following(1), obs, fn, allow_training=False)
    assert state.mode == FOLLOWING and request is None
    assert decision.events == (TRAIN_SKIPPED,)


def test_streak_capped_and_monotone(rng):
    th = Thresholds(reid_frames=3)
    prev = {}
    state = LifecycleState(thresholds=th)
    for scores in [{5: 0.8}, {5: 0.8}, {5: 0.3}, {5: 0.8}]:
        obs, fn = frame(rng, scores)
        state, _, _ = step(state, obs, fn)
        n = state.reid_streaks.get(5, 0)
        assert n in (0, prev.get(5, 0) + 1) and n <= 3
        prev = dict(state.reid_streaks)


def test_deterministic(rng):
    trace = [{1: 0.8, 2: 0.9}, {1: 0.3}, {1: 0.75, 3: 0.72}] + [{1: 0.8, 3: 0.8}] * 5
    a = run_trace(np.random.default_rng(0), LifecycleState.following(1), trace)
    b = run_trace(np.random.default_rng(0), LifecycleState.following(1), trace)
    assert [(s, d.events) for s, d, _ in a] == [(s, d.events) for s, d, _ in b]


def test_label_frame(rng):
    obs = [make_obs(rng, track_id=3), make_obs(rng, track_id=5)]
    labels = label_frame(LifecycleState.following(3), obs)
    assert {o.track_id: y for o, y in labels} == {3: 1, 5: 0}
    single = label_frame(LifecycleState.following(3), obs[:1])
    assert [y for _, y in single] == [1]
    with pytest.raises(ContractViolation):
        label_frame(LifecycleState.following(3), obs[1:])
    with pytest.raises(ContractViolation):
        label_frame(LifecycleState(), obs)


def test_state_invariant():
    with pytest.raises(ValueError):
        LifecycleState(mode=FOLLOWING, target_id=None)
    with pytest.raises(ValueError):
        LifecycleState(mode=LOST, target_id=3)
