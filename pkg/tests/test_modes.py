from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from pydantic import ValidationError

from sitcom import env
from sitcom.agents import Trajectory
from sitcom.modes import (
    ModeConfig,
    PenaltySchedule,
    StageState,
    advance_curriculum,
    count_nonzero_messages,
    generate_upfront,
    mediate_step,
    message_penalty,
)


class FixedSpeaker:
    """Emits a fixed symbol sequence (cycled) and records what it was charged."""

    def __init__(self, symbols=(2,)):
        self.symbols = list(symbols)
        self.i = 0
        self.immediate = []
        self.collected = []
        self.trajectory = Trajectory()

    def act(self, x, context=None, greedy=False):
        s = self.symbols[self.i % len(self.symbols)]
        self.i += 1
        return s

    def greedy_peek(self, x, context=None):
        return self.symbols[self.i % len(self.symbols)]

    def add_immediate(self, r):
        self.immediate.append(r)

    def collect(self, r):
        self.collected.append(r)


class FixedListener:
    def __init__(self, actions, visibility=env.Visibility.PARTIAL):
        self.actions = list(actions)
        self.inputs = []
        self.config = type("C", (), {"visibility": visibility})()

    def act(self, x, context=None, greedy=False):
        self.inputs.append(np.array(x))
        return self.actions.pop(0)

    def collect(self, r):
        pass


def tmaze_state():
    lay = env.build_layout("tmaze")
    return lay, env.EnvState(lay.start, env.Heading.UP, lay.goal_candidates[0])


def state_with(stage=0, steps=0, successes=0, episodes=1000, window=1000):
    w = deque([1.0] * successes + [0.0] * (episodes - successes), maxlen=window)
    return StageState(stage, steps, w)


# curriculum ------------------------------------------------------------------


def test_mp1_grows_without_bound_and_mp2_table():
    mp1 = PenaltySchedule(preset="mp1")
    assert [mp1.penalty(s) for s in range(6)] == [0, 0.01, 0.02, 0.03, 0.04, 0.05]
    assert mp1.penalty(40) == pytest.approx(0.4)
    assert mp1.last_stage is None
    mp2 = PenaltySchedule(preset="mp2")
    assert [mp2.penalty(s) for s in range(6)] == [0, 0.01, 0.05, 0.1, 0.2, 0.3]
    assert mp2.last_stage == 5


def test_schedule_validation():
    with pytest.raises(ValidationError):
        PenaltySchedule(preset="custom", stages=(0.1, 0.2))
    with pytest.raises(ValidationError):
        PenaltySchedule(preset="custom", stages=(0.0, 0.2, 0.1))
    with pytest.raises(ValidationError):
        PenaltySchedule(preset="mp1", stages=(0.0,))
    assert PenaltySchedule(preset="custom", stages=(0.0, 0.5)).penalty(9) == 0.5


@pytest.mark.parametrize("min_steps", [20_000, 50_000])
@pytest.mark.parametrize("threshold", [0.92, 0.95, 0.97])
def test_advance_boundary_grid(min_steps, threshold):
    sched = PenaltySchedule(preset="mp1", min_stage_steps=min_steps, threshold=threshold, cap_steps=150_000)
    need = int(round(threshold * 1000))
    for steps in (0, min_steps - 1, min_steps, 150_000 - 1, 150_000, 150_001):
        for succ in (0, need - 1, need, 1000):
            st_ = state_with(stage=2, steps=steps, successes=succ)
            out = advance_curriculum(sched, st_)
            expect = (steps >= min_steps and succ >= need) or steps >= 150_000
            assert (out.stage == 3) == expect, (steps, succ)
            if expect:
                assert out.steps_in_stage == 0 and len(out.window) == 0
            else:
                assert out is st_


def test_partial_window_rate_uses_episodes_seen():
    sched = PenaltySchedule(min_stage_steps=10, threshold=0.95)
    st_ = state_with(steps=10, successes=19, episodes=20)
    assert advance_curriculum(sched, st_).stage == 1
    st_ = state_with(steps=10, successes=18, episodes=20)
    assert advance_curriculum(sched, st_).stage == 0


def test_empty_window_never_meets_threshold():
    sched = PenaltySchedule(min_stage_steps=0, threshold=0.5)
    assert advance_curriculum(sched, StageState(0, 5)).stage == 0


def test_final_stage_clamps_and_resets_counters():
    sched = PenaltySchedule(preset="mp2", min_stage_steps=0, threshold=0.0)
    st_ = state_with(stage=5, steps=10, successes=1000)
    out = advance_curriculum(sched, st_)
    assert out.stage == 5 and out.steps_in_stage == 0 and not out.window


def test_paper_scale_examples():
    sched = PenaltySchedule(min_stage_steps=2_000_000, threshold=0.95, cap_steps=15_000_000)
    assert advance_curriculum(sched, state_with(steps=2_000_000, successes=960)).stage == 1
    assert advance_curriculum(sched, state_with(steps=1_999_999, successes=990)).stage == 0
    assert advance_curriculum(sched, state_with(steps=15_000_000, successes=100)).stage == 1


@given(steps=st.lists(st.integers(1, 100), max_size=300), succ=st.lists(st.booleans(), max_size=300))
def test_stage_never_decreases(steps, succ):
    sched = PenaltySchedule(min_stage_steps=200, threshold=0.6, cap_steps=2000, window=20)
    state = StageState.for_schedule(sched)
    last = 0
    for n, ok in zip(steps, succ):
        state.note_episode(n, ok)
        state = advance_curriculum(sched, state)
        assert state.stage >= last
        last = state.stage


def test_stage_state_round_trip():
    st_ = state_with(stage=3, steps=123, successes=5, episodes=9, window=50)
    again = StageState.from_dict(st_.to_dict())
    assert again.to_dict() == st_.to_dict() and again.window.maxlen == 50


# mode config and penalties -------------------------------------------------------


def test_mode_config_requires_matching_fields():
    with pytest.raises(ValidationError):
        ModeConfig(kind="fixed_penalty")
    with pytest.raises(ValidationError):
        ModeConfig(kind="cheap_talk", fixed_penalty_value=0.1)
    with pytest.raises(ValidationError):
        ModeConfig(kind="upfront", upfront_tokens=4)
    assert ModeConfig(kind="upfront", upfront_tokens=2).message_width == 2
    assert ModeConfig(kind="fixed_penalty", fixed_penalty_value=0.05).label() == "fixed_penalty_0.05"


def test_message_penalty():
    fixed = ModeConfig(kind="fixed_penalty", fixed_penalty_value=0.05)
    assert message_penalty(fixed, None, 2) == 0.05
    assert message_penalty(fixed, None, 0) == 0.0
    cur = ModeConfig(kind="curriculum", schedule=PenaltySchedule(preset="mp2"))
    assert message_penalty(cur, StageState(stage=3), 1) == 0.1
    with pytest.raises(ValueError):
        message_penalty(ModeConfig(), None, 1)


# mediation -----------------------------------------------------------------------


@pytest.mark.parametrize("symbol,expected_penalty", [(2, 0.05), (0, 0.0)])
def test_fixed_penalty_charges_speaker(symbol, expected_penalty):
    lay, s = tmaze_state()
    mode = ModeConfig(kind="fixed_penalty", fixed_penalty_value=0.05)
    spk, lis = FixedSpeaker([symbol]), FixedListener([env.Action.MOVE_UP])
    out, _, pending = mediate_step(mode, None, spk, lis, lay, s, False)
    assert out.penalty == expected_penalty
    assert out.speaker_reward == out.env_reward - expected_penalty
    assert spk.immediate == [-expected_penalty]
    assert not pending


def test_cheap_talk_delivers_every_step():
    lay, s = tmaze_state()
    spk, lis = FixedSpeaker([3]), FixedListener([env.Action.MOVE_UP, env.Action.STAY])
    out, s, _ = mediate_step(ModeConfig(), None, spk, lis, lay, s, False)
    assert out.delivered == (3,) and out.penalty == 0
    assert list(lis.inputs[0][-5:]) == [0, 0, 0, 1, 0]
    out, s, pending = mediate_step(ModeConfig(), None, spk, lis, lay, s, False)
    assert out.delivered == (3,) and not out.requested and not pending


def test_situated_message_arrives_after_stay():
    lay, s = tmaze_state()
    mode = ModeConfig(kind="situated")
    spk = FixedSpeaker([4])
    lis = FixedListener([env.Action.STAY, env.Action.MOVE_UP, env.Action.MOVE_UP])
    out, s, pending = mediate_step(mode, None, spk, lis, lay, s, False)
    assert out.delivered is None and out.requested and pending
    assert not lis.inputs[0][-5:].any()
    out, s, pending = mediate_step(mode, None, spk, lis, lay, s, pending)
    assert out.delivered == (4,) and out.solicited and not pending
    assert list(lis.inputs[1][-5:]) == [0, 0, 0, 0, 1]
    out, s, pending = mediate_step(mode, None, spk, lis, lay, s, pending)
    assert out.delivered is None and spk.i == 1


def test_upfront_message_rebroadcast():
    lay, s = tmaze_state()
    mode = ModeConfig(kind="upfront", upfront_tokens=2)
    spk = FixedSpeaker([1, 3])
    msg = generate_upfront(spk, lay, s, 2)
    assert msg == (1, 3)
    lis = FixedListener([env.Action.MOVE_UP, env.Action.MOVE_UP])
    for _ in range(2):
        out, s, _ = mediate_step(mode, None, spk, lis, lay, s, False, msg)
        assert out.delivered == (1, 3)
    assert all(x.shape == (19,) for x in lis.inputs)
    assert spk.i == 2
    with pytest.raises(ValueError):
        generate_upfront(spk, lay, s, 2)
    with pytest.raises(ValueError):
        generate_upfront(spk, lay, tmaze_state()[1], 4)


def test_step_on_finished_episode_rejected():
    lay, s = tmaze_state()
    done = env.EnvState(s.agent_pos, s.heading, s.goal_pos, 100, True)
    with pytest.raises(env.EpisodeFinished):
        mediate_step(ModeConfig(), None, FixedSpeaker(), FixedListener([0]), lay, done, False)


def test_count_nonzero_messages():
    lay, s = tmaze_state()
    steps = []
    spk = FixedSpeaker([1, 0, 2])
    lis = FixedListener([env.Action.STAY] * 3)
    for _ in range(3):
        out, s, _ = mediate_step(ModeConfig(), None, spk, lis, lay, s, False)
        steps.append(out)
    assert count_nonzero_messages(steps) == 2
    up = ModeConfig(kind="upfront", upfront_tokens=3)
    assert count_nonzero_messages(steps, up, (1, 0, 4)) == 2


@given(actions=st.lists(st.sampled_from(list(env.Action)), min_size=1, max_size=40))
def test_situated_deliveries_follow_stays(actions):
    lay, s = tmaze_state()
    mode = ModeConfig(kind="situated")
    spk = FixedSpeaker([1])
    lis = FixedListener(list(actions))
    pending = False
    outs = []
    while lis.actions and not s.done:
        out, s, pending = mediate_step(mode, None, spk, lis, lay, s, pending)
        outs.append(out)
    stays_followed = sum(1 for a, b in zip(outs, outs[1:]) if a.requested)
    assert sum(1 for o in outs if o.delivered is not None) == stays_followed
    for a, b in zip(outs, outs[1:]):
        assert (b.delivered is not None) == a.requested
