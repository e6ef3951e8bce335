"""Communication regimes: who talks when, what it costs, and the penalty curriculum."""

from __future__ import annotations

import dataclasses
import enum
from collections import deque
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from sitcom import env
from sitcom.agents import NULL_SYMBOL, encode_listener_input, encode_speaker_input
from sitcom.metrics import success_rate_window

FIXED_PENALTIES = (0.01, 0.05, 0.1)
UPFRONT_TOKENS = (1, 2, 3)

# Paper-scale curriculum gates, in environment steps.
PAPER_MIN_STAGE_STEPS = (2_000_000, 5_000_000)
PAPER_CAP_STEPS = 15_000_000
THRESHOLDS = (0.92, 0.95, 0.97)
# Desk-scale gates (1/100 of paper scale).
DESK_MIN_STAGE_STEPS = 20_000
DESK_CAP_STEPS = 150_000
SUCCESS_WINDOW = 1000

_MP2 = (0.0, 0.01, 0.05, 0.1, 0.2, 0.3)


class ModeKind(str, enum.Enum):
    CHEAP_TALK = "cheap_talk"
    FIXED_PENALTY = "fixed_penalty"
    CURRICULUM = "curriculum"
    SITUATED = "situated"
    UPFRONT = "upfront"


PER_STEP_KINDS = (ModeKind.CHEAP_TALK, ModeKind.FIXED_PENALTY, ModeKind.CURRICULUM)


class PenaltySchedule(BaseModel):
    """Stage -> per-message penalty, plus the gates for moving between stages.

    ``preset`` ``mp1`` grows by 0.01 per stage without bound; ``mp2`` follows
    0, 0.01, 0.05, 0.1, 0.2, 0.3 and stops at stage 5. ``stages`` gives a
    custom finite table instead.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    preset: Literal["mp1", "mp2", "custom"] = "mp1"
    stages: Optional[tuple[float, ...]] = None
    min_stage_steps: int = Field(DESK_MIN_STAGE_STEPS, ge=0)
    threshold: float = Field(0.95, ge=0.0, le=1.0)
    cap_steps: int = Field(DESK_CAP_STEPS, ge=1)
    window: int = Field(SUCCESS_WINDOW, ge=1)

    @model_validator(mode="after")
    def _check_stages(self):
        if self.preset == "custom":
            if not self.stages:
                raise ValueError("custom schedule needs stages")
            if self.stages[0] != 0:
                raise ValueError("stage 0 penalty must be 0")
            if any(b < a for a, b in zip(self.stages, self.stages[1:])):
                raise ValueError("penalties must be non-decreasing")
        elif self.stages is not None:
            raise ValueError("stages only apply to the custom preset")
        return self

    @property
    def last_stage(self) -> int | None:
        if self.preset == "mp1":
            return None
        table = _MP2 if self.preset == "mp2" else self.stages
        return len(table) - 1

    def penalty(self, stage: int) -> float:
        if stage < 0:
            raise ValueError("negative stage")
        if self.preset == "mp1":
            return round(0.01 * stage, 10)
        table = _MP2 if self.preset == "mp2" else self.stages
        return float(table[min(stage, len(table) - 1)])


class ModeConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: ModeKind = ModeKind.CHEAP_TALK
    fixed_penalty_value: Optional[float] = None
    schedule: Optional[PenaltySchedule] = None
    upfront_tokens: Optional[int] = None

    @model_validator(mode="after")
    def _fields_match_kind(self):
        expected = {
            ModeKind.FIXED_PENALTY: "fixed_penalty_value",
            ModeKind.CURRICULUM: "schedule",
            ModeKind.UPFRONT: "upfront_tokens",
        }.get(self.kind)
        for name in ("fixed_penalty_value", "schedule", "upfront_tokens"):
            is_set = getattr(self, name) is not None
            if name == expected and not is_set:
                raise ValueError(f"{self.kind.value} mode needs {name}")
            if name != expected and is_set:
                raise ValueError(f"{name} is not used by {self.kind.value} mode")
        if self.fixed_penalty_value is not None and self.fixed_penalty_value < 0:
            raise ValueError("penalty must be non-negative")
        if self.upfront_tokens is not None and self.upfront_tokens not in UPFRONT_TOKENS:
            raise ValueError(f"upfront_tokens must be one of {UPFRONT_TOKENS}")
        return self

    @property
    def message_width(self) -> int:
        return self.upfront_tokens if self.kind is ModeKind.UPFRONT else 1

    def label(self) -> str:
        if self.kind is ModeKind.FIXED_PENALTY:
            return f"fixed_penalty_{self.fixed_penalty_value:g}"
        if self.kind is ModeKind.CURRICULUM:
            return f"curriculum_{self.schedule.preset}"
        if self.kind is ModeKind.UPFRONT:
            return f"upfront_{self.upfront_tokens}"
        return self.kind.value


@dataclasses.dataclass
class StageState:
    stage: int = 0
    steps_in_stage: int = 0
    window: deque = dataclasses.field(default_factory=lambda: deque(maxlen=SUCCESS_WINDOW))

    @classmethod
    def for_schedule(cls, schedule: PenaltySchedule | None) -> "StageState":
        maxlen = schedule.window if schedule is not None else SUCCESS_WINDOW
        return cls(window=deque(maxlen=maxlen))

    def note_episode(self, steps: int, success: bool):
        self.steps_in_stage += steps
        self.window.append(1.0 if success else 0.0)

    def success_rate(self) -> float:
        rate, _ = success_rate_window(self.window, self.window.maxlen)
        return rate

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "steps_in_stage": self.steps_in_stage,
            "window": list(self.window),
            "maxlen": self.window.maxlen,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageState":
        return cls(d["stage"], d["steps_in_stage"], deque(d["window"], maxlen=d["maxlen"]))


def advance_curriculum(schedule: PenaltySchedule, state: StageState) -> StageState:
    """Next stage once the minimum dwell and success threshold are met, or the cap hits.

    Returns ``state`` itself when nothing changes, otherwise a fresh state with
    counters and the success window cleared. A finite schedule clamps the stage
    at its last entry; the counters still reset there.
    """
    ready = state.steps_in_stage >= schedule.min_stage_steps and state.success_rate() >= schedule.threshold
    if not (ready or state.steps_in_stage >= schedule.cap_steps):
        return state
    last = schedule.last_stage
    stage = state.stage + 1 if last is None else min(state.stage + 1, last)
    return StageState(stage=stage, window=deque(maxlen=state.window.maxlen))


def message_penalty(mode: ModeConfig, stage_state: StageState | None, symbol: int) -> float:
    if mode.kind is ModeKind.FIXED_PENALTY:
        value = mode.fixed_penalty_value
    elif mode.kind is ModeKind.CURRICULUM:
        value = mode.schedule.penalty(stage_state.stage)
    else:
        raise ValueError(f"{mode.kind.value} mode has no message penalty")
    return 0.0 if symbol == NULL_SYMBOL else value


def current_penalty(mode: ModeConfig, stage_state: StageState | None) -> float:
    if mode.kind is ModeKind.FIXED_PENALTY:
        return mode.fixed_penalty_value
    if mode.kind is ModeKind.CURRICULUM:
        return mode.schedule.penalty(stage_state.stage)
    return 0.0


@dataclasses.dataclass(frozen=True)
class StepOutcome:
    cell: env.Cell  # listener position when the step began
    heading: env.Heading
    delivered: Optional[tuple[int, ...]]  # None when nothing reached the listener
    listener_action: env.Action
    env_reward: float
    speaker_reward: float
    penalty: float
    solicited: bool  # the delivery answered a request made on the previous step
    requested: bool  # the listener asked for a message (situated stay)
    speaker_acted: bool


def generate_upfront(speaker, layout: env.MazeLayout, state: env.EnvState, k: int, greedy: bool = False) -> tuple[int, ...]:
    """k successive symbols chosen from the reset-time speaker view."""
    if k not in UPFRONT_TOKENS:
        raise ValueError(f"k must be one of {UPFRONT_TOKENS}")
    if state.step_count != 0:
        raise ValueError("upfront messages are generated at reset")
    x = encode_speaker_input(env.speaker_view(layout, state))
    return tuple(speaker.act(x, (layout, state), greedy=greedy) for _ in range(k))


def mediate_step(
    mode: ModeConfig,
    stage_state: StageState | None,
    speaker,
    listener,
    layout: env.MazeLayout,
    state: env.EnvState,
    pending_solicit: bool,
    upfront_message: Sequence[int] | None = None,
    greedy: bool = False,
) -> tuple[StepOutcome, env.EnvState, bool]:
    """Run one environment step under ``mode``.

    Exploration noise comes from each agent's own stream. ``upfront_message``
    carries the episode-level tokens in upfront mode.
    """
    if state.done:
        raise env.EpisodeFinished("episode already finished")
    context = (layout, state)
    kind = mode.kind
    delivered = None
    penalty = 0.0
    speaker_acted = False
    if kind in PER_STEP_KINDS or (kind is ModeKind.SITUATED and pending_solicit):
        sx = encode_speaker_input(env.speaker_view(layout, state))
        symbol = speaker.act(sx, context, greedy=greedy)
        speaker_acted = True
        delivered = (symbol,)
        if kind in (ModeKind.FIXED_PENALTY, ModeKind.CURRICULUM):
            penalty = message_penalty(mode, stage_state, symbol)
            speaker.add_immediate(-penalty)
    elif kind is ModeKind.UPFRONT:
        if upfront_message is None:
            raise ValueError("upfront mode needs the episode message")
        delivered = tuple(upfront_message)

    view = env.listener_view(layout, state, listener.config.visibility)
    msg = None if delivered is None else (delivered[0] if len(delivered) == 1 else delivered)
    lx = encode_listener_input(view, msg, mode.message_width)
    action = env.Action(listener.act(lx, context, greedy=greedy))
    new_state, reward, _ = env.apply_action(layout, state, action)

    listener.collect(reward)
    speaker.collect(reward)
    situated = kind is ModeKind.SITUATED
    requested = situated and action is env.Action.STAY
    outcome = StepOutcome(
        cell=state.agent_pos,
        heading=state.heading,
        delivered=delivered,
        listener_action=action,
        env_reward=reward,
        speaker_reward=reward - penalty,
        penalty=penalty,
        solicited=situated and delivered is not None,
        requested=requested,
        speaker_acted=speaker_acted,
    )
    return outcome, new_state, requested


def next_listener_input(
    mode: ModeConfig,
    speaker,
    listener,
    layout: env.MazeLayout,
    state: env.EnvState,
    pending_solicit: bool,
    upfront_message: Sequence[int] | None = None,
) -> np.ndarray:
    """Listener observation at ``state`` with the speaker answering greedily, used to bootstrap a timeout."""
    context = (layout, state)
    msg = None
    if mode.kind in PER_STEP_KINDS or (mode.kind is ModeKind.SITUATED and pending_solicit):
        msg = speaker.greedy_peek(encode_speaker_input(env.speaker_view(layout, state)), context)
    elif mode.kind is ModeKind.UPFRONT:
        msg = tuple(upfront_message)
        if len(msg) == 1:
            msg = msg[0]
    view = env.listener_view(layout, state, listener.config.visibility)
    return encode_listener_input(view, msg, mode.message_width)


def count_nonzero_messages(steps: Sequence[StepOutcome], mode: ModeConfig | None = None, upfront_message=None) -> int:
    """Nonzero symbols the speaker delivered over an episode.

    Upfront tokens are counted once per episode, not once per step.
    """
    if mode is not None and mode.kind is ModeKind.UPFRONT:
        tokens = upfront_message if upfront_message is not None else (steps[0].delivered if steps else ())
        return sum(1 for s in tokens if s != NULL_SYMBOL)
    return sum(1 for s in steps if s.delivered is not None and s.delivered[0] != NULL_SYMBOL)
