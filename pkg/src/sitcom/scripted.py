"""Non-learning BFS oracle agents used to verify the environment and the metrics.

Scripted agents read the true world state from the ``context`` argument of
``act`` rather than decoding their observation; they are references, not
policies a learner could represent.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from sitcom import env
from sitcom.agents import N_SYMBOLS, NULL_SYMBOL
from sitcom.modes import ModeConfig, ModeKind

# Symbol k (1..4) means "take movement action k - 1".
DIRECTION = "direction"
# The first delivered symbol names the goal (index + 1); later symbols are null.
GOAL_CODE = "goal_code"


@dataclasses.dataclass(frozen=True)
class Condition:
    visibility: env.Visibility = env.Visibility.NONE
    has_memory: bool = False
    mode: ModeKind = ModeKind.CHEAP_TALK

    def label(self) -> str:
        mem = "memory" if self.has_memory else "no_memory"
        return f"{self.mode.value}/{env.Visibility(self.visibility).value}/{mem}"


@dataclasses.dataclass(frozen=True)
class _ScriptedConfig:
    visibility: env.Visibility


class _Scripted:
    learning = False

    def begin_episode(self):
        pass

    def collect(self, reward):
        pass

    def add_immediate(self, reward):
        pass

    def update(self):
        return None


class ScriptedSpeaker(_Scripted):
    def __init__(self, protocol: str):
        self.protocol = protocol
        self.config = _ScriptedConfig(env.Visibility.NONE)
        self._spoken = False

    def begin_episode(self):
        self._spoken = False

    def _symbol(self, context) -> int:
        layout, state = context
        if self.protocol == GOAL_CODE:
            if self._spoken:
                return NULL_SYMBOL
            return layout.goal_candidates.index(state.goal_pos) + 1
        return int(env.next_move_towards(layout, state.agent_pos, state.goal_pos)) + 1

    def act(self, x, context, greedy=False) -> int:
        symbol = self._symbol(context)
        self._spoken = True
        return symbol

    def greedy_peek(self, x, context) -> int:
        return self._symbol(context)


def _decode_message(x: np.ndarray) -> int | None:
    block = np.asarray(x)[-N_SYMBOLS:]
    if not block.any():
        return None
    return int(np.argmax(block))


class ScriptedListener(_Scripted):
    def __init__(self, visibility: env.Visibility, situated: bool, protocol: str):
        self.config = _ScriptedConfig(env.Visibility(visibility))
        self.situated = situated
        self.protocol = protocol
        self.goal: env.Cell | None = None

    def begin_episode(self):
        self.goal = None

    def act(self, x, context, greedy=False) -> int:
        layout, state = context
        msg = _decode_message(x)
        if self.protocol == GOAL_CODE:
            if msg is not None and self.goal is None and msg != NULL_SYMBOL:
                self.goal = layout.goal_candidates[msg - 1]
            if self.goal is None:
                return int(env.Action.STAY)
            return int(env.next_move_towards(layout, state.agent_pos, self.goal))
        if msg is not None and msg != NULL_SYMBOL:
            return msg - 1
        if not self.situated:
            return int(env.Action.STAY)
        if (
            self.config.visibility is env.Visibility.PARTIAL
            and env.front_is_floor(layout, state)
            and not env.is_junction(layout, state.agent_pos)
        ):
            return int(state.heading)  # keep walking the corridor
        return int(env.Action.STAY)  # solicit


def scripted_pair(layout: env.MazeLayout, condition: Condition) -> tuple[ScriptedSpeaker, ScriptedListener, ModeConfig]:
    """BFS oracle speaker and listener for one experimental condition.

    With memory and at most four goal candidates the speaker names the goal
    once and the listener navigates by itself; otherwise the speaker answers
    with the next shortest-path move. The situated listener with partial
    visibility walks straight along corridors and asks only at junctions or
    when the way ahead is blocked.
    """
    mode = ModeKind(condition.mode)
    if mode not in (ModeKind.CHEAP_TALK, ModeKind.SITUATED):
        raise ValueError("scripted pairs cover cheap talk and situated modes")
    protocol = GOAL_CODE if condition.has_memory and len(layout.goal_candidates) < N_SYMBOLS else DIRECTION
    speaker = ScriptedSpeaker(protocol)
    listener = ScriptedListener(condition.visibility, mode is ModeKind.SITUATED, protocol)
    return speaker, listener, ModeConfig(kind=mode)


def all_conditions() -> list[Condition]:
    return [
        Condition(vis, mem, mode)
        for mode in (ModeKind.CHEAP_TALK, ModeKind.SITUATED)
        for vis in (env.Visibility.NONE, env.Visibility.PARTIAL)
        for mem in (False, True)
    ]
