"""Speaker and listener Q-agents trained by episodic fitted Q(lambda)."""

from __future__ import annotations

import dataclasses
import enum
from typing import Sequence

import numpy as np

from sitcom import nn
from sitcom.env import GRID_SIZE, Visibility

N_SYMBOLS = 5
NULL_SYMBOL = 0

EPSILON = 0.01
GAMMA = 0.99
LAMBDA = 0.9


class Role(str, enum.Enum):
    SPEAKER = "speaker"
    LISTENER = "listener"


@dataclasses.dataclass(frozen=True)
class AgentConfig:
    role: Role
    visibility: Visibility = Visibility.NONE
    has_memory: bool = False
    rep_size: int = 16
    hidden_size: int = 32
    learning_rate: float = 1e-5
    epsilon: float = EPSILON
    gamma: float = GAMMA
    lam: float = LAMBDA
    message_width: int = 1  # tokens per listener input (upfront messages use k)
    updates_per_episode: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.epsilon <= 1 and 0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("epsilon, gamma and lambda must lie in [0, 1]")

    def network_spec(self) -> nn.NetworkSpec:
        if Role(self.role) is Role.SPEAKER:
            return nn.NetworkSpec.for_map(self.rep_size, self.hidden_size, self.has_memory, size=GRID_SIZE)
        return nn.NetworkSpec.for_vector(
            listener_input_size(self.visibility, self.message_width),
            self.rep_size,
            self.hidden_size,
            self.has_memory,
        )


def listener_input_size(visibility: Visibility | str, message_width: int = 1) -> int:
    view = 9 if Visibility(visibility) is Visibility.PARTIAL else 0
    return view + N_SYMBOLS * message_width


def encode_message(msg: int | Sequence[int] | None, width: int = 1) -> np.ndarray:
    """One-hot per token; an undelivered message is all zeros."""
    out = np.zeros(N_SYMBOLS * width)
    if msg is None:
        return out
    tokens = [msg] if isinstance(msg, (int, np.integer)) else list(msg)
    if len(tokens) != width:
        raise ValueError(f"expected {width} message tokens, got {len(tokens)}")
    for i, sym in enumerate(tokens):
        if not 0 <= sym < N_SYMBOLS:
            raise ValueError(f"symbol {sym} outside [0, {N_SYMBOLS})")
        out[i * N_SYMBOLS + sym] = 1.0
    return out


def encode_listener_input(view, msg: int | Sequence[int] | None, width: int = 1) -> np.ndarray:
    pixels = np.asarray(view, dtype=np.float64).reshape(-1)
    return np.concatenate([pixels, encode_message(msg, width)])


def encode_speaker_input(view: np.ndarray) -> np.ndarray:
    return np.asarray(view, dtype=np.float64)


def select_action(qvalues: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index."""
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(len(qvalues)))
    return int(np.argmax(qvalues))


@dataclasses.dataclass
class Trajectory:
    """One agent's decisions in an episode.

    ``rewards[t]`` is everything the agent collected between decision ``t`` and
    decision ``t + 1``, discounted back to decision ``t``; ``discounts[t]`` is
    the matching discount to the next decision. Steady one-step agents have
    ``discounts[t] == gamma``.
    """

    inputs: list = dataclasses.field(default_factory=list)
    h: list = dataclasses.field(default_factory=list)
    c: list = dataclasses.field(default_factory=list)
    actions: list = dataclasses.field(default_factory=list)
    rewards: list = dataclasses.field(default_factory=list)
    discounts: list = dataclasses.field(default_factory=list)
    qvalues: list = dataclasses.field(default_factory=list)
    terminal: bool = False
    final_q: np.ndarray | None = None
    complete: bool = False

    def __len__(self):
        return len(self.actions)

    def append(self, x, mem, action, q):
        self.inputs.append(x)
        if mem is not None:
            self.h.append(mem.h)
            self.c.append(mem.c)
        self.actions.append(action)
        self.rewards.append(0.0)
        self.discounts.append(1.0)
        self.qvalues.append(q)

    def collect(self, reward: float, gamma: float):
        """Credit an environment reward to the latest decision and age it one step."""
        if not self.actions:
            return
        self.rewards[-1] += self.discounts[-1] * reward
        self.discounts[-1] *= gamma

    def finish(self, terminal: bool, final_q: np.ndarray | None = None):
        if not terminal and final_q is None and self.actions:
            raise ValueError("a truncated trajectory needs bootstrap q-values")
        self.terminal = terminal
        self.final_q = None if terminal else final_q
        self.complete = True

    def batch(self) -> nn.Batch:
        h = np.array(self.h) if self.h else None
        c = np.array(self.c) if self.c else None
        return nn.Batch(np.array(self.inputs), np.array(self.actions), np.zeros(len(self)), h, c)


def lambda_targets(traj: Trajectory, gamma: float, lam: float) -> np.ndarray:
    """Forward-view Q(lambda) targets over a finished trajectory.

    n-step returns bootstrap on ``max_a Q`` of the state ``n`` decisions ahead;
    the last return bootstraps on ``traj.final_q`` unless the episode hit a
    terminal state. The lambda weights are renormalised over the finite horizon
    by handing the geometric tail to the longest return, which gives the
    recursion ``G_t = r_t + d_t * ((1 - lam) * max Q_{t+1} + lam * G_{t+1})``.
    ``gamma`` is used for any decision without a recorded discount.
    """
    if not traj.complete:
        raise ValueError("trajectory is not complete")
    T = len(traj)
    targets = np.zeros(T)
    if T == 0:
        return targets
    discounts = traj.discounts if traj.discounts else [gamma] * T
    g = 0.0 if traj.terminal else float(np.max(traj.final_q))
    for t in range(T - 1, -1, -1):
        if t == T - 1:
            g = traj.rewards[t] + discounts[t] * g
        else:
            boot = float(np.max(traj.qvalues[t + 1]))
            g = traj.rewards[t] + discounts[t] * ((1.0 - lam) * boot + lam * g)
        targets[t] = g
    return targets


class Agent:
    """A learning speaker or listener: network, optimiser state, episode buffers."""

    def __init__(self, config: AgentConfig, rng: np.random.Generator, init_rng: np.random.Generator | None = None):
        self.config = config
        self.spec = config.network_spec()
        self.params = nn.init_params(self.spec, init_rng if init_rng is not None else rng)
        self.rng = rng
        self.memory = nn.zero_memory(self.spec)
        self.trajectory = Trajectory()
        self.learning = True

    @property
    def role(self) -> Role:
        return Role(self.config.role)

    def begin_episode(self):
        self.memory = nn.zero_memory(self.spec)
        self.trajectory = Trajectory()

    def qvalues(self, x: np.ndarray) -> np.ndarray:
        """Q-values for ``x`` without advancing memory."""
        q, _ = nn.forward(self.spec, self.params, x, self.memory)
        return q

    def act(self, x: np.ndarray, context=None, greedy: bool = False) -> int:
        q, new_mem = nn.forward(self.spec, self.params, x, self.memory)
        action = select_action(q, 0.0 if greedy else self.config.epsilon, self.rng)
        self.trajectory.append(x, self.memory, action, q)
        self.memory = new_mem
        return action

    def greedy_peek(self, x: np.ndarray, context=None) -> int:
        return int(np.argmax(self.qvalues(x)))

    def collect(self, reward: float):
        self.trajectory.collect(reward, self.config.gamma)

    def add_immediate(self, reward: float):
        """Reward charged at the latest decision itself (message penalties)."""
        if self.trajectory.actions:
            self.trajectory.rewards[-1] += reward

    def update(self) -> float | None:
        traj = self.trajectory
        if not self.learning or len(traj) == 0:
            return None
        return fitted_q_update(self, traj, self.config.updates_per_episode)


def fitted_q_update(agent: Agent, traj: Trajectory, steps: int = 1) -> float:
    """Regress Q(s, a) on the episode's lambda-return targets; returns the first loss.

    Targets are computed once from the q-values recorded while acting, then
    ``steps`` Adam steps are taken on the whole episode batch.
    """
    cfg = agent.config
    targets = lambda_targets(traj, cfg.gamma, cfg.lam)
    batch = traj.batch()._replace(targets=targets)
    first = None
    for _ in range(steps):
        loss, grads = nn.loss_and_grads(agent.spec, agent.params, batch)
        agent.params = nn.adam_step(agent.params, grads, cfg.learning_rate)
        first = loss if first is None else first
    return first


def make_agent_pair(
    speaker_cfg: AgentConfig,
    listener_cfg: AgentConfig,
    streams,
) -> tuple[Agent, Agent]:
    speaker = Agent(speaker_cfg, streams["speaker_explore"], streams["speaker_init"])
    listener = Agent(listener_cfg, streams["listener_explore"], streams["listener_init"])
    return speaker, listener

