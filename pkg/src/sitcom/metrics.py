"""Task success, path optimality and communication sparsity accumulators."""

from __future__ import annotations

import dataclasses
import math
from collections import deque
from typing import Iterable, Sequence

import numpy as np


@dataclasses.dataclass(frozen=True)
class RunningMetrics:
    """Order-free running sums over finished episodes.

    ``sum_opt_ratio`` accumulates ``R_i * opt_i / s_i`` where ``opt_i`` is the
    episode's optimal step count (the layout ``s_opt`` unless given), so the
    optimality metric is ``sum_opt_ratio / n`` and reaches 1 only for agents
    that are always optimal.
    """

    s_opt: int
    n: int = 0
    sum_R: float = 0.0
    sum_opt_ratio: float = 0.0
    sum_neglog_m: float = 0.0

    @property
    def M_t(self) -> float:
        return self.sum_R / self.n if self.n else 0.0

    @property
    def M_o(self) -> float:
        return self.sum_opt_ratio / self.n if self.n else 0.0

    @property
    def M_s(self) -> float:
        return self.sum_neglog_m / self.n if self.n else 0.0

    def merge(self, other: "RunningMetrics") -> "RunningMetrics":
        if other.s_opt != self.s_opt:
            raise ValueError("cannot merge metrics with different s_opt")
        return RunningMetrics(
            self.s_opt,
            self.n + other.n,
            self.sum_R + other.sum_R,
            self.sum_opt_ratio + other.sum_opt_ratio,
            self.sum_neglog_m + other.sum_neglog_m,
        )

    def snapshot(self) -> dict:
        return {"M_t": self.M_t, "M_o": self.M_o, "M_s": self.M_s}


def sparsity_term(nonzero_msgs: int) -> float:
    """-ln(m) with m clamped below at 1, so silent episodes contribute 0."""
    return -math.log(max(nonzero_msgs, 1))


def record_episode(
    metrics: RunningMetrics, R: float, steps: int, nonzero_msgs: int, opt_steps: int | None = None
) -> RunningMetrics:
    if steps < 1:
        raise ValueError("an episode takes at least one step")
    if nonzero_msgs < 0:
        raise ValueError("negative message count")
    opt = metrics.s_opt if opt_steps is None else opt_steps
    return RunningMetrics(
        metrics.s_opt,
        metrics.n + 1,
        metrics.sum_R + R,
        metrics.sum_opt_ratio + R * opt / steps,
        metrics.sum_neglog_m + sparsity_term(nonzero_msgs),
    )


def success_rate_window(history: Sequence[float], window: int = 1000) -> tuple[float, bool]:
    """Mean success over the last ``window`` episodes, and whether history was empty."""
    if window < 1:
        raise ValueError("window must be at least 1")
    n = len(history)
    if n == 0:
        return 0.0, True
    k = min(window, n)
    return float(sum(list(history)[n - k :])) / k, False


def standard_error(values: Iterable[float]) -> float:
    """Sample standard deviation over sqrt(count); NaN for fewer than two values."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size < 2:
        return float("nan")
    return float(arr.std(ddof=1) / math.sqrt(arr.size))


class WindowedMetrics:
    """The three metrics over the trailing ``window`` episodes."""

    def __init__(self, s_opt: int, window: int = 1000):
        self.s_opt = s_opt
        self.episodes: deque = deque(maxlen=window)

    def add(self, R: float, steps: int, nonzero_msgs: int, opt_steps: int | None = None):
        if steps < 1:
            raise ValueError("an episode takes at least one step")
        opt = self.s_opt if opt_steps is None else opt_steps
        self.episodes.append((R, R * opt / steps, sparsity_term(nonzero_msgs)))

    def values(self) -> dict:
        if not self.episodes:
            return {"M_t": 0.0, "M_o": 0.0, "M_s": 0.0}
        arr = np.array(self.episodes)
        m = arr.mean(axis=0)
        return {"M_t": float(m[0]), "M_o": float(m[1]), "M_s": float(m[2])}

    def to_list(self) -> list:
        return [list(e) for e in self.episodes]

    def load(self, rows: list):
        self.episodes.clear()
        self.episodes.extend(tuple(r) for r in rows)
