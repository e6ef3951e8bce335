"""Episode traces, run logs and their on-disk text formats.

Trace files are tab-separated with one row per step and this header::

    episode t x y heading symbol action requested solicited env_reward penalty goal_x goal_y layout

``symbol`` is ``-`` when nothing was delivered, otherwise the delivered tokens
joined by ``.`` (one token outside upfront mode). ``x``/``y``/``heading`` are
the listener's cell and facing when the step began.

Run logs are newline-delimited JSON, one object per line, with a ``kind`` of
``episode``, ``stage``, ``eval`` or ``checkpoint``.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from pathlib import Path
from typing import Iterable, Iterator

from sitcom import env
from sitcom.agents import NULL_SYMBOL
from sitcom.modes import StepOutcome

TRACE_COLUMNS = (
    "episode", "t", "x", "y", "heading", "symbol", "action", "requested",
    "solicited", "env_reward", "penalty", "goal_x", "goal_y", "layout",
)


@dataclasses.dataclass
class EpisodeTrace:
    layout: str
    goal: env.Cell
    steps: list[StepOutcome]
    upfront: tuple[int, ...] | None = None
    opt_steps: int | None = None
    episode: int = 0

    @property
    def R(self) -> float:
        return self.steps[-1].env_reward if self.steps else 0.0

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def nonzero_messages(self) -> int:
        if self.upfront is not None:
            return sum(1 for s in self.upfront if s != NULL_SYMBOL)
        return sum(1 for s in self.steps if s.delivered is not None and s.delivered[0] != NULL_SYMBOL)

    @property
    def solicitations(self) -> int:
        return sum(1 for s in self.steps if s.requested)

    def summary(self) -> dict:
        return {"R": self.R, "steps": self.length, "nonzero": self.nonzero_messages}


def _fmt_symbol(delivered) -> str:
    return "-" if delivered is None else ".".join(str(s) for s in delivered)


def _parse_symbol(text: str):
    return None if text == "-" else tuple(int(s) for s in text.split("."))


def trace_rows(trace: EpisodeTrace) -> Iterator[dict]:
    for t, s in enumerate(trace.steps):
        yield {
            "episode": trace.episode,
            "t": t,
            "x": s.cell[0],
            "y": s.cell[1],
            "heading": env.Heading(s.heading).name.lower(),
            "symbol": _fmt_symbol(s.delivered),
            "action": env.Action(s.listener_action).name.lower(),
            "requested": int(s.requested),
            "solicited": int(s.solicited),
            "env_reward": repr(float(s.env_reward)),
            "penalty": repr(float(s.penalty)),
            "goal_x": trace.goal[0],
            "goal_y": trace.goal[1],
            "layout": trace.layout,
        }


def write_traces(path: str | os.PathLike, traces: Iterable[EpisodeTrace]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, delimiter="\t", lineterminator="\n")
        writer.writeheader()
        for trace in traces:
            writer.writerows(trace_rows(trace))
    return path


def read_traces(path: str | os.PathLike) -> list[EpisodeTrace]:
    """Rebuild traces from a trace file. Upfront tokens come back per step."""
    traces: dict[int, EpisodeTrace] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ValueError(f"{path}: not a trace file (unexpected header)")
        for row in reader:
            ep = int(row["episode"])
            delivered = _parse_symbol(row["symbol"])
            step = StepOutcome(
                cell=(int(row["x"]), int(row["y"])),
                heading=env.Heading[row["heading"].upper()],
                delivered=delivered,
                listener_action=env.Action[row["action"].upper()],
                env_reward=float(row["env_reward"]),
                speaker_reward=float(row["env_reward"]) - float(row["penalty"]),
                penalty=float(row["penalty"]),
                solicited=bool(int(row["solicited"])),
                requested=bool(int(row["requested"])),
                speaker_acted=delivered is not None,
            )
            if ep not in traces:
                traces[ep] = EpisodeTrace(row["layout"], (int(row["goal_x"]), int(row["goal_y"])), [], episode=ep)
            tr = traces[ep]
            tr.steps.append(step)
            if delivered is not None and len(delivered) > 1:
                tr.upfront = delivered
    return [traces[k] for k in sorted(traces)]


class RunLog:
    """Append-only newline-delimited JSON log."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = None

    def __enter__(self):
        self._fh = open(self.path, "a")
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def append(self, record: dict):
        line = json.dumps(record, sort_keys=True) + "\n"
        if self._fh is None:
            with open(self.path, "a") as fh:
                fh.write(line)
        else:
            self._fh.write(line)

    def flush(self):
        if self._fh is not None:
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def size(self) -> int:
        self.flush()
        return self.path.stat().st_size if self.path.exists() else 0

    def truncate(self, size: int):
        self.close()
        with open(self.path, "a") as fh:
            fh.truncate(size)


def read_log(path: str | os.PathLike, kind: str | None = "episode") -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"log file not found: {path}")
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: not a JSON record") from exc
            if kind is None or rec.get("kind") == kind:
                out.append(rec)
    return out
