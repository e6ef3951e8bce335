"""Episode loop, training runs, seed sweeps and checkpoint/resume."""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import time
import zlib
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from sitcom import checkpoint, env, nn
from sitcom.agents import Agent, AgentConfig, Role
from sitcom.metrics import RunningMetrics, WindowedMetrics, record_episode, sparsity_term, standard_error
from sitcom.modes import (
    ModeConfig,
    ModeKind,
    StageState,
    advance_curriculum,
    current_penalty,
    generate_upfront,
    mediate_step,
    next_listener_input,
)
from sitcom.records import EpisodeTrace, RunLog, write_traces
from sitcom.scripted import Condition, scripted_pair

log = logging.getLogger(__name__)

PAPER_LEARNING_RATES = (1e-5, 1e-6)
PAPER_REP_SIZES = (8, 16)
DESK_TOTAL_ENV_STEPS = 200_000
DESK_LEARNING_RATE = 1e-3
DESK_EPSILON = 0.1

STREAMS = ("env", "speaker_explore", "listener_explore", "speaker_init", "listener_init", "eval")


class ExperimentConfig(BaseModel):
    """Everything that determines a training run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    layout: env.LayoutId = env.LayoutId.TMAZE
    mode: ModeConfig = ModeConfig()
    visibility: env.Visibility = env.Visibility.PARTIAL
    has_memory: bool = True
    rep_size: int = 16
    hidden_size: int = Field(32, ge=1)
    alpha_speaker: float = Field(DESK_LEARNING_RATE, gt=0)
    alpha_listener: float = Field(DESK_LEARNING_RATE, gt=0)
    epsilon: float = Field(DESK_EPSILON, ge=0, le=1)
    gamma: float = Field(0.99, ge=0, le=1)
    lam: float = Field(0.9, ge=0, le=1)
    updates_per_episode: int = Field(1, ge=1)
    seed: int = 0
    total_env_steps: int = Field(DESK_TOTAL_ENV_STEPS, ge=0)
    eval_every_episodes: int = Field(0, ge=0)
    eval_episodes: int = Field(20, ge=1)
    checkpoint_every_steps: int = Field(50_000, ge=1)
    metric_window: int = Field(1000, ge=1)

    @field_validator("rep_size")
    @classmethod
    def _rep(cls, v):
        if v not in nn.REP_SIZES:
            raise ValueError(f"rep_size must be one of {nn.REP_SIZES}")
        return v

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def agent_configs(self) -> tuple[AgentConfig, AgentConfig]:
        common = dict(
            has_memory=self.has_memory,
            rep_size=self.rep_size,
            hidden_size=self.hidden_size,
            epsilon=self.epsilon,
            gamma=self.gamma,
            lam=self.lam,
            updates_per_episode=self.updates_per_episode,
        )
        speaker = AgentConfig(Role.SPEAKER, env.Visibility.NONE, learning_rate=self.alpha_speaker, **common)
        listener = AgentConfig(
            Role.LISTENER,
            self.visibility,
            learning_rate=self.alpha_listener,
            message_width=self.mode.message_width,
            **common,
        )
        return speaker, listener


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML or JSON experiment config."""
    import yaml

    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    return ExperimentConfig.model_validate(data)


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one root seed."""
    return {
        name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))
        for name in STREAMS
    }


def run_episode(
    layout: env.MazeLayout,
    speaker,
    listener,
    mode: ModeConfig,
    stage_state: StageState | None,
    rng: np.random.Generator,
    learn: bool = True,
    greedy: bool = False,
    goal: env.Cell | None = None,
) -> tuple[EpisodeTrace, StageState | None, tuple]:
    """Play one episode; with ``learn`` apply one fitted-Q update per agent at the end.

    Returns the trace, the (possibly advanced) curriculum state and the two
    losses (speaker, listener), ``None`` where no update happened.
    """
    state = env.reset(layout, rng)
    if goal is not None:
        state = dataclasses.replace(state, goal_pos=goal)
    speaker.begin_episode()
    listener.begin_episode()
    upfront = None
    if mode.kind is ModeKind.UPFRONT:
        upfront = generate_upfront(speaker, layout, state, mode.upfront_tokens, greedy=greedy)
    pending = False
    steps = []
    while not state.done:
        outcome, state, pending = mediate_step(
            mode, stage_state, speaker, listener, layout, state, pending, upfront, greedy=greedy
        )
        steps.append(outcome)
    success = steps[-1].env_reward > 0
    losses = (None, None)
    if learn:
        l_final = s_final = None
        if not success:
            lx = next_listener_input(mode, speaker, listener, layout, state, pending, upfront)
            l_final = listener.qvalues(lx)
            if mode.kind is not ModeKind.UPFRONT and len(speaker.trajectory):
                sx = env.speaker_view(layout, state)
                s_final = speaker.qvalues(sx)
        listener.trajectory.finish(success, l_final)
        # upfront tokens see the whole episode; nothing left to bootstrap
        speaker.trajectory.finish(success or mode.kind is ModeKind.UPFRONT, s_final)
        losses = (speaker.update(), listener.update())
        if mode.kind is ModeKind.CURRICULUM:
            stage_state.note_episode(len(steps), success)
            stage_state = advance_curriculum(mode.schedule, stage_state)
    trace = EpisodeTrace(
        layout=layout.id.value,
        goal=state.goal_pos,
        steps=steps,
        upfront=upfront,
        opt_steps=env.shortest_path(layout, layout.start, state.goal_pos),
    )
    return trace, stage_state, losses


def episode_terms(trace: EpisodeTrace) -> dict:
    """Per-episode log fields; ``o`` and ``s`` are the episode's optimality and sparsity terms."""
    return {
        "R": trace.R,
        "steps": trace.length,
        "opt": trace.opt_steps,
        "m": trace.nonzero_messages,
        "solicits": trace.solicitations,
        "o": trace.R * trace.opt_steps / trace.length,
        "s": sparsity_term(trace.nonzero_messages),
    }


def run_scripted(
    layout_id: env.LayoutId | str, condition: Condition, episodes_per_goal: int = 1
) -> tuple[list[EpisodeTrace], RunningMetrics]:
    """Roll the BFS oracle pair once per goal candidate (repeated ``episodes_per_goal`` times)."""
    layout = env.build_layout(layout_id)
    speaker, listener, mode = scripted_pair(layout, condition)
    rng = np.random.default_rng(0)  # goals are fixed below, the draw is discarded
    metrics = RunningMetrics(layout.s_opt)
    traces = []
    for rep in range(episodes_per_goal):
        for goal in layout.goal_candidates:
            trace, _, _ = run_episode(layout, speaker, listener, mode, None, rng, learn=False, goal=goal)
            trace.episode = len(traces)
            traces.append(trace)
            metrics = record_episode(metrics, trace.R, trace.length, trace.nonzero_messages, trace.opt_steps)
    return traces, metrics


def scripted_log(traces: list[EpisodeTrace]) -> list[dict]:
    """Episode records for scripted rollouts, shaped like a training log."""
    return [{"kind": "episode", "episode": i + 1, "env_steps": sum(t.length for t in traces[: i + 1]), **episode_terms(t)}
            for i, t in enumerate(traces)]


def _agent_arrays(prefix: str, agent: Agent) -> dict[str, np.ndarray]:
    out = {}
    for group, d in (("w", agent.params.weights), ("m", agent.params.m), ("v", agent.params.v)):
        for k, a in d.items():
            out[f"{prefix}/{group}/{k}"] = a
    return out


def _agent_meta(agent: Agent) -> dict:
    return {
        "spec": agent.spec.to_dict(),
        "adam_step": agent.params.step,
        "config": {k: (v.value if hasattr(v, "value") else v) for k, v in dataclasses.asdict(agent.config).items()},
    }


def _restore_agent(prefix: str, agent: Agent, meta: dict, arrays: dict):
    spec = nn.NetworkSpec.from_dict(meta["spec"])
    if spec != agent.spec:
        raise checkpoint.CheckpointError(f"{prefix}: checkpoint network spec {spec} differs from {agent.spec}")
    groups = {}
    for group in ("w", "m", "v"):
        d = {}
        for name, shape in spec.param_shapes().items():
            key = f"{prefix}/{group}/{name}"
            if key not in arrays or arrays[key].shape != shape:
                raise checkpoint.CheckpointError(f"{key}: missing or wrong shape")
            d[name] = arrays[key].copy()
        groups[group] = d
    agent.params = nn.ParamSet(groups["w"], groups["m"], groups["v"], meta["adam_step"])


def save_agents(path, speaker: Agent, listener: Agent, extra: dict | None = None) -> Path:
    meta = {"speaker": _agent_meta(speaker), "listener": _agent_meta(listener), "extra": extra or {}}
    arrays = {**_agent_arrays("speaker", speaker), **_agent_arrays("listener", listener)}
    return checkpoint.save(path, meta, arrays)


def load_agents(path, speaker: Agent, listener: Agent) -> dict:
    """Restore both agents' weights and optimiser state in place; returns the extra metadata."""
    meta, arrays = checkpoint.load(path)
    _restore_agent("speaker", speaker, meta["speaker"], arrays)
    _restore_agent("listener", listener, meta["listener"], arrays)
    return meta.get("extra", {})


def _rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def _set_rng_state(gen: np.random.Generator, state: dict):
    gen.bit_generator.state = state


class Trainer:
    """A single seeded training run that can checkpoint and resume bit-exactly."""

    def __init__(self, config: ExperimentConfig, out_dir: str | Path | None = None):
        self.config = config
        self.layout = env.build_layout(config.layout)
        self.streams = make_streams(config.seed)
        s_cfg, l_cfg = config.agent_configs()
        self.speaker = Agent(s_cfg, self.streams["speaker_explore"], self.streams["speaker_init"])
        self.listener = Agent(l_cfg, self.streams["listener_explore"], self.streams["listener_init"])
        schedule = config.mode.schedule if config.mode.kind is ModeKind.CURRICULUM else None
        self.stage = StageState.for_schedule(schedule) if schedule is not None else None
        self.metrics = RunningMetrics(self.layout.s_opt)
        self.windowed = WindowedMetrics(self.layout.s_opt, config.metric_window)
        self.episode = 0
        self.env_steps = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._next_checkpoint = config.checkpoint_every_steps

    # persistence -------------------------------------------------------
    @property
    def log_path(self) -> Path:
        return self.out_dir / "log.jsonl"

    def state_meta(self, log_size: int = 0) -> dict:
        return {
            "config": json.loads(self.config.canonical_json()),
            "config_hash": self.config.config_hash(),
            "episode": self.episode,
            "env_steps": self.env_steps,
            "next_checkpoint": self._next_checkpoint,
            "rng": {name: _rng_state(g) for name, g in self.streams.items()},
            "stage": self.stage.to_dict() if self.stage is not None else None,
            "metrics": dataclasses.asdict(self.metrics),
            "windowed": self.windowed.to_list(),
            "log_size": log_size,
        }

    def save_checkpoint(self, path, log_size: int = 0) -> Path:
        return save_agents(path, self.speaker, self.listener, self.state_meta(log_size))

    @classmethod
    def resume(cls, path, out_dir: str | Path | None = None) -> "Trainer":
        meta, arrays = checkpoint.load(path)
        extra = meta["extra"]
        config = ExperimentConfig.model_validate(extra["config"])
        trainer = cls(config, out_dir)
        _restore_agent("speaker", trainer.speaker, meta["speaker"], arrays)
        _restore_agent("listener", trainer.listener, meta["listener"], arrays)
        for name, state in extra["rng"].items():
            _set_rng_state(trainer.streams[name], state)
        if extra["stage"] is not None:
            trainer.stage = StageState.from_dict(extra["stage"])
        trainer.metrics = RunningMetrics(**extra["metrics"])
        trainer.windowed.load(extra["windowed"])
        trainer.episode = extra["episode"]
        trainer.env_steps = extra["env_steps"]
        trainer._next_checkpoint = extra["next_checkpoint"]
        if trainer.out_dir is not None and trainer.log_path.exists():
            RunLog(trainer.log_path).truncate(extra["log_size"])
        return trainer

    # training ----------------------------------------------------------
    def train_episode(self) -> tuple[EpisodeTrace, dict]:
        old_stage = self.stage.stage if self.stage is not None else None
        trace, self.stage, _ = run_episode(
            self.layout, self.speaker, self.listener, self.config.mode, self.stage, self.streams["env"], learn=True
        )
        self.episode += 1
        trace.episode = self.episode
        self.env_steps += trace.length
        self.metrics = record_episode(self.metrics, trace.R, trace.length, trace.nonzero_messages, trace.opt_steps)
        self.windowed.add(trace.R, trace.length, trace.nonzero_messages, trace.opt_steps)
        record = {
            "kind": "episode",
            "episode": self.episode,
            "env_steps": self.env_steps,
            **episode_terms(trace),
            "stage": self.stage.stage if self.stage is not None else 0,
            "penalty": current_penalty(self.config.mode, self.stage),
            **self.metrics.snapshot(),
            **{f"W{k}": v for k, v in self.windowed.values().items()},
        }
        stage_event = None
        if self.stage is not None and self.stage.stage != old_stage:
            stage_event = {
                "kind": "stage",
                "episode": self.episode,
                "env_steps": self.env_steps,
                "stage": self.stage.stage,
                "penalty": current_penalty(self.config.mode, self.stage),
            }
        return trace, {"episode": record, "stage": stage_event}

    def evaluate(self, n_episodes: int, rng: np.random.Generator | None = None) -> tuple[list[EpisodeTrace], RunningMetrics]:
        """Greedy rollouts without learning; draws goals from the ``eval`` stream."""
        rng = self.streams["eval"] if rng is None else rng
        metrics = RunningMetrics(self.layout.s_opt)
        traces = []
        for i in range(n_episodes):
            trace, _, _ = run_episode(
                self.layout, self.speaker, self.listener, self.config.mode, self.stage, rng, learn=False, greedy=True
            )
            trace.episode = i
            traces.append(trace)
            metrics = record_episode(metrics, trace.R, trace.length, trace.nonzero_messages, trace.opt_steps)
        return traces, metrics

    def run(self, until_env_steps: int | None = None) -> "Trainer":
        """Train until the step budget (or ``until_env_steps``) is spent.

        Whole episodes are played, so the final episode may overrun the budget.
        """
        budget = self.config.total_env_steps if until_env_steps is None else min(until_env_steps, self.config.total_env_steps)
        out = self.out_dir
        runlog = RunLog(self.log_path) if out is not None else None
        clock = RunLog(out / "wallclock.jsonl") if out is not None else None
        if runlog is not None:
            runlog.__enter__()
        try:
            while self.env_steps < budget:
                trace, recs = self.train_episode()
                if runlog is not None:
                    runlog.append(recs["episode"])
                    if recs["stage"] is not None:
                        runlog.append(recs["stage"])
                        log.info("curriculum stage %d at %d steps", recs["stage"]["stage"], self.env_steps)
                cadence = self.config.eval_every_episodes
                if cadence and self.episode % cadence == 0:
                    traces, m = self.evaluate(self.config.eval_episodes)
                    if runlog is not None:
                        runlog.append({"kind": "eval", "episode": self.episode, "env_steps": self.env_steps, "greedy": True, **m.snapshot()})
                        write_traces(out / "traces" / f"eval_{self.episode:07d}.tsv", traces)
                if out is not None and self.env_steps >= self._next_checkpoint:
                    while self._next_checkpoint <= self.env_steps:
                        self._next_checkpoint += self.config.checkpoint_every_steps
                    self._write_checkpoint(runlog, clock)
        finally:
            if runlog is not None:
                runlog.close()
        return self

    def _write_checkpoint(self, runlog: RunLog, clock: RunLog, name: str | None = None) -> Path:
        name = name or f"ckpt_{self.env_steps:09d}.bin"
        rel = f"checkpoints/{name}"
        runlog.append({"kind": "checkpoint", "episode": self.episode, "env_steps": self.env_steps, "path": rel})
        size = runlog.size()
        path = self.save_checkpoint(self.out_dir / rel, size)
        clock.append({"event": "checkpoint", "path": rel, "env_steps": self.env_steps, "time": time.time()})
        return path

    def final_values(self) -> dict:
        return {"episodes": self.episode, "env_steps": self.env_steps, **self.metrics.snapshot(),
                **{f"W{k}": v for k, v in self.windowed.values().items()}}


def train(config: ExperimentConfig, out_dir: str | Path | None = None, resume_from: str | Path | None = None) -> Trainer:
    """Run a full training job, writing config, log, checkpoints and a final checkpoint."""
    if resume_from is not None:
        trainer = Trainer.resume(resume_from, out_dir)
    else:
        trainer = Trainer(config, out_dir)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(config.canonical_json() + "\n")
        (out / "run.json").write_text(json.dumps({"config_hash": config.config_hash(), "seed": config.seed}, sort_keys=True) + "\n")
        if resume_from is None:
            trainer.log_path.write_text("")
            (out / "wallclock.jsonl").write_text("")
            trainer.save_checkpoint(out / "checkpoints" / "initial.bin", 0)
        with RunLog(out / "wallclock.jsonl") as clock:
            clock.append({"event": "start", "env_steps": trainer.env_steps, "time": time.time()})
    trainer.run()
    if out_dir is not None:
        size = trainer.log_path.stat().st_size
        trainer.save_checkpoint(Path(out_dir) / "checkpoints" / "final.bin", size)
        with RunLog(Path(out_dir) / "wallclock.jsonl") as clock:
            clock.append({"event": "finish", "env_steps": trainer.env_steps, "time": time.time()})
    return trainer


# sweeps ----------------------------------------------------------------


class SweepGrid(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base: ExperimentConfig = ExperimentConfig()
    axes: dict[str, list[Any]] = {"alpha_speaker": list(PAPER_LEARNING_RATES), "rep_size": list(PAPER_REP_SIZES)}
    seeds: list[int] = list(range(10))
    tie_learning_rates: bool = False

    def cells(self) -> list[dict]:
        keys = list(self.axes)
        out = []
        for values in itertools.product(*(self.axes[k] for k in keys)):
            cell = dict(zip(keys, values))
            if self.tie_learning_rates and "alpha_speaker" in cell and "alpha_listener" not in cell:
                cell["alpha_listener"] = cell["alpha_speaker"]
            out.append(cell)
        return out


@dataclasses.dataclass
class CellResult:
    params: dict
    finals: dict[int, dict]  # seed -> final values
    errors: dict[int, str]

    def series(self, key: str) -> list[float]:
        return [self.finals[s][key] for s in sorted(self.finals)]

    def mean(self, key: str) -> float:
        vals = self.series(key)
        return float(np.mean(vals)) if vals else float("nan")

    def stderr(self, key: str) -> float:
        return standard_error(self.series(key))


@dataclasses.dataclass
class SweepResult:
    cells: list[CellResult]
    metric: str = "WM_o"

    @property
    def best_mean_cell(self) -> int:
        means = [c.mean(self.metric) if c.finals else -np.inf for c in self.cells]
        return int(np.argmax(means))

    @property
    def best_pair(self) -> tuple[int, int]:
        best, where = -np.inf, (0, -1)
        for i, cell in enumerate(self.cells):
            for seed in sorted(cell.finals):
                v = cell.finals[seed][self.metric]
                if v > best:
                    best, where = v, (i, seed)
        return where

    def to_dict(self) -> dict:
        keys = ("WM_t", "WM_o", "WM_s", "M_t", "M_o", "M_s")
        return {
            "metric": self.metric,
            "best_mean_cell": self.best_mean_cell,
            "best_pair": list(self.best_pair),
            "cells": [
                {
                    "params": c.params,
                    "finals": {str(s): v for s, v in sorted(c.finals.items())},
                    "errors": {str(s): e for s, e in c.errors.items()},
                    "mean": {k: c.mean(k) for k in keys},
                    "stderr": {k: c.stderr(k) for k in keys},
                }
                for c in self.cells
            ],
        }


def run_one(config: ExperimentConfig, out_dir: str | Path | None = None) -> dict:
    return train(config, out_dir).final_values()


def sweep(grid: SweepGrid, out_dir: str | Path | None = None, workers: int = 1) -> SweepResult:
    """Every (cell, seed) run; a failing run is recorded on its cell and skipped."""
    jobs = []
    for ci, cell in enumerate(grid.cells()):
        for seed in grid.seeds:
            cfg = grid.base.model_copy(update={**cell, "seed": seed})
            cfg = ExperimentConfig.model_validate(cfg.model_dump())
            sub = None if out_dir is None else Path(out_dir) / f"cell{ci:03d}" / f"seed{seed:03d}"
            jobs.append((ci, seed, cfg, sub))
    results = [CellResult({k: v for k, v in cell.items()}, {}, {}) for cell in grid.cells()]

    def _record(ci, seed, outcome):
        if isinstance(outcome, BaseException):
            results[ci].errors[seed] = f"{type(outcome).__name__}: {outcome}"
        else:
            results[ci].finals[seed] = outcome

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            futures = [(ci, seed, pool.submit(run_one, cfg, sub)) for ci, seed, cfg, sub in jobs]
            for ci, seed, fut in futures:
                try:
                    _record(ci, seed, fut.result())
                except Exception as exc:  # noqa: BLE001 - per-run failures are data
                    _record(ci, seed, exc)
    else:
        for ci, seed, cfg, sub in jobs:
            try:
                _record(ci, seed, run_one(cfg, sub))
            except Exception as exc:  # noqa: BLE001
                log.warning("sweep cell %d seed %d failed: %s", ci, seed, exc)
                _record(ci, seed, exc)
    result = SweepResult(results)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    return result


def load_sweep_grid(path: str | Path) -> SweepGrid:
    import yaml

    return SweepGrid.model_validate(yaml.safe_load(Path(path).read_text()) or {})


def evaluate_checkpoint(
    path: str | Path, episodes: int, seed: int | None = None
) -> tuple[list[EpisodeTrace], RunningMetrics, ExperimentConfig]:
    """Greedy rollouts of a saved run. ``seed`` reseeds the eval stream; otherwise the saved one continues."""
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    trainer = Trainer.resume(path)
    rng = make_streams(seed)["eval"] if seed is not None else None
    traces, metrics = trainer.evaluate(episodes, rng)
    return traces, metrics, trainer.config


def oracle_rows(layout_id: env.LayoutId | str, episodes_per_goal: int = 1) -> list[dict]:
    """Metric table of the scripted pair for every experimental condition."""
    from sitcom.scripted import all_conditions

    rows = []
    for cond in all_conditions():
        traces, m = run_scripted(layout_id, cond, episodes_per_goal)
        rows.append({"condition": cond.label(), "episodes": len(traces), **m.snapshot()})
    return rows
