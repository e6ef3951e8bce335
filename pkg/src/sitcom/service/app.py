"""HTTP front end over the experiment harness.

Training jobs run one at a time on a background worker; each writes its own
run directory under the service's runs root, which is also the only place
``/eval`` will read checkpoints from.
"""

from __future__ import annotations

import logging
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query

from sitcom import __version__, env
from sitcom.checkpoint import CheckpointError
from sitcom.harness import evaluate_checkpoint, oracle_rows, train
from sitcom.records import read_log
from sitcom.service.schemas import (
    EvalRequest,
    EvalResult,
    Health,
    LayoutInfo,
    OracleReport,
    OracleRow,
    RunState,
    RunStatus,
    TrainRequest,
)

log = logging.getLogger(__name__)


class RunManager:
    def __init__(self, root: Path, workers: int = 1):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="sitcom-run")
        self._lock = threading.Lock()
        self._runs: dict[str, RunStatus] = {}

    def submit(self, req: TrainRequest) -> RunStatus:
        run_id = req.name or uuid.uuid4().hex[:12]
        out = self.root / run_id
        with self._lock:
            if run_id in self._runs or out.exists():
                raise HTTPException(409, f"run {run_id!r} already exists")
            status = RunStatus(id=run_id, state=RunState.QUEUED, out_dir=str(out), config_hash=req.config.config_hash())
            self._runs[run_id] = status
        self._pool.submit(self._work, run_id, req)
        return status

    def _set(self, run_id: str, **changes):
        with self._lock:
            self._runs[run_id] = self._runs[run_id].model_copy(update=changes)

    def _work(self, run_id: str, req: TrainRequest):
        self._set(run_id, state=RunState.RUNNING)
        try:
            trainer = train(req.config, self.root / run_id)
        except Exception as exc:  # noqa: BLE001 - reported through the status endpoint
            log.exception("run %s failed", run_id)
            self._set(run_id, state=RunState.FAILED, error=f"{type(exc).__name__}: {exc}")
        else:
            self._set(run_id, state=RunState.FINISHED, finals=trainer.final_values())

    def get(self, run_id: str) -> RunStatus:
        with self._lock:
            if run_id not in self._runs:
                raise HTTPException(404, f"unknown run {run_id!r}")
            return self._runs[run_id]

    def all(self) -> list[RunStatus]:
        with self._lock:
            return list(self._runs.values())

    def resolve(self, rel: str) -> Path:
        path = (self.root / rel).resolve()
        if not path.is_relative_to(self.root.resolve()):
            raise HTTPException(400, "checkpoint must live under the runs root")
        return path

    def shutdown(self):
        self._pool.shutdown(wait=True)


def create_app(runs_root: str | Path = "runs", workers: int = 1) -> FastAPI:
    app = FastAPI(title="sitcom", version=__version__)
    runs = RunManager(Path(runs_root), workers)
    app.state.runs = runs
    app.router.on_shutdown.append(runs.shutdown)

    @app.get("/health", response_model=Health)
    def health():
        return Health(version=__version__)

    @app.get("/layouts", response_model=list[str])
    def layouts():
        return [lid.value for lid in env.LayoutId]

    @app.get("/layouts/{layout_id}", response_model=LayoutInfo)
    def layout(layout_id: env.LayoutId):
        lay = env.build_layout(layout_id)
        return LayoutInfo(id=lay.id.value, s_opt=lay.s_opt, start=lay.start,
                          goal_candidates=list(lay.goal_candidates), text=lay.to_text())

    @app.get("/oracle/{layout_id}", response_model=OracleReport)
    def oracle(layout_id: env.LayoutId, episodes_per_goal: int = Query(1, ge=1, le=100)):
        rows = [OracleRow(**r) for r in oracle_rows(layout_id, episodes_per_goal)]
        return OracleReport(layout=layout_id.value, rows=rows)

    @app.post("/runs", response_model=RunStatus, status_code=202)
    def submit(req: TrainRequest):
        return runs.submit(req)

    @app.get("/runs", response_model=list[RunStatus])
    def list_runs():
        return runs.all()

    @app.get("/runs/{run_id}", response_model=RunStatus)
    def run_status(run_id: str):
        return runs.get(run_id)

    @app.get("/runs/{run_id}/log")
    def run_log(run_id: str, kind: str | None = "episode", offset: int = Query(0, ge=0), limit: int = Query(1000, ge=1)):
        status = runs.get(run_id)
        path = Path(status.out_dir) / "log.jsonl"
        try:
            records = read_log(path, kind)
        except FileNotFoundError:
            return []
        return records[offset : offset + limit]

    @app.post("/eval", response_model=EvalResult)
    def evaluate(req: EvalRequest):
        path = runs.resolve(req.checkpoint)
        if not path.is_file():
            raise HTTPException(404, f"checkpoint not found: {req.checkpoint}")
        try:
            _, metrics, config = evaluate_checkpoint(path, req.episodes, req.seed)
        except CheckpointError as exc:
            raise HTTPException(422, str(exc)) from exc
        return EvalResult(checkpoint=req.checkpoint, episodes=req.episodes,
                          config_hash=config.config_hash(), **metrics.snapshot())

    return app
