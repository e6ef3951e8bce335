"""Command-line entry point.

Runs everything in-process by default. With ``--server URL`` the ``train``,
``eval`` and ``oracle`` subcommands go through a running ``sitcom serve``
instead.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import yaml
from pydantic import ValidationError

from sitcom import __version__, analysis, env
from sitcom.checkpoint import CheckpointError

log = logging.getLogger("sitcom")


class CliError(Exception):
    """A runtime failure reported to the user with exit status 1."""


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _global_flags(parser: argparse.ArgumentParser, suppress: bool):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=default(None), help="root seed (overrides the config)")
    parser.add_argument("--out-dir", type=Path, default=default(None), help="where outputs are written")
    parser.add_argument("--server", default=default(None), metavar="URL", help="talk to a running sitcom service")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sitcom", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"sitcom {__version__}")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", parents=[common], help="train one speaker/listener pair")
    p.add_argument("config", type=Path, help="YAML or JSON experiment config")
    p.add_argument("--resume", type=Path, help="continue from a checkpoint written by an earlier run")
    p.add_argument("--wait", action="store_true", help="with --server, block until the run finishes")

    p = sub.add_parser("sweep", parents=[common], help="train every cell x seed of a grid")
    p.add_argument("grid", type=Path, help="YAML or JSON sweep grid")
    p.add_argument("--workers", type=_positive_int, default=1)

    p = sub.add_parser("eval", parents=[common], help="greedy rollouts of a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--episodes", type=_positive_int, required=True)

    p = sub.add_parser("analyze", parents=[common], help="heatmaps, learning curves, comparisons")
    asub = p.add_subparsers(dest="analysis", required=True, metavar="KIND")
    a = asub.add_parser("heatmap", parents=[common], help="per-cell protocol table from trace files")
    a.add_argument("paths", nargs="+", type=Path)
    a = asub.add_parser("curves", parents=[common], help="smoothed learning curves across seeds")
    a.add_argument("paths", nargs="+", type=Path, help="log.jsonl files or run directories")
    a.add_argument("--metric", default="M_t")
    a.add_argument("--window", type=_positive_int, default=analysis.DEFAULT_WINDOW)
    a.add_argument("--x", dest="x_key", choices=("episode", "env_steps"), default="episode")
    a = asub.add_parser("compare", parents=[common], help="regime comparison report")
    a.add_argument("paths", nargs="+", help="LABEL=RUN[,RUN...] or a bare run path labelled by its name")
    a.add_argument("--window", type=_positive_int, default=analysis.DEFAULT_WINDOW)
    a.add_argument("--x", dest="x_key", choices=("episode", "env_steps"), default="episode")

    p = sub.add_parser("oracle", parents=[common], help="metric table of the scripted BFS pairs")
    p.add_argument("layout", choices=[lid.value for lid in env.LayoutId])
    p.add_argument("--episodes-per-goal", type=_positive_int, default=1)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--runs-root", type=Path, default=Path("runs"))
    return parser


# helpers ---------------------------------------------------------------------


def _client(args):
    import httpx

    return httpx.Client(base_url=args.server, timeout=600.0)


def _request(args, method: str, url: str, **kw):
    import httpx

    try:
        with _client(args) as c:
            resp = c.request(method, url, **kw)
    except httpx.HTTPError as exc:
        raise CliError(f"cannot reach {args.server}: {exc}") from exc
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise CliError(f"server answered {resp.status_code}: {detail}")
    return resp.json()


def _metric_line(d: dict) -> str:
    return "  ".join(f"{k}={d[k]:.4f}" for k in ("M_t", "M_o", "M_s"))


def _load_config(args):
    from sitcom.harness import load_config

    if not args.config.is_file():
        raise CliError(f"config not found: {args.config}")
    try:
        config = load_config(args.config)
    except yaml.YAMLError as exc:
        raise CliError(f"cannot parse {args.config}: {exc}") from exc
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    return config


# commands ---------------------------------------------------------------------


def cmd_train(args) -> int:
    config = _load_config(args)
    if args.server:
        body = {"config": json.loads(config.canonical_json())}
        status = _request(args, "POST", "/runs", json=body)
        print(f"run {status['id']} {status['state']} -> {status['out_dir']}")
        while args.wait and status["state"] in ("queued", "running"):
            time.sleep(2)
            status = _request(args, "GET", f"/runs/{status['id']}")
        if status["state"] == "failed":
            raise CliError(status["error"])
        if status.get("finals"):
            print(_metric_line(status["finals"]))
        return 0
    from sitcom.harness import Trainer, train

    out = args.out_dir or Path("runs") / f"{args.config.stem}-seed{config.seed}"
    if args.resume is not None:
        saved = Trainer.resume(args.resume).config
        if saved.config_hash() != config.config_hash():
            raise CliError(f"{args.resume} was written by a different config")
    trainer = train(config, out, resume_from=args.resume)
    finals = trainer.final_values()
    print(f"{out}: episodes={finals['episodes']} env_steps={finals['env_steps']}")
    print("running   " + _metric_line(finals))
    print("windowed  " + _metric_line({k: finals["W" + k] for k in ("M_t", "M_o", "M_s")}))
    return 0


def cmd_sweep(args) -> int:
    from sitcom.harness import load_sweep_grid, sweep

    if not args.grid.is_file():
        raise CliError(f"grid config not found: {args.grid}")
    try:
        grid = load_sweep_grid(args.grid)
    except yaml.YAMLError as exc:
        raise CliError(f"cannot parse {args.grid}: {exc}") from exc
    if args.seed is not None:
        grid = grid.model_copy(update={"seeds": [args.seed]})
    out = args.out_dir or Path("runs") / f"sweep-{args.grid.stem}"
    result = sweep(grid, out, workers=args.workers)
    best = result.best_mean_cell
    for i, cell in enumerate(result.cells):
        mark = "*" if i == best else " "
        line = f"{mark} cell{i:03d} {json.dumps(cell.params, sort_keys=True)} seeds={len(cell.finals)}"
        if cell.finals:
            line += f" {result.metric}={cell.mean(result.metric):.4f}"
        if cell.errors:
            line += f" failed={len(cell.errors)}"
        print(line)
    ci, seed = result.best_pair
    print(f"best pair: cell{ci:03d} seed {seed}; summary in {out / 'sweep.json'}")
    return 0 if any(c.finals for c in result.cells) else 1


def cmd_eval(args) -> int:
    if args.server:
        res = _request(args, "POST", "/eval", json={"checkpoint": str(args.checkpoint), "episodes": args.episodes, "seed": args.seed})
        print(f"{res['checkpoint']}: {res['episodes']} greedy episodes  " + _metric_line(res))
        return 0
    from sitcom.harness import evaluate_checkpoint
    from sitcom.records import write_traces

    if not args.checkpoint.is_file():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    traces, metrics, _ = evaluate_checkpoint(args.checkpoint, args.episodes, args.seed)
    print(f"{args.checkpoint}: {args.episodes} greedy episodes  " + _metric_line(metrics.snapshot()))
    if args.out_dir is not None:
        path = write_traces(args.out_dir / "traces" / "eval.tsv", traces)
        print(f"traces: {path}")
    return 0


def cmd_analyze(args) -> int:
    out = args.out_dir or Path("analysis")
    if args.analysis == "heatmap":
        grid = analysis.protocol_heatmap(analysis.load_traces(args.paths))
        csv_path = grid.write_csv(out / "heatmap.csv")
        (out / "heatmap.svg").write_text(grid.to_svg())
        print(f"{grid.layout}: {grid.total_visits} steps; table {csv_path}")
        for cell in sorted(grid.solicitations, key=lambda c: -grid.solicitations[c]):
            print(f"  solicit at {cell}: {grid.solicitations[cell]}/{grid.visits[cell]}")
        return 0
    if args.analysis == "curves":
        for p in args.paths:
            if not Path(p).exists():
                raise CliError(f"log not found: {p}")
        curve = analysis.learning_curves(args.paths, args.metric, args.window, args.x_key)
        rows = [{"label": args.metric, "x": repr(float(x)), "mean": repr(float(m)), "stderr": repr(float(e))}
                for x, m, e in zip(curve.x, curve.mean, curve.stderr)]
        analysis._write_csv(out / f"curves_{args.metric}.csv", ("label", "x", "mean", "stderr"), rows)
        (out / f"{args.metric}.svg").write_text(analysis.curve_svg([(args.metric, curve)], args.metric))
        mean, err = curve.final
        print(f"{args.metric} over {curve.n_seeds} run(s): final {mean:.4f} +/- {err:.4f}; written to {out}")
        return 0
    run_sets: dict[str, list] = {}
    for item in args.paths:
        label, _, rest = item.partition("=") if "=" in item else (Path(item).name, "", item)
        for p in rest.split(","):
            if not Path(p).exists():
                raise CliError(f"run not found: {p}")
            run_sets.setdefault(label, []).append(Path(p))
    report = analysis.compare_report(run_sets, out, args.window, args.x_key)
    width = max(len(l) for l in report.labels)
    for metric in analysis.METRICS:
        print(metric)
        for label, fv in zip(report.labels, report.row(metric)):
            value = fv if fv == analysis.MISSING else f"{fv.mean:.4f} +/- {fv.stderr:.4f} (n={fv.n})"
            print(f"  {label:<{width}}  {value}")
    print(f"report written to {out}")
    return 0


def cmd_oracle(args) -> int:
    if args.server:
        rows = _request(args, "GET", f"/oracle/{args.layout}", params={"episodes_per_goal": args.episodes_per_goal})["rows"]
    else:
        from sitcom.harness import oracle_rows

        rows = oracle_rows(args.layout, args.episodes_per_goal)
    print(f"{'condition':<32} {'episodes':>8} {'M_t':>7} {'M_o':>7} {'M_s':>7}")
    for r in rows:
        print(f"{r['condition']:<32} {r['episodes']:>8} {r['M_t']:>7.3f} {r['M_o']:>7.3f} {r['M_s']:>7.3f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from sitcom.service import create_app

    uvicorn.run(create_app(args.runs_root), host=args.host, port=args.port)
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "oracle": cmd_oracle,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, CheckpointError, OSError, analysis.MetricMissing, ValueError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
