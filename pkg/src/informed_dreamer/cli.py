"""Command line: ``informed-dreamer {train,eval,compare,oracle,plot}``."""

from __future__ import annotations

import argparse
import json
import logging
import multiprocessing as mp
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from informed_dreamer import __version__
from informed_dreamer.config import ConfigError, TrainConfig, load_config
from informed_dreamer.diffcore import ContractError
from informed_dreamer.envs import make
from informed_dreamer.plots import AlignmentError, Curve, band, render_svg, run_curve
from informed_dreamer.suites import run_suite
from informed_dreamer.trainer import TrainingAborted, evaluate, run

log = logging.getLogger("informed_dreamer")

EXIT_VIOLATION = 1
EXIT_USAGE = 2
EXIT_ABORTED = 3


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def max_workers() -> int:
    raw = os.environ.get("IWM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ContractError(f"IWM_THREADS must be an integer, got {raw!r}") from None


def _fresh_dir(path: Path, overwrite: bool) -> None:
    if (path / "manifest.json").exists() and not overwrite:
        raise ContractError(f"{path} already holds a run; pass --overwrite to reuse it")
    path.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def _train_one(cfg: TrainConfig, out: str) -> dict:
    r = run(cfg, out)
    return dict(out=str(r.out_dir), env_steps=r.env_steps, grad_steps=r.grad_steps,
                episodes=r.episodes, success_step=r.success_step)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.informed is not None:
        cfg = cfg.replace(informed=args.informed)
    out = Path(args.out)
    _fresh_dir(out, args.overwrite)
    result = _train_one(cfg, str(out))
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    meta = json.loads(Path(str(ckpt) + ".meta.json").read_text())
    env_name = args.env or meta.get("env")
    if not env_name:
        raise ContractError("checkpoint does not name its environment; pass --env")
    stats = evaluate(ckpt, make(env_name), args.episodes, args.seed)
    report = dict(checkpoint=str(ckpt), env=env_name, episodes=args.episodes, seed=args.seed,
                  mean=stats.mean, std=stats.std, min=stats.min, max=stats.max, success=stats.success,
                  returns=stats.returns)
    if args.out:
        _write_json(Path(args.out), report)
    print(json.dumps({k: v for k, v in report.items() if k != "returns"}, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    if len(args.seeds) < 2:
        raise ContractError("compare needs at least two seeds")
    out = Path(args.out)
    _fresh_dir(out, args.overwrite)
    jobs = []
    for informed in (False, True):
        tag = "informed" if informed else "uninformed"
        for s in args.seeds:
            run_dir = out / tag / f"seed-{s}"
            _fresh_dir(run_dir, args.overwrite)
            jobs.append((tag, s, cfg.replace(seed=s, informed=informed), str(run_dir)))

    workers = min(max_workers(), len(jobs))
    if workers > 1:
        # runs share nothing: each worker builds its own env, agent and generators
        with ProcessPoolExecutor(workers, mp_context=mp.get_context("spawn")) as pool:
            results = list(pool.map(_train_one, [j[2] for j in jobs], [j[3] for j in jobs]))
    else:
        results = [_train_one(c, d) for _, _, c, d in jobs]

    summary = summarize(out, cfg.env, args.seeds, args.column)
    summary["runs"] = [dict(variant=t, seed=s, **r) for (t, s, _, _), r in zip(jobs, results)]
    _write_json(out / "summary.json", summary)
    (out / "summary.csv").write_text(
        "task,uninformed,informed\n" + f"{cfg.env},{summary['final']['uninformed']:.6g},{summary['final']['informed']:.6g}\n"
    )
    _write_json(out / "manifest.json", dict(command="compare", config=cfg.to_flat(), seeds=args.seeds,
                                            column=args.column, code_version=__version__))
    print(json.dumps({"final": summary["final"], "columns": summary["columns"]}, sort_keys=True))
    return 0


def summarize(out: Path, task: str, seeds: list[int], column: str = "mean") -> dict:
    """Bands and final-value table from the run directories under ``out``; also writes the overlay SVG."""
    curves = {}
    for tag in ("uninformed", "informed"):
        curves[tag] = band(tag, [run_curve(out / tag / f"seed-{s}", column) for s in seeds])
    u, i = curves["uninformed"], curves["informed"]
    if len(u.x) != len(i.x) or not np.array_equal(u.x, i.x):
        raise AlignmentError("informed and uninformed runs have mismatched evaluation steps")
    (out / "compare.svg").write_text(
        render_svg([u, i], title=f"{task}: uninformed vs informed", ylabel=column)
    )
    return dict(
        task=task,
        column=column,
        columns=["task", "uninformed", "informed"],
        table=[[task, float(u.mean[-1]), float(i.mean[-1])]],
        final=dict(uninformed=float(u.mean[-1]), informed=float(i.mean[-1])),
        curves={
            tag: dict(env_step=c.x.tolist(), mean=c.mean.tolist(), min=c.lo.tolist(), max=c.hi.tolist())
            for tag, c in curves.items()
        },
    )


def cmd_oracle(args) -> int:
    report = run_suite(args.suite, args.count, args.seed)
    if args.out:
        _write_json(Path(args.out), report)
    print(json.dumps({k: v for k, v in report.items() if k != "instances"}, sort_keys=True))
    return EXIT_VIOLATION if report["violations"] else 0


def cmd_plot(args) -> int:
    curves = []
    for d in args.runs:
        x, y = run_curve(d, args.column)
        curves.append(Curve(Path(d).name or str(d), x, y))
    Path(args.out).write_text(render_svg(curves, title=args.title, ylabel=args.column))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="informed-dreamer", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one agent from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--informed", type=_bool, metavar="true|false")
    t.add_argument("--overwrite", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint from observations only")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", help="paired informed / uninformed runs over several seeds")
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seeds", type=_seeds, default=[0, 1])
    c.add_argument("--column", default="mean", choices=["mean", "success", "min", "max"])
    c.add_argument("--overwrite", action="store_true")
    c.set_defaults(fn=cmd_compare)

    o = sub.add_parser("oracle", help="randomised exact checks")
    o.add_argument("suite")
    o.add_argument("count", type=int)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out")
    o.set_defaults(fn=cmd_oracle)

    pl = sub.add_parser("plot", help="SVG learning curves from run directories")
    pl.add_argument("runs", nargs="+")
    pl.add_argument("--out", required=True)
    pl.add_argument("--column", default="mean")
    pl.add_argument("--title", default="")
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ContractError, AlignmentError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as err:
        print(f"error: training aborted: {err}", file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
