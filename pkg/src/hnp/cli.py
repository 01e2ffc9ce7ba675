"""Command-line entry point: ``hnp <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 a property check failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigFileError, RunConfig, finalize, load_config
from .episodes import (
    REGRESSION,
    FeatureBankError,
    Episode,
    load_feature_bank,
    make_synthetic_domains,
    sample_feature_episode,
    sample_gp_episode,
    sample_synthetic_classification_episode,
)

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2
LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO}

log = logging.getLogger("hnp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# -- shared plumbing ---------------------------------------------------------

def episode_source(cfg: RunConfig, split: str = "train"):
    """``rng -> Episode`` for the configured data source."""
    if cfg.data == "gp":
        return lambda rng: sample_gp_episode(cfg.gp, rng)
    if cfg.data == "synthetic":
        domains = make_synthetic_domains(cfg.domains, cfg.domain_seed)
        return lambda rng: sample_synthetic_classification_episode(cfg.spec, domains, rng, split)
    bank = load_feature_bank(cfg.feature_bank)
    return lambda rng: sample_feature_episode(bank, cfg.spec, split, rng)


def draw_episodes(cfg: RunConfig, count: int, seed: int, split: str) -> list:
    rng = np.random.default_rng(seed)
    source = episode_source(cfg, split)
    return [source(rng) for _ in range(count)]


def runlog_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.stem + ".runlog.csv")


def _run_config(args, fallback: RunConfig | None = None) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return fallback if fallback is not None else finalize(RunConfig())


def _checkpoint(path):
    model, meta = load_checkpoint(path)
    stored = RunConfig.from_dict(meta["run_config"]) if "run_config" in meta else None
    return model, stored


def _write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from dataclasses import replace

    cfg = finalize(replace(_run_config(args), data=args.kind))
    episodes = draw_episodes(cfg, args.count, args.seed, args.split)
    _write_json(args.out, {"kind": args.kind, "seed": args.seed, "split": args.split,
                           "episodes": [ep.to_dict() for ep in episodes]})
    log.info("wrote %d episodes to %s", len(episodes), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from dataclasses import replace

    from .training import RunLog, init_model, meta_train

    cfg = _run_config(args)
    train = replace(cfg.train, seed=args.seed, model=args.model or cfg.train.model)
    cfg = replace(cfg, train=train)
    model = init_model(cfg.model, train)
    sink = RunLog()
    out = Path(args.out)
    meta_train(episode_source(cfg, "train"), model, train, sink, checkpoint_path=out,
               meta={"run_config": cfg.to_dict()})
    sink.write_csv(runlog_path(out))
    log.info("trained %s for %d iterations -> %s", train.model, train.iterations, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .training import meta_test

    model, stored = _checkpoint(args.ckpt)
    cfg = _run_config(args, stored)
    if cfg.mode != model.cfg.mode:
        raise UsageError(f"config describes {cfg.mode} data but the checkpoint is a {model.cfg.mode} model")
    n = args.episodes or cfg.default_eval_episodes()
    episodes = draw_episodes(cfg, n, args.seed, "test")
    table = meta_test(episodes, model, seed=args.seed)
    _write_json(args.out, {**table.to_dict(), "episodes": n, "seed": args.seed, "model": model.cfg.model})
    Path(args.out).with_suffix(".csv").write_text(table.to_csv())
    print(f"{table.average.name}: {table.average.mean:.4f} +- {table.average.ci95:.4f}")
    return EXIT_OK


def _curve_grid(lo: float, hi: float, n: int, context_x: np.ndarray):
    """``n`` sorted inputs: a uniform grid with the nearest free node moved onto each context input."""
    grid = np.linspace(lo, hi, n)
    is_ctx = np.zeros(n, dtype=bool)
    for cx in context_x:
        free = np.flatnonzero(~is_ctx)
        if free.size == 0:
            break
        j = free[np.argmin(np.abs(grid[free] - cx))]
        grid[j], is_ctx[j] = cx, True
    order = np.argsort(grid, kind="stable")
    return grid[order], is_ctx[order]


def cmd_predict_curve(args) -> int:
    from .training import predict_episode

    if args.grid_n < 1 or not args.grid_min < args.grid_max:
        raise UsageError("need grid-n >= 1 and grid-min < grid-max")
    model, stored = _checkpoint(args.ckpt)
    cfg = _run_config(args, stored)
    if model.cfg.mode != REGRESSION or cfg.mode != REGRESSION:
        raise UsageError("predict-curve needs a regression checkpoint and GP config")
    ep = episode_source(cfg)(np.random.default_rng(args.seed))
    tasks, flags = [], []
    for t in ep.tasks:
        xs, is_ctx = _curve_grid(args.grid_min, args.grid_max, args.grid_n, t.context_x[:, 0])
        tasks.append(t.__class__(t.task_index, t.context_x, t.context_y, xs[:, None].astype(t.context_x.dtype),
                                 np.zeros(args.grid_n), is_ctx))
        flags.append(is_ctx)
    pred = predict_episode(model, Episode(tasks, REGRESSION), np.random.default_rng(args.seed))
    lines = ["x,mean,std,is_context,task"]
    for t, tp, is_ctx in zip(tasks, pred.tasks, flags):
        for x, mu, sd, c in zip(t.target_x[:, 0], tp.mixture_mean(), tp.mixture_std(), is_ctx):
            lines.append(f"{float(x)!r},{float(mu)!r},{float(sd)!r},{int(c)},{t.task_index}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_prop_test(args) -> int:
    from .eval import GRADCHECK_COMPONENTS, exchangeability_check, finite_diff_gradcheck, marginalization_check

    model, stored = _checkpoint(args.ckpt)
    if args.check == "gradcheck":
        reports = [finite_diff_gradcheck(c, mode=model.cfg.mode, seed=args.seed) for c in GRADCHECK_COMPONENTS]
    else:
        cfg = _run_config(args, stored)
        episodes = draw_episodes(cfg, args.episodes, args.seed, "test")
        check = exchangeability_check if args.check == "exchangeability" else marginalization_check
        reports = [check(model, ep, seed=args.seed + i, trials=args.trials, episode_id=i)
                   for i, ep in enumerate(episodes)]
    ok = all(r["pass"] for r in reports)
    _write_json(args.out, {"check": args.check, "pass": ok,
                           "max_rel_err": max(r["max_rel_err"] for r in reports), "reports": reports})
    print(f"{args.check}: {'PASS' if ok else 'FAIL'} ({len(reports)} reports)")
    return EXIT_OK if ok else EXIT_FAIL


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hnp", description="Heterogeneous neural processes: data, training, evaluation, checks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="dump sampled episodes as JSON")
    p.add_argument("--kind", choices=("gp", "synthetic"), required=True, help="episode generator")
    p.add_argument("--config", help="run config file (key = value lines)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--count", type=int, default=1, help="number of episodes")
    p.add_argument("--split", choices=("train", "test"), default="train", help="category split for classification")
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="meta-train a model; writes a checkpoint and a RunLog CSV beside it")
    p.add_argument("--model", choices=("hnp", "cnp", "np"), help="model variant (default: from config)")
    p.add_argument("--config", help="run config file")
    p.add_argument("--seed", type=int, default=0, help="seed for init, episodes and MC draws")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="meta-test a checkpoint; writes metrics JSON and CSV")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--config", help="run config file (default: the one stored in the checkpoint)")
    p.add_argument("--episodes", type=int, default=0, help="episode count (default 1000 GP / 600 classification)")
    p.add_argument("--seed", type=int, default=0, help="seed for episodes and MC draws")
    p.add_argument("--out", required=True, help="metrics JSON path; the CSV goes beside it")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict-curve", help="export predictive mean and std on a grid for every task")
    p.add_argument("--ckpt", required=True, help="regression checkpoint path")
    p.add_argument("--config", help="run config file (default: stored in the checkpoint)")
    p.add_argument("--seed", type=int, default=0, help="seed for the episode and MC draws")
    p.add_argument("--grid-min", type=float, default=-4.0, help="grid start")
    p.add_argument("--grid-max", type=float, default=4.0, help="grid end")
    p.add_argument("--grid-n", type=int, default=200, help="grid points per task")
    p.add_argument("--out", required=True, help="CSV path (x,mean,std,is_context,task)")
    p.set_defaults(func=cmd_predict_curve)

    p = sub.add_parser("prop-test", help="run a consistency or gradient check; exit 2 on FAIL")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--check", choices=("exchangeability", "marginalization", "gradcheck"), required=True)
    p.add_argument("--config", help="run config file (default: stored in the checkpoint)")
    p.add_argument("--episodes", type=int, default=50, help="episodes for consistency checks")
    p.add_argument("--trials", type=int, default=20, help="permutations / deletions per episode")
    p.add_argument("--seed", type=int, default=0, help="seed pinning episodes and latent draws")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_prop_test)
    return parser


def _configure_logging():
    level = os.environ.get("HNP_LOG")
    if level is None:
        logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return
    if level.lower() not in LOG_LEVELS:
        raise UsageError(f"HNP_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level.lower()], format="%(levelname)s %(name)s: %(message)s")


def run_command(argv) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (UsageError, ConfigFileError, CheckpointError, FeatureBankError, FileNotFoundError) as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
