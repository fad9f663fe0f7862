"""Command line: ``cmpe {simulate,train,sample,evaluate,benchmark}``.

Exit codes: 0 success, 2 configuration error (including refusal to
overwrite), 3 training divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings

from . import harness
from .config import ExperimentConfig
from .errors import ConfigError, TrainingDivergenceError

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("cmpe")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="experiment (or suite) JSON file")
    p.add_argument("--seed", type=int, help="overrides the seed in the config")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmpe", description="Consistency-model posterior estimation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a fixed training set")
    _common(p)
    p.add_argument("--task")
    p.add_argument("--budget", type=int)

    p = sub.add_parser("train", help="train one model from a config")
    _common(p)
    p.add_argument("--data", help="dataset CSV written by 'simulate' (default: simulate in memory)")

    p = sub.add_parser("sample", help="draw posterior samples for one observation")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--x-obs", required=True, help="comma-separated values or a CSV file")
    p.add_argument("--k-steps", type=int, help="network passes (default: first entry of eval.K_steps_list, else 10)")
    p.add_argument("--n-draws", type=int, help="default: eval.S_draws, else 4000")

    p = sub.add_parser("evaluate", help="metrics over held-out instances")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", help="reference posterior cache directory")

    p = sub.add_parser("benchmark", help="simulate/train/sample/evaluate over a grid of cells")
    _common(p)
    p.add_argument("--dry-run", action="store_true", help="list planned cells and exit")
    return parser


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    return ExperimentConfig.load(args.config, args.seed)


def _simulate(args) -> None:
    if args.config:
        cfg = _load_config(args)
        task, budget, seed = cfg.task, cfg.budget, cfg.seed
    else:
        if args.task is None or args.budget is None or args.seed is None:
            raise ConfigError("simulate needs --config or all of --task, --budget, --seed")
        task, budget, seed = args.task, args.budget, args.seed
    try:
        csv_path, _ = harness.run_simulate(task, budget, seed, args.out, args.force)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(csv_path)


def _train(args) -> None:
    out = harness.run_train(_load_config(args), args.out, args.data, args.force)
    print(f"{out.checkpoint} ({out.result.iterations} iterations, {out.result.train_s:.1f} s)")


def _sample(args) -> None:
    model = harness.load_estimator(args.checkpoint)
    k_steps, n_draws, seed = args.k_steps, args.n_draws, args.seed
    if args.config:
        cfg = _load_config(args)
        k_steps = k_steps or cfg.eval["K_steps_list"][0]
        n_draws = n_draws or cfg.eval["S_draws"]
        seed = cfg.seed
    if seed is None:
        raise ConfigError("a seed is mandatory (--seed or config)")
    k_steps, n_draws = k_steps or 10, n_draws or 4000
    x_obs = harness.parse_x_obs(args.x_obs, model.task)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        _, ms = harness.run_sample(args.checkpoint, x_obs, k_steps, n_draws, seed, args.out, args.force)
    for w in caught:
        log.warning("%s", w.message)
    print(f"{n_draws} draws with K={k_steps}: {ms:.3f} ms per 1000 draws")


def _evaluate(args) -> None:
    reports = harness.run_evaluate(_load_config(args), args.checkpoint, args.out, args.cache, args.force)
    for rep in reports:
        agg = rep.aggregates()
        print(f"K={rep.k_steps}: c2st {agg['c2st']['mean']:.4f} ± {agg['c2st']['se']:.4f}, "
              f"mmd {agg['mmd']['mean']:.5f}, rmse {agg['rmse']['mean']:.4f}")


def _benchmark(args) -> None:
    if not args.config:
        raise ConfigError("--config is required for this command")
    try:
        raw = json.loads(open(args.config, encoding="utf-8").read())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read suite {args.config}: {exc}") from exc
    suite = harness.load_suite(raw, args.seed)
    cells = harness.run_benchmark(suite, args.out, dry_run=args.dry_run, force=args.force)
    if args.dry_run:
        for c in cells:
            print(f"{c.task}\t{c.model_kind}\tM={c.budget}\tK={c.k_steps}")
        print(f"{len(cells)} cells")
    else:
        print(f"{len(cells)} cells -> {args.out}/results.csv")


COMMANDS = {"simulate": _simulate, "train": _train, "sample": _sample, "evaluate": _evaluate, "benchmark": _benchmark}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        harness.n_workers()
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
