"""Command-line entry point: train, sweep, eval and compare.

Exit codes: 0 success, 1 training failure, 2 configuration error, 3 artifact
(checkpoint or model) error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, curriculum, neural, report
from .baselines import POLICY_NAMES, make_baseline
from .config import ConfigError, RunConfig, config_to_dict, load_config
from .env import UWSNEnv
from .marl import LOG_FIELDS, NonFiniteLoss, QPolicy, evaluate, train
from .metrics import REPORT_FIELDS, aggregate_reports

log = logging.getLogger("icuwsn")

EXIT_OK, EXIT_TRAIN, EXIT_CONFIG, EXIT_ARTIFACT = 0, 1, 2, 3
COMPARE_METRICS = ("utility", "throughput", "fairness", "delivery_ratio", "spatial_reuse")


class ArtifactError(RuntimeError):
    pass


def _manifest(cfg: RunConfig, command: str, artifacts: dict, started: float, extra=None) -> dict:
    data = config_to_dict(cfg)
    if cfg.deployment_file:
        data["deployment_file"] = str(Path(cfg.deployment_file).resolve())
    return {
        "command": command,
        "tool_version": __version__,
        "config": data,
        "seeds": {"run": cfg.seed, "evaluation": eval_seeds(cfg.seed, cfg.eval.episodes)[:1]},
        "artifacts": artifacts,
        "wall_clock_s": round(time.time() - started, 3),
        **(extra or {}),
    }


def eval_seeds(seed: int, n: int) -> list[list[int]]:
    """Episode seeds shared by every policy evaluated in a run."""
    return [[seed, 9, k] for k in range(n)]


def _rollouts(cfg: RunConfig, policy, n: int, workers: int) -> list[dict]:
    env_cfg = dataclasses.replace(cfg.scenario, malfunction_mode=cfg.eval.malfunction_mode)
    seeds = [tuple(s) for s in eval_seeds(cfg.seed, n)]
    if workers <= 1 or n < 2:
        return evaluate(UWSNEnv(env_cfg), policy, seeds, cfg.eval.epsilon)
    chunks = [seeds[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_rollout_chunk, [(env_cfg, policy, c, cfg.eval.epsilon)
                                               for c in chunks]))
    by_seed = {}
    for chunk, reps in zip(chunks, parts):
        by_seed.update(zip(chunk, reps))
    return [by_seed[s] for s in seeds]


def _rollout_chunk(args):
    env_cfg, policy, seeds, eps = args
    return evaluate(UWSNEnv(env_cfg), policy, seeds, eps)


def _load_policy(cfg: RunConfig, name: str, model: str | None):
    if name != "icrl":
        return make_baseline(name)
    if not model:
        raise ConfigError("--model is required for the icrl policy")
    env = UWSNEnv(cfg.scenario)
    try:
        params, _ = neural.load_checkpoint(model, env.obs_dim, env.n_actions)
    except neural.CheckpointError as exc:
        raise ArtifactError(str(exc)) from None
    return QPolicy(params)


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    started = time.time()
    trainer = cfg.trainer
    if args.episodes:
        trainer = dataclasses.replace(trainer, episodes=args.episodes)
        cfg = dataclasses.replace(cfg, trainer=trainer)
    hook = None
    if cfg.curriculum.enabled:
        if cfg.curriculum.u_th is None:
            raise ConfigError("curriculum.u_th is required when curriculum.enabled is true")
        hook = curriculum.CurriculumState(cfg.curriculum.u_th, cfg.curriculum.gamma_lf,
                                          epsilon_max=cfg.curriculum.epsilon_max)
    result = train(cfg.scenario, trainer, hook)
    report.write_csv(out / "training_log.csv", result.log, LOG_FIELDS)
    meta = {"selected_episode": result.selected_episode, "seed": cfg.seed}
    neural.save_checkpoint(out / "model", result.params, meta)
    neural.save_checkpoint(out / "model_final", result.final_params,
                           {"episode": trainer.episodes, "seed": cfg.seed})
    report.training_curve(out / "training_curve.png", result.log)
    artifacts = {"training_log": "training_log.csv", "model": "model", "final_model": "model_final",
                 "figure": "training_curve.png"}
    report.write_json(out / "manifest.json", _manifest(cfg, "train", artifacts, started,
                                                       {"selected_episode": result.selected_episode}))
    print(f"trained {trainer.episodes} episodes; selected snapshot at episode "
          f"{result.selected_episode}; outputs in {out}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out: Path, args) -> int:
    started = time.time()
    sw = cfg.sweep
    trainer = cfg.trainer
    if args.episodes:
        trainer = dataclasses.replace(trainer, episodes=args.episodes)
        cfg = dataclasses.replace(cfg, trainer=trainer)
    u_min, u_max = sw.u_min, sw.u_max
    if u_min is None or u_max is None:
        lo, hi = curriculum.calibrate_bounds(cfg.scenario, trainer, sw.n_eva)
        u_min = lo if u_min is None else u_min
        u_max = hi if u_max is None else u_max
    try:
        grid = curriculum.GridSpec.from_bounds(u_min, u_max, sw.steps, sw.factors)
    except ValueError as exc:
        raise ConfigError(f"sweep: {exc}") from None
    best, cells = curriculum.grid_search(grid, cfg.scenario, trainer, sw.n_eva,
                                         cfg.curriculum.epsilon_max, args.workers)
    rows = [c.row() for c in cells]
    report.write_csv(out / "sweep.csv", rows, curriculum.SWEEP_FIELDS)
    report.sweep_plot(out / "sweep.png", [r for r in rows if r["status"] == "ok"])
    artifacts = {"sweep": "sweep.csv", "figure": "sweep.png"}
    extra = {"bounds": {"u_min": u_min, "u_max": u_max}, "best": None}
    if best is not None:
        neural.save_checkpoint(out / "best_model", best.params,
                               {"u_th": best.u_th, "gamma_lf": best.gamma_lf, "seed": cfg.seed})
        artifacts["best_model"] = "best_model"
        extra["best"] = {"u_th": best.u_th, "gamma_lf": best.gamma_lf}
    report.write_json(out / "manifest.json", _manifest(cfg, "sweep", artifacts, started, extra))
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"sweep of {len(rows)} cells ({failed} failed); outputs in {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    started = time.time()
    n = args.episodes or cfg.eval.episodes
    policy = _load_policy(cfg, args.policy, args.model)
    reports = _rollouts(cfg, policy, n, args.workers or 1)
    rows = [{"episode": k + 1, **r} for k, r in enumerate(reports)]
    report.write_csv(out / "episodes.csv", rows, ("episode",) + REPORT_FIELDS)
    agg = aggregate_reports(reports)
    report.write_json(out / "aggregate.json", {"policy": args.policy, "episodes": n, **agg})
    artifacts = {"episodes": "episodes.csv", "aggregate": "aggregate.json"}
    report.write_json(out / "manifest.json", _manifest(
        cfg, "eval", artifacts, started,
        {"policy": args.policy, "model": str(Path(args.model).resolve()) if args.model else None}))
    print(" ".join(f"{k}={report.fmt(float(agg[k]))}" for k in COMPARE_METRICS))
    return EXIT_OK


def cmd_compare(cfg: RunConfig, out: Path, args) -> int:
    started = time.time()
    n = args.episodes or cfg.eval.episodes
    rows = []
    for name in POLICY_NAMES:
        policy = _load_policy(cfg, name, args.model)
        agg = aggregate_reports(_rollouts(cfg, policy, n, args.workers or 1))
        rows.append({"policy": name, **{m: agg[m] for m in COMPARE_METRICS}})
    report.write_csv(out / "compare.csv", rows, ("policy",) + COMPARE_METRICS)
    report.comparison_bars(out / "compare.png", rows)
    artifacts = {"compare": "compare.csv", "figure": "compare.png"}
    report.write_json(out / "manifest.json", _manifest(
        cfg, "compare", artifacts, started,
        {"policies": list(POLICY_NAMES), "model": str(Path(args.model).resolve()),
         "episode_seeds": eval_seeds(cfg.seed, n)}))
    print(f"compared {len(rows)} policies over {n} episodes; outputs in {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "eval": cmd_eval, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icuwsn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="YAML config or a previous run's manifest.json")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--workers", type=int,
                       help=f"worker processes (default: ${curriculum.WORKERS_ENV} or 1)")
        s.add_argument("--episodes", type=int, help="training episodes (train, sweep) or "
                                                     "evaluation episodes (eval, compare)")
        s.add_argument("--model", help="checkpoint directory for the learned policy")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            s.add_argument("--policy", choices=POLICY_NAMES, default="icrl")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is None:
        args.workers = curriculum.default_workers()
    if args.episodes is not None and args.episodes < 1:
        print("error: --episodes must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "compare" and not args.model:
            raise ConfigError("--model is required for compare")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NonFiniteLoss as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
