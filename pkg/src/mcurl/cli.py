"""Command line entry point: ``mcurl {train,sweep,plot,eval}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mcurl.config import ConfigError, RunConfig, dump_config, load_config, override, parse_config
from mcurl.plot import plot_runs
from mcurl.trainer import NonFiniteLossError, Trainer, format_value, load_checkpoint

log = logging.getLogger("mcurl")

OUTPUT_ROOT_ENV = "MCURL_OUTPUT_ROOT"
SWEEP_AXES = {
    "mask_prob": "train.mask_prob",
    "seq_len": "train.seq_len",
    "num_layers": "train.num_layers",
    "variant": "train.variant",
}
SUMMARY_COLUMNS = ("axis", "value", "seed", "run_id", "status", "final_return")


@dataclass
class SweepSpec:
    axis: str
    values: list
    base: RunConfig = field(default_factory=RunConfig)
    seeds: list = field(default_factory=lambda: [0])

    def validate(self) -> None:
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {sorted(SWEEP_AXES)}, got {self.axis!r}")
        if not self.values:
            raise ConfigError("sweep.values must be non-empty")
        if not self.seeds:
            raise ConfigError("sweep.seeds must be non-empty")

    def cells(self) -> list[tuple[object, int, RunConfig]]:
        sweep_dir = str(self.base.run_dir)
        out = []
        for value in self.values:
            for seed in self.seeds:
                cfg = override(self.base, {
                    SWEEP_AXES[self.axis]: value,
                    "train.seed": seed,
                    "output_dir": sweep_dir,
                    "run_id": f"{self.axis}={value}-seed{seed}",
                })
                out.append((value, seed, cfg))
        return out


def load_sweep(path) -> SweepSpec:
    with open(path) as fh:
        data = json.load(fh)
    unknown = set(data) - {"axis", "values", "seeds", "base"}
    if unknown:
        raise ConfigError(f"sweep.{sorted(unknown)[0]}: unknown key")
    spec = SweepSpec(data.get("axis"), list(data.get("values", [])),
                     parse_config(data.get("base", {})), list(data.get("seeds", [0])))
    spec.validate()
    return spec


def cmd_train(config: RunConfig) -> int:
    """Run one training job into ``output_dir/run_id``; returns a process exit code."""
    run_dir = config.run_dir
    if run_dir.exists() and any(run_dir.iterdir()):
        log.error("run directory %s already exists and is not empty", run_dir)
        return 1
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, run_dir / "config.json")
    trainer = Trainer(config.env, config.train, run_dir, config.log_interval, config.checkpoint_interval)
    try:
        for _ in trainer.run():
            pass
    except NonFiniteLossError as err:
        log.error("aborted: %s (diagnostics in %s)", err, run_dir / "diagnostics.json")
        return 2
    returns = trainer.final_eval_returns
    log.info("finished %s: final eval mean return %.3f", run_dir, float(np.mean(returns)) if returns else float("nan"))
    return 0


def _run_cell(config: RunConfig) -> tuple[int, float | None]:
    try:
        code = cmd_train(config)
    except Exception:  # a failing cell must not stop the sweep
        log.exception("sweep cell %s failed", config.run_id)
        return 1, None
    if code != 0:
        return code, None
    with open(config.run_dir / "eval.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    last_step = rows[-1]["env_step"] if rows else None
    final = [float(r["return"]) for r in rows if r["env_step"] == last_step]
    return 0, float(np.mean(final)) if final else None


def cmd_sweep(spec: SweepSpec, jobs: int = 1) -> int:
    spec.validate()
    cells = spec.cells()
    sweep_dir = spec.base.run_dir
    sweep_dir.mkdir(parents=True, exist_ok=True)
    configs = [cfg for _, _, cfg in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, configs))
    else:
        results = [_run_cell(cfg) for cfg in configs]
    failed = 0
    with open(sweep_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for (value, seed, cfg), (code, final) in zip(cells, results):
            failed += code != 0
            writer.writerow((spec.axis, value, seed, cfg.run_id, "ok" if code == 0 else "failed",
                             "" if final is None else format_value(final)))
    return 1 if failed else 0


def cmd_plot(run_dirs, out_path, columns=("episode_return",), window: int = 10) -> int:
    try:
        plot_runs(run_dirs, out_path, columns, window)
    except (FileNotFoundError, ValueError, KeyError) as err:
        log.error("plot failed: %s", err)
        return 1
    return 0


def cmd_eval(checkpoint, episodes: int = 10, seed: int | None = None) -> tuple[int, list[float]]:
    state = load_checkpoint(checkpoint)
    config = parse_config({"env": state["env_config"], "train": state["train_config"]})
    trainer = Trainer(config.env, config.train)
    trainer.learner.load_state_dict(state["learner"])
    if seed is not None:
        trainer.eval_rng = np.random.default_rng(seed)
    returns = trainer.evaluate(episodes)
    print(json.dumps({"mean_return": float(np.mean(returns)), "returns": returns}))
    return 0, returns


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    changes = {}
    for flag, key in (("seed", "train.seed"), ("variant", "train.variant"),
                      ("mask_prob", "train.mask_prob"), ("seq_len", "train.seq_len"),
                      ("layers", "train.num_layers"), ("run_id", "run_id")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    if args.out is not None:
        changes["output_dir"] = args.out
    elif os.environ.get(OUTPUT_ROOT_ENV):
        changes["output_dir"] = os.environ[OUTPUT_ROOT_ENV]
    return override(config, changes) if changes else config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcurl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", help="JSON run config (defaults apply to missing keys)")
        p.add_argument("--out", help=f"output root (overrides ${OUTPUT_ROOT_ENV} and the config)")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=("mcurl", "seq_curl", "sym_curl", "plain_sac"))
        p.add_argument("--mask-prob", dest="mask_prob", type=float)
        p.add_argument("--seq-len", dest="seq_len", type=int)
        p.add_argument("--layers", type=int)
        p.add_argument("--run-id", dest="run_id")

    p_train = sub.add_parser("train", help="train one run")
    run_flags(p_train)

    p_sweep = sub.add_parser("sweep", help="run an ablation grid")
    run_flags(p_sweep)
    p_sweep.add_argument("--spec", help="JSON sweep spec {axis, values, seeds, base}")
    p_sweep.add_argument("--axis", choices=sorted(SWEEP_AXES))
    p_sweep.add_argument("--values", nargs="+")
    p_sweep.add_argument("--seeds", nargs="+", type=int)
    p_sweep.add_argument("--jobs", type=int, default=1, help="cells to run concurrently")

    p_plot = sub.add_parser("plot", help="plot learning curves to SVG")
    p_plot.add_argument("run_dirs", nargs="+")
    p_plot.add_argument("--out", required=True)
    p_plot.add_argument("--columns", nargs="+", default=["episode_return"])
    p_plot.add_argument("--smooth", type=int, default=10)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint with the deterministic policy")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--episodes", type=int, default=10)
    p_eval.add_argument("--seed", type=int)
    return parser


def _parse_value(axis: str, raw: str):
    if axis == "variant":
        return raw
    return int(raw) if axis in ("seq_len", "num_layers") else float(raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "plot":
            return cmd_plot(args.run_dirs, args.out, tuple(args.columns), args.smooth)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.episodes, args.seed)[0]
        if args.command == "sweep" and args.spec:
            spec = load_sweep(args.spec)
            spec.base = _apply_overrides(spec.base, args)
        else:
            config = load_config(args.config) if args.config else parse_config({})
            config = _apply_overrides(config, args)
            if args.command == "train":
                return cmd_train(config)
            if not args.axis or not args.values:
                raise ConfigError("sweep needs --spec or both --axis and --values")
            spec = SweepSpec(args.axis, [_parse_value(args.axis, v) for v in args.values], config,
                             args.seeds or [config.train.seed])
        return cmd_sweep(spec, args.jobs)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
