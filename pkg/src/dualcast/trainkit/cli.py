"""Command-line entry point: generate, train, grid-search, evaluate,
export-embeddings and bench-attention."""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from ..data import SyntheticConfig, generate_synthetic, write_dataset
from .bench import benchmark_attention, doubling_ratios, write_bench_csv
from .config import RunConfig, _parse_value, apply_overrides, load_run_config
from .export import export_embeddings
from .metrics import evaluate
from .search import staged_grid_search, training_runner
from .train import dump_json, prepare_from_config, restore_run, save_run, train

SPLITS = ("train", "val", "test")


def _run_config(args, extra):
    overrides = list(extra)
    if args.seed is not None:
        overrides.append(f"--seed={args.seed}")
    return load_run_config(args.config, overrides)


def cmd_generate(args, extra) -> int:
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    holidays = [dt.date.fromisoformat(d) for d in raw.pop("holidays", [])]
    known = {f.name for f in fields(SyntheticConfig)}
    for flag in extra:
        if not flag.startswith("--") or "=" not in flag:
            raise ValueError(f"override {flag!r} is not of the form --key=value")
        key, value = flag[2:].split("=", 1)
        if key not in known:
            raise ValueError(f"unknown synthetic field {key!r}")
        raw[key] = _parse_value(value)
    if args.seed is not None:
        raw["seed"] = args.seed
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown synthetic field(s): {sorted(unknown)}")
    for key in ("base_level", "daily_amplitude", "daily_phase_hours", "weekly_amplitude"):
        if key in raw:
            raw[key] = tuple(raw[key])
    cfg = SyntheticConfig(**raw)
    readings, incidents, graph, manifest = generate_synthetic(cfg)
    path = write_dataset(args.out, readings, graph, incidents, manifest, holidays)
    print(path)
    return 0


def cmd_train(args, extra) -> int:
    cfg = _run_config(args, extra)
    data = prepare_from_config(cfg)
    result = train(cfg, data)
    ckpt = save_run(result, cfg, data, cfg.output_dir)
    report, _, _ = evaluate(result.model, data.val, data.normalizer, data.calendar, data.interval_minutes)
    dump_json({"best_epoch": result.best_epoch, "val": report.to_dict()},
              os.path.join(cfg.output_dir, "train_metrics.json"))
    print(ckpt)
    return 0


def cmd_grid_search(args, extra) -> int:
    cfg = _run_config(args, extra)
    data = prepare_from_config(cfg)
    result = staged_grid_search(cfg, training_runner(data))
    os.makedirs(cfg.output_dir, exist_ok=True)
    result.write_csv(os.path.join(cfg.output_dir, "grid_trials.csv"))
    alpha, beta, gamma = result.best
    dump_json({"alpha": alpha, "beta": beta, "gamma": gamma}, os.path.join(cfg.output_dir, "grid_best.json"))
    print(json.dumps({"alpha": alpha, "beta": beta, "gamma": gamma}))
    return 0


def _checkpoint_data(args, extra):
    """Model and normaliser from the checkpoint; data paths from the stored run
    configuration unless a config file or overrides replace them."""
    model, normalizer, cfg = restore_run(args.checkpoint)
    if args.config:
        cfg = _run_config(args, extra)
    elif extra:
        cfg = RunConfig.from_dict(apply_overrides(cfg.to_dict(), list(extra)))
    return model, normalizer, prepare_from_config(cfg)


def cmd_evaluate(args, extra) -> int:
    model, normalizer, data = _checkpoint_data(args, extra)
    windows = getattr(data, args.split)
    report, pred, target = evaluate(model, windows, normalizer, data.calendar, data.interval_minutes)
    text = report.to_json()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    if args.predictions:
        np.savez(args.predictions, pred=pred, target=target, start_steps=windows.start_steps,
                 pattern_ids=windows.pattern_ids, incident=windows.incident)
    print(text)
    return 0


def cmd_export(args, extra) -> int:
    model, _, data = _checkpoint_data(args, extra)
    rows = export_embeddings(model, getattr(data, args.split), args.out)
    print(f"{rows} rows -> {args.out}")
    return 0


def cmd_bench(args, extra) -> int:
    if extra:
        raise ValueError(f"unexpected arguments {extra}")
    sizes = tuple(int(s) for s in args.sizes.split(","))
    rows = benchmark_attention(sizes, args.steps, args.d, args.reps, args.batch, args.levels, args.seed or 0)
    if args.out:
        write_bench_csv(rows, args.out)
    for r in rows:
        print(f"N={r.n_nodes:5d} {r.kernel:10s} {r.median_seconds * 1e3:10.3f} ms")
    for kernel in ("dense", "global", "rct_local", "sim_local"):
        print(kernel, "doubling ratios:", ", ".join(f"{x:.2f}" for x in doubling_ratios(rows, kernel)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualcast", description=__doc__)
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = parser.add_subparsers(dest="command", required=True)
    add = lambda name, **kw: sub.add_parser(name, parents=[shared], **kw)

    def common(p, config_help="run configuration JSON"):
        p.add_argument("--config", help=config_help)
        p.add_argument("--seed", type=int, help="overrides the config and the DUALCAST_SEED variable")

    p = add("generate", help="write a synthetic dataset")
    common(p, "synthetic data configuration JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = add("train", help="train one model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = add("grid-search", help="staged search over the loss weights")
    common(p)
    p.set_defaults(func=cmd_grid_search)

    for name, func, help_text in (("evaluate", cmd_evaluate, "metrics for a checkpoint"),
                                  ("export-embeddings", cmd_export, "write branch embeddings")):
        p = add(name, help=help_text)
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=SPLITS, default="test")
        if name == "evaluate":
            p.add_argument("--out", help="metrics JSON path")
            p.add_argument("--predictions", help="optional .npz with denormalised predictions and targets")
        else:
            p.add_argument("--out", required=True, help="embeddings CSV path")
        p.set_defaults(func=func)

    p = add("bench-attention", help="time the attention kernels")
    p.add_argument("--sizes", default="128,256,512")
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except (ValueError, OSError) as exc:
        print(f"dualcast {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
