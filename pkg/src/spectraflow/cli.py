"""``spectraflow`` command line.

Exit codes: 0 success, 1 failed checks, 2 bad usage, 3 invalid config,
4 training divergence, 5 unreadable or incompatible input files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import config as cfgmod
from .checkpoint import CheckpointError
from .config import Config, ConfigError
from .nn import IncompatibleStateError
from .synth import CORRUPTIONS, Benchmark, DatasetError, corrupt, export_dataset, import_dataset, make_benchmark

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INPUT = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spectraflow", description="Two-stage segmentation pretraining toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", type=Path, help="config file ([data] [stage1] [stage2] [ablation])")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
        if out:
            sp.add_argument("--out", type=Path, required=True, help="run directory")

    sp = sub.add_parser("gen-data", help="generate and export the synthetic benchmark")
    common(sp)

    for name, helptext in (("pretrain", "run Stage-1 pretraining"), ("finetune", "run Stage-2 finetuning")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--data", type=Path, help="dataset directory from gen-data (default: regenerate)")
        sp.add_argument("--seed", type=int, help="training seed (default: first ablation seed)")
        if name == "finetune":
            sp.add_argument("--init", type=Path, help="Stage-1 checkpoint for the encoder")

    for name in ("evaluate", "corrupt-eval"):
        sp = sub.add_parser(name, help="evaluate a Stage-2 checkpoint" + (" on corrupted images" if name != "evaluate" else ""))
        common(sp, out=False)
        sp.add_argument("--checkpoint", type=Path, required=True)
        sp.add_argument("--split", choices=("train", "val"), default="val")
        sp.add_argument("--data", type=Path)
        sp.add_argument("--out", type=Path, help="also write records to this directory")
        if name == "corrupt-eval":
            sp.add_argument("--kind", choices=sorted(CORRUPTIONS), required=True)
            sp.add_argument("--magnitude", type=float, required=True)
            sp.add_argument("--noise-seed", type=int, default=0)

    sp = sub.add_parser("ablate", help="run an ablation suite and write a CSV")
    common(sp)
    from .pipeline import SUITES

    sp.add_argument("--suite", choices=SUITES, required=True)

    sp = sub.add_parser("gradcheck", help="run the gradient-check battery")
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--seed", type=int, default=0)
    return p


def _load_config(args) -> Config:
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else Config()
    return cfgmod.apply_overrides(cfg, getattr(args, "set", []))


def _benchmark(cfg: Config, data_dir: Path | None) -> Benchmark:
    if data_dir is None:
        d = cfg.data
        return make_benchmark(d.seed, d.n_train, d.n_val, d.image_size, d.difficulty)
    samples, meta = import_dataset(data_dir)
    return Benchmark([s for s in samples if s.split == "train"], [s for s in samples if s.split == "val"], meta)


def _run_dir(path: Path, cfg: Config) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(cfg, path / "config.ini")
    return path


def _write_jsonl(path: Path, rows) -> None:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def _seed(args, cfg: Config) -> int:
    return args.seed if args.seed is not None else cfg.ablation.seeds[0]


def cmd_gen_data(args, cfg: Config) -> int:
    out = _run_dir(args.out, cfg)
    bench = _benchmark(cfg, None)
    export_dataset(bench.train + bench.val, out / "data", bench.meta)
    print(f"wrote {len(bench.train)} train / {len(bench.val)} val samples to {out / 'data'}")
    return EXIT_OK


def cmd_pretrain(args, cfg: Config) -> int:
    from .pipeline import pretrain_stage1, thread_scope

    out = _run_dir(args.out, cfg)
    bench = _benchmark(cfg, args.data)
    with thread_scope(cfg.ablation.deterministic):
        res = pretrain_stage1(cfg, bench, _seed(args, cfg))
    ckpt.save(out / "stage1.sfck", res.state())
    _write_jsonl(out / "stage1_log.jsonl", res.history)
    print(f"stage1 done: dispersion={res.dispersion:.4f}; checkpoint {out / 'stage1.sfck'}")
    return EXIT_OK


def _records_out(records, summary: dict, out: Path | None, name: str) -> None:
    rows = [r.record() for r in records] + [dict(summary, sample_id="aggregate")]
    for row in rows:
        print(json.dumps(row))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out / name, rows)


def cmd_finetune(args, cfg: Config) -> int:
    from .pipeline import finetune_stage2, thread_scope

    init = ckpt.load(args.init) if args.init else None
    out = _run_dir(args.out, cfg)
    bench = _benchmark(cfg, args.data)
    with thread_scope(cfg.ablation.deterministic):
        res = finetune_stage2(cfg, bench, _seed(args, cfg), init)
    ckpt.save(out / "stage2.sfck", res.state())
    _write_jsonl(out / "stage2_log.jsonl", res.history)
    _write_jsonl(out / "metrics.jsonl", [r.record() for r in res.records] + [dict(res.metrics, sample_id="aggregate")])
    print(f"stage2 done: best val dice {res.best_val_dice:.4f} at epoch {res.best_epoch}; checkpoint {out / 'stage2.sfck'}")
    return EXIT_OK


def _evaluate(args, cfg: Config, transform=None, name="metrics.jsonl") -> int:
    from .pipeline import Normalizer, evaluate, model_from_state
    from .seg import aggregate

    state = ckpt.load(args.checkpoint)
    if "norm.mean" not in state:
        raise CheckpointError(f"{args.checkpoint} has no normalization statistics; is it a Stage-2 checkpoint?")
    model = model_from_state(state)
    bench = _benchmark(cfg, args.data)
    samples = bench.val if args.split == "val" else bench.train
    if transform is not None:
        samples = [transform(s) for s in samples]
    records = evaluate(model, samples, Normalizer.from_state(state))
    _records_out(records, aggregate(records), args.out, name)
    return EXIT_OK


def cmd_evaluate(args, cfg: Config) -> int:
    return _evaluate(args, cfg)


def cmd_corrupt_eval(args, cfg: Config) -> int:
    lo, hi, _ = CORRUPTIONS[args.kind]
    if not lo <= args.magnitude <= hi:
        raise UsageError(f"--magnitude for {args.kind} must lie in [{lo}, {hi}]")
    return _evaluate(args, cfg, lambda s: corrupt(s, args.kind, args.magnitude, args.noise_seed), f"corrupt_{args.kind}_{args.magnitude:g}.jsonl")


def cmd_ablate(args, cfg: Config) -> int:
    from .pipeline import format_csv, run_ablation

    out = _run_dir(args.out, cfg)
    rows = run_ablation(args.suite, cfg)
    path = out / f"{args.suite}.csv"
    path.write_text(format_csv(rows))
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: Config | None) -> int:
    from .checks import run_battery

    results = run_battery(tol=args.tol, seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<40s} max rel err {r.max_rel_err:.2e}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "corrupt-eval": cmd_corrupt_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    from .pipeline import DivergenceError

    try:
        cfg = None if args.command == "gradcheck" else _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, DatasetError, IncompatibleStateError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
