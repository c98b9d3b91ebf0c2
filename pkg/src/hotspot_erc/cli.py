"""Command-line harness: data generation, training, evaluation and diagnostics."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import gradsuite
from .checkpoint import Checkpoint, CheckpointError
from .graph import build_graph
from .model import MODES
from .synthdata import SynthSpec, read_corpus, split, write_corpus, generate
from .train import RunConfig, ablation_ladder, check_dims, evaluate, load_model, route_usage, train, usage_report

SPLITS = ("train", "dev", "test")


class CliError(Exception):
    pass


def _read_json(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {path}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _run_config(args) -> RunConfig:
    d = _read_json(args.config)
    # relative data paths resolve against the config file's directory
    base = Path(args.config).resolve().parent
    for key in ("corpus", "synth_spec"):
        if d.get(key) and not Path(d[key]).is_absolute():
            d[key] = str(base / d[key])
    for key in ("ablation", "seed", "epochs", "output_dir", "dialogues_per_step"):
        value = getattr(args, key, None)
        if value is not None:
            d["mode" if key == "ablation" else key] = value
    try:
        return RunConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{args.config}: {exc}") from None


def cmd_gen_data(args) -> int:
    spec = SynthSpec.from_dict(_read_json(args.spec))
    samples = generate(spec)
    write_corpus(samples, args.out, spec)
    _emit({"out": args.out, "dialogues": len(samples), "utterances": int(sum(s.length for s in samples))})
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    result = train(run)
    if args.graph_dump:
        sample = result.splits[0][0]
        Path(args.graph_dump).write_text(
            build_graph(sample.length, result.config.modalities, run.window_past, run.window_future, run.cross_modal).dump(),
            encoding="utf-8",
        )
    _emit({"mode": run.mode, "best_epoch": result.checkpoint.epoch, "dev": result.checkpoint.dev_metrics, "output_dir": run.output_dir})
    return 0


def _load_split(args, run: RunConfig):
    corpus = read_corpus(args.data)
    parts = dict(zip(SPLITS, split(corpus.samples, run.split, run.seed)))
    return parts[args.split] if args.split != "all" else corpus.samples


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    run = RunConfig.from_dict(ckpt.config)
    report = evaluate(ckpt, _load_split(args, run))
    _emit(report.to_dict())
    return 0


def cmd_route_stats(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    params, config, run = load_model(ckpt)
    if not config.uses_moa:
        raise CliError(f"checkpoint mode '{config.mode}' has no routers")
    samples = _load_split(args, run)
    check_dims(samples, config)
    _emit(usage_report(route_usage(samples, params, config)))
    return 0


def cmd_gradcheck(args) -> int:
    names = gradsuite.SUITES if args.module == "all" else (args.module,)
    results = gradsuite.run_all(args.seeds, names)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<11} seeds={r.seeds} tol={r.tol:.0e} max_rel_error={r.worst:.3e} ({r.seconds:.1f}s)")
        for f in r.failures[:5]:
            print(f"    seed {f['seed']} {f['case']}: {f['rel_error']:.3e}")
    return 0 if all(r.passed for r in results) else 1


def cmd_ablation_ladder(args) -> int:
    run = _run_config(args)
    rows = ablation_ladder(run)
    if args.json:
        _emit(rows)
    else:
        print(f"{'mode':<10} {'acc':>8} {'w-F1':>8}")
        for row in rows:
            print(f"{row['mode']:<10} {100 * row['accuracy']:8.2f} {100 * row['weighted_f1']:8.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hotspot-erc", description="Hotspot-gated multimodal ERC harness")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True)
    p.add_argument("--ablation", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--dialogues-per-step", dest="dialogues_per_step", type=int)
    p.add_argument("--graph-dump", dest="graph_dump", help="write the first training dialogue's typed edge list here")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "evaluate a checkpoint"), ("route-stats", cmd_route_stats, "expert usage per router")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=SPLITS + ("all",), default="test" if name == "eval" else "all")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--module", choices=("all",) + gradsuite.SUITES, default="all")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablation-ladder", help="train baseline, hgf and hgf+moa on one corpus and seed")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ablation_ladder)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage; --help is the only clean exit
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
