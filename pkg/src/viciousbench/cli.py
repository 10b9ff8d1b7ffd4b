"""``viciousbench`` command line.

Exit codes: 0 success, 1 internal error, 2 bad arguments or config,
3 dataset, 4 model/checkpoint, 5 numerics, 6 training diverged,
7 evaluation, 8 run directory/report, 9 some seeds failed.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__, benchcli
from .errors import BenchError, PartialFailure, RunExistsError
from .jointtrain import evaluate

log = logging.getLogger("viciousbench")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _common(p: argparse.ArgumentParser, needs_config: bool) -> None:
    p.add_argument("--config", required=needs_config, help="YAML/JSON config file or preset name")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing results")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viciousbench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and evaluate every seed of a config")
    _common(p, True)

    for name, text in (("evaluate", "re-evaluate a finished run on the test split"),
                       ("risk", "reconstruction risk and statistics of a finished run"),
                       ("defend", "sweep output defenses over a finished run"),
                       ("detect", "audit a finished run's classifier"),
                       ("entropy", "output-entropy probe of a finished run")):
        p = sub.add_parser(name, help=text)
        _common(p, False)
        p.add_argument("--run", required=True, help="run directory produced by 'train'")
        if name == "evaluate":
            p.add_argument("--mode", help="released output mode (default: the run's)")
        if name == "defend":
            p.add_argument("--schemes", default="identity,gaussian(0.5),round(1),round(2),softmax,argmax")
            p.add_argument("--adaptive", action="store_true", help="retrain the decoder per defense")
        if name == "detect":
            p.add_argument("--steps", type=int)
            p.add_argument("--threshold", type=float)
        if name == "entropy":
            p.add_argument("--bins", type=int, default=16)

    p = sub.add_parser("sweep", help="trade-off or attribute-count sweep")
    _common(p, True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--ratios", type=_floats, help="comma-separated beta_R/beta_C values, 'inf' allowed")
    group.add_argument("--attributes", type=_ints, help="comma-separated attribute counts")

    p = sub.add_parser("report", help="summarise a run or sweep directory")
    p.add_argument("--run", required=True)
    p.add_argument("--compare", help="second run directory for per-metric deltas")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.add_argument("--out", help=argparse.SUPPRESS)
    p.add_argument("--force", action="store_true", help=argparse.SUPPRESS)
    return parser


def _target(args, loaded: benchcli.LoadedRun, filename: str) -> Path:
    out = Path(args.out) if args.out else loaded.seed_dir
    out.mkdir(parents=True, exist_ok=True)
    path = out / filename
    if path.exists() and not args.force:
        raise RunExistsError(f"{path} exists; pass --force to overwrite")
    return path


def _write(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=benchcli._jsonable))
    print(path)


def cmd_train(args) -> int:
    cfg = benchcli.load_config(args.config)
    seeds = [args.seed] if args.seed is not None else None
    out = args.out or cfg.out or f"runs/{cfg.name}"
    run = benchcli.run_experiment(cfg, out, force=args.force, seeds=seeds)
    print(run)
    failed = benchcli.failures(run)
    if failed:
        raise PartialFailure(f"{len(failed)} seed(s) failed: {', '.join(failed)}; see {run / 'manifest.json'}")
    return 0


def cmd_evaluate(args) -> int:
    r = benchcli.load_run(args.run, args.seed)
    mode = args.mode or r.config.release_mode
    rep = evaluate(r.classifier, r.decoder, r.data.test, r.data.label_space, r.stats, mode,
                    dataset=r.data.name, seed=r.seed)
    _write(_target(args, r, "evaluate.json"), rep.to_dict())
    return 0


def cmd_risk(args) -> int:
    r = benchcli.load_run(args.run, args.seed)
    rep = evaluate(r.classifier, r.decoder, r.data.test, r.data.label_space, r.stats,
                    r.config.release_mode, dataset=r.data.name, seed=r.seed)
    from .riskmeter import stats_summary
    _write(_target(args, r, "risk.json"),
           {"risk": rep.risk, "psnr": rep.psnr, "ssim": rep.ssim, "n_samples": rep.n_samples,
            "stats": json.loads(stats_summary(r.stats))})
    return 0


def cmd_defend(args) -> int:
    from .outputguard import plot_frontier, sweep_defenses, write_defense_csv
    r = benchcli.load_run(args.run, args.seed)
    schemes = [s for s in args.schemes.replace(";", ",").split(",") if s]
    path = _target(args, r, "defenses.csv")
    rows = sweep_defenses(r.classifier, r.decoder, r.data.test, schemes, r.data.label_space, r.stats,
                          r.config.release_mode, r.seed, adaptive=args.adaptive, train_split=r.data.train)
    write_defense_csv(rows, path)
    plot_frontier(rows, path.with_name("frontier.svg"))
    print(path)
    return 0


def cmd_detect(args) -> int:
    from .sentinel import DetectorConfig, detect, plot_traces
    r = benchcli.load_run(args.run, args.seed)
    base = r.config.detector or DetectorConfig()
    cfg = DetectorConfig(**{**dataclasses.asdict(base), "seed": r.seed,
                            **({"steps": args.steps} if args.steps is not None else {}),
                            **({"threshold": args.threshold} if args.threshold is not None else {})})
    path = _target(args, r, "detection.json")
    rep = detect(r.classifier, r.data.valid, r.data.test, r.data.label_space, cfg)
    rep.save(path)
    plot_traces({f"seed {r.seed}": rep}, path.with_name("cosine_trace.svg"), cfg.threshold)
    print(path)
    print(f"verdict: {rep.verdict} (v={rep.v:.4f}, final C={rep.final_cosine:.4f})")
    return 0


def cmd_entropy(args) -> int:
    from .sentinel import estimate_output_entropy
    r = benchcli.load_run(args.run, args.seed)
    bits = estimate_output_entropy(r.classifier, r.data.test, args.bins)
    _write(_target(args, r, "entropy.json"), {"entropy_bits": bits, "bins": args.bins, "seed": r.seed})
    return 0


def cmd_sweep(args) -> int:
    cfg = benchcli.load_config(args.config)
    if args.seed is not None:
        cfg = benchcli.with_overrides(cfg, seeds=[args.seed])
    out = args.out or f"runs/{cfg.name}-sweep"
    if args.ratios is not None:
        benchcli.sweep_tradeoffs(cfg, args.ratios, out, force=args.force)
    else:
        benchcli.sweep_attributes(cfg, args.attributes, out, force=args.force)
    print(Path(out) / "frontier.csv")
    return 0


def cmd_report(args) -> int:
    benchcli.emit_report(args.run, args.compare)
    print(Path(args.run) / "summary.md")
    return 0


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "risk": cmd_risk, "defend": cmd_defend,
            "detect": cmd_detect, "entropy": cmd_entropy, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except BenchError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        log.debug("unexpected failure", exc_info=True)
        print(f"error [internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
