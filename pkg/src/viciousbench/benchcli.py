"""Experiment runner: declarative configs, per-seed runs, sweeps and reports.

A run directory looks like::

    run/
      config.yaml        resolved configuration
      manifest.json      config hash, code version, seeds, failures
      stats.vbt          Gaussian statistics of the training images
      aggregate.json     mean/std over successful seeds
      aggregate.csv
      seed_0/
        history.csv  report.json  classifier.vbck  decoder.vbck
        reconstructions.png  [defenses.csv frontier.svg detection.json cosine_trace.svg]
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import shutil
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .datahub import SplitDataset, load_dataset, restrict_attributes, select_balanced_attributes
from .errors import ArgumentError, BenchError, ConfigError, ReportError, RunExistsError
from .jointtrain import RiskReport, TrainConfig, decode, collect_logits, evaluate, train_joint, write_history_csv
from .nets import (ClassifierSpec, DecoderSpec, OutputMode, apply_output_mode, build_classifier,
                   build_decoder, load_checkpoint, save_checkpoint)
from .objectives import TradeoffWeights
from .outputguard import DefenseScheme, plot_frontier, sweep_defenses, write_defense_csv
from .riskmeter import DEFAULT_RIDGE_SCALE, GaussianStats, fit_gaussian_stats
from .sentinel import DetectorConfig, detect, estimate_output_entropy, plot_traces

log = logging.getLogger(__name__)

METRICS = ("ACC", "PSNR", "SSIM", "R")
_REPORT_KEYS = {"ACC": "acc", "PSNR": "psnr", "SSIM": "ssim", "R": "risk"}


@dataclass
class DataConfig:
    name: str = "synthetic-categorical"
    resize: tuple[int, int] = (32, 32)
    channels: int = 1
    n_outputs: int | None = None
    n_train: int | None = None
    n_test: int | None = None
    attributes: int | list[int] | None = None  # top-k balanced, or explicit indices
    seed: int = 0

    def __post_init__(self):
        self.resize = tuple(int(v) for v in self.resize)
        if len(self.resize) != 2 or min(self.resize) < 1:
            raise ConfigError("data.resize must be two positive integers")


@dataclass
class ModelConfig:
    family: str = "smallcnn"
    width: int = 1
    depth: int = 28
    decoder_family: str | None = None
    decoder_width: int | None = None


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_mode: str | None = None  # released at evaluation; defaults to train.output_mode_for_G
    ridge_scale: float = DEFAULT_RIDGE_SCALE
    defenses: list[str] = field(default_factory=list)
    adaptive_defenses: bool = False
    detector: DetectorConfig | None = None
    entropy_bins: int = 16
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not self.ridge_scale > 0:
            raise ConfigError("ridge_scale must be positive")
        OutputMode.parse(self.release_mode)
        for scheme in self.defenses:
            DefenseScheme.parse(scheme)

    @property
    def release_mode(self) -> str:
        return self.output_mode or self.train.output_mode_for_G

    def to_dict(self) -> dict:
        out = asdict(self)
        out["data"]["resize"] = list(self.data.resize)
        w = out["train"]["weights"]
        for k, v in w.items():
            if isinstance(v, float) and math.isinf(v):
                w[k] = "inf"
        return out

    def hash(self) -> str:
        """Digest of everything that shapes results (the output path excluded)."""
        d = self.to_dict()
        d.pop("out", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_DESK_SYNTH = {
    "data": {"name": "synthetic-categorical", "resize": [16, 16], "n_outputs": 10,
             "n_train": 10000, "n_test": 500},
    "model": {"family": "smallcnn", "width": 1},
    "train": {"epochs": 15, "batch_size": 64},
    "seeds": [0, 1],
}

PRESETS = {
    "paper-mnist-logits": {
        "data": {"name": "mnist", "resize": [32, 32]},
        "model": {"family": "wideresnet", "width": 5, "depth": 28},
        "train": {"epochs": 50, "batch_size": 250, "learning_rate": 1e-3, "optimizer": "adam",
                  "output_mode_for_G": "logits"},
        "seeds": [0, 1, 2, 3, 4],
    },
    "paper-mnist-softmax": {
        "data": {"name": "mnist", "resize": [32, 32]},
        "model": {"family": "wideresnet", "width": 5, "depth": 28},
        "train": {"epochs": 50, "batch_size": 250, "learning_rate": 1e-3, "optimizer": "adam",
                  "output_mode_for_G": "softmax"},
        "seeds": [0, 1, 2, 3, 4],
    },
    "desk-mnist": {
        "data": {"name": "mnist", "resize": [32, 32]},
        "model": {"family": "smallcnn", "width": 2},
        "train": {"epochs": 3, "batch_size": 128},
        "seeds": [0, 1],
    },
    "desk-synthetic": _DESK_SYNTH,
    "desk-synthetic-binary": {
        **_DESK_SYNTH,
        "data": {"name": "synthetic-binary", "resize": [16, 16], "n_outputs": 8, "attributes": 4,
                 "n_train": 10000, "n_test": 500},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _ratio_weights(ratio, weights: dict) -> dict:
    tw = TradeoffWeights.from_ratio(float(ratio))
    return {**weights, "beta_C": tw.beta_C, "beta_R": tw.beta_R}


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from plain data; ``preset`` names a base to merge over and
    a top-level ``ratio`` sets ``beta_R / beta_C``."""
    raw = dict(raw or {})
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        raw = _merge(PRESETS[preset], raw)
    known = {f.name for f in fields(ExperimentConfig)} | {"ratio"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        train = dict(raw.pop("train", {}) or {})
        weights = {k: float(v) for k, v in dict(train.pop("weights", {}) or {}).items()}
        if "ratio" in raw:
            weights = _ratio_weights(raw.pop("ratio"), weights)
        train["weights"] = TradeoffWeights(**weights)
        detector = raw.pop("detector", None)
        return ExperimentConfig(
            data=DataConfig(**(raw.pop("data", {}) or {})),
            model=ModelConfig(**(raw.pop("model", {}) or {})),
            train=TrainConfig(**train),
            detector=DetectorConfig(**detector) if isinstance(detector, dict) else
            (DetectorConfig() if detector is True else None),
            **raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(source) -> ExperimentConfig:
    """Load a YAML/JSON config file, or a preset by name."""
    if isinstance(source, ExperimentConfig):
        return source
    if isinstance(source, dict):
        return config_from_dict(source)
    if str(source) in PRESETS and not Path(str(source)).exists():
        return config_from_dict({"preset": str(source)})
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"config {source} not found (and not a preset name)")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw or {})


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``cfg`` with nested keys replaced, e.g. ``ratio=3`` or
    ``data={'attributes': 2}``."""
    raw = cfg.to_dict()
    ratio = changes.pop("ratio", None)
    raw = _merge(raw, changes)
    if ratio is not None:
        raw["train"]["weights"] = _ratio_weights(ratio, raw["train"]["weights"])
    return config_from_dict(raw)


def code_version() -> str:
    """Package version plus a digest of its source files."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


# ---------------------------------------------------------------- building blocks

def prepare_data(cfg: ExperimentConfig) -> SplitDataset:
    d = cfg.data
    data = load_dataset(d.name, d.resize, d.seed, n_outputs=d.n_outputs, n_train=d.n_train,
                        n_test=d.n_test, channels=d.channels)
    if d.attributes is not None:
        if isinstance(d.attributes, int):
            cols = select_balanced_attributes(data.train, d.attributes)
        else:
            cols = [int(c) for c in d.attributes]
        data = restrict_attributes(data, cols)
    return data


def build_pair(cfg: ExperimentConfig, data: SplitDataset, seed: int):
    m = cfg.model
    cspec = ClassifierSpec(m.family, m.width, data.label_space.n_outputs, data.shape, m.depth)
    dspec = DecoderSpec.mirror(cspec)
    if m.decoder_family or m.decoder_width:
        dspec = DecoderSpec(m.decoder_family or dspec.family, m.decoder_width or dspec.width,
                            dspec.n_inputs, dspec.output_shape, dspec.depth)
    F = build_classifier(cspec, seed)
    G = build_decoder(dspec, seed + 1, mean_image=data.train.images.mean(axis=0))
    return F, G


def save_reconstruction_grid(originals, reconstructions, path, n: int = 8) -> None:
    """PNG with originals in the top row and reconstructions below."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    k = min(n, len(originals))
    top = np.concatenate(list(originals[:k]), axis=1)
    bottom = np.concatenate(list(reconstructions[:k]), axis=1)
    grid = np.clip(np.concatenate([top, bottom], axis=0), 0.0, 1.0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if grid.shape[-1] == 1:
        plt.imsave(path, grid[..., 0], cmap="gray", vmin=0.0, vmax=1.0)
    else:
        plt.imsave(path, grid)


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise RunExistsError(f"{out} already holds results; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _clean(x: float):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


# ---------------------------------------------------------------- runs

def run_seed(cfg: ExperimentConfig, data: SplitDataset, stats: GaussianStats, seed: int, out: Path) -> dict:
    """Train, evaluate and audit one seed; returns the report dict."""
    out.mkdir(parents=True, exist_ok=True)
    F, G = build_pair(cfg, data, seed)
    tcfg = copy.copy(cfg.train)
    tcfg.seed = seed
    result = train_joint(F, G, data, tcfg, stats)
    write_history_csv(result.history, out / "history.csv")
    meta = {"config_hash": cfg.hash(), "code_version": code_version()}
    save_checkpoint(out / "classifier.vbck", F, seed, meta)
    save_checkpoint(out / "decoder.vbck", G, seed + 1, meta)

    mode = cfg.release_mode
    rep = evaluate(F, G, data.test, data.label_space, stats, mode, dataset=data.name, seed=seed)
    released = apply_output_mode(collect_logits(F, data.test.images[:8]), mode)
    save_reconstruction_grid(data.test.images[:8], decode(G, released), out / "reconstructions.png")

    report = {**rep.to_dict(), "best_epoch": result.best.epoch, "val_loss": result.best.val_loss,
              "epochs_run": len(result.history), **meta,
              "ratio": _clean_ratio(cfg.train.weights.ratio)}
    report["entropy_bits"] = estimate_output_entropy(F, data.test, cfg.entropy_bins)
    if cfg.defenses:
        rows = sweep_defenses(F, G, data.test, cfg.defenses, data.label_space, stats, mode, seed,
                              adaptive=cfg.adaptive_defenses, train_split=data.train)
        write_defense_csv(rows, out / "defenses.csv")
        plot_frontier(rows, out / "frontier.svg")
        report["defenses"] = [{k: _clean(v) for k, v in r.to_dict().items()} for r in rows]
    if cfg.detector is not None:
        det_cfg = copy.copy(cfg.detector)
        det_cfg.seed = seed
        det = detect(F, data.valid, data.test, data.label_space, det_cfg)
        det.save(out / "detection.json")
        plot_traces({f"seed {seed}": det}, out / "cosine_trace.svg", det_cfg.threshold)
        report["detection"] = {"final_cosine": det.final_cosine, "v": det.v, "verdict": det.verdict}
    _dump(report, out / "report.json")
    return report


def _clean_ratio(r: float):
    return "inf" if math.isinf(r) else r


def aggregate(reports: Sequence[dict]) -> dict:
    """Mean and standard deviation (ddof=1; 0 for a single seed) per metric."""
    out = {}
    for metric in METRICS:
        vals = np.array([r[_REPORT_KEYS[metric]] for r in reports], dtype=np.float64)
        out[metric] = {
            "mean": float(vals.mean()) if len(vals) else math.nan,
            "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
            "values": vals.tolist(),
        }
    return out


def _write_aggregate(out: Path, cfg: ExperimentConfig, reports: dict) -> dict:
    agg = {"name": cfg.name, "config_hash": cfg.hash(), "code_version": code_version(),
           "ratio": _clean_ratio(cfg.train.weights.ratio), "seeds": sorted(reports),
           "metrics": aggregate([reports[s] for s in sorted(reports)])}
    _dump(agg, out / "aggregate.json")
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "ratio", "n_seeds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")])
        w.writerow([cfg.name, agg["ratio"], len(reports)]
                   + [repr(agg["metrics"][m][s]) for m in METRICS for s in ("mean", "std")])
    return agg


def run_experiment(config, out=None, force: bool = False, seeds: Sequence[int] | None = None) -> Path:
    """Run every seed of ``config`` into ``out`` and aggregate.

    A seed that raises is recorded under ``failures`` in the manifest and the
    remaining seeds still run; :func:`failures` reads them back.

    Raises:
        RunExistsError: ``out`` holds results and ``force`` is false.
    """
    cfg = load_config(config)
    if seeds is not None:
        cfg = with_overrides(cfg, seeds=list(seeds))
    out = out or cfg.out
    if out is None:
        raise ArgumentError("no output directory given")
    out = _prepare_out(out, force)
    save_config(cfg, out / "config.yaml")
    data = prepare_data(cfg)
    stats = fit_gaussian_stats(data.train.images, ridge_scale=cfg.ridge_scale)
    stats.save(out / "stats.vbt")
    manifest = {"name": cfg.name, "config_hash": cfg.hash(), "code_version": code_version(),
                "seeds": cfg.seeds, "dataset": data.name, "data_fingerprint": data.fingerprint(),
                "ridge": stats.ridge, "failures": {}}
    reports = {}
    for seed in cfg.seeds:
        try:
            reports[seed] = run_seed(cfg, data, stats, seed, out / f"seed_{seed}")
        except Exception as exc:  # isolate the seed, keep going
            category = exc.category if isinstance(exc, BenchError) else "internal"
            log.error("seed %d failed: %s", seed, exc)
            manifest["failures"][str(seed)] = {"category": category, "message": str(exc),
                                               "traceback": traceback.format_exc(limit=5)}
    _dump(manifest, out / "manifest.json")
    if reports:
        _write_aggregate(out, cfg, reports)
    return out


def failures(run_dir) -> dict:
    return json.loads((Path(run_dir) / "manifest.json").read_text())["failures"]


# ---------------------------------------------------------------- sweeps

def sweep_tradeoffs(config, ratios: Sequence, out, force: bool = False) -> list[dict]:
    """One experiment per ``beta_R / beta_C`` ratio plus a frontier table and plot."""
    cfg = load_config(config)
    out = _prepare_out(out, force)
    rows = []
    for ratio in ratios:
        r = float(ratio)
        sub = with_overrides(cfg, ratio=r, name=f"{cfg.name}-ratio-{_clean_ratio(r)}")
        run = run_experiment(sub, out / f"ratio_{_clean_ratio(r)}")
        rows.append(_frontier_row("ratio", _clean_ratio(r), run))
    _write_frontier(rows, out, "ratio")
    return rows


def sweep_attributes(config, counts: Sequence[int], out, force: bool = False) -> list[dict]:
    """One experiment per number of (most balanced) binary attributes."""
    cfg = load_config(config)
    out = _prepare_out(out, force)
    rows = []
    for k in counts:
        sub = with_overrides(cfg, data={"attributes": int(k)}, name=f"{cfg.name}-attrs-{k}")
        run = run_experiment(sub, out / f"attrs_{k}")
        rows.append(_frontier_row("attributes", int(k), run))
    _write_frontier(rows, out, "attributes")
    return rows


def _frontier_row(key, value, run_dir: Path) -> dict:
    path = run_dir / "aggregate.json"
    if not path.exists():
        raise ReportError(f"{run_dir}: every seed failed, see manifest.json")
    agg = json.loads(path.read_text())
    row = {key: value, "n_seeds": len(agg["seeds"])}
    for m in METRICS:
        row[f"{m}_mean"] = agg["metrics"][m]["mean"]
        row[f"{m}_std"] = agg["metrics"][m]["std"]
    return row


def _write_frontier(rows, out: Path, key: str) -> None:
    with open(out / "frontier.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for row in rows:
        ax.errorbar(row["R_mean"], row["ACC_mean"], xerr=row["R_std"], yerr=row["ACC_std"], fmt="o", ms=4)
        ax.annotate(f"{key}={row[key]}", (row["R_mean"], row["ACC_mean"]), fontsize=7,
                    xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("reconstruction risk R")
    ax.set_ylabel("accuracy (%)")
    fig.tight_layout()
    fig.savefig(out / "frontier.svg")
    plt.close(fig)


# ---------------------------------------------------------------- reusing finished runs

@dataclass
class LoadedRun:
    config: ExperimentConfig
    data: SplitDataset
    stats: GaussianStats
    classifier: object
    decoder: object
    seed: int
    seed_dir: Path


def load_run(run_dir, seed: int | None = None) -> LoadedRun:
    run_dir = Path(run_dir)
    if not (run_dir / "config.yaml").exists():
        raise ReportError(f"{run_dir} is not a run directory")
    cfg = load_config(run_dir / "config.yaml")
    seed = cfg.seeds[0] if seed is None else int(seed)
    seed_dir = run_dir / f"seed_{seed}"
    if not (seed_dir / "classifier.vbck").exists():
        raise ReportError(f"{seed_dir} has no checkpoints")
    F, _, _ = load_checkpoint(seed_dir / "classifier.vbck")
    G, _, _ = load_checkpoint(seed_dir / "decoder.vbck")
    return LoadedRun(cfg, prepare_data(cfg), GaussianStats.load(run_dir / "stats.vbt"), F, G, seed, seed_dir)


# ---------------------------------------------------------------- reports

def _summaries(run_dir: Path) -> dict:
    agg_path = run_dir / "aggregate.json"
    if agg_path.exists():
        return json.loads(agg_path.read_text())
    frontier = run_dir / "frontier.csv"
    if frontier.exists():
        with open(frontier, newline="") as fh:
            return {"frontier": list(csv.DictReader(fh))}
    raise ReportError(f"{run_dir} holds no finished results")


def emit_report(run_dir, compare=None) -> dict:
    """Write ``summary.md`` and ``summary.json`` into ``run_dir``.

    With ``compare`` (another run directory) each metric also gets
    ``delta = this - other``.

    Raises:
        ReportError: missing, empty or unfinished run directory.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir() or not any(run_dir.iterdir()):
        raise ReportError(f"{run_dir} is empty or missing")
    summary = _summaries(run_dir)
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        summary["failures"] = json.loads(manifest_path.read_text())["failures"]
    lines = [f"# {summary.get('name', run_dir.name)}", ""]
    if "metrics" in summary:
        lines += [f"config `{summary['config_hash']}`, code `{summary['code_version']}`, "
                  f"seeds {summary['seeds']}, ratio {summary['ratio']}", "",
                  "| metric | mean | std |", "|---|---|---|"]
        lines += [f"| {m} | {v['mean']:.4f} | {v['std']:.4f} |" for m, v in summary["metrics"].items()]
    else:
        rows = summary["frontier"]
        head = list(rows[0])
        lines += ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        lines += ["| " + " | ".join(r[h] for h in head) + " |" for r in rows]
    if compare is not None:
        other = _summaries(Path(compare))
        if "metrics" not in summary or "metrics" not in other:
            raise ReportError("comparison needs two single-experiment runs")
        summary["compare"] = {"other": str(compare), "deltas": {
            m: summary["metrics"][m]["mean"] - other["metrics"][m]["mean"] for m in METRICS}}
        lines += ["", f"## delta vs {compare}", "", "| metric | delta |", "|---|---|"]
        lines += [f"| {m} | {d:+.4f} |" for m, d in summary["compare"]["deltas"].items()]
    if summary.get("failures"):
        lines += ["", "## failed seeds", ""]
        lines += [f"- seed {s}: [{f['category']}] {f['message']}" for s, f in summary["failures"].items()]
    (run_dir / "summary.md").write_text("\n".join(lines) + "\n")
    _dump(summary, run_dir / "summary.json")
    return summary


def risk_report_from_dict(d: dict) -> RiskReport:
    keys = {f.name for f in fields(RiskReport)}
    return RiskReport(**{k: v for k, v in d.items() if k in keys})
