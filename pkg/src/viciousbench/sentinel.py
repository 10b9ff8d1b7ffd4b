"""Auditing a classifier for hidden reconstruction capacity.

The detector fine-tunes a copy of the audited model for a few steps on a
small labelled probe set and watches how far its outputs drift: an honest
model is already at a minimum of its task loss and barely moves, a vicious one
gives up the capacity it spent on the decoder. Drift is summarised as the
mean cosine similarity ``C`` between the two models' outputs and
``v = (1 - C) / 2``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .datahub import LabelSpace, Split
from .errors import ArgumentError
from .jointtrain import class_loss, collect_logits, copy_model, to_nchw
from .nets import apply_output_mode

log = logging.getLogger(__name__)

HONESTY_THRESHOLD = 0.01


@dataclass
class DetectorConfig:
    steps: int = 20
    learning_rate: float = 0.1
    optimizer: str = "sgd"
    probe_size: int = 256
    batch_size: int | None = None  # None: every step uses the whole probe
    threshold: float = HONESTY_THRESHOLD
    channel: str = "logits"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ArgumentError("steps must be non-negative")
        if self.probe_size < 1 or (self.batch_size is not None and self.batch_size < 1):
            raise ArgumentError("probe_size and batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be positive")
        if not 0 <= self.threshold <= 1:
            raise ArgumentError("threshold must lie in [0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ArgumentError("optimizer must be sgd or adam")
        if self.channel not in ("logits", "softmax", "sigmoid"):
            raise ArgumentError("detector channel must be logits, softmax or sigmoid")


@dataclass
class DetectionReport:
    cosine_trace: list[float]
    v: float
    verdict: str
    finetune_config: dict = field(default_factory=dict)
    zero_norm: int = 0

    def __post_init__(self):
        if not self.cosine_trace:
            raise ArgumentError("a detection report needs at least one trace entry")
        if any(not -1.0 <= c <= 1.0 for c in self.cosine_trace):
            raise ArgumentError("cosine similarities must lie in [-1, 1]")

    @property
    def final_cosine(self) -> float:
        return self.cosine_trace[-1]

    def v_trace(self) -> list[float]:
        return [vicious_likelihood(c) for c in self.cosine_trace]

    def first_crossing(self) -> int | None:
        """First fine-tune step whose ``v`` exceeds the threshold, if any."""
        tau = self.finetune_config.get("threshold", HONESTY_THRESHOLD)
        for step, v in enumerate(self.v_trace()):
            if v > tau:
                return step
        return None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["final_cosine"] = self.final_cosine
        out["v_trace"] = self.v_trace()
        out["first_crossing"] = self.first_crossing()
        return out

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))


def vicious_likelihood(cosine: float) -> float:
    """``(1 - C) / 2``, clipped to [0, 1] against rounding."""
    return min(1.0, max(0.0, (1.0 - float(cosine)) / 2.0))


def verdict_for(v: float, threshold: float = HONESTY_THRESHOLD) -> str:
    return "honest" if v <= threshold else "suspect"


def parameter_digest(model: nn.Module) -> str:
    """SHA-256 over the model's state, in key order."""
    h = hashlib.sha256()
    for name, value in model.state_dict().items():
        h.update(name.encode())
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def finetune_copy(F: nn.Module, probe: Split, label_space: LabelSpace, steps: int = 20,
                  lr: float = 0.1, batch_size: int | None = None, seed: int = 0, on_step=None,
                  optimizer: str = "sgd") -> nn.Module:
    """Train a deep copy of ``F`` for ``steps`` mini-batches of the task loss alone.

    Plain SGD keeps the step proportional to the task gradient, which is
    what separates a model sitting at its task optimum from one that is not;
    Adam's per-parameter normalisation largely hides that difference.

    With ``batch_size=None`` every step sees the whole probe; otherwise
    mini-batches cycle through reshuffled passes over it.
    ``on_step(step, model)`` is called after every update.
    """
    if len(probe) == 0:
        raise ArgumentError("the probe set is empty")
    if steps < 0:
        raise ArgumentError("steps must be non-negative")
    F_plus = copy_model(F)
    if steps == 0:
        F_plus.eval()
        return F_plus
    x_all = to_nchw(probe.images)
    y_all = torch.as_tensor(np.array(probe.labels))
    batch_size = batch_size or len(x_all)
    gen = torch.Generator().manual_seed(seed)
    if optimizer == "adam":
        opt = torch.optim.Adam(F_plus.parameters(), lr=lr)
    elif optimizer == "sgd":
        opt = torch.optim.SGD(F_plus.parameters(), lr=lr)
    else:
        raise ArgumentError("optimizer must be sgd or adam")
    order = torch.randperm(len(x_all), generator=gen)
    pos = 0
    for step in range(1, steps + 1):
        if pos >= len(order):
            order, pos = torch.randperm(len(x_all), generator=gen), 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        F_plus.train()
        loss = class_loss(F_plus(x_all[idx]), y_all[idx], label_space)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        F_plus.eval()
        if on_step is not None:
            on_step(step, F_plus)
    return F_plus


def cosine_rows(a, b) -> tuple[np.ndarray, int]:
    """Row-wise cosine similarity; rows where either side is zero (or not
    finite, e.g. after a diverged fine-tune) score 0.

    Returns the similarities and how many rows were scored that way.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ArgumentError(f"output shapes differ: {a.shape} vs {b.shape}")
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        # divide each row by its largest entry so tiny or huge rows do not underflow or overflow
        a = a / np.abs(a).max(axis=1, keepdims=True)
        b = b / np.abs(b).max(axis=1, keepdims=True)
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        dots = (a * b).sum(axis=1)
    zero = ~np.isfinite(na) | ~np.isfinite(nb) | (na == 0) | (nb == 0)
    denom = np.where(zero, 1.0, na * nb)
    sims = np.where(zero, 0.0, dots / denom)
    return np.clip(sims, -1.0, 1.0), int(zero.sum())


def _released(model, images, channel):
    return apply_output_mode(collect_logits(model, images), channel)


def cosine_similarity_outputs(F: nn.Module, F_plus: nn.Module, images, channel: str = "logits") -> float:
    """Mean cosine similarity between the two models' outputs on ``images``."""
    images = images.images if isinstance(images, Split) else images
    sims, zero = cosine_rows(_released(F, images, channel), _released(F_plus, images, channel))
    if zero:
        warnings.warn(f"{zero} zero-norm output rows scored as 0")
    return float(sims.mean())


def detect(F: nn.Module, probe: Split, eval_split: Split, label_space: LabelSpace,
           config: DetectorConfig | None = None) -> DetectionReport:
    """Fine-tune a copy of ``F`` and record ``C`` after every step (step 0 included).

    The audited model is never modified.
    """
    cfg = config or DetectorConfig()
    if len(probe) == 0:
        raise ArgumentError("the probe set is empty")
    if len(probe) > cfg.probe_size:
        probe = probe.subset(np.arange(cfg.probe_size))
    digest = parameter_digest(F)
    images = eval_split.images
    reference = _released(F, images, cfg.channel)
    trace, zero_total = [], 0

    def record(_step, model):
        nonlocal zero_total
        sims, zero = cosine_rows(reference, _released(model, images, cfg.channel))
        zero_total += zero
        trace.append(float(sims.mean()))

    record(0, F)
    finetune_copy(F, probe, label_space, cfg.steps, cfg.learning_rate, cfg.batch_size, cfg.seed,
                  on_step=record, optimizer=cfg.optimizer)
    if zero_total:
        warnings.warn(f"{zero_total} zero-norm output rows scored as 0")
    if parameter_digest(F) != digest:
        raise RuntimeError("the audited model changed during detection")
    v = vicious_likelihood(trace[-1])
    snapshot = asdict(cfg)
    snapshot["probe_size"] = len(probe)
    return DetectionReport(trace, v, verdict_for(v, cfg.threshold), snapshot, zero_total)


def output_entropy(outputs, bins: int = 16) -> float:
    """Plug-in entropy in bits of each output coordinate, summed over coordinates.

    Each coordinate is histogrammed over its own observed range; a constant
    coordinate contributes 0.
    """
    if int(bins) != bins or bins < 2:
        raise ArgumentError("bins must be an integer >= 2")
    z = np.asarray(outputs, dtype=np.float64)
    z = z.reshape(len(z), -1) if z.ndim > 1 else z[:, None]
    total = 0.0
    for col in z.T:
        lo, hi = col.min(), col.max()
        if not hi > lo:
            continue
        counts, _ = np.histogram(col, bins=int(bins), range=(lo, hi))
        p = counts[counts > 0] / len(col)
        total -= float((p * np.log2(p)).sum())
    return total


def estimate_output_entropy(F: nn.Module, split, bins: int = 16, channel: str = "logits") -> float:
    """:func:`output_entropy` of ``F``'s released outputs on a split."""
    images = split.images if isinstance(split, Split) else split
    return output_entropy(_released(F, images, channel), bins)


def plot_traces(reports: dict, path, threshold: float = HONESTY_THRESHOLD) -> None:
    """Cosine similarity against fine-tune step, one line per labelled report."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, rep in reports.items():
        ax.plot(range(len(rep.cosine_trace)), rep.cosine_trace, marker=".", label=label)
    ax.axhline(1 - 2 * threshold, color="grey", linestyle="--", linewidth=0.8, label=f"v = {threshold:g}")
    ax.set_xlabel("fine-tune step")
    ax.set_ylabel("cosine similarity")
    ax.legend(fontsize=7)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
