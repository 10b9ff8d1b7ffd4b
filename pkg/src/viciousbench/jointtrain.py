"""Joint training of a target classifier and its attack decoder.

Per mini-batch the classifier ``F`` is updated on
``beta_C * L_C + beta_R * L_R`` and the decoder ``G`` on ``beta_R * L_R``,
both from the same forward pass (``F`` steps first). After every epoch the
pair is scored on the validation split and the epoch with the lowest combined
validation loss is kept.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .datahub import LabelSpace, Split, SplitDataset
from .errors import ArgumentError, ConstructionError, EvaluationError, TrainingDivergedError
from .nets import OutputMode, apply_output_mode
from .objectives import (TradeoffWeights, accuracy_binary, accuracy_categorical, categorical_ce,
                         reconstruction_loss, ssim_per_image, weighted_bce)
from .riskmeter import GaussianStats, fit_gaussian_stats, psnr_per_image, reconstruction_risk

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "L_C", "L_R", "val_loss", "ACC", "PSNR", "SSIM", "R")


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    weights: TradeoffWeights = field(default_factory=TradeoffWeights)
    output_mode_for_G: str = "logits"
    seed: int = 0
    eval_batch_size: int = 1000
    keep_all_states: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ArgumentError("epochs and batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ArgumentError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        mode = OutputMode.parse(self.output_mode_for_G)
        if mode.mode not in ("logits", "softmax", "sigmoid"):
            raise ArgumentError("the attack decoder is trained on logits, softmax or sigmoid outputs")
        if isinstance(self.weights, dict):
            self.weights = TradeoffWeights(**self.weights)


FULL_SCALE_TRAIN = dict(epochs=50, batch_size=250, learning_rate=1e-3, optimizer="adam")


@dataclass
class Checkpoint:
    epoch: int
    val_loss: float
    metrics: dict = field(default_factory=dict)
    f_state: dict | None = field(default=None, repr=False)
    g_state: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if not math.isfinite(self.val_loss):
            raise EvaluationError(f"validation loss at epoch {self.epoch} is not finite")


@dataclass
class RiskReport:
    dataset: str
    output_mode: str
    seed: int
    acc: float
    psnr: float
    ssim: float
    risk: float
    n_samples: int
    channel: str = "identity"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    classifier: nn.Module
    decoder: nn.Module
    history: list[Checkpoint]
    best: Checkpoint


def to_nchw(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    return torch.from_numpy(np.array(arr.transpose(0, 3, 1, 2), order="C"))


def class_loss(logits, labels, space: LabelSpace):
    if space.is_binary:
        return weighted_bce(logits, labels, space.class_weights)
    return categorical_ce(logits, labels)


def _release_for_training(logits, mode: OutputMode):
    return apply_output_mode(logits, mode)


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=0.9)


def _check_pair(F, G, space: LabelSpace, shape):
    probe = torch.zeros(1, shape[2], shape[0], shape[1])
    was = F.training, G.training
    F.eval(), G.eval()
    try:
        with torch.no_grad():
            out = F(probe)
            if out.shape[-1] != space.n_outputs:
                raise ConstructionError(f"classifier emits {out.shape[-1]} outputs, labels need {space.n_outputs}")
            rec = G(out)
            if tuple(rec.shape[1:]) != (shape[2], shape[0], shape[1]):
                raise ConstructionError(f"decoder emits {tuple(rec.shape[1:])}, images are C,H,W={shape[::-1]}")
    except RuntimeError as exc:
        raise ConstructionError(f"classifier/decoder shapes do not fit: {exc}") from exc
    finally:
        F.train(was[0]), G.train(was[1])


def collect_logits(F: nn.Module, images, batch_size: int = 1000) -> np.ndarray:
    F.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(F(to_nchw(images[start:start + batch_size])).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 0))


def decode(G: nn.Module, vectors, batch_size: int = 1000) -> np.ndarray:
    """Run the decoder on released vectors; returns ``(n, H, W, C)`` float32."""
    G.eval()
    vectors = np.asarray(vectors, dtype=np.float32)
    out = []
    with torch.no_grad():
        for start in range(0, len(vectors), batch_size):
            rec = G(torch.from_numpy(vectors[start:start + batch_size]))
            out.append(rec.permute(0, 2, 3, 1).numpy())
    return np.concatenate(out)


def _ssim_batch(x_rec, x, batch_size=1000) -> np.ndarray:
    vals = []
    for start in range(0, len(x), batch_size):
        a = to_nchw(x_rec[start:start + batch_size]).double()
        b = to_nchw(x[start:start + batch_size]).double()
        vals.append(ssim_per_image(a, b).clamp(0.0, 1.0).numpy())
    return np.concatenate(vals)


def _accuracy(released, labels, space: LabelSpace, probabilistic: bool) -> float:
    if space.is_binary:
        tau = [0.5] * space.n_outputs if probabilistic else space.thresholds
        return accuracy_binary(released, labels, tau)
    return accuracy_categorical(released, labels)


def evaluate(F: nn.Module, G: nn.Module, split: Split, label_space: LabelSpace,
             stats: GaussianStats | None, output_mode="logits", channel: Callable | None = None,
             *, dataset: str = "", seed: int = 0, batch_size: int = 1000,
             channel_name: str = "identity") -> RiskReport:
    """Accuracy of ``F`` and PSNR/SSIM/R of ``G`` on one split.

    ``channel`` maps a float64 logit matrix to ``(released, probabilistic)``;
    without it the clean ``output_mode`` is released. Accuracy and the
    decoder both see the released values.
    """
    if stats is None:
        raise EvaluationError("reconstruction risk needs fitted Gaussian statistics")
    mode = OutputMode.parse(output_mode)
    logits = collect_logits(F, split.images, batch_size)
    if channel is None:
        released, probabilistic = apply_output_mode(logits, mode), mode.is_probability
    else:
        released, probabilistic = channel(logits)
    acc = _accuracy(released, split.labels, label_space, probabilistic)
    recon = decode(G, released, batch_size)
    return RiskReport(
        dataset=dataset, output_mode=str(mode), seed=seed, acc=acc,
        psnr=float(psnr_per_image(recon, split.images).mean()),
        ssim=float(_ssim_batch(recon, split.images).mean()),
        risk=reconstruction_risk(split.images, recon, stats),
        n_samples=len(split), channel=channel_name)


def _validation_losses(F, G, split: Split, space, mode, w: TradeoffWeights, batch_size):
    F.eval(), G.eval()
    lc = lr = 0.0
    with torch.no_grad():
        for start in range(0, len(split), batch_size):
            x = to_nchw(split.images[start:start + batch_size])
            y = torch.as_tensor(np.array(split.labels[start:start + batch_size]))
            logits = F(x)
            rec = G(_release_for_training(logits, mode))
            k = len(x)
            lc += float(class_loss(logits, y, space)) * k
            lr += float(reconstruction_loss(rec, x, w.alpha, w.gamma, w.delta)) * k
    n = len(split)
    return lc / n, lr / n


def select_best_checkpoint(history) -> Checkpoint:
    """Lowest validation loss; the earliest epoch wins ties."""
    history = list(history)
    if not history:
        raise ArgumentError("empty history")
    best = history[0]
    for ck in history[1:]:
        if ck.val_loss < best.val_loss:
            best = ck
    return best


def _snapshot(model: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train_joint(F: nn.Module, G: nn.Module, data: SplitDataset, cfg: TrainConfig,
                stats: GaussianStats | None = None, on_epoch: Callable | None = None) -> TrainResult:
    """Jointly train ``F`` and ``G`` and restore the best validation epoch.

    Raises:
        ConstructionError: output/input sizes of ``F``, ``G`` and labels disagree.
        TrainingDivergedError: a batch produced a non-finite loss.
    """
    space = data.label_space
    mode = OutputMode.parse(cfg.output_mode_for_G)
    mode.check(space.kind)
    _check_pair(F, G, space, data.shape)
    w = cfg.weights
    if stats is None:
        stats = fit_gaussian_stats(data.train.images)

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt_f = _make_optimizer(F.parameters(), cfg)
    opt_g = _make_optimizer(G.parameters(), cfg)
    x_all = to_nchw(data.train.images)
    y_all = torch.as_tensor(np.array(data.train.labels))
    n = len(x_all)

    history: list[Checkpoint] = []
    best: Checkpoint | None = None
    best_states = None
    for epoch in range(1, cfg.epochs + 1):
        F.train(), G.train()
        perm = torch.randperm(n, generator=gen)
        sum_c = sum_r = 0.0
        n_batches = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            logits = F(x)
            lc = class_loss(logits, y, space)
            if w.beta_R > 0:
                rec = G(_release_for_training(logits, mode))
                lr = reconstruction_loss(rec, x, w.alpha, w.gamma, w.delta)
            else:
                with torch.no_grad():
                    rec = G(_release_for_training(logits, mode))
                    lr = reconstruction_loss(rec, x, w.alpha, w.gamma, w.delta)
            loss = w.beta_C * lc + w.beta_R * lr
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, b, {"L_C": lc.item(), "L_R": lr.item(), "loss": loss.item()})
            opt_f.zero_grad(set_to_none=True)
            opt_g.zero_grad(set_to_none=True)
            loss.backward()
            opt_f.step()
            if w.beta_R > 0:
                opt_g.step()
            sum_c += lc.item()
            sum_r += lr.item()
            n_batches += 1

        vc, vr = _validation_losses(F, G, data.valid, space, mode, w, cfg.eval_batch_size)
        report = evaluate(F, G, data.valid, space, stats, mode, dataset=data.name, seed=cfg.seed,
                          batch_size=cfg.eval_batch_size)
        metrics = {"L_C": sum_c / n_batches, "L_R": sum_r / n_batches, "val_L_C": vc, "val_L_R": vr,
                   "ACC": report.acc, "PSNR": report.psnr, "SSIM": report.ssim, "R": report.risk}
        ck = Checkpoint(epoch, w.beta_C * vc + w.beta_R * vr, metrics)
        if cfg.keep_all_states:
            ck.f_state, ck.g_state = _snapshot(F), _snapshot(G)
        history.append(ck)
        if best is None or select_best_checkpoint([best, ck]) is ck:
            best = ck
            best_states = (_snapshot(F), _snapshot(G)) if not cfg.keep_all_states else (ck.f_state, ck.g_state)
        log.info("epoch %d  L_C=%.4f L_R=%.4f val=%.4f acc=%.2f psnr=%.2f ssim=%.3f R=%.4f",
                 epoch, metrics["L_C"], metrics["L_R"], ck.val_loss, report.acc, report.psnr,
                 report.ssim, report.risk)
        if on_epoch is not None:
            on_epoch(ck)

    F.load_state_dict(best_states[0])
    G.load_state_dict(best_states[1])
    best.f_state, best.g_state = best_states
    F.eval(), G.eval()
    return TrainResult(F, G, history, best)


def write_history_csv(history, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for ck in history:
            m = ck.metrics
            writer.writerow([ck.epoch, repr(m["L_C"]), repr(m["L_R"]), repr(ck.val_loss), repr(m["ACC"]),
                             repr(m["PSNR"]), repr(m["SSIM"]), repr(m["R"])])


def read_history_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def copy_model(model: nn.Module) -> nn.Module:
    clone = copy.deepcopy(model)
    clone.spec = getattr(model, "spec", None)
    return clone
