"""Output-channel defenses and their information-capacity accounting.

A defense is a transform applied by the user to the classifier's logits
before release. :func:`sweep_defenses` measures what each transform costs in
accuracy and what it leaves to the attack decoder.
"""
from __future__ import annotations

import csv
import logging
import math
import re
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datahub import LabelSpace, Split
from .errors import ArgumentError
from .jointtrain import collect_logits, copy_model, evaluate, to_nchw
from .nets import OutputMode, apply_output_mode
from .objectives import reconstruction_loss
from .riskmeter import GaussianStats

log = logging.getLogger(__name__)

_SCHEME_RE = re.compile(r"^(identity|gaussian|laplace|round|rounded|softmax|argmax)(?:\(([^)]*)\))?$")


@dataclass(frozen=True)
class DefenseScheme:
    kind: str
    param: float | None = None
    placement: str = "logits"

    def __post_init__(self):
        if self.kind not in ("identity", "gaussian", "laplace", "round", "softmax", "argmax"):
            raise ArgumentError(f"unknown defense {self.kind!r}")
        if self.kind in ("gaussian", "laplace") and (self.param is None or self.param < 0):
            raise ArgumentError(f"{self.kind} needs a non-negative scale")
        if self.kind == "round" and (self.param is None or int(self.param) != self.param or self.param < 1):
            raise ArgumentError("round(q) needs an integer q >= 1")
        if self.placement not in ("logits", "released"):
            raise ArgumentError("noise placement must be 'logits' or 'released'")

    @classmethod
    def parse(cls, text, placement: str = "logits") -> "DefenseScheme":
        if isinstance(text, DefenseScheme):
            return text
        m = _SCHEME_RE.match(str(text).strip().lower().replace(" ", ""))
        if not m:
            raise ArgumentError(f"cannot parse defense {text!r}")
        kind = "round" if m.group(1) == "rounded" else m.group(1)
        param = m.group(2)
        if param:
            param = param.split("=")[-1]
            try:
                value = float(param)
            except ValueError:
                raise ArgumentError(f"cannot parse defense parameter in {text!r}") from None
            if kind == "round" and value.is_integer():
                value = int(value)
        else:
            value = None
        return cls(kind, value, placement)

    def __str__(self):
        if self.param is None:
            return self.kind
        p = int(self.param) if self.kind == "round" else self.param
        return f"{self.kind}({p})"

    def compatible(self, label_kind: str) -> bool:
        return label_kind == "categorical" or self.kind not in ("round", "softmax", "argmax")


def perturb_outputs(outputs, scheme, seed: int = 0) -> np.ndarray:
    """Apply one defense to a vector or ``(n, N)`` batch of logits.

    Noise schemes draw from ``numpy.random.default_rng(seed)``; ``round``,
    ``softmax`` and ``argmax`` delegate to :func:`nets.apply_output_mode`.
    """
    scheme = DefenseScheme.parse(scheme)
    z = np.asarray(outputs, dtype=np.float64)
    if scheme.kind == "identity":
        return z.copy()
    if scheme.kind == "gaussian":
        if scheme.param == 0:
            return z.copy()
        return z + np.random.default_rng(seed).normal(0.0, scheme.param, size=z.shape)
    if scheme.kind == "laplace":
        if scheme.param == 0:
            return z.copy()
        return z + np.random.default_rng(seed).laplace(0.0, scheme.param, size=z.shape)
    if scheme.kind == "round":
        return apply_output_mode(z, OutputMode("rounded", int(scheme.param)))
    return apply_output_mode(z, scheme.kind)


def one_hot(index, n: int) -> np.ndarray:
    index = np.asarray(index)
    out = np.zeros(index.shape + (n,))
    np.put_along_axis(out, index[..., None], 1.0, axis=-1)
    return out


def make_channel(scheme, clean_mode="logits", seed: int = 0):
    """Build ``logits -> (released, probabilistic)`` for :func:`jointtrain.evaluate`.

    ``identity`` and the noise schemes keep the clean output mode (noise is
    added to logits by default, or to the released values with
    ``placement='released'``). ``argmax`` releases a one-hot vector.
    """
    scheme = DefenseScheme.parse(scheme)
    clean = OutputMode.parse(clean_mode)

    def channel(logits):
        if scheme.kind in ("identity", "gaussian", "laplace"):
            if scheme.placement == "logits":
                return apply_output_mode(perturb_outputs(logits, scheme, seed), clean), clean.is_probability
            return perturb_outputs(apply_output_mode(logits, clean), scheme, seed), clean.is_probability
        released = perturb_outputs(logits, scheme, seed)
        if scheme.kind == "argmax":
            released = one_hot(released, logits.shape[-1])
        return released, True

    return channel


def alphabet_size(q: int, n: int) -> int:
    """Number of probability vectors over ``n`` outputs with ``q`` decimals.

    Stars and bars: ``C(10**q + n - 1, n - 1)``, exact.
    """
    if int(q) != q or q < 1:
        raise ArgumentError("q must be an integer >= 1")
    if int(n) != n or n < 2:
        raise ArgumentError("need at least two outputs")
    return math.comb(10 ** int(q) + int(n) - 1, int(n) - 1)


def entropy_bound(q: int, n: int) -> float:
    """``log2`` of :func:`alphabet_size`, in bits."""
    return math.log2(alphabet_size(q, n))


@dataclass
class DefenseRow:
    scheme: str
    acc: float
    psnr: float
    ssim: float
    risk: float
    note: str = ""

    def to_dict(self):
        return asdict(self)


def adapt_decoder(F, G, train_split: Split, channel, epochs: int = 3, lr: float = 1e-3,
                  batch_size: int = 128, seed: int = 0, alpha: float = 1.0, gamma: float = 1.0,
                  delta: float = 1.0):
    """Retrain a copy of ``G`` on defended outputs of a frozen ``F``."""
    G2 = copy_model(G)
    released, _ = channel(collect_logits(F, train_split.images))
    y = torch.as_tensor(np.asarray(released, dtype=np.float32))
    x = to_nchw(train_split.images)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(G2.parameters(), lr=lr)
    G2.train()
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for start in range(0, len(x), batch_size):
            idx = perm[start:start + batch_size]
            loss = reconstruction_loss(G2(y[idx]), x[idx], alpha, gamma, delta)
            opt.zero_grad()
            loss.backward()
            opt.step()
    G2.eval()
    return G2


def sweep_defenses(F, G, test_split: Split, schemes: Sequence, label_space: LabelSpace,
                   stats: GaussianStats, clean_mode="logits", seed: int = 0, *,
                   adaptive: bool = False, train_split: Split | None = None,
                   adapt_epochs: int = 3) -> list[DefenseRow]:
    """Evaluate accuracy and attack quality through each defended channel.

    Schemes that do not fit the label kind produce a row with NaN metrics and
    a note instead of an error.
    """
    rows = []
    for raw in schemes:
        scheme = DefenseScheme.parse(raw)
        if not scheme.compatible(label_space.kind):
            msg = f"{scheme} skipped: needs categorical labels"
            warnings.warn(msg)
            rows.append(DefenseRow(str(scheme), math.nan, math.nan, math.nan, math.nan, msg))
            continue
        channel = make_channel(scheme, clean_mode, seed)
        decoder = G
        note = ""
        if adaptive and scheme.kind != "identity":
            if train_split is None:
                raise ArgumentError("adaptive sweeps need the training split")
            decoder = adapt_decoder(F, G, train_split, channel, epochs=adapt_epochs, seed=seed)
            note = "adaptive"
        rep = evaluate(F, decoder, test_split, label_space, stats, clean_mode,
                       channel=None if scheme.kind == "identity" else channel,
                       channel_name=str(scheme), seed=seed)
        rows.append(DefenseRow(str(scheme), rep.acc, rep.psnr, rep.ssim, rep.risk, note))
    return rows


def write_defense_csv(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["scheme", "acc", "psnr", "ssim", "risk", "note"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_dict())


def plot_frontier(rows, path, title: str = "utility-privacy frontier") -> None:
    """Accuracy against reconstruction risk, one labelled point per scheme."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for row in rows:
        if math.isnan(row.acc):
            continue
        ax.scatter(row.risk, row.acc, s=18)
        ax.annotate(row.scheme, (row.risk, row.acc), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("reconstruction risk R")
    ax.set_ylabel("accuracy (%)")
    ax.set_title(title)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
