"""Target classifiers, mirrored attack decoders and output-mode adapters.

Classifiers map ``(B, C, H, W)`` images to raw logits ``(B, N)``; decoders map
``(B, N)`` vectors back to ``(B, C, H, W)`` images squashed into ``[0, 1]`` by
a terminal logistic unit.
"""
from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import tensorio
from .errors import ArgumentError, CheckpointFormatError, ConstructionError

FAMILIES = ("wideresnet", "smallcnn", "mlp")
DEFAULT_WRN_DEPTH = 28


@dataclass(frozen=True)
class ClassifierSpec:
    family: str
    width: int
    n_outputs: int
    input_shape: tuple[int, int, int]
    depth: int = DEFAULT_WRN_DEPTH

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        _check_family(self.family, self.width, self.depth, self.input_shape)
        if self.n_outputs < 1:
            raise ConstructionError("n_outputs must be at least 1")


@dataclass(frozen=True)
class DecoderSpec:
    family: str
    width: int
    n_inputs: int
    output_shape: tuple[int, int, int]
    depth: int = DEFAULT_WRN_DEPTH

    def __post_init__(self):
        object.__setattr__(self, "output_shape", tuple(int(s) for s in self.output_shape))
        _check_family(self.family, self.width, self.depth, self.output_shape)
        if self.n_inputs < 1:
            raise ConstructionError("n_inputs must be at least 1")

    @classmethod
    def mirror(cls, spec: ClassifierSpec) -> "DecoderSpec":
        return cls(spec.family, spec.width, spec.n_outputs, spec.input_shape, spec.depth)


def _check_family(family, width, depth, shape):
    if family not in FAMILIES:
        raise ConstructionError(f"unknown model family {family!r}")
    if width < 1:
        raise ConstructionError("width must be at least 1")
    if len(shape) != 3 or min(shape) < 1:
        raise ConstructionError(f"shape must be (H, W, C) with positive entries, got {shape}")
    h, w, _ = shape
    if family in ("smallcnn", "wideresnet") and (h % 4 or w % 4 or h < 8 or w < 8):
        raise ConstructionError(f"{family} needs H and W divisible by 4 and at least 8, got {h}x{w}")
    if family == "wideresnet" and (depth - 4) % 6:
        raise ConstructionError(f"wideresnet depth must be 6n+4, got {depth}")


# ---------------------------------------------------------------- classifiers

class MLPClassifier(nn.Module):
    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        h, w, c = spec.input_shape
        hidden = 64 * spec.width
        self.net = nn.Sequential(
            nn.Flatten(), nn.Linear(h * w * c, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, spec.n_outputs))

    def forward(self, x):
        return self.net(x)


class SmallCNN(nn.Module):
    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        h, w, c = spec.input_shape
        c1, c2, hidden = 8 * spec.width, 16 * spec.width, 64 * spec.width
        self.features = nn.Sequential(
            nn.Conv2d(c, c1, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))
        self.head = nn.Sequential(
            nn.Flatten(), nn.Linear(c2 * (h // 4) * (w // 4), hidden), nn.ReLU(),
            nn.Linear(hidden, spec.n_outputs))

    def forward(self, x):
        return self.head(self.features(x))


class _WideBlock(nn.Module):
    """Pre-activation residual block; ``transpose`` swaps in transposed convs."""

    def __init__(self, cin, cout, stride, transpose=False):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU()
        if transpose:
            self.conv1 = (nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=False) if stride == 2
                          else nn.ConvTranspose2d(cin, cout, 3, padding=1, bias=False))
            self.conv2 = nn.ConvTranspose2d(cout, cout, 3, padding=1, bias=False)
            self.shortcut = None if (cin == cout and stride == 1) else (
                nn.ConvTranspose2d(cin, cout, stride, stride=stride, bias=False))
        else:
            self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
            self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
            self.shortcut = None if (cin == cout and stride == 1) else (
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False))

    def forward(self, x):
        o = self.relu(self.bn1(x))
        y = self.conv1(o)
        y = self.conv2(self.relu(self.bn2(y)))
        return y + (x if self.shortcut is None else self.shortcut(o))


class WideResNet(nn.Module):
    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        h, w, c = spec.input_shape
        n = (spec.depth - 4) // 6
        widths = [16, 16 * spec.width, 32 * spec.width, 64 * spec.width]
        layers = [nn.Conv2d(c, widths[0], 3, padding=1, bias=False)]
        for g, stride in enumerate((1, 2, 2)):
            for i in range(n):
                layers.append(_WideBlock(widths[g] if i == 0 else widths[g + 1], widths[g + 1],
                                         stride if i == 0 else 1))
        layers += [nn.BatchNorm2d(widths[3]), nn.ReLU(), nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(widths[3], spec.n_outputs)

    def forward(self, x):
        return self.fc(self.features(x))


# ---------------------------------------------------------------- decoders

class _Squash(nn.Module):
    """Adds a per-pixel bias map then applies the logistic function."""

    def __init__(self, shape):
        super().__init__()
        h, w, c = shape
        self.pixel_bias = nn.Parameter(torch.zeros(1, c, h, w))

    def forward(self, z):
        return torch.sigmoid(z + self.pixel_bias)


class MLPDecoder(nn.Module):
    def __init__(self, spec: DecoderSpec):
        super().__init__()
        h, w, c = spec.output_shape
        hidden = 64 * spec.width
        self.shape = (c, h, w)
        self.net = nn.Sequential(
            nn.Linear(spec.n_inputs, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, h * w * c))
        self.last = self.net[-1]
        self.squash = _Squash(spec.output_shape)

    def forward(self, y):
        return self.squash(self.net(y).view(-1, *self.shape))


class SmallDeconv(nn.Module):
    def __init__(self, spec: DecoderSpec):
        super().__init__()
        h, w, c = spec.output_shape
        c1, c2, hidden = 8 * spec.width, 16 * spec.width, 64 * spec.width
        self.grid = (c2, h // 4, w // 4)
        self.head = nn.Sequential(
            nn.Linear(spec.n_inputs, hidden), nn.ReLU(),
            nn.Linear(hidden, c2 * (h // 4) * (w // 4)), nn.ReLU())
        self.body = nn.Sequential(
            nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c1, c, 4, stride=2, padding=1))
        self.last = self.body[-1]
        self.squash = _Squash(spec.output_shape)

    def forward(self, y):
        return self.squash(self.body(self.head(y).view(-1, *self.grid)))


class WideDeconv(nn.Module):
    def __init__(self, spec: DecoderSpec):
        super().__init__()
        h, w, c = spec.output_shape
        n = (spec.depth - 4) // 6
        widths = [64 * spec.width, 32 * spec.width, 16 * spec.width, 16]
        self.grid = (widths[0], h // 4, w // 4)
        self.head = nn.Linear(spec.n_inputs, widths[0] * (h // 4) * (w // 4))
        layers = []
        for g, stride in enumerate((2, 2, 1)):
            for i in range(n):
                layers.append(_WideBlock(widths[g] if i == 0 else widths[g + 1], widths[g + 1],
                                         stride if i == 0 else 1, transpose=True))
        layers += [nn.BatchNorm2d(widths[3]), nn.ReLU(), nn.ConvTranspose2d(widths[3], c, 3, padding=1)]
        self.body = nn.Sequential(*layers)
        self.last = self.body[-1]
        self.squash = _Squash(spec.output_shape)

    def forward(self, y):
        return self.squash(self.body(self.head(y).view(-1, *self.grid)))


_CLASSIFIERS = {"mlp": MLPClassifier, "smallcnn": SmallCNN, "wideresnet": WideResNet}
_DECODERS = {"mlp": MLPDecoder, "smallcnn": SmallDeconv, "wideresnet": WideDeconv}


def build_classifier(spec: ClassifierSpec, seed: int) -> nn.Module:
    """Deterministically initialised classifier emitting raw logits."""
    torch.manual_seed(seed)
    model = _CLASSIFIERS[spec.family](spec)
    model.spec = spec
    return model


def build_decoder(spec: DecoderSpec, seed: int, mean_image=None) -> nn.Module:
    """Deterministically initialised decoder with outputs in ``[0, 1]``.

    With ``mean_image`` (``H x W x C`` in ``[0, 1]``) the last layer starts at
    zero and the pixel bias at ``logit(mean_image)``, so an untrained decoder
    emits the data mean for every input.
    """
    torch.manual_seed(seed)
    model = _DECODERS[spec.family](spec)
    model.spec = spec
    if mean_image is not None:
        anchor_decoder(model, mean_image)
    return model


def anchor_decoder(decoder: nn.Module, mean_image) -> None:
    mean = torch.as_tensor(np.asarray(mean_image, dtype=np.float32)).clamp(1e-4, 1 - 1e-4)
    if mean.dim() == 3:
        mean = mean.permute(2, 0, 1)
    with torch.no_grad():
        decoder.last.weight.zero_()
        if decoder.last.bias is not None:
            decoder.last.bias.zero_()
        decoder.squash.pixel_bias.copy_(torch.logit(mean).reshape_as(decoder.squash.pixel_bias))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------- output modes

_MODE_RE = re.compile(r"^(logits|softmax|sigmoid|argmax|rounded|round)(?:\((\d+)\))?$")


@dataclass(frozen=True)
class OutputMode:
    mode: str
    decimals: int | None = None

    def __post_init__(self):
        if self.mode not in ("logits", "softmax", "sigmoid", "rounded", "argmax"):
            raise ArgumentError(f"unknown output mode {self.mode!r}")
        if self.mode == "rounded" and (self.decimals is None or self.decimals < 1):
            raise ArgumentError("rounded(q) needs q >= 1")

    @classmethod
    def parse(cls, text) -> "OutputMode":
        if isinstance(text, OutputMode):
            return text
        m = _MODE_RE.match(str(text).strip().lower())
        if not m:
            raise ArgumentError(f"cannot parse output mode {text!r}")
        name, q = m.group(1), m.group(2)
        if name == "round":
            name = "rounded"
        return cls(name, int(q) if q is not None else None)

    def __str__(self):
        return f"rounded({self.decimals})" if self.mode == "rounded" else self.mode

    @property
    def is_probability(self) -> bool:
        return self.mode in ("softmax", "sigmoid", "rounded")

    def check(self, label_kind: str) -> None:
        if self.mode in ("softmax", "rounded") and label_kind != "categorical":
            raise ArgumentError(f"{self} needs categorical labels")
        if self.mode == "sigmoid" and label_kind != "binary":
            raise ArgumentError("sigmoid needs binary labels")


def round_simplex(probs: np.ndarray, decimals: int) -> np.ndarray:
    """Round rows of a probability matrix onto the ``10**-decimals`` grid.

    The rounding residual goes into the largest entry, so each row sums to
    exactly ``10**decimals`` grid units.
    """
    scale = 10 ** decimals
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    units = np.rint(probs * scale).astype(np.int64)
    top = probs.argmax(axis=1)
    rows = np.arange(len(units))
    units[rows, top] += scale - units.sum(axis=1)
    for r in np.flatnonzero(units[rows, top] < 0):
        # rare: over-rounding exceeds the largest entry; take units back from
        # the entries that gained most from rounding
        deficit = -units[r, top[r]]
        units[r, top[r]] = 0
        gain = units[r] - probs[r] * scale
        for j in np.argsort(-gain, kind="stable"):
            take = min(deficit, units[r, j])
            units[r, j] -= take
            deficit -= take
            if not deficit:
                break
    return units / scale


def apply_output_mode(logits, mode):
    """Transform logits into the released output channel.

    Works on a single vector or a batch (last axis = outputs); accepts torch
    tensors (differentiable for logits/softmax/sigmoid) or array-likes.
    ``argmax`` returns the smallest maximizing index.
    """
    mode = OutputMode.parse(mode)
    if isinstance(logits, torch.Tensor):
        if mode.mode == "logits":
            return logits
        if mode.mode == "softmax":
            return torch.softmax(logits, dim=-1)
        if mode.mode == "sigmoid":
            return torch.sigmoid(logits)
        if mode.mode == "argmax":
            return torch.argmax(logits, dim=-1)
        out = apply_output_mode(logits.detach().cpu().double().numpy(), mode)
        return torch.as_tensor(out, dtype=logits.dtype)
    z = np.asarray(logits, dtype=np.float64)
    if mode.mode == "logits":
        return z
    if mode.mode == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if mode.mode == "argmax":
        return np.argmax(z, axis=-1)
    shifted = z - z.max(axis=-1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=-1, keepdims=True)
    if mode.mode == "softmax":
        return p
    out = round_simplex(p.reshape(-1, p.shape[-1]), mode.decimals)
    return out.reshape(p.shape)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"VBCK"
CKPT_VERSION = 1


def save_checkpoint(path, model: nn.Module, seed: int, meta: dict | None = None) -> None:
    """Write ``model`` as: magic, u16 version, u32 header length, JSON header,
    then one tensor record (see :mod:`viciousbench.tensorio`) per state entry."""
    spec = model.spec
    kind = "classifier" if isinstance(spec, ClassifierSpec) else "decoder"
    state = model.state_dict()
    header = {
        "kind": kind, "spec": asdict(spec), "seed": int(seed), "meta": meta or {},
        "entries": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(blob)) + blob)
        for v in state.values():
            tensorio.write_tensor(fh, v.detach().cpu().numpy())


def load_checkpoint(path):
    """Returns ``(model, seed, meta)``."""
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise CheckpointFormatError(f"{path} is not a checkpoint")
        version, length = struct.unpack("<HI", fh.read(6))
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(length))
        arrays = []
        while (arr := tensorio.read_tensor(fh)) is not None:
            arrays.append(arr)
    spec_fields = header["spec"]
    if header["kind"] == "classifier":
        spec_fields["input_shape"] = tuple(spec_fields["input_shape"])
        model = build_classifier(ClassifierSpec(**spec_fields), header["seed"])
    else:
        spec_fields["output_shape"] = tuple(spec_fields["output_shape"])
        model = build_decoder(DecoderSpec(**spec_fields), header["seed"])
    names = [e["name"] for e in header["entries"]]
    if len(names) != len(arrays):
        raise CheckpointFormatError(f"{path}: header lists {len(names)} entries, found {len(arrays)}")
    model.load_state_dict({n: torch.from_numpy(a) for n, a in zip(names, arrays)})
    model.eval()
    return model, header["seed"], header["meta"]
