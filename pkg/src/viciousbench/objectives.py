"""Classification and reconstruction losses, SSIM, and accuracy metrics.

Loss functions take torch tensors and stay differentiable. Images in batched
form are ``(B, C, H, W)``; single ``H x W x C`` arrays are accepted by the
metric helpers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ArgumentError

LOG_FLOOR = math.log(1e-12)
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5


@dataclass(frozen=True)
class TradeoffWeights:
    beta_C: float = 1.0
    beta_R: float = 1.0
    alpha: float = 1.0
    gamma: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        for name in ("beta_C", "beta_R", "alpha", "gamma"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"{name} must be non-negative")
        if self.delta <= 0:
            raise ArgumentError("delta must be positive")
        if self.beta_C + self.beta_R <= 0:
            raise ArgumentError("beta_C + beta_R must be positive")

    @classmethod
    def from_ratio(cls, ratio: float, **kw) -> "TradeoffWeights":
        """Encode beta_R/beta_C: 0 -> (1, 0), inf -> (0, 1), r -> (1, r)."""
        ratio = float(ratio)
        if ratio < 0 or math.isnan(ratio):
            raise ArgumentError(f"ratio must be non-negative, got {ratio}")
        if math.isinf(ratio):
            return cls(beta_C=0.0, beta_R=1.0, **kw)
        return cls(beta_C=1.0, beta_R=ratio, **kw)

    @property
    def ratio(self) -> float:
        return math.inf if self.beta_C == 0 else self.beta_R / self.beta_C


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 1 else x


def categorical_ce(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean of ``-log softmax(logits)[y]`` over the batch (0-based ``y``)."""
    logits = _as_batch(torch.as_tensor(logits))
    y = torch.as_tensor(y).reshape(-1).long()
    return -torch.log_softmax(logits, dim=-1).gather(1, y[:, None]).mean()


def weighted_bce(logits: torch.Tensor, y: torch.Tensor, weights) -> torch.Tensor:
    """Class-weighted binary cross-entropy, averaged over attributes and batch."""
    logits = _as_batch(torch.as_tensor(logits))
    y = _as_batch(torch.as_tensor(y)).to(logits.dtype)
    eta = torch.as_tensor(weights, dtype=logits.dtype)
    log_p = F.logsigmoid(logits).clamp_min(LOG_FLOOR)
    log_q = F.logsigmoid(-logits).clamp_min(LOG_FLOOR)
    return -(eta * y * log_p + (1 - y) * log_q).mean()


@lru_cache(maxsize=16)
def _gauss_1d(size: int, sigma: float) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _to_nchw(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    if t.dim() == 3:  # H x W x C
        t = t.permute(2, 0, 1).unsqueeze(0)
    return t


def ssim_per_image(a: torch.Tensor, b: torch.Tensor, window: int = SSIM_WINDOW,
                   sigma: float = SSIM_SIGMA, data_range: float = 1.0) -> torch.Tensor:
    """Unclipped mean SSIM for each image of a ``(B, C, H, W)`` batch.

    Gaussian-weighted statistics over every valid ``window x window``
    placement (stride 1); the window shrinks to the image when it is larger.
    """
    if a.shape != b.shape:
        raise ArgumentError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    _, c, h, w = a.shape
    win = min(window, h, w)
    g = _gauss_1d(win, sigma).to(a.dtype)
    row = g.view(1, 1, 1, win).repeat(c, 1, 1, 1)
    col = g.view(1, 1, win, 1).repeat(c, 1, 1, 1)

    def blur(t):
        return F.conv2d(F.conv2d(t, row, groups=c), col, groups=c)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return smap.mean(dim=(1, 2, 3))


def ssim(x_rec, x) -> float:
    """SSIM of two images (``H x W x C`` or ``(B, C, H, W)``), clipped to [0, 1]."""
    a = _to_nchw(x_rec).double()
    b = _to_nchw(x).double()
    return float(ssim_per_image(a, b).mean().clamp(0.0, 1.0))


def huber(x_rec, x, delta: float = 1.0):
    """Element-wise Huber penalty averaged over all elements."""
    if delta <= 0:
        raise ArgumentError("delta must be positive")
    if isinstance(x_rec, torch.Tensor) or isinstance(x, torch.Tensor):
        return F.huber_loss(torch.as_tensor(x_rec), torch.as_tensor(x), delta=delta)
    e = np.abs(np.asarray(x_rec, dtype=np.float64) - np.asarray(x, dtype=np.float64))
    return float(np.where(e < delta, 0.5 * e ** 2, delta * (e - 0.5 * delta)).mean())


def reconstruction_loss(x_rec: torch.Tensor, x: torch.Tensor, alpha: float = 1.0,
                        gamma: float = 1.0, delta: float = 1.0) -> torch.Tensor:
    """``alpha * (1 - SSIM) + gamma * Huber``, batch-averaged."""
    x_rec, x = _to_nchw(x_rec), _to_nchw(x)
    loss = x_rec.new_zeros(())
    if alpha:
        loss = loss + alpha * (1 - ssim_per_image(x_rec, x).mean())
    if gamma:
        loss = loss + gamma * huber(x_rec, x, delta)
    return loss


def combined_loss(class_loss, recon_loss, weights: TradeoffWeights):
    return weights.beta_C * class_loss + weights.beta_R * recon_loss


def _np(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def accuracy_categorical(outputs, labels) -> float:
    """Percentage of samples whose argmax output matches the label.

    ``outputs`` may be ``(n, N)`` scores or ``(n,)`` already-decided indices.
    """
    outputs, labels = _np(outputs), _np(labels).reshape(-1)
    pred = outputs if outputs.ndim == 1 else outputs.argmax(axis=1)
    return float((pred == labels).mean() * 100.0)


def accuracy_binary(outputs, labels, thresholds) -> float:
    """Mean over attributes of thresholded per-attribute accuracy, in percent."""
    outputs, labels = np.atleast_2d(_np(outputs)), np.atleast_2d(_np(labels))
    tau = np.asarray(thresholds, dtype=np.float64).reshape(1, -1)
    per_attr = ((outputs > tau).astype(np.int64) == labels).mean(axis=0)
    return float(per_attr.mean() * 100.0)
