"""Training objective: Dice + weighted Euclidean tip error + weighted JS divergence."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nn_ops import render_gaussian_target
from .tensor import Tensor, make_node, mean, mul, sum

JS_FLOOR = 1e-12


@dataclass
class LossConfig:
    lambda1: float = 1.0  # Euclidean tip term
    lambda2: float = 1.0  # Jensen-Shannon heatmap term
    sigma: float = 1.0  # target Gaussian stddev, heatmap cells
    dice_smooth: float = 1.0

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"loss weights must be >= 0, got lambda1={self.lambda1}, lambda2={self.lambda2}")
        if self.sigma <= 0:
            raise ConfigError(f"loss.sigma must be > 0, got {self.sigma}")
        if self.dice_smooth <= 0:
            raise ConfigError(f"loss.dice_smooth must be > 0, got {self.dice_smooth}")

    def to_dict(self) -> dict:
        return asdict(self)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype)


def dice_loss(pred: Tensor, target, smooth: float = 1.0) -> Tensor:
    """Mean over batch and classes of ``1 - (2|P.T| + s) / (|P| + |T| + s)``."""
    t = _const(target, pred)
    if t.shape != pred.shape:
        raise ShapeError(f"dice_loss: prediction {pred.shape} vs target {t.shape}")
    axes = tuple(range(2, pred.ndim))
    inter = sum(mul(pred, t), axis=axes)
    denom = sum(pred, axis=axes) + Tensor(t.data.sum(axis=axes), dtype=pred.dtype) + smooth
    return 1.0 - mean((inter * 2.0 + smooth) / denom)


def euclidean_loss(pred: Tensor, target) -> Tensor:
    """Mean Euclidean distance between predicted and true (x, y); zero-distance gradient is 0."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"euclidean_loss: prediction {pred.shape} vs target {t.shape}")
    d = pred.data - t
    r = np.sqrt((d * d).sum(axis=1))
    n = pred.shape[0]
    safe = np.where(r > 0, r, 1.0)

    def bw(g):
        unit = np.where((r > 0)[:, None], d / safe[:, None], 0.0)
        return ((g / n) * unit,)

    return make_node(np.asarray(r.mean(), dtype=pred.dtype), (pred,), bw)


def js_loss(z: Tensor, target) -> Tensor:
    """Mean Jensen-Shannon divergence (natural log) between heatmaps and targets."""
    q = target.data if isinstance(target, Tensor) else np.asarray(target)
    q = q.astype(z.dtype, copy=False)
    if q.shape != z.shape:
        raise ShapeError(f"js_loss: heatmap {z.shape} vs target {q.shape}")
    p = z.data
    m = 0.5 * (p + q)
    axes = tuple(range(1, z.ndim))
    mc = np.maximum(m, JS_FLOOR)
    lp = np.log(np.maximum(p, JS_FLOOR) / mc)
    lq = np.log(np.maximum(q, JS_FLOOR) / mc)
    per = 0.5 * (np.where(p > 0, p * lp, 0.0).sum(axis=axes) + np.where(q > 0, q * lq, 0.0).sum(axis=axes))
    n = z.shape[0]

    def bw(g):
        # d/dp of the divergence collapses to 0.5 * log(p / m)
        return ((g / n) * 0.5 * lp,)

    return make_node(np.asarray(per.mean(), dtype=z.dtype), (z,), bw)


def loss_terms(out, gt_masks, gt_tip, cfg: LossConfig) -> dict[str, Tensor]:
    """All loss components plus their weighted total.

    ``gt_tip`` is ``[N, 2]`` in normalized coordinates.
    """
    seg = dice_loss(out.seg, gt_masks, cfg.dice_smooth)
    tip = gt_tip.data if isinstance(gt_tip, Tensor) else np.asarray(gt_tip)
    euc = euclidean_loss(out.coords, tip.astype(out.coords.dtype))
    target = render_gaussian_target(tip, out.heatmap.shape[1:], cfg.sigma, dtype=out.heatmap.dtype)
    js = js_loss(out.heatmap, target)
    total = seg + euc * cfg.lambda1 + js * cfg.lambda2
    return {"seg": seg, "euc": euc, "js": js, "total": total}


def total_loss(out, gt_masks, gt_tip, cfg: LossConfig) -> Tensor:
    return loss_terms(out, gt_masks, gt_tip, cfg)["total"]
