"""Differentiable building blocks for the segmentation/localization network.

All 4-D tensors are NCHW. Heatmaps are ``[N, H, W]`` and tip coordinates
``[N, 2]`` ordered (x, y) with x along columns, both in normalized units
where pixel ``j`` of a width-``W`` grid sits at ``(2j + 1 - W) / W``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, make_node


# --- convolution ---------------------------------------------------------------
# Patch matrices are built one row-block at a time so each block stays in
# cache; materializing the whole [C*k*k, N*H*W] matrix is memory-bound.
_BLOCK_ELEMS = 1 << 17


def _patch_blocks(x: np.ndarray, k: int):
    """Yield ``(n, row0, rows, cols)`` with ``cols`` shaped ``[C*k*k, rows*W]``."""
    n, c, h, w = x.shape
    p = (k - 1) // 2
    if p:
        xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p : p + h, p : p + w] = x
    else:
        xp = x
    rows = max(1, min(h, _BLOCK_ELEMS // (c * k * k * w)))
    buf = np.empty((c, k, k, rows, w), dtype=x.dtype)
    for b in range(n):
        for r in range(0, h, rows):
            m = min(rows, h - r)
            cols = buf[:, :, :, :m]
            # one row-contiguous copy per kernel offset beats gathering a windowed view
            for dy in range(k):
                for dx in range(k):
                    cols[:, dy, dx] = xp[b, :, r + dy : r + dy + m, dx : dx + w]
            yield b, r, m, cols.reshape(c * k * k, -1)


def _conv_forward(x: np.ndarray, wt: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    o, _, k, _ = wt.shape
    wmat = wt.reshape(o, -1)
    out = np.empty((n, o, h, w), dtype=np.result_type(x, wt))
    if k == 1:
        for b in range(n):
            out[b] = (wmat @ x[b].reshape(c, h * w)).reshape(o, h, w)
        return out
    for b, r, rows, cols in _patch_blocks(x, k):
        out[b, :, r : r + rows] = (wmat @ cols).reshape(o, rows, w)
    return out


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    o = g.shape[1]
    gw = np.zeros((o, c * k * k), dtype=g.dtype)
    if k == 1:
        for b in range(n):
            gw += g[b].reshape(o, h * w) @ x[b].reshape(c, h * w).T
        return gw.reshape(o, c, 1, 1)
    for b, r, rows, cols in _patch_blocks(x, k):
        gw += g[b, :, r : r + rows].reshape(o, -1) @ cols.T
    return gw.reshape(o, c, k, k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding (k = 1 or 3)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci} (weight {weight.shape})")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    xd, wd = x.data, weight.data
    out = _conv_forward(xd, wd)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            # adjoint of a 'same' correlation: correlate with the flipped, transposed kernel
            gx = _conv_forward(g, np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
        if weight.requires_grad:
            gw = _conv_weight_grad(xd, g, k)
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, bw)


# --- normalization ----------------------------------------------------------------
@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def batchnorm2d(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes by the batch mean and biased variance and
    folds them into the running statistics (the running variance uses the
    unbiased estimate). Eval mode reads only the running statistics.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if p.gamma.shape != (c,):
        raise ShapeError(f"batchnorm2d: {c} channels but gamma has shape {p.gamma.shape}")
    gamma = p.gamma.data.reshape(1, c, 1, 1)
    beta = p.beta.data.reshape(1, c, 1, 1)
    xd = x.data

    if not training:
        scale = gamma / np.sqrt(p.running_var.reshape(1, c, 1, 1) + p.eps)
        xhat = (xd - p.running_mean.reshape(1, c, 1, 1)) / np.sqrt(p.running_var.reshape(1, c, 1, 1) + p.eps)
        out = (xd - p.running_mean.reshape(1, c, 1, 1)) * scale + beta

        def bw_eval(g):
            return (g * scale, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return make_node(out.astype(xd.dtype, copy=False), (x, p.gamma, p.beta), bw_eval)

    m = n * h * w
    if m < 2:
        raise ContractError(f"batchnorm2d: training mode needs N*H*W >= 2 per channel, got {m}")
    mu = xd.mean(axis=(0, 2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv_std
    out = xhat * gamma + beta

    mom = p.momentum
    p.running_mean[...] = (1 - mom) * p.running_mean + mom * mu.reshape(c)
    p.running_var[...] = (1 - mom) * p.running_var + mom * var.reshape(c) * (m / (m - 1))

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma
        dx = inv_std * (
            dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True) - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        )
        return (dx, dgamma, dbeta)

    return make_node(out, (x, p.gamma, p.beta), bw)


# --- pooling / resampling ----------------------------------------------------------
def maxpool2x2(x: Tensor) -> Tensor:
    """Max over disjoint 2x2 windows; ties go to the first element in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial dims must be even, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_node(out, (x,), bw)


def _up1d(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up1d_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(out, -1, axis)


def upsample_bilinear2x(x: Tensor) -> Tensor:
    """2x bilinear upsampling, half-pixel centers, edge clamped."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear2x: expected NCHW input, got {x.shape}")
    out = _up1d(_up1d(x.data, 2), 3)
    return make_node(out, (x,), lambda g: (_up1d_adjoint(_up1d_adjoint(g, 3), 2),))


def concat_channels(xs: list[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: nothing to concatenate")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: cannot join {ref} with {t.shape} (batch/spatial dims differ)")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return make_node(out, tuple(xs), bw)


# --- keypoint head ------------------------------------------------------------------------
def spatial_softmax(logits: Tensor) -> Tensor:
    """Softmax over all spatial positions of a single-channel map; returns ``[N, H, W]``."""
    if logits.ndim != 4 or logits.shape[1] != 1:
        raise ShapeError(f"spatial_softmax: expected [N,1,H,W], got {logits.shape}")
    n, _, h, w = logits.shape
    z = logits.data.reshape(n, h * w)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        gf = g.reshape(n, h * w)
        gz = p * (gf - (gf * p).sum(axis=1, keepdims=True))
        return (gz.reshape(n, 1, h, w),)

    return make_node(p.reshape(n, h, w), (logits,), bw)


def dsnt_grid(size: int, dtype=np.float64) -> np.ndarray:
    j = np.arange(size, dtype=np.float64)
    return ((2 * j + 1 - size) / size).astype(dtype)


def dsnt(z: Tensor) -> Tensor:
    """Expected (x, y) coordinate of each normalized heatmap in ``z``."""
    if z.ndim != 3:
        raise ShapeError(f"dsnt: expected [N,H,W] heatmap, got {z.shape}")
    n, h, w = z.shape
    gx = dsnt_grid(w, z.dtype)
    gy = dsnt_grid(h, z.dtype)
    zd = z.data
    x = zd.sum(axis=1) @ gx
    y = zd.sum(axis=2) @ gy
    out = np.stack([x, y], axis=1)

    def bw(g):
        return (g[:, 0, None, None] * gx[None, None, :] + g[:, 1, None, None] * gy[None, :, None],)

    return make_node(out, (z,), bw)


def norm_to_grid(coord, size: int):
    """Normalized coordinate -> continuous index on a ``size``-cell grid (cell centers at integers)."""
    return (np.asarray(coord, dtype=np.float64) * size + size - 1) / 2


def grid_to_norm(index, size: int):
    return (2 * np.asarray(index, dtype=np.float64) + 1 - size) / size


def render_gaussian_target(tip, grid: tuple[int, int], sigma: float = 1.0, dtype=np.float64) -> Tensor:
    """Normalized isotropic Gaussians centred on each tip.

    ``tip`` is ``[N, 2]`` (x, y) in normalized units (Tensor or array);
    ``sigma`` is in heatmap cells. Returns a ``[N, H, W]`` constant tensor.
    """
    if sigma <= 0:
        raise ContractError(f"render_gaussian_target: sigma must be positive, got {sigma}")
    t = tip.data if isinstance(tip, Tensor) else np.asarray(tip)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 2)
    h, w = grid
    cx = norm_to_grid(t[:, 0], w)
    cy = norm_to_grid(t[:, 1], h)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    gx = np.exp(-0.5 * ((xs[None, :] - cx[:, None]) / sigma) ** 2)
    gy = np.exp(-0.5 * ((ys[None, :] - cy[:, None]) / sigma) ** 2)
    maps = gy[:, :, None] * gx[:, None, :]
    maps /= maps.sum(axis=(1, 2), keepdims=True)
    return Tensor(maps.astype(dtype))
