"""Finite-difference verification of every differentiable op and of the full loss.

Each op check reduces the op's output with a fixed random projection,
``sum(op(x) * R)``, so every output element contributes a nonzero
gradient. Inputs are float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .losses import LossConfig, dice_loss, euclidean_loss, js_loss, total_loss
from .model import ModelConfig, build_model
from .nn_ops import (
    BatchNormParams,
    batchnorm2d,
    concat_channels,
    conv2d,
    dsnt,
    maxpool2x2,
    render_gaussian_target,
    spatial_softmax,
    upsample_bilinear2x,
)
from .tensor import Tensor, grad_check, mul, relu, sigmoid, sum

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
KINK = 1e-4  # entries this close to a relu/maxpool decision boundary are skipped


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict}  {self.name:<22} max rel err {self.max_rel_err:.3e} (tol {self.tolerance:.0e}, {self.seconds:.2f}s)"


def _projected(fn, shape_out, rng):
    r = Tensor(rng.normal(size=shape_out))
    return lambda *xs: sum(mul(fn(*xs), r))


def _check_inputs(fn, inputs: list[Tensor], exclude: dict[int, np.ndarray] | None = None) -> float:
    """Largest error over all inputs, each checked with the others held fixed."""
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(t, k=k):
            args = list(inputs)
            args[k] = t
            return fn(*args)

        worst = max(worst, grad_check(f, x, exclude=(exclude or {}).get(k)))
    return worst


def _maxpool_ties(x: np.ndarray) -> np.ndarray:
    """Mask of entries in windows whose two largest values nearly tie."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    top = np.sort(win, axis=-1)
    close = (top[..., 3] - top[..., 2]) < KINK
    return np.repeat(np.repeat(close, 2, axis=2), 2, axis=3)


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    t = lambda *shape: Tensor(rng.normal(size=shape))  # noqa: E731
    results = []

    def run(name, fn, inputs, out_shape, exclude=None):
        t0 = time.perf_counter()
        err = _check_inputs(_projected(fn, out_shape, rng), inputs, exclude)
        results.append(CheckResult(name, err, OP_TOLERANCE, time.perf_counter() - t0))

    a, b = t(3, 4), t(3, 4)
    run("add", lambda p, q: p + q, [a, b], (3, 4))

    x = t(4, 5)
    run("relu", relu, [x], (4, 5), {0: np.abs(x.data) < KINK})

    x, w, bias = t(2, 3, 6, 5), t(4, 3, 3, 3), t(4)
    run("conv2d", conv2d, [x, w, bias], (2, 4, 6, 5))
    x, w = t(1, 2, 5, 5), t(3, 2, 1, 1)
    run("conv2d_1x1", lambda p, q: conv2d(p, q), [x, w], (1, 3, 5, 5))

    bn = BatchNormParams.create(3, dtype=np.float64)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[:] = rng.normal(size=3)
    x = t(2, 3, 4, 4)

    def bn_train(p, g, be):
        saved = bn.running_mean.copy(), bn.running_var.copy()
        bn.gamma, bn.beta = g, be
        out = batchnorm2d(p, bn, training=True)
        bn.running_mean[...], bn.running_var[...] = saved
        return out

    run("batchnorm2d_train", bn_train, [x, bn.gamma, bn.beta], (2, 3, 4, 4))
    bn.running_mean[...] = rng.normal(size=3)
    bn.running_var[...] = rng.uniform(0.5, 2.0, 3)

    def bn_eval(p, g, be):
        bn.gamma, bn.beta = g, be
        return batchnorm2d(p, bn, training=False)

    run("batchnorm2d_eval", bn_eval, [x, bn.gamma, bn.beta], (2, 3, 4, 4))

    x = t(2, 3, 6, 4)
    run("maxpool2x2", maxpool2x2, [x], (2, 3, 3, 2), {0: _maxpool_ties(x.data)})

    x = t(2, 2, 3, 4)
    run("upsample_bilinear2x", upsample_bilinear2x, [x], (2, 2, 6, 8))

    a, b, c = t(2, 1, 3, 3), t(2, 2, 3, 3), t(2, 3, 3, 3)
    run("concat_channels", lambda p, q, r: concat_channels([p, q, r]), [a, b, c], (2, 6, 3, 3))

    x = t(2, 1, 5, 4)
    run("spatial_softmax", spatial_softmax, [x], (2, 5, 4))
    run("dsnt", lambda z: dsnt(spatial_softmax(z)), [t(2, 1, 5, 4)], (2, 2))
    z = Tensor(rng.uniform(0.1, 1.0, (2, 5, 4)))
    run("dsnt_raw", dsnt, [z], (2, 2))

    def scalar(name, fn, inputs):
        t0 = time.perf_counter()
        err = _check_inputs(fn, inputs)
        results.append(CheckResult(name, err, OP_TOLERANCE, time.perf_counter() - t0))

    target = (rng.random((2, 2, 6, 6)) > 0.5).astype(np.float64)
    scalar("dice_loss", lambda p: dice_loss(sigmoid(p), target), [t(2, 2, 6, 6)])
    tip = rng.uniform(-0.9, 0.9, (3, 2))
    scalar("euclidean_loss", lambda p: euclidean_loss(p, tip), [t(3, 2)])
    gt = render_gaussian_target(rng.uniform(-0.8, 0.8, (2, 2)), (6, 6), 1.0).data
    scalar("js_loss", lambda p: js_loss(spatial_softmax(p), gt), [t(2, 1, 6, 6)])
    return results


def model_check(n_params: int = 64, seed: int = 0) -> CheckResult:
    """Total-loss gradient of a depth-1 16x16 model at sampled parameter entries."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    model = build_model(ModelConfig(input_size=16, depth=1, channels=[3, 4], seed=seed), dtype=np.float64)
    x = Tensor(rng.random((2, 1, 16, 16)))
    masks = (rng.random((2, 2, 16, 16)) > 0.5).astype(np.float64)
    tips = rng.uniform(-0.8, 0.8, (2, 2))
    cfg = LossConfig()
    named = model.named_parameters()
    # zero-initialized biases would leave outputs of all-zero patches exactly on a relu kink
    for pname, p in named.items():
        if pname.endswith("bias"):
            p.data[:] = rng.normal(0, 0.1, p.shape)
    names = list(named)
    sizes = np.array([named[n].size for n in names])
    flat_pick = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for k, name in enumerate(names):
        local = [int(i - offsets[k]) for i in np.sort(flat_pick) if offsets[k] <= i < offsets[k + 1]]
        if not local:
            continue
        p = named[name]

        def f(_):
            return total_loss(model(x, training=True), masks, tips, cfg)

        worst = max(worst, grad_check(f, p, indices=local))
    name = f"model_total_loss[{len(flat_pick)}]"
    return CheckResult(name, worst, MODEL_TOLERANCE, time.perf_counter() - t0)


def run_all(full: bool = False, seed: int = 0) -> list[CheckResult]:
    results = op_checks(seed)
    if full:
        results.append(model_check(seed=seed))
    return results
