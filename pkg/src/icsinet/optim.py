"""diffGrad: Adam whose step is damped by a sigmoid of the gradient change."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, zero_grads  # noqa: F401  (re-exported)

SCHEDULES = ("constant", "cosine")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"optim.lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"optim betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ConfigError(f"optim.eps must be > 0, got {self.eps}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"optim.schedule must be one of {SCHEDULES}, got {self.schedule!r}")

    def lr_at(self, step: int, total_steps: int) -> float:
        """Learning rate for 0-based ``step`` of ``total_steps``."""
        if self.schedule == "cosine" and total_steps > 0:
            return 0.5 * self.lr * (1 + math.cos(math.pi * min(step, total_steps) / total_steps))
        return self.lr

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    g_prev: list[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[Tensor]) -> "OptimState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            g_prev=[np.zeros_like(p.data) for p in params],
        )


def friction(g: np.ndarray, g_prev: np.ndarray) -> np.ndarray:
    """Per-element damping in [0.5, 1): sigmoid of the absolute gradient change."""
    return 1.0 / (1.0 + np.exp(-np.abs(g_prev - g)))


def diffgrad_step(params: list[Tensor], grads: list[np.ndarray], state: OptimState, cfg: OptimConfig, lr: float | None = None) -> None:
    """Update ``params`` in place and advance ``state`` by one step."""
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ContractError(
            f"diffgrad_step: {len(params)} params, {len(grads)} grads, state for {len(state.m)} (initialize with OptimState.zeros_like)"
        )
    lr = cfg.lr if lr is None else lr
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ContractError(f"diffgrad_step: param {k} shape {p.shape}, grad {g.shape}, state {state.m[k].shape}")
        xi = friction(g, state.g_prev[k])
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * xi * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.data -= step.astype(p.dtype, copy=False)
        state.g_prev[k] = g.copy()


class DiffGrad:
    """Stateful convenience wrapper reading gradients from ``param.grad``."""

    def __init__(self, params: list[Tensor], cfg: OptimConfig | None = None):
        self.params = list(params)
        self.cfg = cfg or OptimConfig()
        self.cfg.validate()
        self.state = OptimState.zeros_like(self.params)

    def step(self, lr: float | None = None) -> None:
        diffgrad_step(self.params, [p.grad for p in self.params], self.state, self.cfg, lr)

    def zero_grad(self) -> None:
        zero_grads(self.params)
