"""Adam with bias correction and decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> "OptimizerState":
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data if isinstance(p, Tensor) else p) for p in params]
        state.v = [np.zeros_like(p.data if isinstance(p, Tensor) else p) for p in params]
        return state


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], opt: OptimizerState) -> None:
    """Update ``params`` in place. A ``None`` gradient is treated as zero."""
    if len(params) != len(opt.m):
        raise ValueError(f"optimizer holds {len(opt.m)} moment slots for {len(params)} params")
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} != param shape {p.shape}")
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if opt.weight_decay:
            update = update + opt.weight_decay * p
        p -= (opt.lr * update).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.state = OptimizerState.for_params(self.params, lr=lr, betas=tuple(betas), eps=eps,
                                               weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                              for p in params if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total
