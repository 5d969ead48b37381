"""AdamW with decoupled weight decay, and EMA parameter averaging."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Array, ParameterError, Tensor


class TrainingError(RuntimeError):
    """Raised when training state becomes unusable (e.g. non-finite grads)."""


@dataclass
class AdamWState:
    """Per-parameter first/second moments plus a shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    t: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)

    def moments(self, name: str, shape: tuple[int, ...]) -> tuple[Array, Array]:
        if name not in self.m:
            self.m[name] = np.zeros(shape, dtype=np.float64)
            self.v[name] = np.zeros(shape, dtype=np.float64)
        return self.m[name], self.v[name]


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float) -> None:
    """One bias-corrected AdamW update over ``params`` (in place).

    Gradients are read from each tensor's ``.grad`` (None counts as zero) and
    cleared afterwards. A non-finite gradient aborts with the parameter name.
    """
    if lr < 0:
        raise ParameterError(f"learning rate must be >= 0, got {lr}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m, v = state.moments(name, p.shape)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data -= lr * update
        p.grad = None


def ema_update(teacher: dict[str, Array], student: dict[str, Tensor], momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, elementwise."""
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError(f"EMA momentum must lie in [0, 1], got {momentum}")
    for name, arr in teacher.items():
        s = student[name]
        sdata = s.data if isinstance(s, Tensor) else s
        if arr.shape != sdata.shape:
            raise ParameterError(f"EMA shape mismatch for {name!r}: {arr.shape} vs {sdata.shape}")
        arr *= momentum
        arr += (1.0 - momentum) * sdata
