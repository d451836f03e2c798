# src/lrclone/optim.py

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteError
from .tensor import Tensor


@dataclass(slots=True)
class OptimizerState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> OptimizerState:
        return cls(
            step=0,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )

    def copy(self) -> OptimizerState:
        return OptimizerState(step=self.step, m=[a.copy() for a in self.m], v=[a.copy() for a in self.v])


def lr_schedule(step: float, total_steps: int, warmup_ratio: float, peak_lr: float) -> float:
    """Linear ramp 0 → peak over warmup_ratio·total_steps, then linear decay to 0 at total_steps."""
    if total_steps <= 0:
        return 0.0
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_ratio * total_steps
    if step < warmup:
        return peak_lr * step / warmup
    if warmup >= total_steps:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup)


def global_grad_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.square(g, dtype=np.float64).sum()) for g in grads))


def check_finite(grads: Sequence[np.ndarray], names: Sequence[str] | None = None) -> None:
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[i] if names is not None else f"param{i}"
            raise NonFiniteError(f"non-finite gradient in {label}")


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: float | None = None,
    names: Sequence[str] | None = None,
) -> float:
    """
    Bias-corrected Adam, updating `params` and `state` in place.

    Gradients are clipped to `clip_norm` by global norm before the moments
    see them. Returns the pre-clip global norm.

    Raises:
        NonFiniteError: a gradient holds NaN or inf; nothing is modified.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers")
    check_finite(grads, names)
    norm = global_grad_norm(grads)
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / (norm + 1e-6)

    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v, strict=True):
        g = g * scale if scale != 1.0 else g
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= (lr * update).astype(p.dtype, copy=False)
    return norm
