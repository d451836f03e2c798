# src/lrclone/losses.py
"""
Training objective: activation clone loss, temperature-scaled KL and
next-token cross-entropy, combined as L = L_KL + L_LM + α·L_clone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import CloneMask
from .enums import CloneTerm, Reduction
from .errors import ConfigError, ContractError, ShapeError
from .model import ActivationBundle
from .projection import ProjectionSet
from .tensor import Tensor, matmul, sum_scalars

_H_TERMS = {
    CloneTerm.q: "q",
    CloneTerm.k: "k",
    CloneTerm.v: "v",
    CloneTerm.gate: "gate",
    CloneTerm.up: "up",
}


def _zero(dtype: np.dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def _position_weights(mask: np.ndarray | None, shape: tuple[int, ...], dtype: np.dtype) -> np.ndarray | None:
    if mask is None:
        return None
    w = np.asarray(mask, dtype=dtype)
    if w.shape != shape:
        raise ShapeError(f"loss mask shape {w.shape} does not match positions {shape}")
    return w


def mse(
    a: Tensor,
    b: Tensor,
    reduction: Reduction = Reduction.mean,
    mask: np.ndarray | None = None,
) -> Tensor:
    """
    Squared error between two activations.

    `mask` weights positions (all leading axes but the last); masked-out
    positions drop out of both the sum and the mean's element count.
    """
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a - b
    sq = diff * diff
    w = _position_weights(mask, a.shape[:-1], a.dtype)
    if w is None:
        return sq.mean() if reduction is Reduction.mean else sq.sum()
    total = (sq * Tensor(w[..., None])).sum()
    if reduction is Reduction.sum:
        return total
    count = float(w.sum()) * a.shape[-1]
    return total * (1.0 / count) if count > 0 else _zero(a.dtype)


@dataclass(slots=True)
class CloneBreakdown:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)


def clone_loss_breakdown(
    student: ActivationBundle,
    teacher: ActivationBundle,
    proj: ProjectionSet,
    mask: CloneMask | None = None,
    *,
    reduction: Reduction = Reduction.mean,
    stop_grad_targets: bool = False,
    loss_mask: np.ndarray | None = None,
) -> CloneBreakdown:
    mask = mask or CloneMask()
    layers = student.num_layers
    if teacher.num_layers != layers or len(proj.layers) != layers:
        raise ContractError(
            f"layer counts differ: student {layers}, teacher {teacher.num_layers}, projections {len(proj.layers)}"
        )
    dtype = student.o_attn[0].dtype if layers else np.dtype(np.float32)
    parts: list[Tensor] = []
    terms = {t.value: 0.0 for t in CloneTerm}

    for i in range(layers):
        for term in CloneTerm:
            if not mask.enabled(term, i):
                continue
            if term in _H_TERMS:
                key = _H_TERMS[term]
                s_act, target = student.h[key][i], teacher.h[key][i].detach()
            else:
                s_act = student.o_attn[i] if term is CloneTerm.o_attn else student.o_ffn[i]
                t_act = teacher.o_attn[i] if term is CloneTerm.o_attn else teacher.o_ffn[i]
                w = proj.layers[i].clone_target_projection(term.value)
                target = matmul(t_act.detach(), w.detach() if stop_grad_targets else w)
            if s_act.shape != target.shape:
                raise ContractError(f"layer {i} {term.value}: student {s_act.shape} vs target {target.shape}")
            value = mse(s_act, target, reduction, loss_mask)
            parts.append(value)
            terms[term.value] += value.item()

    total = sum_scalars(parts) if parts else _zero(dtype)
    return CloneBreakdown(total=total, terms=terms)


def clone_loss(
    student: ActivationBundle,
    teacher: ActivationBundle,
    proj: ProjectionSet,
    mask: CloneMask | None = None,
    **kwargs: object,
) -> Tensor:
    return clone_loss_breakdown(student, teacher, proj, mask, **kwargs).total  # type: ignore[arg-type]


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _weighted_mean(per_position: Tensor, w: np.ndarray | None) -> Tensor:
    if w is None:
        return per_position.mean()
    denom = float(w.sum())
    if denom == 0:
        return _zero(per_position.dtype)
    return (per_position * Tensor(w)).sum() * (1.0 / denom)


def kl_loss(
    teacher_logits: Tensor,
    student_logits: Tensor,
    temperature: float = 40.0,
    *,
    t2: bool = True,
    mask: np.ndarray | None = None,
) -> Tensor:
    """τ²·mean over positions of KL(softmax(teacher/τ) ‖ softmax(student/τ))."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(f"kl_loss: teacher {teacher_logits.shape} vs student {student_logits.shape}")
    dtype = student_logits.dtype
    inv_t = 1.0 / temperature
    log_p = _log_softmax_np(teacher_logits.data.astype(dtype, copy=False) * np.asarray(inv_t, dtype=dtype))
    p = np.exp(log_p)
    log_q = (student_logits * inv_t).log_softmax(axis=-1)
    per_position = (Tensor(p) * (Tensor(log_p) - log_q)).sum(axis=-1)
    loss = _weighted_mean(per_position, _position_weights(mask, student_logits.shape[:-1], dtype))
    return loss * (temperature * temperature) if t2 else loss


def lm_loss(student_logits: Tensor, tokens: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean next-token cross-entropy; position t predicts tokens[t + 1]."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if student_logits.shape[:-1] != ids.shape:
        raise ShapeError(f"lm_loss: logits {student_logits.shape} vs tokens {ids.shape}")
    dtype = student_logits.dtype
    targets = np.zeros_like(ids)
    targets[:, :-1] = ids[:, 1:]
    w = np.ones(ids.shape, dtype=dtype)
    w[:, -1] = 0
    extra = _position_weights(mask, ids.shape, dtype)
    if extra is not None:
        w = w * extra
    nll = -student_logits.log_softmax(axis=-1).take_last(targets)
    return _weighted_mean(nll, w)


@dataclass(slots=True)
class LossReport:
    clone: float
    kl: float
    lm: float
    total: float
    terms: dict[str, float] = field(default_factory=dict)
    objective: Tensor | None = None

    def human_summary(self) -> str:
        return f"total={self.total:.6f} kl={self.kl:.6f} lm={self.lm:.6f} clone={self.clone:.6f}"


def total_loss(
    kl: Tensor | float,
    lm: Tensor | float,
    clone: Tensor | float,
    alpha: float,
    terms: dict[str, float] | None = None,
) -> LossReport:
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    if isinstance(kl, Tensor) and isinstance(lm, Tensor) and isinstance(clone, Tensor):
        objective = kl + lm + clone * alpha
        return LossReport(
            clone=clone.item(),
            kl=kl.item(),
            lm=lm.item(),
            total=objective.item(),
            terms=dict(terms or {}),
            objective=objective,
        )
    k, m, c = (float(x.item() if isinstance(x, Tensor) else x) for x in (kl, lm, clone))
    return LossReport(clone=c, kl=k, lm=m, total=k + m + alpha * c, terms=dict(terms or {}))
