# src/lrclone/gradcheck.py
"""Central-difference gradient checks against the tape."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tape, Tensor, no_tape


@dataclass(slots=True)
class BlockCheck:
    name: str
    max_rel_error: float
    entries: int


@dataclass(slots=True)
class GradCheckReport:
    tolerance: float
    step: float
    blocks: list[BlockCheck] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((b.max_rel_error for b in self.blocks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def worst(self) -> BlockCheck | None:
        return max(self.blocks, key=lambda b: b.max_rel_error, default=None)


def _evaluate(f: Callable[[], Tensor]) -> float:
    with no_tape():
        out = f()
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return out.item()


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    *,
    names: Sequence[str] | None = None,
    max_entries: int | None = 8,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare tape gradients of `f` with central differences.

    `f` rebuilds its graph from the current `params` values on every call.
    Each block's error is max|autodiff - numeric| over the probed entries,
    normalized by the largest magnitude either side reports for that block.
    Blocks with more than `max_entries` entries are probed at a seeded sample.

    Raises:
        ContractError: `f` is not scalar or not deterministic.
    """
    if _evaluate(f) != _evaluate(f):
        raise ContractError("grad_check: function returned different values for identical parameters")

    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        p.zero_grad()

    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [p.grad_or_zeros().reshape(-1).copy() for p in params]
    for p in params:
        p.zero_grad()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance, step=step)
    labels = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]

    for label, p, a_flat in zip(labels, params, analytic, strict=True):
        flat = p.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            picks = np.arange(flat.size)
        else:
            picks = np.sort(rng.choice(flat.size, size=max_entries, replace=False))

        numeric = np.empty(len(picks), dtype=np.float64)
        for j, idx in enumerate(picks):
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = _evaluate(f)
            flat[idx] = orig - step
            f_minus = _evaluate(f)
            flat[idx] = orig
            numeric[j] = (f_plus - f_minus) / (2.0 * step)

        auto = a_flat[picks].astype(np.float64)
        scale = max(float(np.abs(auto).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
        diff = float(np.abs(auto - numeric).max(initial=0.0))
        err = 0.0 if diff == 0.0 else diff / max(scale, 1e-12)
        report.blocks.append(BlockCheck(name=label, max_rel_error=err, entries=len(picks)))

    return report
