# src/lrclone/trainer.py
"""
Optimization loops.

`train_step` runs one LRC update: project the student from the frozen
teacher, forward both, score clone/KL/LM losses, backpropagate into the
projections and student gains, and take an Adam step. `train_lm_step` is
the ordinary next-token update of a full WeightSet, used to pre-train
teachers, for from-scratch baselines and as the throughput reference.
"""

from __future__ import annotations

import csv
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .checkpoint import ProjectionState, save_projection
from .config import ModelConfig, TrainConfig
from .corpus import BatchStream, TokenCorpus, boundary_mask
from .errors import ContractError, NonFiniteError
from .losses import LossReport, clone_loss_breakdown, kl_loss, lm_loss, total_loss
from .model import WeightSet, init_teacher_weights, model_forward, weights_hash
from .optim import OptimizerState, adam_step, lr_schedule
from .projection import ProjectionSet, init_projections, student_weights
from .tensor import Tape, Tensor, no_tape
from .utils import write_atomic

if TYPE_CHECKING:
    from .orchestrator import Reporter

METRICS_HEADER = ("step", "lr", "clone", "kl", "lm", "total", "grad_norm", "tokens", "wall_ms")


@dataclass(slots=True)
class TrainerState:
    optimizer: OptimizerState
    step: int = 0
    spikes: int = 0
    cursor: int = 0
    last_lr: float = 0.0
    last_grad_norm: float = 0.0

    @classmethod
    def fresh(cls, params: Sequence[Tensor]) -> TrainerState:
        return cls(optimizer=OptimizerState.for_params(params))


def lrc_objective(
    tokens: np.ndarray,
    teacher: WeightSet,
    proj: ProjectionSet,
    cfg: TrainConfig,
    separator: int | None = None,
) -> LossReport:
    """Total loss with its breakdown; the graph lands on the active tape."""
    with no_tape():
        t_bundle = model_forward(tokens, teacher)
    student = student_weights(teacher, proj)
    s_bundle = model_forward(tokens, student)

    mask = None
    if cfg.mask_boundaries and separator is not None:
        mask = boundary_mask(tokens, separator)

    clone = clone_loss_breakdown(
        s_bundle,
        t_bundle,
        proj,
        cfg.clone_mask,
        reduction=cfg.clone_reduction,
        stop_grad_targets=cfg.stop_grad_targets,
        loss_mask=mask,
    )
    assert t_bundle.logits is not None and s_bundle.logits is not None
    kl = kl_loss(t_bundle.logits, s_bundle.logits, cfg.temperature, t2=cfg.kl_t2, mask=mask)
    lm = lm_loss(s_bundle.logits, tokens, mask)
    return total_loss(kl, lm, clone.total, cfg.alpha, clone.terms)


def _mean_reports(reports: list[LossReport]) -> LossReport:
    n = len(reports)
    terms = {k: sum(r.terms.get(k, 0.0) for r in reports) / n for k in reports[0].terms}
    return LossReport(
        clone=sum(r.clone for r in reports) / n,
        kl=sum(r.kl for r in reports) / n,
        lm=sum(r.lm for r in reports) / n,
        total=sum(r.total for r in reports) / n,
        terms=terms,
    )


def accumulate_gradients(
    tokens: np.ndarray,
    params: Sequence[Tensor],
    num_microbatches: int,
    objective: Callable[[np.ndarray], LossReport],
) -> tuple[LossReport, list[np.ndarray]]:
    """
    Split the batch along its first axis, backpropagate each slice's
    objective / n in slice order and return the mean report and summed grads.
    """
    for p in params:
        p.zero_grad()
    reports = []
    for chunk in np.split(tokens, num_microbatches, axis=0):
        with Tape() as tape:
            report = objective(chunk)
            assert report.objective is not None
            tape.backward(report.objective * (1.0 / num_microbatches))
        report.objective = None
        reports.append(report)
    grads = [p.grad_or_zeros() for p in params]
    for p in params:
        p.zero_grad()
    return _mean_reports(reports), grads


def _apply_update(
    params: Sequence[Tensor],
    names: Sequence[str],
    grads: list[np.ndarray],
    report: LossReport,
    state: TrainerState,
    cfg: TrainConfig,
    lr: float,
) -> bool:
    """Adam update unless the loss or a gradient is non-finite; returns True when applied."""
    state.step += 1
    state.last_lr = lr
    if not math.isfinite(report.total):
        state.spikes += 1
        state.last_grad_norm = float("nan")
        return False
    try:
        state.last_grad_norm = adam_step(
            params,
            grads,
            state.optimizer,
            lr,
            beta1=cfg.adam_beta1,
            beta2=cfg.adam_beta2,
            eps=cfg.adam_eps,
            clip_norm=cfg.clip_norm,
            names=names,
        )
    except NonFiniteError:
        state.spikes += 1
        state.last_grad_norm = float("nan")
        return False
    return True


def train_step(
    batch: np.ndarray,
    teacher: WeightSet,
    proj: ProjectionSet,
    cfg: TrainConfig,
    state: TrainerState,
    separator: int | None = None,
) -> LossReport:
    """
    One LRC update of `proj` in place.

    Only projection matrices and student gains change. A non-finite loss or
    gradient skips the update, bumps `state.spikes` and leaves parameters and
    moments untouched; the step still counts toward the schedule.
    """
    if batch.shape != (cfg.batch_size, cfg.seq_len):
        raise ContractError(f"batch shape {batch.shape} != ({cfg.batch_size}, {cfg.seq_len})")
    named = proj.named_parameters()
    params = [t for _, t in named]
    report, grads = accumulate_gradients(
        batch,
        params,
        cfg.num_microbatches,
        lambda chunk: lrc_objective(chunk, teacher, proj, cfg, separator),
    )
    lr = lr_schedule(min(state.step + 1, cfg.total_steps), cfg.total_steps, cfg.warmup_ratio, cfg.learning_rate)
    _apply_update(params, [n for n, _ in named], grads, report, state, cfg, lr)
    return report


def train_lm_step(
    batch: np.ndarray,
    weights: WeightSet,
    cfg: TrainConfig,
    state: TrainerState,
    separator: int | None = None,
) -> LossReport:
    """Ordinary next-token update of every tensor in `weights`."""
    named = weights.named_tensors()
    params = [t for _, t in named]
    for p in params:
        p.requires_grad = True

    def objective(chunk: np.ndarray) -> LossReport:
        mask = boundary_mask(chunk, separator) if cfg.mask_boundaries and separator is not None else None
        bundle = model_forward(chunk, weights)
        assert bundle.logits is not None
        lm = lm_loss(bundle.logits, chunk, mask)
        zero = Tensor(np.zeros((), dtype=lm.dtype))
        return total_loss(zero, lm, zero, 0.0)

    try:
        report, grads = accumulate_gradients(batch, params, cfg.num_microbatches, objective)
        lr = lr_schedule(min(state.step + 1, cfg.total_steps), cfg.total_steps, cfg.warmup_ratio, cfg.learning_rate)
        _apply_update(params, [n for n, _ in named], grads, report, state, cfg, lr)
    finally:
        for p in params:
            p.requires_grad = False
    return report


@dataclass(slots=True)
class LMTrainingResult:
    weights: WeightSet
    losses: list[float] = field(default_factory=list)
    spikes: int = 0

    def human_summary(self) -> str:
        last = f"{self.losses[-1]:.4f}" if self.losses else "n/a"
        return f"[OK] {len(self.losses)} LM steps, final loss {last}, {self.spikes} skipped"


def train_language_model(
    weights: WeightSet,
    corpus: TokenCorpus,
    cfg: TrainConfig,
    reporter: Reporter | None = None,
    verbose: int = 0,
) -> LMTrainingResult:
    stream = BatchStream(corpus, cfg.seq_len, cfg.batch_size, cfg.seed)
    state = TrainerState.fresh(weights.parameters())
    result = LMTrainingResult(weights=weights)
    for _ in range(cfg.total_steps):
        report = train_lm_step(next(stream), weights, cfg, state, corpus.separator)
        result.losses.append(report.lm)
        if reporter is not None and verbose and (state.step % cfg.log_every == 0 or verbose >= 2):
            reporter.info(f"[lm] step {state.step}/{cfg.total_steps} lm={report.lm:.4f} lr={state.last_lr:.3e}")
    result.spikes = state.spikes
    return result


def pretrain_teacher(
    cfg: ModelConfig,
    corpus: TokenCorpus,
    train_cfg: TrainConfig,
    seed: int = 0,
    reporter: Reporter | None = None,
    verbose: int = 0,
) -> LMTrainingResult:
    """Random teacher from `seed`, then `train_cfg.total_steps` LM steps on `corpus`."""
    weights = init_teacher_weights(cfg, seed, train_cfg.dtype)
    return train_language_model(weights, corpus, train_cfg, reporter, verbose)


def train_baseline(
    student_cfg: ModelConfig,
    corpus: TokenCorpus,
    cfg: TrainConfig,
    reporter: Reporter | None = None,
    verbose: int = 0,
) -> LMTrainingResult:
    """From-scratch student with the same budget, LM loss only."""
    weights = init_teacher_weights(student_cfg, cfg.seed, cfg.dtype)
    return train_language_model(weights, corpus, cfg, reporter, verbose)


# full runs


@dataclass(slots=True)
class TrainingResult:
    proj: ProjectionSet
    state: TrainerState
    metrics_path: Path
    checkpoint_path: Path
    last_report: LossReport | None = None
    intermediate: list[Path] = field(default_factory=list)

    def human_summary(self) -> str:
        tail = f", final {self.last_report.human_summary()}" if self.last_report else ""
        return (
            f"[OK] {self.state.step} steps ({self.state.spikes} skipped){tail}\n"
            f"     metrics: {self.metrics_path}\n"
            f"     projection checkpoint: {self.checkpoint_path}"
        )


def _fmt(x: float) -> str:
    return repr(float(x))


def _prepare_metrics(path: Path, resume_step: int) -> None:
    """Write the header, or keep only rows up to `resume_step` of an existing file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    rows: list[list[str]] = []
    if resume_step > 0 and path.exists():
        with path.open(newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            next(reader, None)
            rows = [r for r in reader if r and int(r[0]) <= resume_step]
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        writer.writerows(rows)


def _checkpoint_state(
    proj: ProjectionSet,
    cfg: TrainConfig,
    state: TrainerState,
    teacher_hash: str,
) -> ProjectionState:
    return ProjectionState(
        proj=proj,
        train=cfg,
        step=state.step,
        optimizer=state.optimizer,
        spikes=state.spikes,
        cursor=state.cursor,
        teacher_hash=teacher_hash,
    )


def run_training(
    corpus: TokenCorpus,
    teacher: WeightSet,
    cfg: TrainConfig,
    out_dir: Path,
    *,
    student_hidden: int | None = None,
    resume: ProjectionState | None = None,
    reporter: Reporter | None = None,
    verbose: int = 0,
) -> TrainingResult:
    """
    Train projections for `cfg.total_steps` steps over endlessly reshuffled
    packed batches, writing metrics.csv, metrics.config.json and
    projection.lrck (plus proj-stepNNNNNN.lrck every `checkpoint_every`).

    With `resume`, parameters, Adam moments, step, spike count and data
    cursor continue exactly where the checkpoint left them.

    Checkpoints are byte-identical across runs with the same inputs. The
    metrics CSV is too only when `cfg.record_wall_time` is off, since its
    wall_ms column otherwise carries measured step times.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = cfg.dtype
    if teacher.dtype != dtype:
        teacher = teacher.astype(dtype)
    teacher_hash = weights_hash(teacher)

    if resume is not None:
        if resume.teacher_hash and resume.teacher_hash != teacher_hash:
            raise ContractError(
                f"checkpoint was trained against teacher {resume.teacher_hash}, got {teacher_hash}"
            )
        proj = resume.proj
        if proj.dtype != dtype:
            proj = ProjectionSet.from_named(proj.meta(), dict(proj.named_parameters()), dtype=dtype)
        optimizer = resume.optimizer or OptimizerState.for_params(proj.parameters())
        optimizer.m = [m.astype(dtype, copy=False) for m in optimizer.m]
        optimizer.v = [v.astype(dtype, copy=False) for v in optimizer.v]
        state = TrainerState(optimizer=optimizer, step=resume.step, spikes=resume.spikes, cursor=resume.cursor)
    else:
        if student_hidden is None:
            raise ContractError("run_training needs student_hidden when not resuming")
        proj = init_projections(
            teacher.config,
            student_hidden,
            cfg.sharing,
            cfg.seed,
            alignment_free=cfg.alignment_free,
            separate_lm_head=cfg.separate_lm_head,
            dtype=dtype,
        )
        state = TrainerState.fresh(proj.parameters())

    if corpus.vocab_size != teacher.config.vocab_size:
        raise ContractError(f"corpus vocab {corpus.vocab_size} != teacher vocab {teacher.config.vocab_size}")

    metrics_path = out_dir / "metrics.csv"
    _prepare_metrics(metrics_path, state.step)
    write_atomic(out_dir / "metrics.config.json", cfg.canonical_json() + "\n")

    stream = BatchStream(corpus, cfg.seq_len, cfg.batch_size, cfg.seed)
    stream.seek(state.cursor)
    result = TrainingResult(
        proj=proj,
        state=state,
        metrics_path=metrics_path,
        checkpoint_path=out_dir / "projection.lrck",
    )

    if reporter is not None and verbose:
        reporter.info(
            f"[train] {proj.num_parameters():,} trainable parameters, "
            f"steps {state.step}->{cfg.total_steps}, batch {cfg.batch_size}x{cfg.seq_len}"
        )

    with metrics_path.open("a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        while state.step < cfg.total_steps:
            batch = next(stream)
            state.cursor = stream.cursor
            t0 = time.perf_counter()
            spikes_before = state.spikes
            report = train_step(batch, teacher, proj, cfg, state, corpus.separator)
            wall_ms = (time.perf_counter() - t0) * 1000.0 if cfg.record_wall_time else 0.0
            result.last_report = report
            writer.writerow(
                [
                    state.step,
                    _fmt(state.last_lr),
                    _fmt(report.clone),
                    _fmt(report.kl),
                    _fmt(report.lm),
                    _fmt(report.total),
                    _fmt(state.last_grad_norm),
                    state.step * cfg.batch_tokens,
                    f"{wall_ms:.3f}",
                ]
            )
            f.flush()

            if reporter is not None and state.spikes > spikes_before:
                reporter.warn(f"[train] step {state.step}: non-finite loss or gradient, update skipped")
            if reporter is not None and verbose and (state.step % cfg.log_every == 0 or verbose >= 2):
                reporter.info(f"[train] step {state.step}/{cfg.total_steps} {report.human_summary()}")
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0 and state.step < cfg.total_steps:
                path = out_dir / f"proj-step{state.step:06d}.lrck"
                save_projection(path, _checkpoint_state(proj, cfg, state, teacher_hash))
                result.intermediate.append(path)

    save_projection(result.checkpoint_path, _checkpoint_state(proj, cfg, state, teacher_hash))
    if weights_hash(teacher) != teacher_hash:
        raise ContractError("teacher weights changed during training")
    return result
