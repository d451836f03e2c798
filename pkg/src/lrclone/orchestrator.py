# src/lrclone/orchestrator.py
"""Pipeline orchestrator - wires presets, corpora, checkpoints and the trainer for each subcommand."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import typer

from .checkpoint import load_projection, load_weights, read_checkpoint, save_student, save_weights
from .config import Preset, TrainConfig, with_overrides
from .corpus import TokenCorpus, gen_synthetic_corpus, load_token_file, pack_batches, write_token_file
from .enums import CheckpointKind, CorpusKind
from .errors import ConfigError, ContractError
from .losses import lm_loss
from .model import WeightSet, expected_shapes, init_teacher_weights, model_forward, weights_hash
from .projection import Provenance, materialize_student, student_weights
from .tensor import no_tape
from .trainer import TrainingResult, pretrain_teacher, run_training

LARGE_TEACHER_PARAMS = 50_000_000


class Reporter(Protocol):
    def task(self, label: str): ...
    def info(self, msg: str): ...
    def warn(self, msg: str): ...


class SimpleReporter:
    def task(self, label: str):
        typer.echo(label)
        return self

    def __enter__(self):
        return self

    def __exit__(self, *args):
        pass

    def info(self, msg: str):
        typer.echo(msg)

    def warn(self, msg: str):
        typer.secho(msg, fg=typer.colors.YELLOW)


def count_model_params(weights_or_shapes: WeightSet | dict[str, tuple[int, ...]]) -> int:
    if isinstance(weights_or_shapes, WeightSet):
        return sum(t.data.size for t in weights_or_shapes.parameters())
    return sum(math.prod(s) for s in weights_or_shapes.values())


def _load_or_generate_corpus(
    path: Path | None, preset: Preset, seed: int, r: Reporter, verbose: int
) -> TokenCorpus:
    if path is not None:
        corpus = load_token_file(path)
        if verbose >= 1:
            r.info(f"[corpus] {corpus.human_summary()}")
        return corpus
    corpus = gen_synthetic_corpus(CorpusKind.markov, preset.corpus_tokens, preset.teacher.vocab_size, seed)
    if verbose >= 1:
        r.info(f"[corpus] no --corpus given, generated markov corpus: {corpus.human_summary()}")
    return corpus


# gen-corpus


@dataclass(slots=True)
class CorpusGenConfig:
    kind: CorpusKind
    size: int
    vocab_size: int
    seed: int
    out: Path
    verbose: int = 0


@dataclass(slots=True)
class CorpusGenResult:
    path: Path
    corpus: TokenCorpus

    def human_summary(self) -> str:
        return f"[OK] Wrote {self.corpus.human_summary()} to {self.path}"


def run_gen_corpus(cfg: CorpusGenConfig, r: Reporter) -> CorpusGenResult:
    with r.task(f"Generating {cfg.kind.value} corpus ({cfg.size:,} tokens)..."):
        corpus = gen_synthetic_corpus(cfg.kind, cfg.size, cfg.vocab_size, cfg.seed)
        write_token_file(corpus, cfg.out)
    return CorpusGenResult(path=cfg.out, corpus=corpus)


# gen-teacher


@dataclass(slots=True)
class TeacherGenConfig:
    preset: Preset
    out: Path
    seed: int
    pretrain_steps: int
    corpus: Path | None = None
    train: TrainConfig | None = None
    verbose: int = 0


@dataclass(slots=True)
class TeacherGenResult:
    path: Path
    weights: WeightSet
    bytes_written: int
    final_loss: float | None = None

    def human_summary(self) -> str:
        trained = f", pre-trained to LM loss {self.final_loss:.4f}" if self.final_loss is not None else ""
        return (
            f"[OK] Teacher with {count_model_params(self.weights):,} parameters{trained}\n"
            f"     {self.path} ({self.bytes_written:,} bytes, hash {weights_hash(self.weights)})"
        )


def run_gen_teacher(cfg: TeacherGenConfig, r: Reporter) -> TeacherGenResult:
    n = count_model_params(expected_shapes(cfg.preset.teacher))
    if n > LARGE_TEACHER_PARAMS:
        r.warn(f"[teacher] preset {cfg.preset.name} has {n:,} parameters; this will need a lot of memory")

    train = with_overrides(cfg.train or cfg.preset.train, total_steps=cfg.pretrain_steps, seed=cfg.seed)
    final_loss = None
    if cfg.pretrain_steps > 0:
        corpus = _load_or_generate_corpus(cfg.corpus, cfg.preset, cfg.seed, r, cfg.verbose)
        with r.task(f"Pre-training teacher for {cfg.pretrain_steps} steps..."):
            result = pretrain_teacher(cfg.preset.teacher, corpus, train, cfg.seed, r, cfg.verbose)
        weights = result.weights
        final_loss = result.losses[-1] if result.losses else None
        if result.spikes:
            r.warn(f"[teacher] {result.spikes} pre-training steps skipped on non-finite values")
    else:
        with r.task("Initializing random teacher..."):
            weights = init_teacher_weights(cfg.preset.teacher, cfg.seed, train.dtype)

    with r.task(f"Writing {cfg.out}..."):
        written = save_weights(cfg.out, weights, CheckpointKind.teacher)
    return TeacherGenResult(path=cfg.out, weights=weights, bytes_written=written, final_loss=final_loss)


# train


@dataclass(slots=True)
class TrainRunConfig:
    preset: Preset
    train: TrainConfig
    student_hidden: int
    out: Path
    teacher: Path | None = None
    corpus: Path | None = None
    resume: Path | None = None
    verbose: int = 0


def _load_teacher(path: Path | None, preset: Preset, seed: int, r: Reporter, verbose: int) -> WeightSet:
    if path is None:
        if verbose >= 1:
            r.info(f"[train] no --teacher given, using random {preset.name} teacher (seed {seed})")
        return init_teacher_weights(preset.teacher, seed)
    weights, ckpt = load_weights(path)
    if ckpt.kind is not CheckpointKind.teacher:
        r.warn(f"[train] {path} is a {ckpt.kind.value} checkpoint; distilling from it as a teacher")
    return weights


def run_train(cfg: TrainRunConfig, r: Reporter) -> TrainingResult:
    train = cfg.train
    resume = None
    if cfg.resume is not None:
        resume = load_projection(cfg.resume)
        train = with_overrides(resume.train, total_steps=cfg.train.total_steps)
        if cfg.verbose >= 1:
            r.info(f"[train] resuming {cfg.resume} at step {resume.step}")
    # a random teacher on resume must come from the seed the run started with
    teacher = _load_teacher(cfg.teacher, cfg.preset, train.seed, r, cfg.verbose)
    corpus = _load_or_generate_corpus(cfg.corpus, cfg.preset, train.seed, r, cfg.verbose)
    with r.task(f"Training projections for {train.total_steps} steps..."):
        return run_training(
            corpus,
            teacher,
            train,
            cfg.out,
            student_hidden=cfg.student_hidden,
            resume=resume,
            reporter=r,
            verbose=cfg.verbose,
        )


# materialize


@dataclass(slots=True)
class MaterializeConfig:
    teacher: Path
    projection: Path
    out: Path
    verbose: int = 0


@dataclass(slots=True)
class MaterializeResult:
    path: Path
    provenance: Provenance
    num_params: int
    bytes_written: int

    def human_summary(self) -> str:
        return (
            f"[OK] Student with {self.num_params:,} parameters at step {self.provenance.step}\n"
            f"     {self.path} ({self.bytes_written:,} bytes)"
        )


def run_materialize(cfg: MaterializeConfig, r: Reporter) -> MaterializeResult:
    teacher, _ = load_weights(cfg.teacher)
    state = load_projection(cfg.projection)
    proj = state.proj
    if teacher.dtype != proj.dtype:
        teacher = teacher.astype(proj.dtype)
    if state.teacher_hash and weights_hash(teacher) != state.teacher_hash:
        raise ContractError(f"{cfg.projection} was trained against teacher {state.teacher_hash}, not {cfg.teacher}")
    with r.task("Materializing student weights..."):
        student = materialize_student(teacher, proj, step=state.step)
        written = save_student(cfg.out, student)
    return MaterializeResult(
        path=cfg.out,
        provenance=student.provenance,
        num_params=count_model_params(student.weights),
        bytes_written=written,
    )


# eval


@dataclass(slots=True)
class EvalConfig:
    corpus: Path
    checkpoint: Path | None = None
    teacher: Path | None = None
    seq_len: int = 64
    batch_size: int = 8
    max_batches: int = 16
    seed: int = 0
    f64: bool = False
    verbose: int = 0


@dataclass(slots=True)
class EvalResult:
    loss: float
    batches: int
    tokens: int
    source: str

    @property
    def perplexity(self) -> float:
        return math.exp(self.loss) if self.loss < 700 else math.inf

    def human_summary(self) -> str:
        return (
            f"[OK] {self.source}: LM loss {self.loss:.6f}, perplexity {self.perplexity:.4f} "
            f"over {self.batches} batches ({self.tokens:,} tokens)"
        )


def _eval_weights(cfg: EvalConfig) -> tuple[WeightSet, str]:
    if cfg.checkpoint is None:
        if cfg.teacher is None:
            raise ConfigError("eval needs a checkpoint, or --teacher with a projection checkpoint")
        weights, _ = load_weights(cfg.teacher)
        return weights, f"teacher {cfg.teacher}"

    kind = read_checkpoint(cfg.checkpoint).kind
    if kind is not CheckpointKind.projection:
        weights, _ = load_weights(cfg.checkpoint)
        return weights, f"{kind.value} {cfg.checkpoint}"
    if cfg.teacher is None:
        raise ConfigError(f"{cfg.checkpoint} is a projection checkpoint; pass --teacher to evaluate it")
    teacher, _ = load_weights(cfg.teacher)
    proj = load_projection(cfg.checkpoint).proj
    if teacher.dtype != proj.dtype:
        teacher = teacher.astype(proj.dtype)
    with no_tape():
        return student_weights(teacher, proj), f"projected {cfg.checkpoint}"


def run_eval(cfg: EvalConfig, r: Reporter) -> EvalResult:
    weights, source = _eval_weights(cfg)
    if cfg.f64:
        weights = weights.astype(np.float64)
    corpus = load_token_file(cfg.corpus)
    if corpus.vocab_size != weights.config.vocab_size:
        raise ConfigError(f"corpus vocab {corpus.vocab_size} != model vocab {weights.config.vocab_size}")

    total, batches = 0.0, 0
    with r.task(f"Evaluating {source}..."), no_tape():
        for batch in pack_batches(corpus, cfg.seq_len, cfg.batch_size, cfg.seed):
            total += lm_loss(model_forward(batch, weights).logits, batch).item()
            batches += 1
            if cfg.verbose >= 2:
                r.info(f"[eval] batch {batches}: running loss {total / batches:.6f}")
            if batches >= cfg.max_batches:
                break
    return EvalResult(
        loss=total / batches,
        batches=batches,
        tokens=batches * cfg.batch_size * cfg.seq_len,
        source=source,
    )
