#!/usr/bin/env python3
# src/lrclone/cli.py
# numpy-backed modules are imported inside commands so LRC_THREADS lands before numpy loads.


from __future__ import annotations

import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import click
import typer

from .enums import CorpusKind, Suite
from .utils import configure_threads, require_deps, require_yaml

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY_FAILED = 2

app = typer.Typer(
    name="lrclone",
    help="Distill a small language model from a frozen teacher through trainable low-rank projections.",
    add_completion=False,
)


def _verbosity_callback(value: int):
    return max(0, min(value, 3))


def _fail(e: BaseException) -> typer.Exit:
    typer.secho(f"Error: {e}", fg=typer.colors.RED, err=True)
    return typer.Exit(EXIT_USAGE)


PRESET_OPT = typer.Option("tiny-debug", "--preset", help="Named geometry and training defaults (see `lrclone info`)")
SEED_OPT = typer.Option(None, "--seed", help="Seed for every random choice")
VERBOSE_OPT = typer.Option(0, "--verbose", "-v", count=True, callback=_verbosity_callback)


@app.command()
def info() -> None:
    from .config import PRESETS
    from .projection import count_trainable_params

    typer.echo("lrclone Presets")
    typer.echo("-" * 96)
    typer.echo(
        f"{'Preset':<14} {'Layers':>6} {'d_T':>6} {'d_S':>6} {'Heads':>7} {'FFN':>6} {'Vocab':>7} "
        f"{'Tied':>5} {'Trainable':>14} {'Steps':>6}"
    )
    typer.echo("-" * 96)
    for name, p in PRESETS.items():
        t = p.teacher
        n = count_trainable_params(t, p.student_hidden)
        typer.echo(
            f"{name:<14} {t.num_layers:>6} {t.hidden_size:>6} {p.student_hidden:>6} "
            f"{f'{t.num_q_heads}/{t.num_kv_heads}':>7} {t.ffn_size:>6} {t.vocab_size:>7} "
            f"{'yes' if t.tie_embeddings else 'no':>5} {n:>14,} {p.train.total_steps:>6}"
        )
    typer.echo("-" * 96)
    typer.echo("\nExamples:")
    typer.echo("  # Trainable parameters under every sharing mode")
    typer.echo("  lrclone params --preset lrc-1.5b")
    typer.echo("\n  # Desk-scale run: corpus, teacher, distillation, standalone student")
    typer.echo("  lrclone gen-corpus --kind markov --size 400000 --out corpus.lrct")
    typer.echo("  lrclone gen-teacher --preset tiny-distill --corpus corpus.lrct --out teacher.lrck")
    typer.echo("  lrclone train --preset tiny-distill --teacher teacher.lrck --corpus corpus.lrct --out run/")
    typer.echo("  lrclone materialize --teacher teacher.lrck --projection run/projection.lrck --out student.lrck")
    typer.echo("\n  # Exact checks")
    typer.echo("  lrclone verify --suite all")


@app.command()
def diagnose() -> None:
    import os

    typer.echo("lrclone Environment Check\n")

    deps = {
        "numpy": "NumPy",
        "pydantic": "Pydantic",
        "yaml": "PyYAML",
        "typer": "Typer",
    }

    typer.echo("Dependencies")
    typer.echo("-" * 50)
    typer.echo(f"{'Package':<30} {'Status':<10} {'Version'}")
    typer.echo("-" * 50)

    for module, name in deps.items():
        try:
            m = __import__(module)
            version = getattr(m, "__version__", "unknown")
            typer.echo(f"{name:<30} {'[OK]':<10} {version}")
        except ImportError:
            typer.echo(f"{name:<30} {'[MISSING]':<10} {'not installed'}")

    typer.echo("\nThreads")
    typer.echo("-" * 50)
    for var in ("LRC_THREADS", "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        typer.echo(f"{var:<30} {os.environ.get(var, '(unset)')}")
    typer.echo(f"\nPython: {sys.version}")


@app.command()
def params(
    preset: str = typer.Option("lrc-1.5b", "--preset", help="Geometry to count"),
    sharing: str | None = typer.Option(None, "--sharing", help="attn,ffn sharing: all,all|io,all|all,io|io,io"),
    student_hidden: int | None = typer.Option(None, "--student-hidden", help="Override the preset's d_S"),
    no_alignment_free: bool = typer.Option(False, "--no-alignment-free", help="Count extra alignment matrices"),
) -> None:
    require_deps()
    from .config import get_preset, parse_sharing
    from .enums import Sharing
    from .projection import count_trainable_params

    try:
        p = get_preset(preset)
        d_s = student_hidden or p.student_hidden
        modes = [parse_sharing(sharing)] if sharing else [(a, f) for a in Sharing for f in Sharing]
        rows = [(m, count_trainable_params(p.teacher, d_s, m, alignment_free=not no_alignment_free)) for m in modes]
    except ValueError as e:
        raise _fail(e) from e

    typer.echo(f"Trainable parameters for {preset} (d_T={p.teacher.hidden_size}, d_S={d_s})")
    typer.echo("-" * 48)
    typer.echo(f"{'Sharing':<12} {'Parameters':>18} {'Approx':>12}")
    typer.echo("-" * 48)
    for (attn, ffn), n in rows:
        typer.echo(f"{f'{attn.value},{ffn.value}':<12} {n:>18,} {f'≈{n / 1e9:.3f}B':>12}")


@app.command("gen-corpus")
def gen_corpus(
    kind: CorpusKind = typer.Option(CorpusKind.markov, "--kind", help="markov|arith|copy", case_sensitive=False),
    size: int = typer.Option(200_000, "--size", help="Total tokens to generate"),
    vocab: int = typer.Option(256, "--vocab", help="Vocabulary size (separator is vocab-1)"),
    seed: int = typer.Option(0, "--seed", help="Generator seed"),
    out: Path = typer.Option(..., "--out", help="Token file to write"),
    verbose: int = VERBOSE_OPT,
) -> None:
    require_deps()
    from .orchestrator import CorpusGenConfig, SimpleReporter, run_gen_corpus

    cfg = CorpusGenConfig(kind=kind, size=size, vocab_size=vocab, seed=seed, out=out, verbose=verbose)
    try:
        result = run_gen_corpus(cfg, SimpleReporter())
    except (ValueError, RuntimeError, OSError) as e:
        raise _fail(e) from e
    typer.echo(f"\n{result.human_summary()}")


@app.command("gen-teacher")
def gen_teacher(
    preset: str = PRESET_OPT,
    out: Path = typer.Option(..., "--out", help="Teacher checkpoint to write"),
    steps: int | None = typer.Option(None, "--steps", help="LM pre-training steps (default: preset's)"),
    corpus: Path | None = typer.Option(None, "--corpus", help="Token file for pre-training (default: markov)"),
    lr: float | None = typer.Option(None, "--lr", help="Pre-training learning rate"),
    seq_len: int | None = typer.Option(None, "--seq-len"),
    batch_tokens: int | None = typer.Option(None, "--batch-tokens"),
    seed: int | None = SEED_OPT,
    f64: bool = typer.Option(False, "--f64", help="Store float64 weights"),
    verbose: int = VERBOSE_OPT,
) -> None:
    require_deps()
    from .config import get_preset, with_overrides
    from .enums import Precision
    from .orchestrator import SimpleReporter, TeacherGenConfig, run_gen_teacher

    try:
        p = get_preset(preset)
        train = with_overrides(
            p.train,
            learning_rate=lr,
            seq_len=seq_len,
            batch_tokens=batch_tokens,
            precision=Precision.float64 if f64 else None,
        )
        cfg = TeacherGenConfig(
            preset=p,
            out=out,
            seed=p.train.seed if seed is None else seed,
            pretrain_steps=p.teacher_pretrain_steps if steps is None else steps,
            corpus=corpus,
            train=train,
            verbose=verbose,
        )
        result = run_gen_teacher(cfg, SimpleReporter())
    except (ValueError, RuntimeError, OSError) as e:
        raise _fail(e) from e
    typer.echo(f"\n{result.human_summary()}")


def _train_cli_values(
    num_layers: int,
    *,
    steps: int | None,
    seq_len: int | None,
    batch_tokens: int | None,
    micro_batch_tokens: int | None,
    alpha: float | None,
    temperature: float | None,
    lr: float | None,
    warmup_ratio: float | None,
    sharing: str | None,
    clone_mask: str | None,
    clone_layers: str | None,
    no_alignment_free: bool,
    stop_grad_targets: bool,
    mask_boundaries: bool,
    clip_norm: float | None,
    seed: int | None,
    f64: bool,
    checkpoint_every: int | None,
    no_wall_time: bool,
    student_hidden: int | None,
) -> dict[str, Any]:
    from .config import CloneMask, parse_sharing
    from .enums import Precision

    values: dict[str, Any] = {
        "total_steps": steps,
        "seq_len": seq_len,
        "batch_tokens": batch_tokens,
        "micro_batch_tokens": micro_batch_tokens,
        "alpha": alpha,
        "temperature": temperature,
        "learning_rate": lr,
        "warmup_ratio": warmup_ratio,
        "seed": seed,
        "checkpoint_every": checkpoint_every,
        "student_hidden": student_hidden,
        "clip_norm": clip_norm if clip_norm is None or clip_norm > 0 else None,
    }
    if sharing is not None:
        values["attn_sharing"], values["ffn_sharing"] = parse_sharing(sharing)
    if clone_mask is not None or clone_layers is not None:
        values["clone_mask"] = CloneMask.parse(clone_mask, clone_layers, num_layers)
    if no_alignment_free:
        values["alignment_free"] = False
    if stop_grad_targets:
        values["stop_grad_targets"] = True
    if mask_boundaries:
        values["mask_boundaries"] = True
    if f64:
        values["precision"] = Precision.float64
    if no_wall_time:
        values["record_wall_time"] = False
    return values


@app.command()
def train(
    preset: str = PRESET_OPT,
    teacher: Path | None = typer.Option(None, "--teacher", help="Teacher checkpoint (default: random preset teacher)"),
    corpus: Path | None = typer.Option(None, "--corpus", help="Token file (default: generated markov corpus)"),
    out: Path = typer.Option(Path("run"), "--out", help="Directory for metrics and projection checkpoints"),
    config: Path | None = typer.Option(None, "--config", help="YAML file of TrainConfig fields"),
    resume: Path | None = typer.Option(None, "--resume", help="Projection checkpoint to continue from"),
    steps: int | None = typer.Option(None, "--steps"),
    seq_len: int | None = typer.Option(None, "--seq-len"),
    batch_tokens: int | None = typer.Option(None, "--batch-tokens"),
    micro_batch_tokens: int | None = typer.Option(None, "--micro-batch-tokens"),
    alpha: float | None = typer.Option(None, "--alpha", help="Clone loss weight"),
    temperature: float | None = typer.Option(None, "--temperature", help="KL temperature"),
    lr: float | None = typer.Option(None, "--lr", help="Peak learning rate"),
    warmup_ratio: float | None = typer.Option(None, "--warmup-ratio"),
    sharing: str | None = typer.Option(None, "--sharing", help="all,all|io,all|all,io|io,io"),
    clone_mask: str | None = typer.Option(None, "--clone-mask", help="Disabled terms among q,k,v,o_attn,gate,up,o_ffn"),
    clone_layers: str | None = typer.Option(None, "--clone-layers", help="Layer bitmask or 'all'"),
    no_alignment_free: bool = typer.Option(False, "--no-alignment-free", help="Train separate alignment matrices"),
    stop_grad_targets: bool = typer.Option(False, "--stop-grad-targets", help="Detach projected clone targets"),
    mask_boundaries: bool = typer.Option(False, "--mask-boundaries", help="Drop separator positions from losses"),
    clip_norm: float | None = typer.Option(None, "--clip-norm", help="Gradient clip norm (<= 0 disables)"),
    seed: int | None = SEED_OPT,
    f64: bool = typer.Option(False, "--f64", help="Train in float64"),
    checkpoint_every: int | None = typer.Option(None, "--checkpoint-every", help="Intermediate checkpoint period"),
    no_wall_time: bool = typer.Option(False, "--no-wall-time", help="Write wall_ms=0 for comparable metrics"),
    student_hidden: int | None = typer.Option(None, "--student-hidden", help="Override d_S"),
    verbose: int = VERBOSE_OPT,
) -> None:
    require_deps()
    from .config import TrainConfig, get_preset, load_config_file, resolve_train_config
    from .orchestrator import SimpleReporter, TrainRunConfig, run_train

    try:
        p = get_preset(preset)
        file_values: dict[str, Any] = {}
        if config is not None:
            require_yaml()
            file_values = load_config_file(config)
        cli_values = _train_cli_values(
            p.teacher.num_layers,
            steps=steps,
            seq_len=seq_len,
            batch_tokens=batch_tokens,
            micro_batch_tokens=micro_batch_tokens,
            alpha=alpha,
            temperature=temperature,
            lr=lr,
            warmup_ratio=warmup_ratio,
            sharing=sharing,
            clone_mask=clone_mask,
            clone_layers=clone_layers,
            no_alignment_free=no_alignment_free,
            stop_grad_targets=stop_grad_targets,
            mask_boundaries=mask_boundaries,
            clip_norm=clip_norm,
            seed=seed,
            f64=f64,
            checkpoint_every=checkpoint_every,
            no_wall_time=no_wall_time,
            student_hidden=student_hidden,
        )
        train_cfg, d_s = resolve_train_config(p, file_values, cli_values)
        if clip_norm is not None and clip_norm <= 0:
            train_cfg = TrainConfig.model_validate({**train_cfg.model_dump(), "clip_norm": None})

        run_cfg = TrainRunConfig(
            preset=p,
            train=train_cfg,
            student_hidden=d_s,
            out=out,
            teacher=teacher,
            corpus=corpus,
            resume=resume,
            verbose=verbose,
        )
        result = run_train(run_cfg, SimpleReporter())
    except (ValueError, RuntimeError, OSError) as e:
        raise _fail(e) from e
    typer.echo(f"\n{result.human_summary()}")


@app.command()
def materialize(
    teacher: Path = typer.Option(..., "--teacher", help="Teacher checkpoint the projection was trained on"),
    projection: Path = typer.Option(..., "--projection", help="Projection checkpoint"),
    out: Path = typer.Option(..., "--out", help="Student checkpoint to write"),
    verbose: int = VERBOSE_OPT,
) -> None:
    require_deps()
    from .orchestrator import MaterializeConfig, SimpleReporter, run_materialize

    cfg = MaterializeConfig(teacher=teacher, projection=projection, out=out, verbose=verbose)
    try:
        result = run_materialize(cfg, SimpleReporter())
    except (ValueError, RuntimeError, OSError) as e:
        raise _fail(e) from e
    typer.echo(f"\n{result.human_summary()}")


@app.command("eval")
def eval_cmd(
    checkpoint: Path | None = typer.Argument(None, help="Teacher, student or projection checkpoint"),
    teacher: Path | None = typer.Option(None, "--teacher", help="Teacher for a projection checkpoint"),
    corpus: Path = typer.Option(..., "--corpus", help="Held-out token file"),
    seq_len: int = typer.Option(64, "--seq-len"),
    batch_size: int = typer.Option(8, "--batch-size"),
    max_batches: int = typer.Option(16, "--max-batches"),
    seed: int = typer.Option(0, "--seed", help="Packing shuffle seed"),
    f64: bool = typer.Option(False, "--f64", help="Evaluate in float64"),
    verbose: int = VERBOSE_OPT,
) -> None:
    require_deps()
    from .orchestrator import EvalConfig, SimpleReporter, run_eval

    cfg = EvalConfig(
        corpus=corpus,
        checkpoint=checkpoint,
        teacher=teacher,
        seq_len=seq_len,
        batch_size=batch_size,
        max_batches=max_batches,
        seed=seed,
        f64=f64,
        verbose=verbose,
    )
    try:
        result = run_eval(cfg, SimpleReporter())
    except (ValueError, RuntimeError, OSError) as e:
        raise _fail(e) from e
    typer.echo(f"\n{result.human_summary()}")


@app.command()
def verify(
    suite: Suite = typer.Option(Suite.all, "--suite", help="Check group to run", case_sensitive=False),
    seed: int = typer.Option(0, "--seed"),
    trials: int = typer.Option(100, "--trials", help="Random trials for lemma1"),
    f32: bool = typer.Option(False, "--f32", help="Run lemma1/identity in float32 with looser tolerances"),
    distill_steps: int | None = typer.Option(None, "--distill-steps", help="Shorten the distill suite"),
    jsonl: Path | None = typer.Option(None, "--jsonl", help="Write one JSON object per check"),
    verbose: int = VERBOSE_OPT,
) -> None:
    require_deps()
    from .orchestrator import SimpleReporter
    from .verify import run_suite

    try:
        report = run_suite(
            suite,
            seed,
            trials=trials,
            f32=f32,
            distill_steps=distill_steps,
            reporter=SimpleReporter(),
            verbose=verbose,
        )
    except (ValueError, RuntimeError) as e:
        raise _fail(e) from e

    for line in report.lines():
        typer.echo(line)
    for w in report.warnings:
        typer.secho(
            f"Warning: {w.name} measured {w.value:.3g} (limit {w.tolerance:.3g}); {w.detail}",
            fg=typer.colors.YELLOW,
        )
    if jsonl is not None:
        report.write_jsonl(jsonl)
    if not report.passed:
        typer.secho(report.human_summary(), fg=typer.colors.RED)
        raise typer.Exit(EXIT_VERIFY_FAILED)
    typer.echo(report.human_summary())


def cli_dispatch(argv: Sequence[str] | None = None) -> int:
    """Run one command and return its exit code: 0 ok, 1 usage or runtime error, 2 failed verification."""
    try:
        rv = app(args=list(argv) if argv is not None else None, prog_name="lrclone", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except (click.ClickException, click.Abort):
        return EXIT_USAGE
    return rv if isinstance(rv, int) else EXIT_OK


def main() -> None:
    configure_threads()
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
