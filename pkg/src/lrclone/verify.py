# src/lrclone/verify.py
"""Executable checks behind `lrclone verify`."""

from __future__ import annotations

import csv
import json
import math
import tempfile
import time
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .checkpoint import load_weights, save_student
from .config import CloneMask, ModelConfig, TrainConfig, get_preset, with_overrides
from .enums import CloneTerm, CorpusKind, Precision, Sharing, Suite
from .gradcheck import grad_check
from .losses import clone_loss, kl_loss, lm_loss, mse
from .model import attention_forward, init_teacher_weights, model_forward, swiglu
from .projection import (
    count_trainable_params,
    identity_projections,
    init_projections,
    materialize_student,
    student_weights,
)
from .tensor import Tape, Tensor, matmul, no_tape
from .trainer import TrainerState, lrc_objective, run_training, train_baseline, train_lm_step, train_step
from .utils import canonical_json

if TYPE_CHECKING:
    from .orchestrator import Reporter

# Trainable parameter counts for the 1.5B geometry under each sharing mode.
PUBLISHED_COUNTS: dict[tuple[Sharing, Sharing], float] = {
    (Sharing.all, Sharing.all): 0.93e9,
    (Sharing.io, Sharing.all): 0.67e9,
    (Sharing.all, Sharing.io): 0.80e9,
    (Sharing.io, Sharing.io): 0.53e9,
}
TINY_HAND_COUNT = 7 * 2 * (64 * 32) + 64 * 32 + (2 * 2 * 32 + 32)
THROUGHPUT_RATIO_LIMIT = 2.5


@dataclass(slots=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    ms: float = 0.0
    detail: str = ""
    warning: bool = False

    @property
    def status(self) -> str:
        if self.warning:
            return "warn"
        return "pass" if self.passed else "fail"

    def as_json(self) -> str:
        value = self.value if math.isfinite(self.value) else str(self.value)
        return canonical_json(
            {"name": self.name, "status": self.status, "value": value, "tol": self.tolerance, "ms": round(self.ms, 3)}
        )


@dataclass(slots=True)
class VerifyReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed or c.warning for c in self.checks)

    @property
    def warnings(self) -> list[CheckResult]:
        return [c for c in self.checks if c.warning]

    def extend(self, other: VerifyReport) -> VerifyReport:
        self.checks.extend(other.checks)
        return self

    def find(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            extra = f"  {c.detail}" if c.detail else ""
            out.append(
                f"[verify] {c.status.upper():<4} {c.name:<32} value={c.value:.6g} tol={c.tolerance:.3g} "
                f"({c.ms:.1f} ms){extra}"
            )
        return out

    def human_summary(self) -> str:
        failed = sum(1 for c in self.checks if not c.passed and not c.warning)
        head = "[OK]" if self.passed else "[FAIL]"
        return f"{head} {len(self.checks)} checks, {failed} failed, {len(self.warnings)} warnings"

    def write_jsonl(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(c.as_json() + "\n" for c in self.checks), encoding="utf-8")


@contextmanager
def _timed(report: VerifyReport) -> Iterator[Callable[..., CheckResult]]:
    """Yields an `add(...)` that stamps each result with ms since its previous result."""
    start = [time.perf_counter()]

    def add(name: str, passed: bool, value: float, tolerance: float, **kw: object) -> CheckResult:
        now = time.perf_counter()
        ms = (now - start[0]) * 1000.0
        result = CheckResult(name, passed, float(value), tolerance, ms, **kw)  # type: ignore[arg-type]
        start[0] = now
        report.checks.append(result)
        return result

    yield add


def _tol(dtype: np.dtype, f64: float, f32: float) -> float:
    return f64 if np.dtype(dtype) == np.float64 else f32


def check_lemma1(seed: int = 0, trials: int = 100, dtype: type = np.float64) -> VerifyReport:
    """
    FFN: SwiGLU(h_up, h_gate)·(Wᵀ·Wᵖ) against (SwiGLU(h_up, h_gate)·Wᵀ)·Wᵖ.
    Attention: identical q/k/v give o·(W_oᵀ·W_oᵖ) equal to (o·W_oᵀ)·W_oᵖ.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    tol = _tol(np.dtype(dtype), 1e-10, 1e-4)
    report = VerifyReport()
    worst_ffn = worst_attn = 0.0

    def rand(*shape: int) -> Tensor:
        return Tensor(rng.standard_normal(shape).astype(dtype))

    with _timed(report) as add, no_tape():
        for _ in range(trials):
            seq, d_mid, d_t = (int(x) for x in rng.integers(1, 65, size=3))
            d_s = int(rng.integers(1, d_t + 1))
            act = swiglu(rand(seq, d_mid), rand(seq, d_mid))
            w_t, w_p = rand(d_mid, d_t), rand(d_t, d_s)
            worst_ffn = max(worst_ffn, mse(matmul(act, matmul(w_t, w_p)), matmul(matmul(act, w_t), w_p)).item())
        add("lemma1.ffn", worst_ffn <= tol, worst_ffn, tol, detail=f"{trials} trials")

        for _ in range(trials):
            kv = int(rng.integers(1, 3))
            cfg = ModelConfig(
                num_layers=1,
                hidden_size=8,
                num_q_heads=kv * int(rng.integers(1, 3)),
                num_kv_heads=kv,
                head_dim=2 * int(rng.integers(1, 9)),
                ffn_size=8,
                vocab_size=8,
            )
            seq, d_t = int(rng.integers(1, 17)), int(rng.integers(1, 65))
            d_s = int(rng.integers(1, d_t + 1))
            attn = attention_forward(rand(1, seq, cfg.d_q), rand(1, seq, cfg.d_kv), rand(1, seq, cfg.d_kv), None, cfg)
            w_o, w_p = rand(cfg.d_q, d_t), rand(d_t, d_s)
            worst_attn = max(worst_attn, mse(matmul(attn, matmul(w_o, w_p)), matmul(matmul(attn, w_o), w_p)).item())
        add("lemma1.attn", worst_attn <= tol, worst_attn, tol, detail=f"{trials} trials")
    return report


def check_identity_equivalence(preset: str = "tiny-debug", seed: int = 0, dtype: type = np.float64) -> VerifyReport:
    p = get_preset(preset)
    rng = np.random.default_rng(seed)
    teacher = init_teacher_weights(p.teacher, seed, dtype)
    for layer in teacher.layers:
        layer.attn_norm.data += 0.1 * rng.standard_normal(layer.attn_norm.shape).astype(dtype)
        layer.ffn_norm.data += 0.1 * rng.standard_normal(layer.ffn_norm.shape).astype(dtype)
    tokens = rng.integers(0, p.teacher.vocab_size, size=(2, 16))
    tol = _tol(np.dtype(dtype), 1e-10, 1e-5)
    tau = p.train.temperature
    report = VerifyReport()

    with _timed(report) as add, no_tape():
        proj = identity_projections(teacher)
        t_bundle = model_forward(tokens, teacher)
        s_bundle = model_forward(tokens, student_weights(teacher, proj))
        diff = float(np.abs(t_bundle.logits.data - s_bundle.logits.data).max())
        add("identity.logits", diff <= tol, diff, tol)
        clone = clone_loss(s_bundle, t_bundle, proj).item()
        add("identity.clone", clone == 0.0, clone, 0.0)
        kl = kl_loss(t_bundle.logits, s_bundle.logits, tau).item()
        add("identity.kl", kl == 0.0, kl, 0.0)

        proj.embed.data[0, 0] += 1e-3
        s_bundle = model_forward(tokens, student_weights(teacher, proj))
        clone = clone_loss(s_bundle, t_bundle, proj).item()
        kl = kl_loss(t_bundle.logits, s_bundle.logits, tau).item()
        detail = f"clone={clone:.3g} kl={kl:.3g}"
        add("identity.perturbed", clone > 0.0 and kl > 0.0, min(clone, kl), 0.0, detail=detail)
    return report


def check_param_counts() -> VerifyReport:
    geometry = get_preset("lrc-1.5b")
    report = VerifyReport()
    with _timed(report) as add:
        counts = {}
        for mode, published in PUBLISHED_COUNTS.items():
            n = count_trainable_params(geometry.teacher, geometry.student_hidden, mode)
            counts[mode] = n
            rel = abs(n - published) / published
            add(f"params.{mode[0].value}_{mode[1].value}", rel <= 0.02, rel, 0.02, detail=f"{n / 1e9:.3f}B")

        a, i = Sharing.all, Sharing.io
        monotone = counts[(a, a)] >= counts[(a, i)] >= counts[(i, i)]
        monotone = monotone and counts[(a, a)] >= counts[(i, a)] >= counts[(i, i)]
        add("params.monotone", monotone, float(monotone), 1.0)

        tiny = get_preset("tiny-debug")
        two_layer = ModelConfig.model_validate({**tiny.teacher.model_dump(), "num_layers": 2})
        n = count_trainable_params(two_layer, tiny.student_hidden)
        add("params.tiny_hand_count", n == TINY_HAND_COUNT, n, TINY_HAND_COUNT)

        proj = init_projections(two_layer, tiny.student_hidden)
        add("params.tiny_instantiated", proj.num_parameters() == n, proj.num_parameters(), n)
    return report


def _grad_train_config(preset_cfg: TrainConfig, **updates: object) -> TrainConfig:
    return with_overrides(preset_cfg, precision=Precision.float64, **updates)


def check_gradients(preset: str = "tiny-debug", seed: int = 0, max_entries: int = 6) -> VerifyReport:
    """Autodiff against central differences on every trainable block, float64."""
    p = get_preset(preset)
    rng = np.random.default_rng(seed)
    teacher = init_teacher_weights(p.teacher, seed, np.float64)
    tokens = rng.integers(0, p.teacher.vocab_size - 1, size=(1, 8))
    sep = p.teacher.vocab_size - 1
    tol = 1e-4
    report = VerifyReport()

    def run(name: str, cfg: TrainConfig) -> None:
        proj = init_projections(
            p.teacher,
            p.student_hidden,
            cfg.sharing,
            seed,
            alignment_free=cfg.alignment_free,
            dtype=np.float64,
        )
        named = proj.named_parameters()

        def objective() -> Tensor:
            out = lrc_objective(tokens, teacher, proj, cfg, sep).objective
            assert out is not None
            return out

        gc = grad_check(
            objective, [t for _, t in named], names=[n for n, _ in named], max_entries=max_entries, seed=seed
        )
        worst = gc.worst()
        add(name, gc.passed, gc.max_error, tol, detail=f"{len(gc.blocks)} blocks, worst {worst.name if worst else '-'}")

    def grads(cfg: TrainConfig) -> list[np.ndarray]:
        proj = init_projections(p.teacher, p.student_hidden, cfg.sharing, seed, dtype=np.float64)
        params = proj.parameters()
        with Tape() as tape:
            out = lrc_objective(tokens, teacher, proj, cfg, sep).objective
            assert out is not None
            tape.backward(out)
        return [t.grad_or_zeros().copy() for t in params]

    with _timed(report) as add:
        base = _grad_train_config(p.train)
        run("gradients.full", base)
        run("gradients.no_alignment_free", _grad_train_config(p.train, alignment_free=False))
        run("gradients.io_sharing", _grad_train_config(p.train, attn_sharing=Sharing.io, ffn_sharing=Sharing.io))
        no_gate = CloneMask(disabled=(CloneTerm.gate,))
        run("gradients.masked_gate", _grad_train_config(p.train, clone_mask=no_gate))

        # full - masked must be exactly the gate term's own α-weighted gradient
        only_gate = CloneMask(disabled=tuple(t for t in CloneTerm if t is not CloneTerm.gate))
        g_full = grads(base)
        g_masked = grads(_grad_train_config(p.train, clone_mask=no_gate))
        g_gate = grads(_grad_train_config(p.train, clone_mask=only_gate))
        g_none = grads(_grad_train_config(p.train, clone_mask=CloneMask.none_enabled()))
        residual = 0.0
        for f, m, g, n in zip(g_full, g_masked, g_gate, g_none, strict=True):
            scale = max(float(np.abs(f).max(initial=0.0)), 1e-12)
            residual = max(residual, float(np.abs((f - m) - (g - n)).max(initial=0.0)) / scale)
        add("gradients.masked_term_zero", residual <= 1e-8, residual, 1e-8)

        g_alpha0 = grads(_grad_train_config(p.train, alpha=0.0))
        diff = max(float(np.abs(a - b).max(initial=0.0)) for a, b in zip(g_alpha0, g_none, strict=True))
        add("gradients.alpha_zero", diff <= 1e-12, diff, 1e-12)
    return report


def check_materialize(preset: str = "tiny-debug", seed: int = 0) -> VerifyReport:
    p = get_preset(preset)
    rng = np.random.default_rng(seed)
    teacher = init_teacher_weights(p.teacher, seed)
    proj = init_projections(p.teacher, p.student_hidden, seed=seed + 1)
    tokens = rng.integers(0, p.teacher.vocab_size, size=(2, 32))
    tol = 1e-6
    report = VerifyReport()

    with _timed(report) as add, no_tape():
        on_the_fly = lm_loss(model_forward(tokens, student_weights(teacher, proj)).logits, tokens).item()
        student = materialize_student(teacher, proj, step=0)
        direct = lm_loss(model_forward(tokens, student.weights).logits, tokens).item()
        add("materialize.in_memory", abs(direct - on_the_fly) <= tol, abs(direct - on_the_fly), tol)

        with tempfile.TemporaryDirectory(prefix="lrclone_verify_") as tmp:
            path = Path(tmp) / "student.lrck"
            save_student(path, student)
            loaded, _ = load_weights(path)
            reloaded = lm_loss(model_forward(tokens, loaded).logits, tokens).item()
        add("materialize.reloaded", abs(reloaded - on_the_fly) <= tol, abs(reloaded - on_the_fly), tol)

        before = student.provenance.projection_hash
        proj.layers[0].q.data[0, 0] += 1e-3
        after = materialize_student(teacher, proj).provenance.projection_hash
        add("materialize.provenance_hash", before != after, float(before != after), 1.0)
    return report


def check_throughput(preset: str = "tiny-distill", seed: int = 0, repeats: int = 3) -> VerifyReport:
    """LRC step time over a student-only LM step at equal shapes; informational."""
    p = get_preset(preset)
    cfg = with_overrides(p.train, total_steps=1_000_000, learning_rate=0.0)
    rng = np.random.default_rng(seed)
    teacher = init_teacher_weights(p.teacher, seed, cfg.dtype)
    proj = init_projections(p.teacher, p.student_hidden, cfg.sharing, seed, dtype=cfg.dtype)
    student = init_teacher_weights(proj.student_config, seed, cfg.dtype)
    batch = rng.integers(0, p.teacher.vocab_size, size=(cfg.batch_size, cfg.seq_len))
    report = VerifyReport()

    def best_of(step: Callable[[], object]) -> float:
        step()
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            step()
            times.append(time.perf_counter() - t0)
        return min(times)

    with _timed(report) as add:
        lrc_state = TrainerState.fresh(proj.parameters())
        lm_state = TrainerState.fresh(student.parameters())
        t_lrc = best_of(lambda: train_step(batch, teacher, proj, cfg, lrc_state))
        t_lm = best_of(lambda: train_lm_step(batch, student, cfg, lm_state))
        ratio = t_lrc / t_lm
        ok = ratio <= THROUGHPUT_RATIO_LIMIT
        add(
            "throughput.lrc_vs_student",
            ok,
            ratio,
            THROUGHPUT_RATIO_LIMIT,
            warning=not ok,
            detail=f"lrc {t_lrc * 1000:.1f} ms, student {t_lm * 1000:.1f} ms",
        )
    return report


def _metric_column(path: Path, column: str) -> list[float]:
    with path.open(newline="", encoding="utf-8") as f:
        return [float(row[column]) for row in csv.DictReader(f)]


def check_distill(
    preset: str = "tiny-distill",
    seed: int | None = None,
    steps: int | None = None,
    reporter: Reporter | None = None,
    verbose: int = 0,
) -> VerifyReport:
    """
    Desk-scale run: pre-train a teacher, then compare an LRC student against
    a from-scratch baseline and an FFN-clone-masked ablation.
    """
    from .corpus import gen_synthetic_corpus
    from .trainer import pretrain_teacher

    p = get_preset(preset)
    seed = p.train.seed if seed is None else seed
    steps = p.train.total_steps if steps is None else steps
    teacher_steps = p.teacher_pretrain_steps if p.teacher_pretrain_steps else steps
    cfg = with_overrides(p.train, total_steps=steps, seed=seed, record_wall_time=False)
    window = max(1, min(20, steps // 10))
    report = VerifyReport()

    with _timed(report) as add, tempfile.TemporaryDirectory(prefix="lrclone_distill_") as tmp:
        corpus = gen_synthetic_corpus(CorpusKind.markov, p.corpus_tokens, p.teacher.vocab_size, seed)
        teacher_cfg = with_overrides(cfg, total_steps=teacher_steps)
        teacher = pretrain_teacher(p.teacher, corpus, teacher_cfg, seed, reporter, verbose).weights

        full = run_training(corpus, teacher, cfg, Path(tmp) / "full", student_hidden=p.student_hidden)
        totals = _metric_column(full.metrics_path, "total")
        lm_full = _metric_column(full.metrics_path, "lm")
        early = totals[min(9, len(totals) - 1)]
        add("distill.total_drop", totals[-1] < 0.6 * early, totals[-1] / early, 0.6)

        baseline = train_baseline(full.proj.student_config, corpus, cfg)
        lm_lrc = float(np.mean(lm_full[-window:]))
        lm_base = float(np.mean(baseline.losses[-window:]))
        detail = f"lrc {lm_lrc:.4f} base {lm_base:.4f}"
        add("distill.beats_baseline", lm_lrc <= lm_base, lm_lrc - lm_base, 0.0, detail=detail)

        no_ffn = with_overrides(cfg, clone_mask=CloneMask(ffn=False))
        ablated = run_training(corpus, teacher, no_ffn, Path(tmp) / "no_ffn", student_hidden=p.student_hidden)
        lm_abl = float(np.mean(_metric_column(ablated.metrics_path, "lm")[-window:]))
        add("distill.ffn_clone_matters", lm_abl > lm_lrc, lm_abl - lm_lrc, 0.0, detail=f"ablated {lm_abl:.4f}")
    return report


SUITE_ALL = (Suite.lemma1, Suite.identity, Suite.params, Suite.gradients, Suite.materialize, Suite.throughput)


def run_suite(
    suite: Suite,
    seed: int = 0,
    *,
    trials: int = 100,
    f32: bool = False,
    distill_steps: int | None = None,
    reporter: Reporter | None = None,
    verbose: int = 0,
) -> VerifyReport:
    dtype = np.float32 if f32 else np.float64
    runners: dict[Suite, Callable[[], VerifyReport]] = {
        Suite.lemma1: lambda: check_lemma1(seed, trials, dtype),
        Suite.identity: lambda: check_identity_equivalence("tiny-debug", seed, dtype),
        Suite.params: check_param_counts,
        Suite.gradients: lambda: check_gradients("tiny-debug", seed),
        Suite.materialize: lambda: check_materialize("tiny-debug", seed),
        Suite.throughput: lambda: check_throughput("tiny-distill", seed),
        Suite.distill: lambda: check_distill("tiny-distill", None, distill_steps, reporter, verbose),
    }
    selected = SUITE_ALL if suite is Suite.all else (suite,)
    report = VerifyReport()
    for s in selected:
        if reporter is not None and verbose:
            reporter.info(f"[verify] running {s.value}")
        report.extend(runners[s]())
    return report


def load_report_jsonl(path: Path) -> list[dict[str, object]]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
