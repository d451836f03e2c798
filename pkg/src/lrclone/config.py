# src/lrclone/config.py
"""
Model geometry, training settings and named presets.

All configuration objects are frozen pydantic models with `extra="forbid"`,
so an unknown key in a config file fails loudly instead of being ignored.
Overrides go through `with_overrides`, which re-validates.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .enums import ATTN_TERMS, FFN_TERMS, CloneTerm, Precision, Reduction, Sharing
from .errors import ConfigError


class FrozenConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


class ModelConfig(FrozenConfig):
    num_layers: int = Field(ge=1)
    hidden_size: int = Field(ge=1)
    num_q_heads: int = Field(ge=1)
    num_kv_heads: int = Field(ge=1)
    head_dim: int = Field(ge=2)
    ffn_size: int = Field(ge=1)
    vocab_size: int = Field(ge=2)
    rms_eps: float = Field(1e-5, gt=0)
    tie_embeddings: bool = True
    rope_base: float = Field(10000.0, gt=1)

    @model_validator(mode="after")
    def _check_heads(self) -> ModelConfig:
        if self.num_q_heads % self.num_kv_heads:
            raise ValueError(
                f"num_q_heads ({self.num_q_heads}) must be divisible by num_kv_heads ({self.num_kv_heads})"
            )
        if self.head_dim % 2:
            raise ValueError(f"head_dim ({self.head_dim}) must be even for rotary embeddings")
        return self

    @property
    def d_q(self) -> int:
        return self.num_q_heads * self.head_dim

    @property
    def d_kv(self) -> int:
        return self.num_kv_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads


def student_config(teacher: ModelConfig, student_hidden: int) -> ModelConfig:
    """Student geometry: teacher heads, head_dim and FFN size; only the hidden size shrinks."""
    if not 1 <= student_hidden <= teacher.hidden_size:
        raise ConfigError(f"student hidden size must be in [1, {teacher.hidden_size}], got {student_hidden}")
    return ModelConfig.model_validate({**teacher.model_dump(), "hidden_size": student_hidden})


class CloneMask(FrozenConfig):
    """Which clone terms contribute. Defaults reproduce the full clone loss."""

    disabled: tuple[CloneTerm, ...] = ()
    layers: tuple[bool, ...] | None = None
    attn: bool = True
    ffn: bool = True

    @field_validator("disabled")
    @classmethod
    def _canonical_terms(cls, v: tuple[CloneTerm, ...]) -> tuple[CloneTerm, ...]:
        return tuple(sorted(set(v), key=lambda t: list(CloneTerm).index(t)))

    def enabled(self, term: CloneTerm, layer: int) -> bool:
        if term in self.disabled:
            return False
        if term in ATTN_TERMS and not self.attn:
            return False
        if term in FFN_TERMS and not self.ffn:
            return False
        if self.layers is not None:
            if layer >= len(self.layers):
                raise ConfigError(f"clone mask covers {len(self.layers)} layers, asked about layer {layer}")
            return self.layers[layer]
        return True

    @classmethod
    def none_enabled(cls) -> CloneMask:
        return cls(disabled=tuple(CloneTerm))

    @classmethod
    def parse(cls, disabled_terms: str | None = None, layers: str | None = None, num_layers: int = 0) -> CloneMask:
        terms: list[CloneTerm] = []
        if disabled_terms:
            for raw in disabled_terms.split(","):
                raw = raw.strip()
                if not raw:
                    continue
                try:
                    terms.append(CloneTerm(raw))
                except ValueError:
                    valid = ",".join(t.value for t in CloneTerm)
                    raise ConfigError(f"unknown clone term {raw!r}; expected one of {valid}") from None
        return cls(disabled=tuple(terms), layers=parse_layer_mask(layers, num_layers))


def parse_layer_mask(text: str | None, num_layers: int) -> tuple[bool, ...] | None:
    """`all` (or nothing) → every layer; otherwise an int bitmask, bit i enabling layer i."""
    if text is None or text.strip().lower() == "all":
        return None
    try:
        bits = int(text.strip(), 0)
    except ValueError:
        raise ConfigError(f"--clone-layers must be 'all' or an integer bitmask, got {text!r}") from None
    if bits < 0 or bits >= 1 << num_layers:
        raise ConfigError(f"layer bitmask {text} does not fit {num_layers} layers")
    return tuple(bool(bits >> i & 1) for i in range(num_layers))


class TrainConfig(FrozenConfig):
    alpha: float = Field(0.5, ge=0)
    temperature: float = Field(40.0, gt=0)
    learning_rate: float = Field(1e-4, ge=0)
    warmup_ratio: float = Field(0.005, ge=0, le=1)
    total_steps: int = Field(1000, ge=0)
    batch_tokens: int = Field(49152, ge=2)
    seq_len: int = Field(2048, ge=2)
    micro_batch_tokens: int | None = None
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    clip_norm: float | None = Field(1.0, gt=0)
    seed: int = 0
    attn_sharing: Sharing = Sharing.all
    ffn_sharing: Sharing = Sharing.all
    clone_mask: CloneMask = CloneMask()
    alignment_free: bool = True
    stop_grad_targets: bool = False
    kl_t2: bool = True
    clone_reduction: Reduction = Reduction.mean
    mask_boundaries: bool = False
    separate_lm_head: bool | None = None
    precision: Precision = Precision.float32
    checkpoint_every: int = Field(0, ge=0)
    record_wall_time: bool = True
    log_every: int = Field(50, ge=1)

    @model_validator(mode="after")
    def _check_batching(self) -> TrainConfig:
        if self.batch_tokens % self.seq_len:
            raise ValueError(f"batch_tokens ({self.batch_tokens}) must be a multiple of seq_len ({self.seq_len})")
        if self.micro_batch_tokens is not None:
            if self.micro_batch_tokens % self.seq_len or self.batch_tokens % self.micro_batch_tokens:
                raise ValueError(
                    f"micro_batch_tokens ({self.micro_batch_tokens}) must be a multiple of seq_len "
                    f"and divide batch_tokens ({self.batch_tokens})"
                )
        return self

    @property
    def batch_size(self) -> int:
        return self.batch_tokens // self.seq_len

    @property
    def micro_batch_size(self) -> int:
        if self.micro_batch_tokens is None:
            return self.batch_size
        return self.micro_batch_tokens // self.seq_len

    @property
    def num_microbatches(self) -> int:
        return self.batch_size // self.micro_batch_size

    @property
    def sharing(self) -> tuple[Sharing, Sharing]:
        return self.attn_sharing, self.ffn_sharing

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision.value)


def with_overrides(cfg: FrozenConfig, **updates: Any) -> Any:
    """Re-validated copy; `None` values are skipped so CLI defaults don't clobber lower layers."""
    data = cfg.model_dump()
    data.update({k: v for k, v in updates.items() if v is not None})
    return type(cfg).model_validate(data)


def parse_sharing(text: str) -> tuple[Sharing, Sharing]:
    parts = [p.strip().lower() for p in text.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"--sharing expects 'attn,ffn' such as 'all,io', got {text!r}")
    try:
        return Sharing(parts[0]), Sharing(parts[1])
    except ValueError:
        raise ConfigError(f"--sharing values must be 'all' or 'io', got {text!r}") from None


class Preset(FrozenConfig):
    name: str
    teacher: ModelConfig
    student_hidden: int = Field(ge=1)
    train: TrainConfig = TrainConfig()
    teacher_pretrain_steps: int = Field(0, ge=0)
    corpus_tokens: int = Field(200_000, ge=1)

    @property
    def student(self) -> ModelConfig:
        return student_config(self.teacher, self.student_hidden)


_TINY = ModelConfig(
    num_layers=4,
    hidden_size=64,
    num_q_heads=4,
    num_kv_heads=2,
    head_dim=16,
    ffn_size=128,
    vocab_size=256,
    rms_eps=1e-5,
    tie_embeddings=True,
)

# Teacher geometries: Llama-3.2-3B, Qwen2.5-3B, Qwen2.5-7B.
_LLAMA32_3B = ModelConfig(
    num_layers=28,
    hidden_size=3072,
    num_q_heads=24,
    num_kv_heads=8,
    head_dim=128,
    ffn_size=8192,
    vocab_size=128256,
    rms_eps=1e-5,
    tie_embeddings=True,
    rope_base=500000.0,
)
_QWEN25_3B = ModelConfig(
    num_layers=36,
    hidden_size=2048,
    num_q_heads=16,
    num_kv_heads=2,
    head_dim=128,
    ffn_size=11008,
    vocab_size=151936,
    rms_eps=1e-6,
    tie_embeddings=True,
    rope_base=1000000.0,
)
_QWEN25_7B = ModelConfig(
    num_layers=28,
    hidden_size=3584,
    num_q_heads=28,
    num_kv_heads=4,
    head_dim=128,
    ffn_size=18944,
    vocab_size=152064,
    rms_eps=1e-6,
    tie_embeddings=False,
    rope_base=1000000.0,
)

PRESETS: dict[str, Preset] = {
    p.name: p
    for p in (
        Preset(
            name="tiny-debug",
            teacher=_TINY,
            student_hidden=32,
            train=TrainConfig(
                learning_rate=1e-3,
                total_steps=10,
                seq_len=16,
                batch_tokens=64,
                log_every=1,
            ),
            corpus_tokens=20_000,
        ),
        Preset(
            name="tiny-distill",
            teacher=_TINY,
            student_hidden=32,
            train=TrainConfig(
                alpha=0.5,
                temperature=40.0,
                learning_rate=1e-3,
                warmup_ratio=0.005,
                clip_norm=1.0,
                seed=7,
                total_steps=2000,
                seq_len=64,
                batch_tokens=512,
            ),
            teacher_pretrain_steps=2000,
            corpus_tokens=400_000,
        ),
        Preset(
            name="lrc-1.5b",
            teacher=_LLAMA32_3B,
            student_hidden=1536,
            train=TrainConfig(alpha=0.2, learning_rate=1e-4, batch_tokens=49152, seq_len=2048),
        ),
        Preset(
            name="lrc-1.7b",
            teacher=_QWEN25_3B,
            student_hidden=1200,
            train=TrainConfig(alpha=0.5, learning_rate=6.7e-5, batch_tokens=32768, seq_len=2048),
        ),
        Preset(
            name="lrc-4b",
            teacher=_QWEN25_7B,
            student_hidden=2048,
            train=TrainConfig(alpha=0.5, learning_rate=1e-4, batch_tokens=32768, seq_len=2048),
        ),
    )
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None


def load_config_file(path: Path) -> dict[str, Any]:
    import yaml

    with path.open("r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config file must hold a mapping, got {type(data).__name__}")
    return data


def resolve_train_config(
    preset: Preset,
    file_values: dict[str, Any] | None = None,
    cli_values: dict[str, Any] | None = None,
) -> tuple[TrainConfig, int]:
    """
    Layer settings: CLI flags > config file > preset.

    Returns the effective TrainConfig and student hidden size.
    """
    file_values = dict(file_values or {})
    student_hidden = int(file_values.pop("student_hidden", preset.student_hidden))
    cfg = with_overrides(preset.train, **file_values)
    cli_values = dict(cli_values or {})
    if cli_values.get("student_hidden") is not None:
        student_hidden = int(cli_values.pop("student_hidden"))
    cli_values.pop("student_hidden", None)
    cfg = with_overrides(cfg, **cli_values)
    student_config(preset.teacher, student_hidden)
    return cfg, student_hidden
