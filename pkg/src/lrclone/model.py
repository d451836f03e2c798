# src/lrclone/model.py
"""
Llama-style decoder forward pass shared by teacher and student.

Weight matrices follow the convention used throughout the package:
q/k/v/gate/up are (out × d) and applied as x·Wᵀ, while o and down are
(d_q × d) and (d_mid × d) and applied by right-multiplication. Every
forward returns an ActivationBundle holding the linear outputs and module
outputs the clone loss compares.
"""

from __future__ import annotations

from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, InputError, ShapeError
from .tensor import Tensor, embedding, matmul, rms_normalize, rotary
from .utils import fnv1a64

MATRIX_NAMES = ("q", "k", "v", "o", "gate", "up", "down")
H_KEYS = ("q", "k", "v", "gate", "up")


@dataclass(slots=True)
class LayerWeights:
    q: Tensor
    k: Tensor
    v: Tensor
    o: Tensor
    gate: Tensor
    up: Tensor
    down: Tensor
    attn_norm: Tensor
    ffn_norm: Tensor

    def matrix(self, name: str) -> Tensor:
        return getattr(self, name)


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name → shape for every stored tensor, in checkpoint order."""
    d = cfg.hidden_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        shapes[p + "q"] = (cfg.d_q, d)
        shapes[p + "k"] = (cfg.d_kv, d)
        shapes[p + "v"] = (cfg.d_kv, d)
        shapes[p + "o"] = (cfg.d_q, d)
        shapes[p + "gate"] = (cfg.ffn_size, d)
        shapes[p + "up"] = (cfg.ffn_size, d)
        shapes[p + "down"] = (cfg.ffn_size, d)
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "ffn_norm"] = (d,)
    shapes["final_norm"] = (d,)
    if not cfg.tie_embeddings:
        shapes["lm_head"] = (cfg.vocab_size, d)
    return shapes


@dataclass(slots=True)
class WeightSet:
    config: ModelConfig
    embed: Tensor
    layers: list[LayerWeights]
    final_norm: Tensor
    lm_head: Tensor

    @property
    def tied(self) -> bool:
        return self.lm_head is self.embed

    @property
    def dtype(self) -> np.dtype:
        return self.embed.dtype

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = [("embed", self.embed)]
        for i, layer in enumerate(self.layers):
            for name in (*MATRIX_NAMES, "attn_norm", "ffn_norm"):
                out.append((f"layers.{i}.{name}", getattr(layer, name)))
        out.append(("final_norm", self.final_norm))
        if not self.tied:
            out.append(("lm_head", self.lm_head))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def requires_grad_(self, flag: bool = True) -> WeightSet:
        for t in self.parameters():
            t.requires_grad = flag
        return self

    def validate(self) -> None:
        cfg = self.config
        if cfg.tie_embeddings != self.tied:
            raise ConfigError(f"tie_embeddings={cfg.tie_embeddings} but lm_head aliasing is {self.tied}")
        if len(self.layers) != cfg.num_layers:
            raise ShapeError(f"expected {cfg.num_layers} layers, got {len(self.layers)}")
        expected = expected_shapes(cfg)
        for name, t in self.named_tensors():
            if t.shape != expected[name]:
                raise ShapeError(f"{name}: expected shape {expected[name]}, got {t.shape}")

    @classmethod
    def from_named(
        cls,
        cfg: ModelConfig,
        tensors: Mapping[str, np.ndarray | Tensor],
        dtype: np.dtype | type | None = None,
    ) -> WeightSet:
        expected = expected_shapes(cfg)
        missing = [n for n in expected if n not in tensors]
        if missing:
            raise ConfigError(f"missing tensors for this configuration: {', '.join(missing[:5])}")
        extra = sorted(set(tensors) - set(expected))
        if extra:
            raise ConfigError(f"unexpected tensors: {', '.join(extra[:5])}")

        def _get(name: str) -> Tensor:
            raw = tensors[name]
            arr = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
            if dtype is not None:
                arr = arr.astype(dtype, copy=False)
            if arr.shape != expected[name]:
                raise ShapeError(f"{name}: expected shape {expected[name]}, got {arr.shape}")
            return Tensor(arr, name=name)

        layers = [
            LayerWeights(**{n: _get(f"layers.{i}.{n}") for n in (*MATRIX_NAMES, "attn_norm", "ffn_norm")})
            for i in range(cfg.num_layers)
        ]
        embed = _get("embed")
        lm_head = embed if cfg.tie_embeddings else _get("lm_head")
        return cls(config=cfg, embed=embed, layers=layers, final_norm=_get("final_norm"), lm_head=lm_head)

    def copy(self) -> WeightSet:
        return WeightSet.from_named(self.config, {n: t.data.copy() for n, t in self.named_tensors()})

    def astype(self, dtype: np.dtype | type) -> WeightSet:
        return WeightSet.from_named(self.config, {n: t.data for n, t in self.named_tensors()}, dtype=dtype)


def weights_hash(weights: WeightSet) -> str:
    """FNV-1a over names, shapes, dtypes and raw bytes; hex string."""
    h = fnv1a64(b"")
    for name, t in weights.named_tensors():
        h = fnv1a64(f"{name}:{t.shape}:{t.dtype.str}".encode(), h)
        h = fnv1a64(np.ascontiguousarray(t.data).tobytes(), h)
    return f"{h:016x}"


def init_teacher_weights(cfg: ModelConfig, seed: int = 0, dtype: np.dtype | type = np.float32) -> WeightSet:
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(cfg).items():
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            tensors[name] = (rng.standard_normal(shape) * 0.02).astype(dtype)
    return WeightSet.from_named(cfg, tensors)


@dataclass(slots=True)
class ActivationBundle:
    h: dict[str, list[Tensor]] = field(default_factory=lambda: {k: [] for k in H_KEYS})
    o_attn: list[Tensor] = field(default_factory=list)
    o_ffn: list[Tensor] = field(default_factory=list)
    logits: Tensor | None = None

    @property
    def num_layers(self) -> int:
        return len(self.o_attn)

    def entry_count(self) -> int:
        return sum(len(v) for v in self.h.values()) + len(self.o_attn) + len(self.o_ffn) + int(self.logits is not None)

    def entries(self) -> Iterator[tuple[str, Tensor]]:
        for i in range(self.num_layers):
            for key in H_KEYS:
                yield f"layers.{i}.h_{key}", self.h[key][i]
            yield f"layers.{i}.o_attn", self.o_attn[i]
            yield f"layers.{i}.o_ffn", self.o_ffn[i]
        if self.logits is not None:
            yield "logits", self.logits


def rmsnorm(x: Tensor, g: Tensor, eps: float) -> Tensor:
    if g.ndim != 1 or x.shape[-1] != g.shape[0]:
        raise ShapeError(f"rmsnorm: last dim of x {x.shape} must equal gain length {g.shape}")
    return rms_normalize(x, eps) * g


def swiglu(up: Tensor, gate: Tensor) -> Tensor:
    if up.shape != gate.shape:
        raise ShapeError(f"swiglu: up {up.shape} and gate {gate.shape} differ")
    return up * gate.silu()


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x·wᵀ for a stored (out × in) matrix."""
    return matmul(x, w.T)


def rotary_tables(positions: np.ndarray, head_dim: int, base: float, dtype: np.dtype) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = pos[..., None] * inv_freq
    angles = np.concatenate((angles, angles), axis=-1)
    cos, sin = np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)
    if pos.ndim == 2:
        # (B, S, hd) → (B, 1, 1, S, hd) against (B, Hkv, G, S, hd)
        cos, sin = cos[:, None, None], sin[:, None, None]
    return cos, sin


def attention_forward(
    h_q: Tensor,
    h_k: Tensor,
    h_v: Tensor,
    positions: np.ndarray | None,
    cfg: ModelConfig,
    *,
    rope: bool = True,
) -> Tensor:
    """
    Causal grouped-query attention over head-split projections.

    Query head j reads kv head j // group_size through a broadcast batch axis
    rather than a copy. Rotary is applied here, after the raw linear outputs
    have been captured. The output is (B, S, d_q); W_o is left to the caller.
    """
    if cfg.num_q_heads % cfg.num_kv_heads:
        raise ConfigError(f"num_q_heads ({cfg.num_q_heads}) not divisible by num_kv_heads ({cfg.num_kv_heads})")
    if h_q.ndim != 3:
        raise ShapeError(f"attention expects (batch, seq, features) inputs, got {h_q.shape}")
    b, s, dq = h_q.shape
    if dq != cfg.d_q:
        raise ShapeError(f"h_q last dim {dq} != num_q_heads*head_dim {cfg.d_q}")
    for name, t in (("h_k", h_k), ("h_v", h_v)):
        if t.shape != (b, s, cfg.d_kv):
            raise ShapeError(f"{name} shape {t.shape} != {(b, s, cfg.d_kv)}")

    hkv, grp, hd = cfg.num_kv_heads, cfg.group_size, cfg.head_dim
    q = h_q.reshape(b, s, hkv, grp, hd).permute(0, 2, 3, 1, 4)
    k = h_k.reshape(b, s, hkv, 1, hd).permute(0, 2, 3, 1, 4)
    v = h_v.reshape(b, s, hkv, 1, hd).permute(0, 2, 3, 1, 4)

    if rope:
        pos = np.arange(s) if positions is None else np.asarray(positions)
        cos, sin = rotary_tables(pos, hd, cfg.rope_base, h_q.dtype)
        q = rotary(q, cos, sin)
        k = rotary(k, cos, sin)

    scores = matmul(q, k.mT) * (1.0 / np.sqrt(hd))
    future = np.triu(np.ones((s, s), dtype=bool), k=1)
    scores = scores.masked_fill(future, float(np.finfo(h_q.dtype).min))
    probs = scores.softmax(axis=-1)
    out = matmul(probs, v)
    return out.permute(0, 3, 1, 2, 4).reshape(b, s, cfg.d_q)


def check_tokens(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.dtype.kind not in "iu":
        raise InputError(f"token ids must be integers, got dtype {ids.dtype}")
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise InputError(f"tokens must be a nonempty (batch, seq) matrix, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = int(ids.max()) if ids.max() >= vocab_size else int(ids.min())
        raise InputError(f"token id {bad} outside vocabulary of size {vocab_size}")
    return ids.astype(np.int64, copy=False)


def model_forward(
    tokens: np.ndarray,
    weights: WeightSet,
    cfg: ModelConfig | None = None,
    *,
    positions: np.ndarray | None = None,
    rope: bool = True,
) -> ActivationBundle:
    cfg = cfg or weights.config
    ids = check_tokens(tokens, cfg.vocab_size)
    eps = cfg.rms_eps
    bundle = ActivationBundle()

    x = embedding(weights.embed, ids)
    for layer in weights.layers:
        xn = rmsnorm(x, layer.attn_norm, eps)
        h_q, h_k, h_v = linear(xn, layer.q), linear(xn, layer.k), linear(xn, layer.v)
        attn = attention_forward(h_q, h_k, h_v, positions, cfg, rope=rope)
        o_attn = matmul(attn, layer.o)
        x = x + o_attn

        xn = rmsnorm(x, layer.ffn_norm, eps)
        h_gate, h_up = linear(xn, layer.gate), linear(xn, layer.up)
        o_ffn = matmul(swiglu(h_up, h_gate), layer.down)
        x = x + o_ffn

        for key, t in zip(H_KEYS, (h_q, h_k, h_v, h_gate, h_up), strict=True):
            bundle.h[key].append(t)
        bundle.o_attn.append(o_attn)
        bundle.o_ffn.append(o_ffn)

    x = rmsnorm(x, weights.final_norm, eps)
    bundle.logits = linear(x, weights.lm_head)
    return bundle
