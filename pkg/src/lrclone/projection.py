# src/lrclone/projection.py
"""
Trainable low-rank projections and the student weights they generate.

A projection W^p (dᵀ × dˢ) right-multiplies a teacher matrix so the student
matrix keeps the teacher's row dimension (heads, FFN width) and shrinks only
the hidden dimension. Student weights are produced inside the training graph
on every forward, so gradients reach the projections directly; after
training, `materialize_student` applies them once and the teacher can go.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, student_config
from .enums import Sharing
from .errors import ConfigError, ShapeError
from .model import MATRIX_NAMES, LayerWeights, WeightSet, weights_hash
from .tensor import Tensor, matmul, no_tape
from .utils import fnv1a64


@dataclass(slots=True)
class LayerProjections:
    q: Tensor
    k: Tensor
    v: Tensor
    o: Tensor
    gate: Tensor
    up: Tensor
    down: Tensor
    attn_norm: Tensor
    ffn_norm: Tensor
    align_o: Tensor | None = None
    align_down: Tensor | None = None

    def named(self, attn: Sharing, ffn: Sharing) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        if attn is Sharing.io:
            out.append(("qkv", self.q))
        else:
            out += [("q", self.q), ("k", self.k), ("v", self.v)]
        out.append(("o", self.o))
        if ffn is Sharing.io:
            out.append(("gate_up", self.gate))
        else:
            out += [("gate", self.gate), ("up", self.up)]
        out.append(("down", self.down))
        out += [("attn_norm", self.attn_norm), ("ffn_norm", self.ffn_norm)]
        if self.align_o is not None and self.align_down is not None:
            out += [("align_o", self.align_o), ("align_down", self.align_down)]
        return out

    def clone_target_projection(self, which: str) -> Tensor:
        """Map applied to teacher module outputs inside the clone loss."""
        if which == "o_attn":
            return self.align_o if self.align_o is not None else self.o
        if which == "o_ffn":
            return self.align_down if self.align_down is not None else self.down
        raise KeyError(which)


@dataclass(slots=True)
class ProjectionSet:
    teacher_config: ModelConfig
    student_hidden: int
    attn_sharing: Sharing
    ffn_sharing: Sharing
    alignment_free: bool
    layers: list[LayerProjections]
    embed: Tensor
    lm_head: Tensor | None
    final_norm: Tensor

    @property
    def separate_lm_head(self) -> bool:
        return self.lm_head is not None

    @property
    def student_config(self) -> ModelConfig:
        cfg = student_config(self.teacher_config, self.student_hidden)
        if self.separate_lm_head and cfg.tie_embeddings:
            cfg = ModelConfig.model_validate({**cfg.model_dump(), "tie_embeddings": False})
        return cfg

    @property
    def dtype(self) -> np.dtype:
        return self.embed.dtype

    def meta(self) -> dict[str, object]:
        """Everything besides tensor values needed to rebuild this set."""
        return {
            "teacher": self.teacher_config.model_dump(mode="json"),
            "student_hidden": self.student_hidden,
            "attn_sharing": self.attn_sharing.value,
            "ffn_sharing": self.ffn_sharing.value,
            "alignment_free": self.alignment_free,
            "separate_lm_head": self.separate_lm_head,
        }

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Unique trainable blocks in a fixed order; tied blocks appear once."""
        out: list[tuple[str, Tensor]] = [("embed", self.embed)]
        if self.lm_head is not None:
            out.append(("lm_head", self.lm_head))
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.{n}", t) for n, t in layer.named(self.attn_sharing, self.ffn_sharing)]
        out.append(("final_norm", self.final_norm))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def copy(self) -> ProjectionSet:
        return ProjectionSet.from_named(self.meta(), {n: t.data.copy() for n, t in self.named_parameters()})

    @classmethod
    def from_named(
        cls,
        meta: Mapping[str, object],
        tensors: Mapping[str, np.ndarray | Tensor],
        dtype: np.dtype | type | None = None,
    ) -> ProjectionSet:
        teacher = ModelConfig.model_validate(meta["teacher"])
        d_s = int(meta["student_hidden"])  # type: ignore[call-overload]
        attn, ffn = Sharing(meta["attn_sharing"]), Sharing(meta["ffn_sharing"])
        alignment_free = bool(meta["alignment_free"])
        separate = bool(meta["separate_lm_head"])
        d_t = teacher.hidden_size
        used: set[str] = set()

        def _get(name: str, shape: tuple[int, ...]) -> Tensor:
            if name not in tensors:
                raise ConfigError(f"projection tensor {name!r} missing")
            raw = tensors[name]
            arr = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
            if dtype is not None:
                arr = arr.astype(dtype, copy=False)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            used.add(name)
            return Tensor(arr.copy(), requires_grad=True, name=name)

        mat, gain = (d_t, d_s), (d_s,)
        layers = []
        for i in range(teacher.num_layers):
            p = f"layers.{i}."
            if attn is Sharing.io:
                q = k = v = _get(p + "qkv", mat)
            else:
                q, k, v = _get(p + "q", mat), _get(p + "k", mat), _get(p + "v", mat)
            o = _get(p + "o", mat)
            if ffn is Sharing.io:
                gate = up = _get(p + "gate_up", mat)
            else:
                gate, up = _get(p + "gate", mat), _get(p + "up", mat)
            down = _get(p + "down", mat)
            align_o = align_down = None
            if not alignment_free:
                align_o, align_down = _get(p + "align_o", mat), _get(p + "align_down", mat)
            layers.append(
                LayerProjections(
                    q=q,
                    k=k,
                    v=v,
                    o=o,
                    gate=gate,
                    up=up,
                    down=down,
                    attn_norm=_get(p + "attn_norm", gain),
                    ffn_norm=_get(p + "ffn_norm", gain),
                    align_o=align_o,
                    align_down=align_down,
                )
            )
        proj = cls(
            teacher_config=teacher,
            student_hidden=d_s,
            attn_sharing=attn,
            ffn_sharing=ffn,
            alignment_free=alignment_free,
            layers=layers,
            embed=_get("embed", mat),
            lm_head=_get("lm_head", mat) if separate else None,
            final_norm=_get("final_norm", gain),
        )
        extra = sorted(set(tensors) - used)
        if extra:
            raise ConfigError(f"unexpected projection tensors: {', '.join(extra[:5])}")
        return proj


def _resolve_separate_lm(teacher_cfg: ModelConfig, separate_lm_head: bool | None) -> bool:
    if separate_lm_head is None:
        return not teacher_cfg.tie_embeddings
    if not separate_lm_head and not teacher_cfg.tie_embeddings:
        raise ConfigError("an untied teacher needs a separate lm_head projection")
    return separate_lm_head


def _check_student_hidden(teacher_cfg: ModelConfig, student_hidden: int) -> None:
    if student_hidden > teacher_cfg.hidden_size:
        raise ConfigError(
            f"student hidden size {student_hidden} exceeds teacher hidden size {teacher_cfg.hidden_size}"
        )
    if student_hidden < 1:
        raise ConfigError(f"student hidden size must be >= 1, got {student_hidden}")


def _build(
    teacher_cfg: ModelConfig,
    student_hidden: int,
    sharing: tuple[Sharing, Sharing],
    alignment_free: bool,
    separate_lm_head: bool | None,
    matrix: Callable[[], np.ndarray],
    gain: Callable[[int | None, str], np.ndarray],
) -> ProjectionSet:
    _check_student_hidden(teacher_cfg, student_hidden)
    attn, ffn = sharing
    separate = _resolve_separate_lm(teacher_cfg, separate_lm_head)
    names: dict[str, np.ndarray] = {"embed": matrix()}
    if separate:
        names["lm_head"] = matrix()
    for i in range(teacher_cfg.num_layers):
        p = f"layers.{i}."
        for n in ("qkv",) if attn is Sharing.io else ("q", "k", "v"):
            names[p + n] = matrix()
        names[p + "o"] = matrix()
        for n in ("gate_up",) if ffn is Sharing.io else ("gate", "up"):
            names[p + n] = matrix()
        names[p + "down"] = matrix()
        names[p + "attn_norm"] = gain(i, "attn_norm")
        names[p + "ffn_norm"] = gain(i, "ffn_norm")
        if not alignment_free:
            names[p + "align_o"] = matrix()
            names[p + "align_down"] = matrix()
    names["final_norm"] = gain(None, "final_norm")
    meta = {
        "teacher": teacher_cfg.model_dump(mode="json"),
        "student_hidden": student_hidden,
        "attn_sharing": attn.value,
        "ffn_sharing": ffn.value,
        "alignment_free": alignment_free,
        "separate_lm_head": separate,
    }
    return ProjectionSet.from_named(meta, names)


def init_projections(
    teacher_cfg: ModelConfig,
    student_hidden: int,
    sharing: tuple[Sharing, Sharing] = (Sharing.all, Sharing.all),
    seed: int = 0,
    *,
    alignment_free: bool = True,
    separate_lm_head: bool | None = None,
    dtype: np.dtype | type = np.float32,
) -> ProjectionSet:
    """
    Fresh projections: every matrix i.i.d. N(0, 1/dᵀ), student gains at one.

    Matrices are drawn in `named_parameters` order from one seeded generator.
    """
    _check_student_hidden(teacher_cfg, student_hidden)
    rng = np.random.default_rng(seed)
    d_t = teacher_cfg.hidden_size
    std = 1.0 / np.sqrt(d_t)

    def matrix() -> np.ndarray:
        return (rng.standard_normal((d_t, student_hidden)) * std).astype(dtype)

    def gain(_layer: int | None, _name: str) -> np.ndarray:
        return np.ones(student_hidden, dtype=dtype)

    return _build(teacher_cfg, student_hidden, sharing, alignment_free, separate_lm_head, matrix, gain)


def identity_projections(
    teacher: WeightSet,
    *,
    copy_gains: bool = True,
    alignment_free: bool = True,
) -> ProjectionSet:
    """dˢ = dᵀ limit case: identity matrices, optionally the teacher's own gains."""
    cfg = teacher.config
    d_t = cfg.hidden_size
    dtype = teacher.dtype

    def matrix() -> np.ndarray:
        return np.eye(d_t, dtype=dtype)

    def gain(layer: int | None, name: str) -> np.ndarray:
        if not copy_gains:
            return np.ones(d_t, dtype=dtype)
        src = teacher.final_norm if layer is None else getattr(teacher.layers[layer], name)
        return src.data.copy()

    return _build(cfg, d_t, (Sharing.all, Sharing.all), alignment_free, None, matrix, gain)


def project_layer_weights(teacher: WeightSet, proj: ProjectionSet, layer: int) -> LayerWeights:
    """W_m^S = W_m^T · W_m^p for all seven matrices; recorded on the active tape."""
    t_layer, p_layer = teacher.layers[layer], proj.layers[layer]
    mats = {name: matmul(t_layer.matrix(name), getattr(p_layer, name)) for name in MATRIX_NAMES}
    return LayerWeights(**mats, attn_norm=p_layer.attn_norm, ffn_norm=p_layer.ffn_norm)


def project_embeddings(teacher: WeightSet, proj: ProjectionSet) -> tuple[Tensor, Tensor]:
    t_cfg = proj.teacher_config
    if teacher.config.vocab_size != t_cfg.vocab_size:
        raise ConfigError(
            f"vocabulary mismatch: teacher has {teacher.config.vocab_size}, projections expect {t_cfg.vocab_size}"
        )
    if teacher.config.hidden_size != t_cfg.hidden_size:
        raise ConfigError(
            f"hidden size mismatch: teacher has {teacher.config.hidden_size}, projections expect {t_cfg.hidden_size}"
        )
    embed = matmul(teacher.embed, proj.embed)
    if proj.lm_head is None:
        if not teacher.tied:
            raise ConfigError("untied teacher projected without an lm_head projection")
        return embed, embed
    return embed, matmul(teacher.lm_head, proj.lm_head)


def student_weights(teacher: WeightSet, proj: ProjectionSet) -> WeightSet:
    """The projected student as a WeightSet whose tensors live on the current tape."""
    if len(teacher.layers) != len(proj.layers):
        raise ConfigError(f"teacher has {len(teacher.layers)} layers, projections {len(proj.layers)}")
    embed, lm_head = project_embeddings(teacher, proj)
    layers = [project_layer_weights(teacher, proj, i) for i in range(len(proj.layers))]
    return WeightSet(
        config=proj.student_config,
        embed=embed,
        layers=layers,
        final_norm=proj.final_norm,
        lm_head=lm_head,
    )


def count_trainable_params(
    teacher_cfg: ModelConfig,
    student_hidden: int,
    sharing: tuple[Sharing, Sharing] = (Sharing.all, Sharing.all),
    tie: bool | None = None,
    *,
    alignment_free: bool = True,
) -> int:
    """Closed-form count of projection entries plus student gains."""
    attn, ffn = sharing
    tie = teacher_cfg.tie_embeddings if tie is None else tie
    block = teacher_cfg.hidden_size * student_hidden
    per_layer = (2 if attn is Sharing.io else 4) + (2 if ffn is Sharing.io else 3)
    if not alignment_free:
        per_layer += 2
    layers = teacher_cfg.num_layers
    gains = 2 * layers * student_hidden + student_hidden
    embeddings = block * (1 if tie else 2)
    return layers * per_layer * block + embeddings + gains


def projection_hash(proj: ProjectionSet) -> str:
    h = fnv1a64(b"")
    for name, t in proj.named_parameters():
        h = fnv1a64(f"{name}:{t.shape}:{t.dtype.str}".encode(), h)
        h = fnv1a64(np.ascontiguousarray(t.data).tobytes(), h)
    return f"{h:016x}"


@dataclass(slots=True)
class Provenance:
    teacher_hash: str
    projection_hash: str
    step: int

    def as_dict(self) -> dict[str, object]:
        return {"teacher_hash": self.teacher_hash, "projection_hash": self.projection_hash, "step": self.step}


@dataclass(slots=True)
class StudentCheckpoint:
    weights: WeightSet
    provenance: Provenance

    @property
    def config(self) -> ModelConfig:
        return self.weights.config


def materialize_student(teacher: WeightSet, proj: ProjectionSet, step: int = 0) -> StudentCheckpoint:
    with no_tape():
        projected = student_weights(teacher, proj)
    weights = WeightSet.from_named(projected.config, {n: t.data.copy() for n, t in projected.named_tensors()})
    provenance = Provenance(teacher_hash=weights_hash(teacher), projection_hash=projection_hash(proj), step=step)
    return StudentCheckpoint(weights=weights, provenance=provenance)
