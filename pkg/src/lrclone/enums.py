# src/lrclone/enums.py
from enum import Enum


class Sharing(str, Enum):
    all = "all"
    io = "io"


class CloneTerm(str, Enum):
    q = "q"
    k = "k"
    v = "v"
    o_attn = "o_attn"
    gate = "gate"
    up = "up"
    o_ffn = "o_ffn"


ATTN_TERMS = (CloneTerm.q, CloneTerm.k, CloneTerm.v, CloneTerm.o_attn)
FFN_TERMS = (CloneTerm.gate, CloneTerm.up, CloneTerm.o_ffn)


class CheckpointKind(str, Enum):
    teacher = "teacher"
    projection = "projection"
    student = "student"


class CorpusKind(str, Enum):
    markov = "markov"
    arith = "arith"
    copy = "copy"


class Precision(str, Enum):
    float32 = "float32"
    float64 = "float64"


class Reduction(str, Enum):
    mean = "mean"
    sum = "sum"


class Suite(str, Enum):
    all = "all"
    lemma1 = "lemma1"
    identity = "identity"
    params = "params"
    gradients = "gradients"
    materialize = "materialize"
    throughput = "throughput"
    distill = "distill"
