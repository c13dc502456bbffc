"""Time-series encoder: router, patch experts and patch reprogramming."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import TimeSeries, flatten_input, normalize
from .numerics import (
    AttentionParams,
    ShapeMismatch,
    Tensor,
    conv1d_patch,
    linear,
    matmul,
    multi_head_cross_attention,
)

MAX_TOKENS = 200
MIN_TOKENS = 100


class SignalTooLong(ValueError):
    pass


@dataclass
class PatchExpert:
    patch_size: int
    conv_weights: Tensor  # [d_enc, patch_size]
    conv_bias: Tensor  # [d_enc]

    def __post_init__(self):
        p = self.patch_size
        if p < 1 or p & (p - 1) or p > 2**16:
            raise ValueError(f"patch size {p} is not a power of two in [1, 2**16]")
        if self.conv_weights.shape != (self.conv_bias.shape[0], p):
            raise ShapeMismatch(f"expert {p}: weights {self.conv_weights.shape}")


@dataclass
class ExpertFamily:
    experts: list[PatchExpert]

    def __post_init__(self):
        sizes = [e.patch_size for e in self.experts]
        if not sizes:
            raise ValueError("empty expert family")
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("patch sizes must be strictly increasing")
        if len({e.conv_bias.shape[0] for e in self.experts}) != 1:
            raise ValueError("d_enc differs across experts")

    @property
    def max_patch(self) -> int:
        return self.experts[-1].patch_size

    @property
    def d_enc(self) -> int:
        return self.experts[0].conv_bias.shape[0]

    @classmethod
    def init(cls, d_enc: int, max_exponent: int, rng: np.random.Generator) -> ExpertFamily:
        experts = []
        for k in range(max_exponent + 1):
            p = 2**k
            w = rng.normal(0.0, 1.0 / math.sqrt(p), size=(d_enc, p))
            experts.append(
                PatchExpert(p, Tensor(w, requires_grad=True), Tensor(np.zeros(d_enc), requires_grad=True))
            )
        return cls(experts)


def route_patch_size(T: int, max_patch: int = 2**16) -> int:
    """Smallest power of two p with p >= T/200; 1 when T < 200."""
    if T < 1:
        raise ValueError("signal length must be positive")
    if T > MAX_TOKENS * max_patch:
        raise SignalTooLong(f"length {T} exceeds {MAX_TOKENS} * {max_patch}")
    p = 1
    while p * MAX_TOKENS < T:
        p *= 2
    return p


def route(T: int, family: ExpertFamily) -> PatchExpert:
    p = route_patch_size(T, family.max_patch)
    for e in family.experts:
        if e.patch_size >= p:
            return e
    raise SignalTooLong(f"no expert for length {T}")  # pragma: no cover


def patchify(signal, patch: int) -> np.ndarray:
    signal = np.asarray(signal, dtype=np.float64)
    n = -(-signal.shape[0] // patch)
    out = np.zeros(n * patch)
    out[: signal.shape[0]] = signal
    return out.reshape(n, patch)


def embed_patches(signal, expert: PatchExpert) -> Tensor:
    sig = signal if isinstance(signal, Tensor) else Tensor(signal)
    return conv1d_patch(sig, expert.patch_size, expert.conv_weights, expert.conv_bias)


@dataclass
class ReprogrammingParams:
    vocab_proj: Tensor  # [num_prototypes, vocab_size]
    attn: AttentionParams  # q: d_enc -> d_attn, k/v: d_llm -> d_attn, o: d_attn -> d_llm
    final_proj: Tensor  # [d_llm, d_llm], stored [out, in]

    @property
    def num_prototypes(self) -> int:
        return self.vocab_proj.shape[0]

    @classmethod
    def init(
        cls,
        vocab_size: int,
        d_enc: int,
        d_llm: int,
        num_prototypes: int,
        rng: np.random.Generator,
        d_attn: int | None = None,
    ) -> ReprogrammingParams:
        d_attn = d_attn or d_llm

        def w(out, inp):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(inp), size=(out, inp)), requires_grad=True)

        def b(n):
            return Tensor(np.zeros(n), requires_grad=True)

        attn = AttentionParams(
            w(d_attn, d_enc), b(d_attn), w(d_attn, d_llm), b(d_attn),
            w(d_attn, d_llm), b(d_attn), w(d_llm, d_attn), b(d_llm),
        )  # fmt: skip
        return cls(w(num_prototypes, vocab_size), attn, w(d_llm, d_llm))

    def tensors(self, prefix: str = "reprog.") -> dict[str, Tensor]:
        out = {prefix + "vocab_proj": self.vocab_proj, prefix + "final_proj": self.final_proj}
        out.update({prefix + "attn." + k: v for k, v in self.attn.tensors().items()})
        return out


def reprogram(
    x_patch: Tensor,
    vocab_embeddings: Tensor,
    params: ReprogrammingParams,
    heads: int,
    keep: list | None = None,
) -> Tensor:
    """Cross-attend patch embeddings to a prototype bank built from the vocabulary."""
    if params.vocab_proj.shape[1] != vocab_embeddings.shape[0]:
        raise ShapeMismatch(
            f"vocab_proj expects {params.vocab_proj.shape[1]} rows, got {vocab_embeddings.shape[0]}"
        )
    prototypes = matmul(params.vocab_proj, vocab_embeddings)
    att = multi_head_cross_attention(x_patch, prototypes, params.attn, heads, keep=keep)
    return linear(att, params.final_proj)


@dataclass
class EncoderOutput:
    x_enc: Tensor
    patch_size_used: int
    t_enc: int
    norm_stats: tuple[float, float]


def encode(
    x: TimeSeries,
    family: ExpertFamily,
    vocab_embeddings: Tensor,
    params: ReprogrammingParams,
    heads: int,
) -> EncoderOutput:
    flat = flatten_input(x)
    expert = route(flat.shape[0], family)
    normed, stats = normalize(flat)
    x_patch = embed_patches(normed, expert)
    x_enc = reprogram(x_patch, vocab_embeddings, params, heads)
    return EncoderOutput(x_enc, expert.patch_size, x_enc.shape[0], stats)
