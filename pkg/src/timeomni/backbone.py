"""Byte tokenizer, prompt/series assembly and a small pre-norm decoder stack."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderOutput
from .numerics import (
    AttentionParams,
    Tensor,
    add,
    causal_self_attention,
    concat_rows,
    gelu,
    layer_norm,
    linear,
    take_rows,
    weight_of,
)

PAD, BOS, EOS, TS_EMPTY = 256, 257, 258, 259
VOCAB_SIZE = 260


class InvalidUtf8(ValueError):
    pass


class ContextOverflow(ValueError):
    pass


class Tokenizer:
    """Byte-level: ids 0-255 are raw UTF-8 bytes, 256-259 are specials."""

    vocab_size = VOCAB_SIZE

    def encode(self, text: str | bytes) -> list[int]:
        if isinstance(text, bytes):
            try:
                text.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise InvalidUtf8(str(exc)) from None
            raw = text
        else:
            try:
                raw = text.encode("utf-8")
            except UnicodeEncodeError as exc:
                raise InvalidUtf8(str(exc)) from None
        return [BOS, *raw, EOS]

    def decode(self, ids) -> str:
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


def tokenize(prompt: str | bytes) -> list[int]:
    return Tokenizer().encode(prompt)


class Mode(enum.Enum):
    UNDERSTANDING = "understanding"
    GENERATION = "generation"


@dataclass
class BackboneConfig:
    d_llm: int = 32
    n_layers: int = 2
    n_heads: int = 4
    max_positions: int = 320
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_llm % self.n_heads:
            raise ValueError(f"d_llm={self.d_llm} not divisible by n_heads={self.n_heads}")
        if self.dropout != 0.0:
            raise ValueError("dropout is fixed at 0")


@dataclass
class Block:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor  # [4d, d]
    b1: Tensor
    w2: Tensor  # [d, 4d]
    b2: Tensor


@dataclass
class BackboneParams:
    tok_emb: Tensor  # [vocab, d]
    pos_emb: Tensor  # [max_positions, d]
    blocks: list[Block]
    lnf_g: Tensor
    lnf_b: Tensor

    @classmethod
    def init(cls, config: BackboneConfig, rng: np.random.Generator) -> BackboneParams:
        d = config.d_llm

        def w(out, inp, scale=1.0):
            return Tensor(rng.normal(0.0, scale / math.sqrt(inp), size=(out, inp)), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n), requires_grad=True)

        depth = 1.0 / math.sqrt(2 * max(config.n_layers, 1))
        blocks = []
        for _ in range(config.n_layers):
            attn = AttentionParams(
                w(d, d), zeros(d), w(d, d), zeros(d), w(d, d), zeros(d), w(d, d, depth), zeros(d)
            )
            blocks.append(
                Block(ones(d), zeros(d), attn, ones(d), zeros(d),
                      w(4 * d, d), zeros(4 * d), w(d, 4 * d, depth), zeros(d))
            )  # fmt: skip
        return cls(
            Tensor(rng.normal(0.0, 1.0, size=(VOCAB_SIZE, d)), requires_grad=True),
            Tensor(rng.normal(0.0, 0.1, size=(config.max_positions, d)), requires_grad=True),
            blocks,
            ones(d),
            zeros(d),
        )

    def tensors(self, prefix: str = "backbone.") -> dict:
        out = {
            prefix + "tok_emb": self.tok_emb,
            prefix + "pos_emb": self.pos_emb,
            prefix + "lnf_g": self.lnf_g,
            prefix + "lnf_b": self.lnf_b,
        }
        for i, b in enumerate(self.blocks):
            p = f"{prefix}blocks.{i}."
            for k in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
                out[p + k] = getattr(b, k)
            for k, v in b.attn.tensors().items():
                out[p + "attn." + k] = v
        return out


@dataclass
class AssembledInput:
    embeddings: Tensor
    series_span: tuple[int, int]
    prompt_span: tuple[int, int]

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


def assemble(
    x_enc: EncoderOutput | Tensor | None,
    prompt_ids,
    mode: Mode,
    embedding_table: Tensor,
) -> AssembledInput:
    """Prompt goes after the series for understanding, before it for generation.

    A missing series (text-only synthesis) occupies one TS_EMPTY slot.
    """
    if x_enc is None:
        series = take_rows(embedding_table, [TS_EMPTY])
    else:
        series = x_enc.x_enc if isinstance(x_enc, EncoderOutput) else x_enc
    prompt = take_rows(embedding_table, list(prompt_ids))
    ns, npr = series.shape[0], prompt.shape[0]
    if mode is Mode.UNDERSTANDING:
        return AssembledInput(concat_rows([series, prompt]), (0, ns), (ns, ns + npr))
    return AssembledInput(concat_rows([prompt, series]), (npr, npr + ns), (0, npr))


def extend(assembled: AssembledInput, ids, embedding_table: Tensor) -> AssembledInput:
    """Append token embeddings after the assembled sequence (answer continuation)."""
    if len(ids) == 0:
        return assembled
    more = take_rows(embedding_table, list(ids))
    return AssembledInput(
        concat_rows([assembled.embeddings, more]), assembled.series_span, assembled.prompt_span
    )


def forward(inp: AssembledInput | Tensor, config: BackboneConfig, params: BackboneParams) -> Tensor:
    x = inp.embeddings if isinstance(inp, AssembledInput) else inp
    n = x.shape[0]
    if n > config.max_positions:
        raise ContextOverflow(f"sequence of {n} exceeds max_positions={config.max_positions}")
    h = add(x, params.pos_emb[:n])
    for b in params.blocks:
        h = add(h, causal_self_attention(layer_norm(h, b.ln1_g, b.ln1_b), b.attn, config.n_heads))
        z = gelu(linear(layer_norm(h, b.ln2_g, b.ln2_b), weight_of(b.w1), b.b1))
        h = add(h, linear(z, weight_of(b.w2), b.b2))
    return layer_norm(h, params.lnf_g, params.lnf_b)
