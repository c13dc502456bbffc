"""Output pathways: greedy text decoding and the regression head bank."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .backbone import EOS, AssembledInput, ContextOverflow, Tokenizer, extend
from .numerics import (
    ShapeMismatch,
    Tensor,
    add,
    linear,
    mul,
    pad_rows,
    reshape,
    weight_of,
)

T_CAP = 200
DEFAULT_HEAD_LENGTHS = (8, 16, 32, 64, 96, 128, 256, 512, 720)


class LengthUnsupported(ValueError):
    pass


@dataclass
class TextHead:
    unembed: Tensor  # stored [vocab, d_llm] so it reads as a linear layer

    def logits(self, h: Tensor) -> Tensor:
        return linear(h, weight_of(self.unembed))


@dataclass
class RegressionHead:
    """Affine map from the flattened, zero-padded series rows to ``out_length`` values.

    The input is scaled by 1/sqrt(fan_in).  This is a fixed reparametrization:
    Adam moves every weight by about lr per step, so without it one step on a
    6400-wide head shifts the output by thousands of lr units.
    """

    out_length: int
    weights: Tensor  # [out_length, T_CAP * d_llm]
    bias: Tensor  # [out_length]

    def full_output(self, llm_out: Tensor, series_span: tuple[int, int], t_cap: int = T_CAP) -> Tensor:
        start, end = series_span
        if not 0 <= start < end <= llm_out.shape[0]:
            raise ShapeMismatch(f"series span {series_span} outside {llm_out.shape[0]} rows")
        if end - start > t_cap:
            raise ShapeMismatch(f"{end - start} series rows exceed T_cap={t_cap}")
        rows = pad_rows(llm_out[start:end], t_cap)
        fan_in = t_cap * llm_out.shape[1]
        flat = mul(reshape(rows, (1, fan_in)), 1.0 / math.sqrt(fan_in))
        w = weight_of(self.weights)
        if w.shape[1] != flat.shape[1]:
            raise ShapeMismatch(f"head expects {w.shape[1]} inputs, got {flat.shape[1]}")
        return reshape(linear(flat, w, self.bias), (self.out_length,))


@dataclass
class HeadBank:
    heads: list[RegressionHead]

    def __post_init__(self):
        lengths = [h.out_length for h in self.heads]
        if not lengths or any(b <= a for a, b in zip(lengths, lengths[1:])):
            raise ValueError("head lengths must be non-empty and strictly increasing")

    @property
    def lengths(self) -> list[int]:
        return [h.out_length for h in self.heads]

    @classmethod
    def init(cls, lengths, d_llm: int, t_cap: int = T_CAP) -> HeadBank:
        # zero init: an untrained random head adds O(1) noise on unseen inputs
        fan_in = t_cap * d_llm
        heads = [
            RegressionHead(
                n,
                Tensor(np.zeros((n, fan_in)), requires_grad=True),
                Tensor(np.zeros(n), requires_grad=True),
            )
            for n in lengths
        ]
        return cls(heads)


def select_head(bank: HeadBank, required_length: int) -> RegressionHead:
    """Smallest head at least as long as the target; its output gets truncated."""
    if required_length < 1:
        raise LengthUnsupported(f"required length {required_length} < 1")
    for h in bank.heads:
        if h.out_length >= required_length:
            return h
    raise LengthUnsupported(f"required length {required_length} > {bank.heads[-1].out_length}")


def regress(
    llm_out: Tensor,
    series_span: tuple[int, int],
    head: RegressionHead,
    required_length: int,
    t_cap: int = T_CAP,
) -> Tensor:
    """Head output on the normalized scale, truncated to ``required_length``."""
    if required_length > head.out_length:
        raise LengthUnsupported(f"head {head.out_length} shorter than {required_length}")
    return head.full_output(llm_out, series_span, t_cap)[:required_length]


def predict_series(
    llm_out: Tensor,
    series_span: tuple[int, int],
    head: RegressionHead,
    required_length: int,
    norm_stats: tuple[float, float],
    t_cap: int = T_CAP,
) -> Tensor:
    mean, std = norm_stats
    return add(mul(regress(llm_out, series_span, head, required_length, t_cap), std), mean)


def decode_text(
    logits_fn: Callable[[AssembledInput], Tensor],
    assembled: AssembledInput,
    max_new: int,
    embedding_table: Tensor,
) -> str:
    """Greedy argmax decoding, re-running the full forward each step."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    out: list[int] = []
    cur = assembled
    for _ in range(max_new):
        logits = logits_fn(cur)
        tok = int(np.argmax(logits.data[-1]))
        if tok == EOS:
            break
        out.append(tok)
        cur = extend(cur, [tok], embedding_table)
    return Tokenizer().decode(out)


def predict_multichannel(instance, model):
    """Per-channel prediction when target and input channel counts agree.

    A single-channel target from a multi-channel input is predicted once from
    the flattened input.  Returns a TimeSeries of shape target channels x length.
    """
    from .dataset import TimeSeries

    length = instance.target_length
    x = instance.input
    if x is None:
        return TimeSeries(model.predict_one(None, instance.prompt, length)[None, :])
    out_channels = instance.target.series.channels if hasattr(instance.target, "series") else 1
    if out_channels == x.channels and x.channels > 1:
        rows = [
            model.predict_one(TimeSeries(x.values[c]), instance.prompt, length)
            for c in range(x.channels)
        ]
        return TimeSeries(np.stack(rows))
    return TimeSeries(model.predict_one(x, instance.prompt, length)[None, :])


__all__ = [
    "ContextOverflow",
    "HeadBank",
    "LengthUnsupported",
    "RegressionHead",
    "TextHead",
    "decode_text",
    "predict_multichannel",
    "predict_series",
    "regress",
    "select_head",
]
