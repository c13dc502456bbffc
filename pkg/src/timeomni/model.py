"""The assembled model: encoder + backbone + text head + regression head bank."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import backbone as bb
from .dataset import (
    Indices,
    McqChoice,
    SeriesTarget,
    TaskInstance,
    TextLabel,
    TimeSeries,
    flatten_input,
)
from .encoder import EncoderOutput, ExpertFamily, ReprogrammingParams, encode
from .heads import (
    DEFAULT_HEAD_LENGTHS,
    T_CAP,
    HeadBank,
    TextHead,
    decode_text,
    predict_multichannel,
    regress,
    select_head,
)
from .numerics import Tensor, add
from .training import cross_entropy_loss, mse_loss


@dataclass
class ModelConfig:
    d_llm: int = 32
    n_layers: int = 2
    n_heads: int = 4
    max_positions: int = 320
    d_enc: int = 16
    num_prototypes: int = 1000
    reprog_heads: int = 4
    expert_max_exponent: int = 16
    head_lengths: tuple[int, ...] = DEFAULT_HEAD_LENGTHS
    max_new_tokens: int = 16

    def __post_init__(self):
        self.head_lengths = tuple(int(n) for n in self.head_lengths)
        if self.max_positions < T_CAP + 2:
            raise ValueError("max_positions must leave room for 200 series tokens plus a prompt")
        if not 0 <= self.expert_max_exponent <= 16:
            raise ValueError("expert_max_exponent must be in [0, 16]")
        self.backbone_config()

    def backbone_config(self) -> bb.BackboneConfig:
        return bb.BackboneConfig(self.d_llm, self.n_layers, self.n_heads, self.max_positions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_lengths"] = list(self.head_lengths)
        return d


def _answer_text(target) -> str:
    if isinstance(target, TextLabel):
        return target.label
    if isinstance(target, McqChoice):
        return target.choice
    raise TypeError(f"{type(target).__name__} is not a text answer")


@dataclass
class TimeOmni:
    config: ModelConfig
    experts: ExpertFamily
    reprog: ReprogrammingParams
    backbone: bb.BackboneParams
    text_head: TextHead
    head_bank: HeadBank

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> TimeOmni:
        rng = np.random.default_rng(seed)
        bcfg = config.backbone_config()
        backbone = bb.BackboneParams.init(bcfg, rng)
        experts = ExpertFamily.init(config.d_enc, config.expert_max_exponent, rng)
        reprog = ReprogrammingParams.init(
            bb.VOCAB_SIZE, config.d_enc, config.d_llm, config.num_prototypes, rng
        )
        unembed = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(config.d_llm), size=(bb.VOCAB_SIZE, config.d_llm)),
            requires_grad=True,
        )
        bank = HeadBank.init(config.head_lengths, config.d_llm)
        return cls(config, experts, reprog, backbone, TextHead(unembed), bank)

    # -- parameter bookkeeping -------------------------------------------------

    def slots(self) -> dict:
        """Name -> Tensor or adapter, in a fixed order."""
        out = {}
        for e in self.experts.experts:
            out[f"encoder.expert{e.patch_size}.w"] = e.conv_weights
            out[f"encoder.expert{e.patch_size}.b"] = e.conv_bias
        out.update(self.reprog.tensors("encoder.reprog."))
        out.update(self.backbone.tensors("backbone."))
        out["text_head.unembed"] = self.text_head.unembed
        for h in self.head_bank.heads:
            out[f"heads.{h.out_length}.w"] = h.weights
            out[f"heads.{h.out_length}.b"] = h.bias
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for name, obj in self.slots().items():
            if isinstance(obj, Tensor):
                out[name] = obj
            else:
                for part, t in obj.tensors().items():
                    out[f"{name}.{part}"] = t
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors().items() if t.requires_grad}

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_tensors().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        tensors = self.named_tensors()
        missing = set(tensors) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
        for k, t in tensors.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.zero_grad()

    # -- forward pieces --------------------------------------------------------

    @property
    def embedding_table(self) -> Tensor:
        return self.backbone.tok_emb

    def encode_series(self, series: TimeSeries) -> EncoderOutput:
        return encode(
            series, self.experts, self.embedding_table, self.reprog, self.config.reprog_heads
        )

    def hidden(self, assembled: bb.AssembledInput) -> Tensor:
        return bb.forward(assembled, self.config.backbone_config(), self.backbone)

    def logits(self, assembled: bb.AssembledInput) -> Tensor:
        return self.text_head.logits(self.hidden(assembled))

    def _understanding_input(self, inst: TaskInstance) -> bb.AssembledInput:
        enc = self.encode_series(inst.input)
        return bb.assemble(enc, bb.tokenize(inst.prompt), bb.Mode.UNDERSTANDING, self.embedding_table)

    def understanding_loss(self, inst: TaskInstance) -> Tensor:
        """Teacher-forced cross-entropy over the answer bytes and the closing EOS."""
        answer = list(_answer_text(inst.target).encode("utf-8")) + [bb.EOS]
        base = self._understanding_input(inst)
        full = bb.extend(base, answer[:-1], self.embedding_table)
        logits = self.logits(full)
        start = base.length - 1
        return cross_entropy_loss(logits[start : start + len(answer)], answer)

    def answer(self, inst: TaskInstance) -> str:
        base = self._understanding_input(inst)
        return decode_text(self.logits, base, self.config.max_new_tokens, self.embedding_table)

    def _generation_pass(self, series: TimeSeries | None, prompt: str, length: int, kind: str):
        if series is None:
            enc, stats = None, (0.0, 1.0)
        else:
            enc = self.encode_series(series)
            stats = enc.norm_stats
            if kind == "indices":
                half = series.length / 2.0
                stats = (half, half)
        asm = bb.assemble(enc, bb.tokenize(prompt), bb.Mode.GENERATION, self.embedding_table)
        head = select_head(self.head_bank, length)
        return regress(self.hidden(asm), asm.series_span, head, length), stats

    def predict_one(self, series, prompt: str, length: int, kind: str = "series") -> np.ndarray:
        pred, (mean, std) = self._generation_pass(series, prompt, length, kind)
        return pred.data * std + mean

    def generation_loss(self, inst: TaskInstance) -> Tensor:
        """Normalized-scale MSE, averaged over channels for per-channel targets."""
        losses = []
        for series, target, kind in generation_units(inst):
            pred, (mean, std) = self._generation_pass(series, inst.prompt, target.shape[0], kind)
            losses.append(mse_loss(pred, (target - mean) / std))
        total = losses[0]
        for extra in losses[1:]:
            total = add(total, extra)
        return total * (1.0 / len(losses)) if len(losses) > 1 else total

    def predict(self, inst: TaskInstance):
        """Original-scale prediction: a string, a TimeSeries or a float index array."""
        if inst.task_type.is_understanding:
            return self.answer(inst)
        if isinstance(inst.target, Indices):
            return self.predict_one(inst.input, inst.prompt, inst.target_length, "indices")
        return predict_multichannel(inst, self)

    def loss(self, inst: TaskInstance) -> Tensor:
        if inst.task_type.is_understanding:
            return self.understanding_loss(inst)
        return self.generation_loss(inst)


def generation_units(inst: TaskInstance):
    """Yield (input series, raw target vector, kind) per independent regression pass."""
    x = inst.input
    t = inst.target
    if isinstance(t, Indices):
        yield x, np.asarray(t.indices, dtype=np.float64), "indices"
        return
    assert isinstance(t, SeriesTarget)
    if x is not None and x.channels > 1 and t.series.channels == x.channels:
        for c in range(x.channels):
            yield TimeSeries(x.values[c]), t.series.values[c], "series"
    else:
        yield x, flatten_input(t.series), "series"
