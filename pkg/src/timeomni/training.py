"""Losses, DoRA adapters, Adam with warmup+cosine, and the joint training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import (
    Tensor,
    add,
    div,
    linear,
    log_softmax,
    matmul,
    mean_all,
    mul,
    reshape,
    row_norm,
    square,
    take_rows,
)


class EmptyMask(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class NonFiniteLoss(ArithmeticError):
    def __init__(self, step: int, loss_u: float, loss_g: float, last_good_step: int):
        super().__init__(
            f"non-finite loss at step {step} (loss_u={loss_u}, loss_g={loss_g}); "
            f"last good step {last_good_step}"
        )
        self.step = step
        self.last_good_step = last_good_step


# ---------------------------------------------------------------------------
# losses


def cross_entropy_loss(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-softmax of ``targets`` over unmasked rows of ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[0] != targets.shape[0]:
        raise LengthMismatch(f"{logits.shape[0]} logit rows for {targets.shape[0]} targets")
    mask = np.ones(len(targets), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("cross-entropy over an empty mask")
    logp = reshape(log_softmax(logits, axis=-1), (logits.size,))
    rows = np.nonzero(mask)[0]
    picked = take_rows(logp, rows * logits.shape[1] + targets[rows])
    return mul(mean_all(picked), -1.0)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise LengthMismatch(f"pred {pred.shape} vs target {target.shape}")
    return mean_all(square(add(pred, Tensor(-target))))


# ---------------------------------------------------------------------------
# schedule


@dataclass
class TrainConfig:
    lr: float = 2e-5
    epochs: int = 10
    warmup_frac: float = 0.05
    batch_understand: int = 6
    batch_generate: int = 1
    seed: int = 0
    lambda_text: float = 1.0
    lambda_series: float = 1.0
    adapter: str = "dora"  # "dora" or "full"
    dora_rank: int = 8
    dora_alpha: float = 32.0
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if self.batch_understand < 1 or self.batch_generate < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.adapter not in ("dora", "full"):
            raise ValueError(f"unknown adapter {self.adapter!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def warmup_steps(total_steps: int, config: TrainConfig) -> int:
    return max(1, math.ceil(config.warmup_frac * total_steps))


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, config)
    if step <= w:
        return config.lr * step / w
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total_steps - w)))


# ---------------------------------------------------------------------------
# DoRA


class DoraAdapter:
    """Weight-decomposed low-rank adapter around a frozen [out, in] weight.

    effective = magnitude[:, None] * V / ||V||_row  with  V = base + (alpha/r) B A.
    B starts at zero and magnitude at the base row norms, so the effective
    weight equals the base exactly at initialization.
    """

    def __init__(self, base: Tensor, rank: int, alpha: float, rng: np.random.Generator):
        out_dim, in_dim = base.shape
        self.base = Tensor(base.data.copy(), requires_grad=False)
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        self.A = Tensor(rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(rank, in_dim)), requires_grad=True)
        self.B = Tensor(np.zeros((out_dim, rank)), requires_grad=True)
        self.magnitude = Tensor(np.sqrt((self.base.data**2).sum(axis=1)), requires_grad=True)

    @property
    def shape(self):
        return self.base.shape

    def tensors(self) -> dict[str, Tensor]:
        return {"base": self.base, "A": self.A, "B": self.B, "magnitude": self.magnitude}

    def effective(self) -> Tensor:
        v = add(self.base, mul(matmul(self.B, self.A), self.scale))
        ratio = div(self.magnitude, row_norm(v))
        return mul(v, reshape(ratio, (ratio.shape[0], 1)))

    def __call__(self, x: Tensor, bias: Tensor | None = None) -> Tensor:
        return linear(x, self.effective(), bias)


def adaptable_slots(model, include_heads: bool = True) -> list[tuple[object, str, str]]:
    """(owner, attribute, name) for every backbone linear and the text head.

    Regression heads are new modules (zero-initialized), so they train fully
    like the encoder instead of being adapted.
    """
    out = []
    for i, b in enumerate(model.backbone.blocks):
        for k in ("wq", "wk", "wv", "wo"):
            out.append((b.attn, k, f"backbone.blocks.{i}.attn.{k}"))
        out.append((b, "w1", f"backbone.blocks.{i}.w1"))
        out.append((b, "w2", f"backbone.blocks.{i}.w2"))
    if include_heads:
        out.append((model.text_head, "unembed", "text_head.unembed"))
    return out


def dora_wrap(model, r: int = 8, alpha: float = 32.0, seed: int = 0, include_heads: bool = True):
    """Wrap backbone (and head) linears in DoRA adapters, freezing everything
    that belonged to the pretrained stand-in.  Encoder parameters stay trainable.
    """
    rng = np.random.default_rng(seed)
    wrapped = set()
    for owner, attr, name in adaptable_slots(model, include_heads):
        w = getattr(owner, attr)
        if isinstance(w, DoraAdapter):
            continue
        setattr(owner, attr, DoraAdapter(w, r, alpha, rng))
        wrapped.add(name)
    # the rest of the pretrained stand-in (embeddings, norms, biases) is frozen
    for t in model.backbone.tensors("backbone.").values():
        if isinstance(t, Tensor):
            t.requires_grad = False
    return model


def trainable_count(model) -> int:
    return sum(t.size for t in model.trainable().values())


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        self.m = {k[6:]: v.copy() for k, v in arrays.items() if k.startswith("opt.m.")}
        self.v = {k[6:]: v.copy() for k, v in arrays.items() if k.startswith("opt.v.")}


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


# ---------------------------------------------------------------------------
# joint loop


def joint_step(model, batch_u, batch_g, opt: Adam, step: int, total_steps: int, config: TrainConfig):
    """One Adam update on lambda_text * mean(loss_u) + lambda_series * mean(loss_g).

    ``step`` is 0-based; the learning rate used is lr_at(step + 1).
    """
    model.zero_grad()
    loss_u = 0.0
    loss_g = 0.0
    if batch_u and config.lambda_text != 0.0:
        w = config.lambda_text / len(batch_u)
        for inst in batch_u:
            loss = model.understanding_loss(inst)
            loss_u += float(loss.data) / len(batch_u)
            mul(loss, w).backward()
    if batch_g and config.lambda_series != 0.0:
        w = config.lambda_series / len(batch_g)
        for inst in batch_g:
            loss = model.generation_loss(inst)
            loss_g += float(loss.data) / len(batch_g)
            mul(loss, w).backward()
    if not (math.isfinite(loss_u) and math.isfinite(loss_g)):
        raise NonFiniteLoss(step, loss_u, loss_g, step - 1)
    params = model.trainable()
    clip_grad_norm(params, config.clip_norm)
    opt.step(params, lr_at(step + 1, total_steps, config))
    return loss_u, loss_g


class BatchSchedule:
    """Deterministic batches for any step index, so training can resume mid-run.

    Each pool is reshuffled every time it is exhausted; the permutation for
    cycle c depends only on (seed, pool, c).
    """

    def __init__(self, n_u: int, n_g: int, config: TrainConfig):
        self.n_u, self.n_g = n_u, n_g
        self.bu, self.bg = config.batch_understand, config.batch_generate
        self.seed = config.seed
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def steps_per_epoch(self) -> int:
        su = math.ceil(self.n_u / self.bu) if self.n_u else 0
        sg = math.ceil(self.n_g / self.bg) if self.n_g else 0
        return max(su, sg, 1)

    def _perm(self, pool: int, cycle: int, n: int) -> np.ndarray:
        key = (pool, cycle)
        if key not in self._cache:
            rng = np.random.default_rng([self.seed, pool, cycle])
            self._cache[key] = rng.permutation(n)
        return self._cache[key]

    def _take(self, pool: int, n: int, b: int, step: int) -> list[int]:
        if n == 0:
            return []
        out = []
        for j in range(step * b, step * b + b):
            cycle, pos = divmod(j, n)
            out.append(int(self._perm(pool, cycle, n)[pos]))
        return out

    def batch(self, step: int) -> tuple[list[int], list[int]]:
        return self._take(0, self.n_u, self.bu, step), self._take(1, self.n_g, self.bg, step)


@dataclass
class TrainResult:
    model: object
    optimizer: Adam
    history: list[tuple[int, float, float, float]]  # step, lr, loss_u, loss_g
    total_steps: int
    next_step: int


def split_pools(dataset) -> tuple[list, list]:
    u = [i for i in dataset.instances if i.task_type.is_understanding]
    g = [i for i in dataset.instances if not i.task_type.is_understanding]
    return u, g


def train(
    dataset,
    config: TrainConfig,
    model,
    optimizer: Adam | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
    on_step=None,
) -> TrainResult:
    """Run ``config.epochs`` epochs of joint steps (or resume from ``start_step``)."""
    pool_u, pool_g = split_pools(dataset)
    cfg = config
    if not pool_u and cfg.lambda_text != 0.0:
        raise ValueError("no understanding instances; set lambda_text = 0")
    if not pool_g and cfg.lambda_series != 0.0:
        raise ValueError("no generation instances; set lambda_series = 0")
    sched = BatchSchedule(len(pool_u), len(pool_g), cfg)
    total = sched.steps_per_epoch * cfg.epochs
    opt = optimizer or Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = []
    end = total if stop_step is None else min(stop_step, total)
    for step in range(start_step, end):
        iu, ig = sched.batch(step)
        lu, lg = joint_step(
            model, [pool_u[i] for i in iu], [pool_g[i] for i in ig], opt, step, total, cfg
        )
        rec = (step, lr_at(step + 1, total, cfg), lu, lg)
        history.append(rec)
        if on_step is not None:
            on_step(rec)
    return TrainResult(model, opt, history, total, end)
