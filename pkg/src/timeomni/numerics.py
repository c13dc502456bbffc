"""Dense float64 tensors with reverse-mode differentiation.

Every tensor produced by an op remembers its parents and a closure that
pushes the upstream gradient back to them.  Calling ``backward`` on a scalar
walks the recorded graph in reverse topological order.  The graph is rebuilt
on each forward pass; there are no higher-order derivatives.

numpy does the dense arithmetic.  Only the handful of ops the model needs are
provided, and broadcasting is limited to what ``add``/``mul`` require.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

LN_EPS = 1e-5


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def __getitem__(self, idx) -> Tensor:
        return getitem(self, idx)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _result(out, (a, b), backward)


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: ((x, 2.0 * x.data * g),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: ((x, g / (2.0 * out)),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: ((x, g * out),))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    c = math.sqrt(2.0 / math.pi)
    u = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = c * (1.0 + 3 * 0.044715 * x.data**2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return ((x, g * d),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def sum_all(x: Tensor) -> Tensor:
    return _result(np.array(x.data.sum()), (x,), lambda g: ((x, np.broadcast_to(g, x.shape)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(
        np.array(x.data.mean()), (x,), lambda g: ((x, np.broadcast_to(g / n, x.shape)),)
    )


def row_norm(x: Tensor) -> Tensor:
    """L2 norm of each row of a 2-D tensor, shape [rows]."""
    out = np.sqrt((x.data * x.data).sum(axis=1))

    def backward(g):
        return ((x, (g / out)[:, None] * x.data),)

    return _result(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: ((x, g.reshape(x.shape)),))


def transpose(x: Tensor) -> Tensor:
    return _result(x.data.T, (x,), lambda g: ((x, g.T),))


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return ((x, full),)

    return _result(x.data[idx], (x,), backward)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return ((table, full),)

    return _result(table.data[ids], (table,), backward)


def concat_rows(parts: list[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple((p, g[bounds[i] : bounds[i + 1]]) for i, p in enumerate(parts))

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def pad_rows(x: Tensor, total: int) -> Tensor:
    """Right-pad a 2-D tensor with zero rows up to ``total`` rows."""
    n = x.shape[0]
    if n > total:
        raise ShapeMismatch(f"cannot pad {n} rows down to {total}")
    out = np.zeros((total,) + x.shape[1:])
    out[:n] = x.data
    return _result(out, (x,), lambda g: ((x, g[:n]),))


def pad_to(x: Tensor, length: int) -> Tensor:
    """Right-pad a 1-D tensor with zeros."""
    return reshape(pad_rows(reshape(x, (x.shape[0], 1)), length), (length,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"linear {x.shape} with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        res = [
            (x, g @ weight.data if x.requires_grad else None),
            (weight, g.T @ x.data if weight.requires_grad else None),
        ]
        if bias is not None:
            res.append((bias, g.sum(axis=0) if bias.requires_grad else None))
        return res

    return _result(out, parents, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((x, out * (g - (g * out).sum(axis=axis, keepdims=True))),)

    return _result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return ((x, g - p * g.sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm width {d} vs gain {gain.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        flat_g = g.reshape(-1, d)
        gg = (flat_g * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gb = flat_g.sum(axis=0) if bias.requires_grad else None
        return ((x, gx), (gain, gg), (bias, gb))

    return _result(out, (x, gain, bias), backward)


def conv1d_patch(signal: Tensor, patch: int, weights: Tensor, bias: Tensor) -> Tensor:
    """Non-overlapping 1-D convolution (stride = kernel = ``patch``).

    The tail is zero-padded on the right, so the output has ceil(T/patch) rows.
    """
    signal = as_tensor(signal)
    if patch < 1 or signal.data.ndim != 1 or signal.shape[0] < 1:
        raise ShapeMismatch(f"conv1d_patch on signal {signal.shape} with patch {patch}")
    if weights.shape[1] != patch or bias.shape != (weights.shape[0],):
        raise ShapeMismatch(f"conv weights {weights.shape} / bias {bias.shape} vs patch {patch}")
    n = -(-signal.shape[0] // patch)
    windows = reshape(pad_to(signal, n * patch), (n, patch))
    return linear(windows, weights, bias)


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention block, all [out, in]."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, heads: int, causal: bool = False, keep: list | None = None
) -> Tensor:
    """Multi-head softmax attention over already-projected q [Lq, d], k/v [Lkv, d].

    With ``causal`` position i attends only to j <= i.  If ``keep`` is a list the
    attention weights [heads, Lq, Lkv] are appended to it.
    """
    lq, d = q.shape
    lkv = k.shape[0]
    if k.shape[1] != d or v.shape != (lkv, d) or d % heads:
        raise ShapeMismatch(f"attention q{q.shape} k{k.shape} v{v.shape} heads={heads}")
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(lq, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(lkv, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(lkv, heads, dh).transpose(1, 0, 2)
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    if causal:
        if lq != lkv:
            raise ShapeMismatch("causal attention needs square scores")
        mask = np.triu(np.ones((lq, lkv), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    w = e / e.sum(axis=-1, keepdims=True)
    if keep is not None:
        keep.append(w)
    oh = np.matmul(w, vh)
    out = oh.transpose(1, 0, 2).reshape(lq, d)

    def backward(g):
        gh = g.reshape(lq, heads, dh).transpose(1, 0, 2)
        gw = np.matmul(gh, vh.transpose(0, 2, 1))
        gv = np.matmul(w.transpose(0, 2, 1), gh)
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, kh)
        gk = np.matmul(gs.transpose(0, 2, 1), qh)
        unh = lambda a, n: a.transpose(1, 0, 2).reshape(n, d)  # noqa: E731
        return ((q, unh(gq, lq)), (k, unh(gk, lkv)), (v, unh(gv, lkv)))

    return _result(out, (q, k, v), backward)


def weight_of(w) -> Tensor:
    """Plain tensors pass through; adapters (anything with ``effective()``) are materialized."""
    return w.effective() if hasattr(w, "effective") else w


def multi_head_cross_attention(
    q_in: Tensor, kv_in: Tensor, params: AttentionParams, heads: int, keep: list | None = None
) -> Tensor:
    q = linear(q_in, weight_of(params.wq), params.bq)
    k = linear(kv_in, weight_of(params.wk), params.bk)
    v = linear(kv_in, weight_of(params.wv), params.bv)
    return linear(scaled_dot_attention(q, k, v, heads, keep=keep), weight_of(params.wo), params.bo)


def causal_self_attention(
    x: Tensor, params: AttentionParams, heads: int, keep: list | None = None
) -> Tensor:
    q = linear(x, weight_of(params.wq), params.bq)
    k = linear(x, weight_of(params.wk), params.bk)
    v = linear(x, weight_of(params.wv), params.bv)
    att = scaled_dot_attention(q, k, v, heads, causal=True, keep=keep)
    return linear(att, weight_of(params.wo), params.bo)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    atol: float = 1e-9,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` recomputes a scalar loss from the current parameter values.  With
    ``max_entries`` only that many coordinates per parameter are probed
    (chosen with a seeded RNG); otherwise every coordinate is.  Pairs that
    agree to within max(atol, 8*eps*|f|/h) count as exact: central
    differences cannot resolve below roughly eps*|f|/h, so a structurally
    zero gradient would otherwise report roundoff as a large relative error.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    for t in tensors:
        t.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteGradient("loss is not finite at the probe point")
    loss.backward()
    floor = max(atol, 8 * np.finfo(np.float64).eps * abs(float(loss.data)) / h)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).copy()
        if not np.isfinite(analytic).all():
            raise NonFiniteGradient(f"analytic gradient of {t.name or t.shape} not finite")
        flat = t.data.reshape(-1)
        idx = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            idx = rng.choice(t.size, size=max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            if not math.isfinite(fd):
                raise NonFiniteGradient(f"finite difference of {t.name or t.shape}[{i}] not finite")
            a = analytic[i]
            if abs(a - fd) <= floor:
                continue
            err = abs(a - fd) / max(abs(a), abs(fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (all little-endian):
#   b"TOK1" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 count
#   then per entry: u32 name_len | name | u32 ndim | u32 dims... | f64 payload

MAGIC = b"TOK1"
VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, np.ndarray | Tensor], meta: dict | None = None) -> None:
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = tensors[name]
        arr = np.array(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, meta_len = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    meta = json.loads(raw[off : off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out, meta
