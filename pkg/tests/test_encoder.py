import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from timeomni.backbone import VOCAB_SIZE
from timeomni.dataset import TimeSeries
from timeomni.encoder import (
    ExpertFamily,
    PatchExpert,
    ReprogrammingParams,
    SignalTooLong,
    embed_patches,
    encode,
    patchify,
    reprogram,
    route,
    route_patch_size,
)
from timeomni.numerics import Tensor, grad_check, mul, sum_all, square

MAX_T = 200 * 2**16


def family(d_enc=4, max_exp=16, seed=0):
    return ExpertFamily.init(d_enc, max_exp, np.random.default_rng(seed))


# --- router -----------------------------------------------------------------


@pytest.mark.parametrize(
    "T, patch, t_enc",
    [(64000, 512, 125), (150, 1, 150), (10_000_000, 65536, 153), (18000, 128, 141), (200, 1, 200)],
)
def test_router_examples(T, patch, t_enc):
    p = route_patch_size(T)
    assert p == patch
    assert math.ceil(T / p) == t_enc


def test_router_rejects_too_long():
    with pytest.raises(SignalTooLong):
        route_patch_size(MAX_T + 1)
    assert route_patch_size(MAX_T) == 2**16


@given(st.integers(200, MAX_T))
def test_router_token_bound(T):
    assert 100 <= math.ceil(T / route_patch_size(T)) <= 200


@given(st.integers(1, MAX_T), st.integers(1, MAX_T))
def test_router_monotone(a, b):
    a, b = sorted((a, b))
    assert route_patch_size(a) <= route_patch_size(b)


def test_router_picks_family_member():
    fam = family(max_exp=6)
    assert route(1000, fam).patch_size == 8
    with pytest.raises(SignalTooLong):
        route(200 * 64 + 1, fam)


def test_patch_expert_validation():
    with pytest.raises(ValueError):
        PatchExpert(3, Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


# --- patchify / embed -------------------------------------------------------


def test_patchify_exact():
    out = patchify(np.arange(6.0), 3)
    assert out.tolist() == [[0, 1, 2], [3, 4, 5]]


def test_patchify_pads():
    out = patchify(np.arange(7.0), 3)
    assert out.shape == (3, 3)
    assert out[-1].tolist() == [6.0, 0.0, 0.0]


@given(st.integers(1, 300), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_patchify_round_trip(T, p, seed):
    x = np.random.default_rng(seed).normal(size=T)
    assert np.array_equal(patchify(x, p).reshape(-1)[:T], x)


def test_embed_zero_signal():
    rng = np.random.default_rng(0)
    e = PatchExpert(4, Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(3)))
    assert np.array_equal(embed_patches(np.zeros(10), e).data, np.zeros((3, 3)))


def test_embed_patch_one_scales():
    e = PatchExpert(1, Tensor([[2.5]]), Tensor([0.0]))
    x = np.array([1.0, -2.0, 3.0])
    assert embed_patches(x, e).data[:, 0].tolist() == (2.5 * x).tolist()


@given(st.integers(1, 500), st.sampled_from([1, 2, 4, 8, 16]), st.integers(0, 2**32 - 1))
def test_embed_matches_reference(T, p, seed):
    rng = np.random.default_rng(seed)
    w, b = rng.normal(size=(5, p)), rng.normal(size=5)
    x = rng.normal(size=T)
    out = embed_patches(x, PatchExpert(p, Tensor(w), Tensor(b))).data
    windows = patchify(x, p)
    ref = np.stack([w @ windows[i] + b for i in range(windows.shape[0])])
    assert np.max(np.abs(out - ref)) < 1e-12


# --- reprogramming ----------------------------------------------------------


def test_single_prototype_forces_identical_rows():
    rng = np.random.default_rng(0)
    params = ReprogrammingParams.init(VOCAB_SIZE, 4, 8, 1, rng)
    vocab = Tensor(rng.normal(size=(VOCAB_SIZE, 8)))
    out = reprogram(Tensor(rng.normal(size=(7, 4))), vocab, params, heads=2).data
    assert np.allclose(out, out[0], atol=1e-12)


@given(st.integers(100, 200), st.integers(0, 2**32 - 1))
def test_reprogram_shape_and_simplex(L, seed):
    rng = np.random.default_rng(seed)
    params = ReprogrammingParams.init(VOCAB_SIZE, 4, 8, 12, rng)
    vocab = Tensor(rng.normal(size=(VOCAB_SIZE, 8)))
    keep = []
    out = reprogram(Tensor(rng.normal(size=(L, 4))), vocab, params, heads=2, keep=keep)
    assert out.shape == (L, 8)
    w = keep[0]
    assert (w >= 0).all()
    assert np.abs(w.sum(axis=-1) - 1.0).max() < 1e-9


# --- encode -----------------------------------------------------------------


def _encoder_parts(d_enc=4, d_llm=8, prototypes=6, seed=0, max_exp=16):
    rng = np.random.default_rng(seed)
    fam = ExpertFamily.init(d_enc, max_exp, rng)
    params = ReprogrammingParams.init(VOCAB_SIZE, d_enc, d_llm, prototypes, rng)
    vocab = Tensor(rng.normal(size=(VOCAB_SIZE, d_llm)), requires_grad=True)
    return fam, params, vocab


def test_univariate_1000_in_range():
    fam, params, vocab = _encoder_parts()
    out = encode(TimeSeries(np.random.default_rng(1).normal(size=1000)), fam, vocab, params, 2)
    assert 100 <= out.t_enc <= 200
    assert out.patch_size_used == 8


def test_multichannel_routes_on_flattened_length():
    fam, params, vocab = _encoder_parts()
    x = TimeSeries(np.random.default_rng(2).normal(size=(3, 6000)))
    out = encode(x, fam, vocab, params, 2)
    assert out.patch_size_used == 128 and out.t_enc == 141


def test_encode_is_deterministic():
    fam, params, vocab = _encoder_parts()
    x = TimeSeries(np.random.default_rng(3).normal(size=777))
    a = encode(x, fam, vocab, params, 2).x_enc.data
    b = encode(x, fam, vocab, params, 2).x_enc.data
    assert np.array_equal(a, b)


def test_short_signal_is_degenerate_but_accepted():
    fam, params, vocab = _encoder_parts()
    out = encode(TimeSeries(np.arange(50.0)), fam, vocab, params, 2)
    assert out.t_enc == 50 and out.patch_size_used == 1


@pytest.mark.parametrize("T", [50, 300, 5000])
def test_encoder_gradient(T):
    fam, params, vocab = _encoder_parts(max_exp=6)
    x = TimeSeries(np.random.default_rng(T).normal(size=T))
    expert = route(T, fam)
    tensors = [expert.conv_weights, expert.conv_bias, vocab, *params.tensors().values()]

    def f():
        return sum_all(square(encode(x, fam, vocab, params, 2).x_enc))

    assert grad_check(f, tensors, max_entries=6) < 1e-4


def test_other_experts_get_no_gradient():
    fam, params, vocab = _encoder_parts(max_exp=4)
    x = TimeSeries(np.random.default_rng(0).normal(size=600))
    sum_all(mul(encode(x, fam, vocab, params, 2).x_enc, 1.0)).backward()
    used = route(600, fam)
    for e in fam.experts:
        if e is not used:
            assert e.conv_weights.grad is None
    assert used.conv_weights.grad is not None
