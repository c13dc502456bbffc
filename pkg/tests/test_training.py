import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_config
from timeomni.dataset import TOY_TASKS, generate_toy_suite
from timeomni.model import TimeOmni
from timeomni.numerics import Tensor, grad_check, linear, mul, sum_all
from timeomni.training import (
    Adam,
    BatchSchedule,
    DoraAdapter,
    EmptyMask,
    LengthMismatch,
    TrainConfig,
    adaptable_slots,
    cross_entropy_loss,
    dora_wrap,
    joint_step,
    lr_at,
    mse_loss,
    split_pools,
    train,
    trainable_count,
    warmup_steps,
)

# --- losses -----------------------------------------------------------------


def test_confident_logits_have_zero_loss():
    logits = np.full((3, 5), -1e4)
    targets = [1, 4, 0]
    logits[np.arange(3), targets] = 1e4
    assert float(cross_entropy_loss(Tensor(logits), targets).data) == pytest.approx(0.0, abs=1e-12)


def test_uniform_logits_give_log_vocab():
    loss = cross_entropy_loss(Tensor(np.zeros((4, 260))), [0, 5, 100, 259])
    assert float(loss.data) == pytest.approx(math.log(260), abs=1e-12)
    assert float(loss.data) == pytest.approx(5.561, abs=1e-3)


def test_cross_entropy_mask():
    logits = np.random.default_rng(0).normal(size=(4, 6))
    full = float(cross_entropy_loss(Tensor(logits[1:3]), [2, 3]).data)
    masked = float(cross_entropy_loss(Tensor(logits), [0, 2, 3, 1], [False, True, True, False]).data)
    assert masked == pytest.approx(full, abs=1e-15)
    with pytest.raises(EmptyMask):
        cross_entropy_loss(Tensor(logits), [0, 0, 0, 0], [False] * 4)


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(5, 9)), requires_grad=True)
    t = rng.integers(0, 9, size=5)
    assert grad_check(lambda: cross_entropy_loss(x, t), [x]) < 1e-5


def test_mse_values():
    t = np.array([1.0, -2.0, 3.0])
    assert float(mse_loss(Tensor(t), t).data) == 0.0
    assert float(mse_loss(Tensor(t + 1), t).data) == 1.0
    with pytest.raises(LengthMismatch):
        mse_loss(Tensor(t), t[:2])


def test_mse_gradient_formula():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=7), requires_grad=True)
    t = rng.normal(size=7)
    mse_loss(p, t).backward()
    assert np.allclose(p.grad, 2 * (p.data - t) / 7, atol=1e-15)
    assert grad_check(lambda: mse_loss(p, t), [p]) < 1e-6


# --- schedule ---------------------------------------------------------------

CFG = TrainConfig(lr=1e-3)


def test_schedule_landmarks():
    total = 200
    w = warmup_steps(total, CFG)
    assert w == 10
    assert lr_at(0, total, CFG) == 0.0
    assert lr_at(w, total, CFG) == CFG.lr
    assert lr_at(total, total, CFG) == pytest.approx(0.0, abs=1e-18)
    assert lr_at(w + (total - w) // 2, total, CFG) == pytest.approx(CFG.lr / 2, rel=1e-12)


@given(st.integers(2, 100_000))
def test_schedule_is_bounded_and_continuous_at_warmup(total):
    w = warmup_steps(total, CFG)
    vals = [lr_at(s, total, CFG) for s in (w - 1, w, min(w + 1, total))]
    assert all(0.0 <= v <= CFG.lr for v in vals)
    assert vals[1] == CFG.lr
    # both one-step neighbours approach lr as the step shrinks relative to the ramp
    assert abs(vals[0] - vals[1]) <= CFG.lr / w + 1e-18
    with pytest.raises(ValueError):
        lr_at(total + 1, total, CFG)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(adapter="lora")
    with pytest.raises(ValueError):
        TrainConfig(batch_understand=0)


# --- DoRA -------------------------------------------------------------------


def test_adapter_starts_at_base(rng):
    base = Tensor(rng.normal(size=(6, 5)))
    ad = DoraAdapter(base, 2, 4.0, rng)
    assert np.array_equal(ad.effective().data, base.data)


@pytest.mark.parametrize("seed", range(3))
def test_adapter_gradient(seed):
    rng = np.random.default_rng(seed)
    ad = DoraAdapter(Tensor(rng.normal(size=(4, 5))), 2, 4.0, rng)
    ad.B.data = rng.normal(size=ad.B.shape) * 0.3
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    r = rng.normal(size=(3, 4))
    err = grad_check(lambda: sum_all(mul(ad(x), r)), [x, ad.A, ad.B, ad.magnitude])
    assert err < 1e-4


def _probe_inputs(n=20, seed=0):
    suite = generate_toy_suite(seed, {k: 3 for k in TOY_TASKS})
    insts = list(suite.instances)
    return [insts[i % len(insts)] for i in range(n)]


def _outputs(model, inst):
    if inst.task_type.is_understanding:
        return model.logits(model._understanding_input(inst)).data
    return model.generation_loss(inst).data


def test_wrapping_is_an_identity():
    cfg = small_config()
    plain = TimeOmni.init(cfg, seed=5)
    wrapped = dora_wrap(TimeOmni.init(cfg, seed=5), r=8, alpha=32)
    for inst in _probe_inputs():
        assert np.max(np.abs(_outputs(plain, inst) - _outputs(wrapped, inst))) <= 1e-12


def test_dora_parameter_count():
    cfg = small_config()
    model = TimeOmni.init(cfg, seed=0)
    shapes = [getattr(o, a).shape for o, a, _ in adaptable_slots(model)]
    before_encoder_heads = sum(
        t.size for k, t in model.named_tensors().items() if k.startswith(("encoder.", "heads."))
    )
    dora_wrap(model, r=4, alpha=8)
    expected = sum(4 * i + o * 4 + o for o, i in shapes)
    assert trainable_count(model) == expected + before_encoder_heads
    frozen = [k for k, t in model.named_tensors().items() if k.startswith("backbone.") and t.requires_grad]
    assert all(k.endswith((".A", ".B", ".magnitude")) for k in frozen)


# --- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam()
    p.grad = np.zeros(2)
    opt.step({"p": p}, 0.1)
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_first_step_is_signed_lr():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -3.0])
    Adam().step({"p": p}, 0.1)
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-7)


# --- joint loop -------------------------------------------------------------


def _toy(sizes=3):
    return generate_toy_suite(7, {k: sizes for k in TOY_TASKS})


def test_zero_series_weight_matches_understanding_only():
    ds = _toy()
    pool_u, pool_g = split_pools(ds)
    cfg_a = TrainConfig(lr=1e-3, lambda_series=0.0)
    m1, m2 = TimeOmni.init(small_config(), 1), TimeOmni.init(small_config(), 1)
    joint_step(m1, pool_u[:6], pool_g[:1], Adam(), 3, 100, cfg_a)
    joint_step(m2, pool_u[:6], [], Adam(), 3, 100, cfg_a)
    s1, s2 = m1.state(), m2.state()
    assert all(np.array_equal(s1[k], s2[k]) for k in s1)


def test_joint_step_is_reproducible():
    ds = _toy()
    pool_u, pool_g = split_pools(ds)
    cfg = TrainConfig(lr=1e-3)
    runs = []
    for _ in range(2):
        m = TimeOmni.init(small_config(), 2)
        losses = joint_step(m, pool_u[:6], pool_g[:1], Adam(), 0, 10, cfg)
        runs.append((losses, m.state()))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_batch_schedule_covers_each_pool_per_cycle():
    cfg = TrainConfig(batch_understand=6, batch_generate=1, seed=4)
    s = BatchSchedule(17, 9, cfg)
    assert s.steps_per_epoch == 9
    us = [i for step in range(17 * 6 // 6 // 1) for i in s.batch(step)[0]][:17]
    assert sorted(us) == list(range(17))
    gs = [s.batch(step)[1][0] for step in range(9)]
    assert sorted(gs) == list(range(9))


def _fixed_loss(model, insts):
    return sum(float(model.loss(i).data) for i in insts) / len(insts)


def test_fifty_steps_reduce_the_loss():
    ds = generate_toy_suite(7, {"classification": 12, "forecasting": 50})
    model = TimeOmni.init(small_config(), seed=0)
    probe = list(ds.instances[:6]) + list(ds.instances[12:18])
    before = _fixed_loss(model, probe)
    cfg = TrainConfig(lr=3e-3, epochs=1, seed=0)
    hist = train(ds, cfg, model).history
    assert len(hist) == 50
    assert all(math.isfinite(lu) and math.isfinite(lg) for _, _, lu, lg in hist)
    after = _fixed_loss(model, probe)
    assert after < 0.9 * before


def test_training_is_deterministic():
    ds = _toy(2)
    cfg = TrainConfig(lr=1e-3, epochs=1, seed=3)
    a = train(ds, cfg, TimeOmni.init(small_config(), 0)).history
    b = train(ds, cfg, TimeOmni.init(small_config(), 0)).history
    assert a == b


def test_resume_reproduces_the_rest_of_the_run():
    ds = _toy(2)
    cfg = TrainConfig(lr=1e-3, epochs=2, seed=1)
    full = train(ds, cfg, TimeOmni.init(small_config(), 0)).history

    model = TimeOmni.init(small_config(), 0)
    first = train(ds, cfg, model, stop_step=5)
    state, opt_state, t = model.state(), first.optimizer.state(), first.optimizer.t
    resumed_model = TimeOmni.init(small_config(), 99)
    resumed_model.load_state(state)
    opt = Adam()
    opt.load(opt_state, t)
    rest = train(ds, cfg, resumed_model, opt, start_step=first.next_step).history
    combined = first.history + rest
    assert [h[0] for h in combined] == [h[0] for h in full]
    for (_, _, lu1, lg1), (_, _, lu2, lg2) in zip(combined, full):
        assert abs(lu1 - lu2) <= 1e-9 and abs(lg1 - lg2) <= 1e-9


def test_missing_pool_needs_zero_weight():
    ds = generate_toy_suite(7, {"classification": 4})
    with pytest.raises(ValueError):
        train(ds, TrainConfig(epochs=1), TimeOmni.init(small_config(), 0))
    hist = train(ds, TrainConfig(epochs=1, lambda_series=0.0), TimeOmni.init(small_config(), 0)).history
    assert len(hist) == 1


def test_linear_layer_through_adapter_matches_plain_linear(rng):
    base = Tensor(rng.normal(size=(3, 4)))
    x = Tensor(rng.normal(size=(2, 4)))
    ad = DoraAdapter(base, 2, 2.0, rng)
    assert np.array_equal(ad(x).data, linear(x, base).data)
