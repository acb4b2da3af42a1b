import itertools
import math

import numpy as np
import pytest
import torch
from gradsuite import OPS, TOL, run_suite

from spkadapt import oracles
from spkadapt._validation import ValidationError
from spkadapt.neural.attention import MultiHeadAttention, causal_mask, sinusoidal_pe
from spkadapt.neural.checkpoint import load_checkpoint, save_checkpoint
from spkadapt.neural.layers import (
    NonFiniteError,
    build_layer,
    init_parameters,
    layer_forward_backward,
)
from spkadapt.neural.losses import ctc_loss, kl_smoothed_loss
from spkadapt.neural.optim import Optimizer, OptimizerConfig, init_state, optimizer_step
from spkadapt.neural.schedule import ScheduleConfig, lr_at
from spkadapt.training import TrainConfig, train_loop


def _logprobs(rng, T, V):
    x = rng.normal(size=(T, V)) * 2.0
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


# layers


def test_linear_identity():
    lin = build_layer("linear", 4, 4).double()
    with torch.no_grad():
        lin.weight.copy_(torch.eye(4, dtype=torch.float64))
        lin.bias.zero_()
    x = torch.randn(3, 4, dtype=torch.float64)
    y, gx = layer_forward_backward(lin, x)
    assert torch.equal(y, x)
    assert torch.equal(gx, torch.ones_like(x))


def test_layernorm_constant_row_is_zero():
    ln = build_layer("layernorm", 5)
    y, _ = layer_forward_backward(ln, torch.full((2, 5), 3.7))
    assert torch.all(y == 0)


def test_linear_width_mismatch():
    with pytest.raises(ValidationError):
        build_layer("linear", 3, 2, extra=2)(torch.zeros(1, 3))


def test_grad_output_shape_mismatch():
    with pytest.raises(ValidationError):
        layer_forward_backward(build_layer("gelu"), torch.zeros(2, 3), torch.zeros(3, 2))


def test_unknown_layer_kind():
    with pytest.raises(ValidationError):
        build_layer("maxout", 3)


@pytest.mark.parametrize("op", sorted(OPS))
def test_finite_difference_gradients(op):
    err = run_suite(trials=50, seed=7, ops=[op])[op]
    assert err < TOL


def test_dropout_modes():
    d = build_layer("dropout", p=0.5)
    x = torch.ones(1000)
    d.eval()
    assert torch.equal(d(x), x)
    d.train()
    y = d(x)
    assert 300 < int((y == 0).sum()) < 700
    assert set(torch.unique(y).tolist()) <= {0.0, 2.0}


def test_batchnorm_running_stats_and_eval():
    bn = build_layer("batchnorm", 3).double()
    x = torch.randn(50, 3, dtype=torch.float64) * 2 + 5
    bn.train()
    bn(x)
    # running = 0.9 * running + 0.1 * batch
    assert torch.allclose(bn.bn.running_mean, 0.1 * x.mean(0))
    bn.eval()
    y1, y2 = bn(x[:1]), bn(x[:1])
    assert torch.equal(y1, y2)
    expected = (x[:1] - bn.bn.running_mean) / torch.sqrt(bn.bn.running_var + 1e-5)
    assert torch.allclose(y1, expected)


def test_batchnorm_ignores_padded_frames():
    bn = build_layer("batchnorm", 2).double().train()
    x = torch.randn(2, 4, 2, dtype=torch.float64)
    mask = torch.tensor([[True] * 4, [True, True, False, False]])
    a = bn(x, mask)
    x2 = x.clone()
    x2[1, 2:] = 1e6
    b = build_layer("batchnorm", 2).double().train()(x2, mask)
    assert torch.allclose(a, b)
    assert torch.all(a[1, 2:] == 0)


def test_softmax_rows_sum_to_one(rng):
    x = torch.as_tensor(rng.normal(size=(20, 7)) * 10)
    s = build_layer("softmax")(x)
    assert torch.max(torch.abs(s.sum(-1) - 1)) < 1e-12


def test_logsoftmax_translation_invariant(rng):
    x = torch.as_tensor(rng.normal(size=(6, 5)))
    ls = build_layer("logsoftmax")
    assert torch.allclose(ls(x), ls(x + 123.25), atol=1e-12)


# attention and positions


def _attention(d=4, heads=2, seed=0):
    return init_parameters(MultiHeadAttention(d, heads), seed).double()


def test_attention_singleton_returns_projected_value():
    att = _attention()
    q, k, v = (torch.randn(1, 4, dtype=torch.float64) for _ in range(3))
    out = att(q, k, v)
    assert torch.allclose(att.last_weights, torch.ones(1, 2, 1, 1, dtype=torch.float64))
    assert torch.allclose(out, att.out_proj(att.v_proj(v)))


def test_attention_causal_first_position():
    att = _attention()
    x = torch.randn(5, 4, dtype=torch.float64)
    att(x, x, x, causal_mask(5))
    w = att.last_weights[0]
    assert torch.all(w[:, 0, 0] == 1) and torch.all(w[:, 0, 1:] == 0)
    assert torch.all(w.masked_select(causal_mask(5)) == 0)


def test_attention_key_permutation_equivariance(rng):
    att = _attention(6, 3, seed=2)
    q = torch.as_tensor(rng.normal(size=(3, 6)))
    kv = torch.as_tensor(rng.normal(size=(5, 6)))
    perm = torch.as_tensor(rng.permutation(5))
    assert torch.allclose(att(q, kv, kv), att(q, kv[perm], kv[perm]), atol=1e-12)


def test_attention_indivisible_heads():
    with pytest.raises(ValidationError):
        MultiHeadAttention(5, 2)


def test_sinusoidal_pe_examples():
    pe = sinusoidal_pe(50, 8)
    assert np.array_equal(pe[0], np.tile([0.0, 1.0], 4))
    assert np.allclose(pe[:, 0], np.sin(np.arange(50)))
    assert np.all(np.abs(pe) <= 1)


def test_sinusoidal_pe_odd_dim():
    with pytest.raises(ValidationError):
        sinusoidal_pe(3, 5)


# losses


def test_ctc_single_frame(rng):
    lp = _logprobs(rng, 1, 4)
    assert float(ctc_loss(torch.as_tensor(lp), [2])) == pytest.approx(-lp[0, 2], abs=1e-12)


def test_ctc_fixture_t4_v3(rng):
    lp = _logprobs(rng, 4, 3)
    got = float(ctc_loss(torch.as_tensor(lp), [1, 2]))
    assert abs(got - oracles.brute_force_ctc_nll(lp, [1, 2])) < 1e-10


def test_ctc_exhaustive_against_enumeration():
    rng = np.random.default_rng(11)
    worst = 0.0
    for T in range(1, 7):
        for V in range(2, 5):
            lp = _logprobs(rng, T, V)
            for L in range(1, 4):
                for target in itertools.product(range(1, V), repeat=L):
                    want = oracles.brute_force_ctc_nll(lp, list(target))
                    if not math.isfinite(want):
                        continue
                    got = float(ctc_loss(torch.as_tensor(lp), list(target)))
                    worst = max(worst, abs(got - want))
    assert worst < 1e-10


def test_ctc_infeasible_target_is_inf_with_zero_grad(rng):
    x = torch.as_tensor(_logprobs(rng, 2, 3)).requires_grad_()
    with pytest.warns(RuntimeWarning):
        loss = ctc_loss(x, [1, 1])
    assert math.isinf(loss.item())
    loss.backward()
    assert torch.all(x.grad == 0)


def test_ctc_rejects_blank_in_target(rng):
    with pytest.raises(ValidationError):
        ctc_loss(torch.as_tensor(_logprobs(rng, 3, 3)), [0, 1])


def test_kl_epsilon_zero_is_nll(rng):
    lp = torch.log_softmax(torch.as_tensor(rng.normal(size=(6, 5))), -1)
    t = rng.integers(0, 5, size=6)
    nll = -lp[torch.arange(6), torch.as_tensor(t)].mean()
    assert torch.allclose(kl_smoothed_loss(lp, t, 0.0), nll, atol=1e-14)


def test_kl_uniform_rows(rng):
    V = 7
    lp = torch.full((4, V), -math.log(V), dtype=torch.float64)
    for t in ([0, 1, 2, 3], [6, 6, 6, 6]):
        # cross entropy is log V, KL subtracts the target entropy
        ce = float(kl_smoothed_loss(lp, t, 0.0))
        assert ce == pytest.approx(math.log(V), abs=1e-12)
    eps = 0.1
    q = np.array([1 - eps] + [eps / (V - 1)] * (V - 1))
    h = -(q * np.log(q)).sum()
    assert float(kl_smoothed_loss(lp, [2, 5, 1, 0], eps)) == pytest.approx(math.log(V) - h, abs=1e-12)


def test_kl_ignore_index(rng):
    lp = torch.log_softmax(torch.as_tensor(rng.normal(size=(4, 3))), -1)
    a = kl_smoothed_loss(lp, [0, 2, -1, -1], 0.1, ignore_index=-1)
    b = kl_smoothed_loss(lp[:2], [0, 2], 0.1)
    assert torch.allclose(a, b)


def test_kl_bad_epsilon():
    with pytest.raises(ValidationError):
        kl_smoothed_loss(torch.zeros(1, 2), [0], 1.0)


# optimizers and schedules


def test_adam_zero_gradient_leaves_params():
    p = torch.randn(5, dtype=torch.float64)
    before = p.clone()
    cfg = OptimizerConfig()
    state = init_state([p], cfg)
    optimizer_step(state, [p], [torch.zeros(5, dtype=torch.float64)], cfg)
    assert torch.equal(p, before)


def test_adam_first_step_is_signed_lr():
    cfg = OptimizerConfig(lr=1e-3, epsilon=1e-12)
    for g in (3.0, -0.02):
        p = torch.zeros(1, dtype=torch.float64)
        optimizer_step(init_state([p], cfg), [p], [torch.tensor([g], dtype=torch.float64)], cfg)
        assert float(p) == pytest.approx(-1e-3 * math.copysign(1, g), rel=1e-8)


def test_adadelta_first_step():
    cfg = OptimizerConfig.adadelta(lr=1.0, rho=0.95, epsilon=1e-6)
    p = torch.zeros(1, dtype=torch.float64)
    optimizer_step(init_state([p], cfg), [p], [torch.ones(1, dtype=torch.float64)], cfg)
    assert float(p) == pytest.approx(-math.sqrt(1e-6 / (0.05 + 1e-6)), rel=1e-12)
    assert float(p) == pytest.approx(-4.47e-3, abs=5e-6)


def test_optimizer_rejects_nonfinite_gradient():
    p = torch.zeros(2, dtype=torch.float64)
    cfg = OptimizerConfig()
    state = init_state([p], cfg)
    with pytest.raises(NonFiniteError):
        optimizer_step(state, [p], [torch.tensor([1.0, float("nan")], dtype=torch.float64)], cfg)
    assert state["step"] == 0 and torch.all(p == 0)


@pytest.mark.parametrize("kw", [dict(beta1=1.0), dict(lr=0.0), dict(epsilon=0.0), dict(kind="sgd")])
def test_optimizer_config_validation(kw):
    with pytest.raises(ValidationError):
        OptimizerConfig(**kw)


def test_noam_schedule():
    s = ScheduleConfig("noam", warmup_steps=25000, peak_lr=1e-3)
    assert lr_at(s, 25000) == 1e-3
    assert lr_at(s, 100000) == pytest.approx(5e-4, rel=1e-15)
    assert lr_at(s, 1) == pytest.approx(1e-3 / 25000)
    assert lr_at(s, 12500) < lr_at(s, 25000) > lr_at(s, 30000)


def test_validation_anneal_fixture():
    s = ScheduleConfig("validation_anneal", peak_lr=1.0, anneal_factor=0.8, improvement_threshold=0.1)
    assert lr_at(s, 5, [10.0]) == 1.0
    assert lr_at(s, 5, [10.0, 10.0]) == 0.8
    assert lr_at(s, 5, [10.0, 5.0]) == 1.0
    assert lr_at(s, 5, [10.0, 10.0, 9.99]) == pytest.approx(0.64)


@pytest.mark.parametrize("kw", [dict(warmup_steps=0), dict(anneal_factor=1.0), dict(kind="cosine")])
def test_schedule_config_validation(kw):
    with pytest.raises(ValidationError):
        ScheduleConfig(**kw)


def test_lr_at_rejects_step_zero():
    with pytest.raises(ValidationError):
        lr_at(ScheduleConfig(), 0)


# checkpoint and training loop


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a.weight": torch.randn(3, 4), "a.bias": torch.randn(4), "s": torch.tensor(2.5)}
    opt = {("a.weight", "m"): torch.randn(3, 4)}
    save_checkpoint(tmp_path / "sub" / "x.ckpt", tensors, opt, meta={"k": [1, 2]})
    t2, o2, meta = load_checkpoint(tmp_path / "sub" / "x.ckpt")
    assert list(t2) == list(tensors)
    for n in tensors:
        assert torch.equal(t2[n], tensors[n])
    assert torch.equal(o2[("a.weight", "m")], opt[("a.weight", "m")])
    assert meta == {"k": [1, 2]}


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(ValidationError):
        load_checkpoint(p)


def _regression_setup(seed=0):
    rng = np.random.default_rng(seed)
    items = [(rng.normal(size=3), rng.normal()) for _ in range(8)]
    model = init_parameters(torch.nn.Linear(3, 1), 5).double()

    def loss_fn(m, batch):
        x = torch.as_tensor(np.stack([b[0] for b in batch]))
        y = torch.as_tensor([b[1] for b in batch])
        return ((m(x)[:, 0] - y) ** 2).sum()

    return model, items, loss_fn


def _train(batch_size, accum, seed=0):
    model, items, loss_fn = _regression_setup()
    opt = Optimizer([(list(model.parameters()), OptimizerConfig(lr=0.05))])
    traj = []
    cfg = TrainConfig(epochs=3, batch_size=batch_size, accum_factor=accum, seed=seed)
    train_loop(model, items, loss_fn, opt, ScheduleConfig("constant"), cfg,
               on_step=lambda s, m: traj.append(torch.cat([p.detach().flatten() for p in m.parameters()])))
    return torch.stack(traj)


def test_gradient_accumulation_matches_full_batch():
    full = _train(4, 1)
    accum = _train(2, 2)
    assert full.shape == accum.shape
    assert torch.allclose(full, accum, rtol=0, atol=1e-12)


def test_training_is_bit_deterministic():
    assert torch.equal(_train(3, 1, seed=4), _train(3, 1, seed=4))


def test_training_aborts_on_nonfinite_loss():
    model, items, _ = _regression_setup()
    opt = Optimizer([(list(model.parameters()), OptimizerConfig())])
    with pytest.raises(NonFiniteError):
        train_loop(model, items, lambda m, b: torch.tensor(float("inf")), opt, ScheduleConfig("constant"),
                   TrainConfig())
