"""Randomised finite-difference gradient checks shared by unit and acceptance tests."""

import numpy as np
import torch

from spkadapt.neural.attention import MultiHeadAttention, causal_mask
from spkadapt.neural.gradcheck import check_gradient, check_parameter_gradients
from spkadapt.neural.layers import build_layer, init_parameters
from spkadapt.neural.losses import ctc_loss, kl_smoothed_loss

TOL = 1e-4


def _weights(rng, shape):
    return torch.as_tensor(rng.normal(size=shape), dtype=torch.float64)


def _layer_case(kind, rng):
    """Return ``(module, input)`` for one random trial of a layer kind."""
    B, T = int(rng.integers(1, 3)), int(rng.integers(2, 6))
    d_in, d_out = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    if kind == "linear":
        layer, shape = build_layer("linear", d_in, d_out, extra=int(rng.integers(0, 3))), None
        shape = (B, T, d_in + layer.extra_features)
    elif kind == "conv1d":
        k = int(rng.integers(1, 4))
        T = max(T, k)
        layer = build_layer("conv1d", d_in, d_out, kernel=k, stride=int(rng.integers(1, 3)))
        shape = (B, T, d_in)
    elif kind == "embedding":
        V = int(rng.integers(3, 7))
        layer = build_layer("embedding", V, d_out)
        x = torch.as_tensor(rng.integers(0, V, size=(B, T)))
        return init_parameters(layer, int(rng.integers(1 << 30))).double(), x
    else:
        layer = build_layer(kind, d_in)
        shape = (B, T, d_in) if kind != "batchnorm" else (B, T + 2, d_in)
    layer = init_parameters(layer, int(rng.integers(1 << 30))).double()
    if kind == "layernorm" or kind == "batchnorm":
        with torch.no_grad():
            for p in layer.parameters():
                p.add_(torch.as_tensor(rng.normal(size=p.shape) * 0.3))
    return layer, torch.as_tensor(rng.normal(size=shape), dtype=torch.float64)


def layer_trial(kind, rng):
    """Worst relative error over input and parameter gradients for one trial."""
    layer, x = _layer_case(kind, rng)
    layer.train()
    seed = int(rng.integers(1 << 30))

    def forward(inp):
        torch.manual_seed(seed)  # fixes the dropout mask across evaluations
        return layer(inp)

    w = _weights(rng, forward(x).shape)
    worst = 0.0
    if any(True for _ in layer.parameters()):
        worst = check_parameter_gradients(lambda: (forward(x) * w).sum(), layer)
    if x.is_floating_point():
        worst = max(worst, check_gradient(lambda t: (forward(t) * w).sum(), x))
    return worst


def attention_trial(rng):
    heads = int(rng.integers(1, 3))
    d = heads * int(rng.integers(1, 4))
    Tq, Tk = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    att = init_parameters(MultiHeadAttention(d, heads), int(rng.integers(1 << 30))).double()
    q = torch.as_tensor(rng.normal(size=(Tq, d)))
    kv = torch.as_tensor(rng.normal(size=(Tk, d)))
    mask = causal_mask(Tq)[:, :Tk] if Tq == Tk and rng.random() < 0.5 else None
    w = _weights(rng, (Tq, d))
    worst = check_parameter_gradients(lambda: (att(q, kv, kv, mask) * w).sum(), att)
    worst = max(worst, check_gradient(lambda t: (att(t, kv, kv, mask) * w).sum(), q))
    return max(worst, check_gradient(lambda t: (att(q, t, t, mask) * w).sum(), kv))


def ctc_trial(rng):
    T, V = int(rng.integers(1, 6)), int(rng.integers(2, 5))
    L = int(rng.integers(1, 4))
    while True:
        target = [int(t) for t in rng.integers(1, V, size=L)]
        need = L + sum(a == b for a, b in zip(target, target[1:]))
        if need <= T:
            break
        L = max(1, L - 1)
    x = torch.as_tensor(rng.normal(size=(T, V)) * 2.0)
    return check_gradient(lambda t: ctc_loss(torch.log_softmax(t, -1), target), x)


def kl_trial(rng):
    N, V = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    eps = float(rng.choice([0.0, 0.1, 0.3]))
    targets = rng.integers(0, V, size=N)
    x = torch.as_tensor(rng.normal(size=(N, V)))
    return check_gradient(lambda t: kl_smoothed_loss(torch.log_softmax(t, -1), targets, eps), x)


OPS = {
    **{k: (lambda rng, k=k: layer_trial(k, rng)) for k in (
        "linear", "conv1d", "batchnorm", "layernorm", "dropout", "leakyrelu", "gelu",
        "softmax", "logsoftmax", "embedding")},
    "attention": attention_trial,
    "ctc": ctc_trial,
    "kl": kl_trial,
}


def run_suite(trials=50, seed=0, ops=None):
    """``{op: worst relative error}`` over ``trials`` random cases per op."""
    out = {}
    for name in ops or OPS:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        out[name] = max(OPS[name](rng) for _ in range(trials))
    return out
