"""Fast oracle and property checks runnable from an installed package (``spkadapt selftest``)."""

import math

import numpy as np
import torch

from . import oracles
from .decode import collapse, ctc_greedy, ctc_prefix_score, joint_beam_search, score_sequence
from .evaluation import load_table1, relative_improvement, wer
from .models import TransformerAsr, TransformerAsrConfig, TransformerLm, TransformerLmConfig
from .neural.gradcheck import check_gradient
from .neural.losses import ctc_loss
from .signal import AudioBuffer, measured_snr, mix_at_snr


def random_logprobs(rng, T, V):
    x = rng.normal(size=(T, V)) * 2.0
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def tiny_asr(vocab=5, speaker_dim=0, injection="frontend", seed=0, input_dim=6, d_model=8):
    cfg = TransformerAsrConfig(vocab=vocab, input_dim=input_dim, speaker_dim=speaker_dim, d_model=d_model,
                               n_enc=1, n_dec=1, n_heads=2, d_ff=16, dropout=0.0,
                               injection=injection if speaker_dim else "none")
    return TransformerAsr(cfg, seed=seed).double().eval()


def tiny_lm(vocab=5, seed=0):
    return TransformerLm(TransformerLmConfig(vocab, d_model=8, d_ff=16, n_blocks=1, n_heads=2, dropout=0.0),
                         seed=seed).double().eval()


def _check_ctc(rng):
    worst = 0.0
    for T, V, L in [(3, 3, 1), (4, 3, 2), (5, 4, 2), (5, 3, 3)]:
        lp = random_logprobs(rng, T, V)
        target = list(rng.integers(1, V, size=L))
        want = oracles.brute_force_ctc_nll(lp, target)
        got = float(ctc_loss(torch.as_tensor(lp), target))
        if math.isfinite(want):
            worst = max(worst, abs(got - want))
    return worst < 1e-10, f"ctc loss vs enumeration, max err {worst:.1e}"


def _check_prefix(rng):
    worst = 0.0
    for _ in range(5):
        lp = random_logprobs(rng, 4, 4)
        prefix = list(rng.integers(1, 3, size=int(rng.integers(0, 3))))
        for nxt in (1, 2, 3):
            want = oracles.brute_force_prefix_logprob(lp, prefix, nxt, eos=3)
            got = ctc_prefix_score(lp, prefix, nxt, eos=3)
            if math.isfinite(want):
                worst = max(worst, abs(got - want))
    return worst < 1e-10, f"ctc prefix score vs enumeration, max err {worst:.1e}"


def _check_greedy(rng):
    ok = collapse([1, 0, 1], 0) == [1, 1]
    for _ in range(200):
        path = list(rng.integers(0, 4, size=int(rng.integers(1, 12))))
        ok &= collapse(path, 0) == oracles.groupby_collapse(path, 0)
    lp = np.log(np.eye(3)[[1, 0, 1]] * 0.9 + 0.1 / 3)
    ok &= ctc_greedy(lp, 0) == [1, 1]
    return ok, "ctc greedy collapse-then-remove rule"


def _check_snr(rng):
    worst = 0.0
    for snr in (0.0, 9.0, 18.0):
        s = AudioBuffer(rng.normal(size=4000), 16000)
        n = AudioBuffer(rng.normal(size=3000) * 0.3, 16000)
        worst = max(worst, abs(measured_snr(s, mix_at_snr(s, n, snr, seed=1)) - snr))
    return worst < 1e-6, f"snr mixing exactness, max err {worst:.1e} dB"


def _check_table1(rng):
    n = bad = 0
    for rows in load_table1().values():
        for r in rows:
            for v in ("ecapa", "xvector"):
                n += 1
                got = relative_improvement(float(r["baseline"]), float(r[f"{v}_wer"]))
                bad += abs(got - float(r[f"{v}_delta"])) > 0.1 + 1e-9
    return bad == 0, f"published relative improvements reproduced ({n - bad}/{n})"


def _check_wer(rng):
    ok = wer("a b c", "a x c") == 100.0 / 3 and wer("a b c d", "") == 100.0
    for _ in range(50):
        r = list(rng.integers(0, 3, size=int(rng.integers(1, 6))))
        h = list(rng.integers(0, 3, size=int(rng.integers(0, 6))))
        ok &= abs(wer(r, h) - 100.0 * oracles.edit_distance(r, h) / len(r)) < 1e-12
    return ok, "wer vs plain Levenshtein"


def _check_gradients(rng):
    torch.manual_seed(0)
    x = torch.as_tensor(random_logprobs(rng, 5, 4), dtype=torch.float64).requires_grad_()
    err1 = check_gradient(lambda t: ctc_loss(torch.log_softmax(t, -1), [1, 2]), x)
    lin = torch.nn.Linear(3, 2).double()
    y = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    err2 = check_gradient(lambda t: torch.tanh(lin(t)).sum(), y)
    return max(err1, err2) < 1e-4, f"finite-difference gradients, rel err {max(err1, err2):.1e}"


def _check_beam(rng):
    asr, lm = tiny_asr(seed=3), tiny_lm(seed=4)
    feats = rng.normal(size=(12, 6))
    max_len = 3
    best = joint_beam_search(asr, lm, feats, None, beam=27, lm_weight=0.5, ctc_decode_weight=0.3,
                             max_len=max_len)
    ref = oracles.exhaustive_search(
        lambda full: score_sequence(asr, lm, feats, None, full, 0.5, 0.3)[3], [3, 4], max_len, eos=2)
    return best.tokens == ref[1] and abs(best.total - ref[0]) < 1e-9, "beam search vs exhaustive enumeration"


CHECKS = [_check_ctc, _check_prefix, _check_greedy, _check_snr, _check_table1, _check_wer, _check_gradients,
          _check_beam]


def run_selftest(verbose=False, seed=0):
    """Run every check; return the number of failures."""
    rng = np.random.default_rng(seed)
    failures = 0
    for check in CHECKS:
        ok, label = check(rng)
        failures += not ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {label}")
    return failures

