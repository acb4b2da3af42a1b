"""Independent reference computations used by the test suite and ``selftest``.

Everything here is deliberately naive (enumeration, direct sums) and shares
no code path with the implementations it checks.
"""

import itertools
import math

import numpy as np


def groupby_collapse(path, blank):
    return [k for k, _ in itertools.groupby(path) if k != blank]


def remove_then_collapse(path, blank):
    """The wrong rule order; used to show the fixtures tell the two apart."""
    return [k for k, _ in itertools.groupby(p for p in path if p != blank)]


def all_paths(T, V):
    return itertools.product(range(V), repeat=T)


def _path_logprob(lp, path):
    return sum(lp[t, k] for t, k in enumerate(path))


def brute_force_ctc_nll(logprobs, target, blank=0):
    """-log of the summed probability of every length-T path collapsing to ``target``."""
    lp = np.asarray(logprobs, dtype=np.float64)
    T, V = lp.shape
    total = 0.0
    for path in all_paths(T, V):
        if groupby_collapse(path, blank) == list(target):
            total += math.exp(_path_logprob(lp, path))
    return math.inf if total == 0.0 else -math.log(total)


def brute_force_prefix_logprob(logprobs, prefix, next_token, blank=0, eos=None):
    """log P(collapsed output starts with prefix+[next]) or, for eos, equals prefix."""
    lp = np.asarray(logprobs, dtype=np.float64)
    T, V = lp.shape
    prefix = list(prefix)
    total = 0.0
    for path in all_paths(T, V):
        out = groupby_collapse(path, blank)
        if next_token == eos:
            hit = out == prefix
        else:
            want = prefix + [next_token]
            hit = out[: len(want)] == want
        if hit:
            total += math.exp(_path_logprob(lp, path))
    return -math.inf if total == 0.0 else math.log(total)


def exhaustive_search(score_fn, tokens, max_len, eos):
    """Best ``seq + [eos]`` over every ``seq`` of length < ``max_len``.

    ``score_fn(full_sequence) -> total``; ties go to the lexicographically
    smaller sequence.
    """
    best = None
    for n in range(max_len):
        for seq in itertools.product(tokens, repeat=n):
            full = (*seq, eos)
            s = score_fn(full)
            if best is None or (-s, full) < (-best[0], best[1]):
                best = (s, full)
    return best


def zero_crossing_frequency(x, rate_hz):
    """Frequency of a pure tone from its rising zero crossings (linear interpolation)."""
    x = np.asarray(x, dtype=np.float64)
    idx = np.nonzero((x[:-1] < 0) & (x[1:] >= 0))[0]
    frac = -x[idx] / (x[idx + 1] - x[idx])
    times = (idx + frac) / rate_hz
    if times.size < 2:
        return 0.0
    return (times.size - 1) / (times[-1] - times[0])


def autocorr_f0(x, rate_hz, fmin=70.0, fmax=400.0, frame_s=0.04, hop_s=0.02):
    """Median autocorrelation pitch over voiced (high-energy) frames."""
    x = np.asarray(x, dtype=np.float64)
    n = int(frame_s * rate_hz)
    hop = int(hop_s * rate_hz)
    lo, hi = int(rate_hz / fmax), int(rate_hz / fmin)
    energies, estimates = [], []
    for start in range(0, x.size - n, hop):
        frame = x[start:start + n] - x[start:start + n].mean()
        energies.append(float(frame @ frame))
        ac = np.correlate(frame, frame, mode="full")[n - 1:]
        if ac[0] <= 0:
            estimates.append(np.nan)
            continue
        lag = lo + int(np.argmax(ac[lo:hi + 1]))
        estimates.append(rate_hz / lag)
    energies = np.array(energies)
    voiced = energies > 0.25 * energies.max()
    return float(np.nanmedian(np.array(estimates)[voiced]))


def snr_db(clean, mixed):
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(mixed, dtype=np.float64) - clean
    return 10.0 * math.log10(float(np.sum(clean ** 2)) / float(np.sum(noise ** 2)))


def edit_distance(ref, hyp):
    """Plain Levenshtein distance, row-by-row."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i]
        for j, h in enumerate(hyp, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]
