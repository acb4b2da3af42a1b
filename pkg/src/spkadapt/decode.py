"""CTC greedy decoding, CTC prefix scoring and joint CTC/attention beam search."""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ._validation import ValidationError

NEG_INF = -np.inf


def collapse(path, blank):
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        tok = int(tok)
        if tok != prev and tok != blank:
            out.append(tok)
        prev = tok
    return out


def ctc_greedy(logposteriors, blank=0):
    """Best path: framewise argmax followed by the CTC collapse rules."""
    lp = np.asarray(logposteriors.detach() if isinstance(logposteriors, torch.Tensor) else logposteriors)
    if lp.shape[0] == 0:
        return []
    return collapse(lp.argmax(axis=1), blank)


# -- CTC prefix scoring ---------------------------------------------------

@dataclass
class CtcPrefixState:
    """Forward variables of one prefix: log P(prefix emitted by frame t, ending in non-blank / blank)."""

    r_nonblank: np.ndarray
    r_blank: np.ndarray
    score: float
    last: int = -1


class CtcPrefixScorer:
    """Incremental prefix probabilities over fixed CTC log-posteriors (T, V)."""

    def __init__(self, logposteriors, blank, eos):
        self.lp = np.asarray(
            logposteriors.detach().double() if isinstance(logposteriors, torch.Tensor) else logposteriors,
            dtype=np.float64,
        )
        self.blank = blank
        self.eos = eos

    def initial(self):
        T = self.lp.shape[0]
        r_b = np.cumsum(self.lp[:, self.blank])
        return CtcPrefixState(np.full(T, NEG_INF), r_b, 0.0)

    def extend(self, state, tokens):
        """Prefix scores and new states for ``prefix + c`` for each ``c`` in ``tokens``."""
        lp = self.lp
        T = lp.shape[0]
        tokens = [int(c) for c in tokens]
        scores = np.empty(len(tokens))
        states = [None] * len(tokens)
        full = np.logaddexp(state.r_nonblank, state.r_blank)
        regular = [i for i, c in enumerate(tokens) if c != self.eos]
        for i, c in enumerate(tokens):
            if c == self.eos:
                scores[i] = full[-1]
        if not regular:
            return scores, states
        cs = np.array([tokens[i] for i in regular])
        phi = np.repeat(full[None, :], cs.size, axis=0)
        same = cs == state.last
        phi[same] = state.r_blank
        emit = lp[:, cs].T  # (C, T)
        r_n = np.full((cs.size, T), NEG_INF)
        r_b = np.full((cs.size, T), NEG_INF)
        if state.last == -1:
            r_n[:, 0] = emit[:, 0]
        for t in range(1, T):
            r_n[:, t] = np.logaddexp(r_n[:, t - 1], phi[:, t - 1]) + emit[:, t]
            r_b[:, t] = np.logaddexp(r_b[:, t - 1], r_n[:, t - 1]) + lp[t, self.blank]
        start = emit[:, 0] if state.last == -1 else np.full(cs.size, NEG_INF)
        if T > 1:
            psi = np.logaddexp(start, np.logaddexp.reduce(phi[:, :-1] + emit[:, 1:], axis=1))
        else:
            psi = start
        for j, i in enumerate(regular):
            scores[i] = psi[j]
            states[i] = CtcPrefixState(r_n[j], r_b[j], float(psi[j]), int(cs[j]))
        return scores, states

    def prefix_state(self, prefix):
        state = self.initial()
        for c in prefix:
            _, (state,) = self.extend(state, [c])
        return state


def ctc_prefix_score(logposteriors, prefix, next_token, blank=0, eos=None):
    """log P(CTC output starts with ``prefix + [next_token]``).

    ``next_token == eos`` instead scores the event that the output is exactly ``prefix``.
    """
    scorer = CtcPrefixScorer(logposteriors, blank, eos)
    state = scorer.prefix_state(prefix)
    scores, _ = scorer.extend(state, [next_token])
    return float(scores[0])


# -- joint beam search ----------------------------------------------------

@dataclass
class Hypothesis:
    tokens: tuple
    att_score: float = 0.0
    ctc_score: float = 0.0
    lm_score: float = 0.0
    total: float = 0.0
    finished: bool = False
    ctc_state: object = field(default=None, repr=False, compare=False)


def combine(att, ctc, lm, ctc_weight, lm_weight):
    """Hypothesis score: interpolated attention/CTC plus weighted LM.

    A zero weight drops its term entirely, so ``0 * -inf`` never yields NaN.
    """
    total = 0.0
    for weight, term in ((1.0 - ctc_weight, att), (ctc_weight, ctc), (lm_weight, lm)):
        if weight != 0.0:
            total += weight * term
    return total


def _encode(asr, features, prototype):
    dt = next(asr.parameters()).dtype
    values = getattr(features, "values", features)
    x = torch.as_tensor(np.asarray(values), dtype=dt)[None]
    spk = None
    if prototype is not None:
        spk = torch.as_tensor(np.asarray(getattr(prototype, "vector", prototype)), dtype=dt)[None]
    memory, lengths, ctc = asr.encode(x, [x.shape[1]], spk)
    return memory, lengths, ctc[0], spk


def _next_logprobs(model_fn, prefixes):
    """Last-position log-posteriors for equal-length prefixes, as float64 numpy."""
    batch = torch.as_tensor(prefixes, dtype=torch.long)
    return model_fn(batch)[:, -1].double().numpy()


def joint_beam_search(asr, lm, features, prototype, beam, lm_weight, ctc_decode_weight, max_len=None,
                      bos=1, eos=2, blank=0, exclude=()):
    """Joint CTC/attention beam search with shallow LM fusion.

    Returns the best finished :class:`Hypothesis` (tokens end in ``eos``);
    if nothing finishes within ``max_len`` tokens the best unfinished one is
    returned with ``finished=False``.
    """
    if beam < 1:
        raise ValidationError("beam must be >= 1")
    if lm_weight < 0 or ctc_decode_weight < 0 or ctc_decode_weight > 1:
        raise ValidationError("need lm_weight >= 0 and 0 <= ctc_decode_weight <= 1")
    asr.eval()
    if lm is not None:
        lm.eval()
    with torch.no_grad():
        memory, mem_len, ctc_lp, spk = _encode(asr, features, prototype)
        if max_len is None:
            max_len = max(1, math.ceil(1.5 * int(mem_len[0])))
        vocab = ctc_lp.shape[-1]
        expand = [c for c in range(vocab) if c not in (blank, bos, *exclude)]
        scorer = CtcPrefixScorer(ctc_lp, blank, eos)
        use_lm = lm is not None and lm_weight > 0
        live = [Hypothesis((), ctc_state=scorer.initial())]
        ended = []
        for _ in range(max_len):
            prefixes = [[bos, *h.tokens] for h in live]
            n = len(live)
            att = _next_logprobs(
                lambda p: asr.decode(memory.expand(n, -1, -1), mem_len.expand(n), p,
                                     None if spk is None else spk.expand(n, -1)),
                prefixes,
            )
            lmp = _next_logprobs(lm, prefixes) if use_lm else np.zeros_like(att)
            cands = []
            for i, h in enumerate(live):
                ctc_scores, states = scorer.extend(h.ctc_state, expand)
                for c, cs, st in zip(expand, ctc_scores, states):
                    a = h.att_score + float(att[i, c])
                    l = h.lm_score + float(lmp[i, c])
                    cs = float(cs)
                    cands.append(Hypothesis(h.tokens + (c,), a, cs, l,
                                            combine(a, cs, l, ctc_decode_weight, lm_weight),
                                            c == eos, st))
            cands.sort(key=lambda h: (-h.total, h.tokens))
            kept = cands[:beam]
            ended.extend(h for h in kept if h.finished)
            live = [h for h in kept if not h.finished]
            if not live:
                break
            if ended:
                best_end = max(h.total for h in ended)
                # scores never increase under extension, so no live hypothesis can overtake
                if best_end > max(h.total for h in live):
                    break
        pool = ended or live
        best = min(pool, key=lambda h: (-h.total, h.tokens))
        best.ctc_state = None
        return best


def score_sequence(asr, lm, features, prototype, tokens, lm_weight, ctc_decode_weight, bos=1, eos=2, blank=0):
    """Recompute ``(att, ctc, lm, total)`` for a full token sequence from scratch."""
    tokens = [int(t) for t in tokens]
    asr.eval()
    with torch.no_grad():
        memory, mem_len, ctc_lp, spk = _encode(asr, features, prototype)
        inp = torch.as_tensor([[bos, *tokens[:-1]]], dtype=torch.long)
        dec = asr.decode(memory, mem_len, inp, spk)[0].double().numpy()
        att = float(sum(dec[i, t] for i, t in enumerate(tokens)))
        lm_score = 0.0
        if lm is not None and lm_weight > 0:
            lm.eval()
            lmp = lm(inp)[0].double().numpy()
            lm_score = float(sum(lmp[i, t] for i, t in enumerate(tokens)))
    if tokens:
        ctc = ctc_prefix_score(ctc_lp, tokens[:-1], tokens[-1], blank, eos)
    else:
        ctc = 0.0
    return att, ctc, lm_score, combine(att, ctc, lm_score, ctc_decode_weight, lm_weight)
