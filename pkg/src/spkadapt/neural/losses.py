"""CTC (log-space forward-backward) and label-smoothed KL losses."""

import warnings

import numpy as np
import torch

from .._validation import ValidationError

NEG_INF = -np.inf


def min_frames(target):
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extend(target, blank):
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_allowed(ext, blank):
    allowed = np.zeros(ext.size, dtype=bool)
    allowed[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allowed


def ctc_alpha(logprobs, target, blank):
    """Forward variables log alpha[t, s] over the blank-interleaved target."""
    lp = np.asarray(logprobs, dtype=np.float64)
    T = lp.shape[0]
    ext = _extend(list(target), blank)
    S = ext.size
    skip = _skip_allowed(ext, blank)
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t, ext]
    return alpha, ext


def ctc_beta(logprobs, ext, blank):
    lp = np.asarray(logprobs, dtype=np.float64)
    T = lp.shape[0]
    S = ext.size
    # a skip from s to s+2 is legal exactly when s+2 could skip back to s
    skip_fwd = np.zeros(S, dtype=bool)
    skip_fwd[:-2] = _skip_allowed(ext, blank)[2:]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = lp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip_fwd[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + lp[t, ext]
    return beta


def ctc_forward_backward(logprobs, target, blank=0):
    """Return ``(loss, grad)`` for one utterance; ``logprobs`` is (T, V).

    The gradient is taken with respect to the log-probability inputs treated
    as free variables. Infeasible targets give ``inf`` loss and zero gradient.
    """
    lp = np.asarray(logprobs, dtype=np.float64)
    T, V = lp.shape
    target = [int(t) for t in target]
    if any(t == blank for t in target):
        raise ValidationError("target contains the blank index")
    if T < min_frames(target):
        warnings.warn(
            f"CTC target of length {len(target)} needs {min_frames(target)} frames, got {T}; loss is inf",
            RuntimeWarning,
            stacklevel=2,
        )
        return np.inf, np.zeros_like(lp)
    alpha, ext = ctc_alpha(lp, target, blank)
    S = ext.size
    log_p = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    beta = ctc_beta(lp, ext, blank)
    ab = alpha + beta
    occupancy = np.full((T, V), NEG_INF)
    for k in np.unique(ext):
        occupancy[:, k] = np.logaddexp.reduce(ab[:, ext == k], axis=1)
    with np.errstate(invalid="ignore"):
        grad = -np.exp(occupancy - lp - log_p)
    grad[~np.isfinite(occupancy)] = 0.0
    return -log_p, grad


class _CTCFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logprobs, input_lengths, targets, blank, reduction):
        lp = logprobs.detach().to(torch.float64).cpu().numpy()
        losses = np.zeros(lp.shape[0])
        grads = np.zeros_like(lp)
        for b, (n, tgt) in enumerate(zip(input_lengths, targets)):
            loss, g = ctc_forward_backward(lp[b, :n], tgt, blank)
            losses[b] = loss
            grads[b, :n] = g
        if reduction == "sum":
            total = losses.sum()
        elif reduction == "mean":
            total = losses.mean()
            grads /= lp.shape[0]
        else:
            raise ValidationError(f"unknown reduction {reduction!r}")
        ctx.save_for_backward(torch.from_numpy(grads).to(logprobs.dtype))
        return logprobs.new_tensor(total)

    @staticmethod
    def backward(ctx, grad_out):
        (grads,) = ctx.saved_tensors
        return grads * grad_out, None, None, None, None


def ctc_loss(logprobs, target, blank=0, input_lengths=None, reduction="sum"):
    """CTC negative log-likelihood with a forward-backward gradient.

    ``logprobs`` is (T, V) for one utterance with ``target`` a token list, or
    (B, T, V) with ``target`` a list of token lists and optional lengths.
    """
    if logprobs.dim() == 2:
        return _CTCFunction.apply(logprobs.unsqueeze(0), [logprobs.shape[0]], [list(target)], blank, "sum")
    if input_lengths is None:
        input_lengths = [logprobs.shape[1]] * logprobs.shape[0]
    lengths = [int(n) for n in input_lengths]
    return _CTCFunction.apply(logprobs, lengths, [list(t) for t in target], blank, reduction)


def smoothed_targets(targets, vocab, epsilon):
    """(N, V) distribution: 1 - eps on the target, eps / (V - 1) elsewhere."""
    q = torch.full((len(targets), vocab), epsilon / (vocab - 1), dtype=torch.float64)
    q[torch.arange(len(targets)), torch.as_tensor(targets)] = 1.0 - epsilon
    return q


def kl_smoothed_loss(logprobs, targets, epsilon=0.1, ignore_index=None, reduction="mean"):
    """KL(q || p) between eps-smoothed one-hot targets and the model rows.

    With ``epsilon=0`` this is the mean negative log-likelihood of the targets.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValidationError(f"epsilon must be in [0, 1), got {epsilon}")
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    lp = logprobs.reshape(-1, logprobs.shape[-1])
    if ignore_index is not None:
        keep = targets != ignore_index
        lp, targets = lp[keep], targets[keep]
    n, V = lp.shape
    if n == 0:
        return logprobs.sum() * 0.0
    q = smoothed_targets(targets, V, epsilon).to(lp.dtype)
    q_log_q = torch.where(q > 0, q * torch.log(q.clamp_min(1e-300)), torch.zeros_like(q))
    per_pos = (q_log_q - q * lp).sum(dim=1)
    if reduction == "mean":
        return per_pos.mean()
    if reduction == "sum":
        return per_pos.sum()
    raise ValidationError(f"unknown reduction {reduction!r}")
