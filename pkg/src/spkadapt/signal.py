"""Waveform-domain transforms: SNR mixing, resampling, speed perturbation, masking.

Every function is pure and deterministic for a fixed seed. Mixed output is
never renormalised; samples are clamped to [-1, 1] only when written to WAV.
"""

import wave
from dataclasses import dataclass, field
from fractions import Fraction
from math import gcd

import numpy as np
from scipy import signal as sps

from ._validation import ValidationError, check_audio, check_rate


class DomainError(ValueError):
    """Input is well-formed but outside the operation's mathematical domain."""


@dataclass(eq=False)
class AudioBuffer:
    samples: np.ndarray
    rate_hz: int

    def __post_init__(self):
        self.samples = check_audio(self.samples, allow_empty=True)
        self.rate_hz = check_rate(self.rate_hz)

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self):
        return self.samples.size / self.rate_hz


@dataclass(frozen=True)
class SnrSpec:
    """One noise condition: target SNR, where the noise comes from, and the crop seed."""

    snr_db: float
    noise_source: str = "synthetic:white"
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValidationError(f"snr_db must be finite, got {self.snr_db}")


def power(x):
    """Mean-square power of a sample array."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def fit_noise_length(noise, n, seed=0):
    """Loop ``noise`` up to ``n`` samples, or crop ``n`` samples at a seeded offset."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size >= n:
        offset = int(np.random.default_rng(seed).integers(0, noise.size - n + 1))
        return noise[offset:offset + n].copy()
    return np.resize(noise, n)


def snr_scale(signal_power, noise_power, snr_db):
    """Gain applied to the noise so that 10*log10(P_s / (a^2 P_n)) == snr_db."""
    return float(np.sqrt(signal_power / (noise_power * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(signal, noise, snr_db, seed=0, return_scale=False):
    """Add ``noise`` to ``signal`` at exactly ``snr_db`` dB.

    Powers are mean squares over the whole utterance (no VAD gating). Noise
    shorter than the signal is looped; longer noise is cropped at an offset
    drawn from ``seed``.
    """
    if signal.rate_hz != noise.rate_hz:
        raise ValidationError(
            f"rate mismatch: signal {signal.rate_hz} Hz vs noise {noise.rate_hz} Hz"
        )
    if not np.isfinite(snr_db):
        raise ValidationError(f"snr_db must be finite, got {snr_db}")
    s = check_audio(signal.samples, name="signal")
    n = check_audio(noise.samples, name="noise")
    p_s = power(s)
    if p_s <= 0.0:
        raise DomainError("signal is silent (zero power); SNR undefined")
    if power(n) <= 0.0:
        raise DomainError("noise is silent (zero power); cannot reach a finite SNR")
    n = fit_noise_length(n, s.size, seed)
    p_n = power(n)
    if p_n <= 0.0:
        raise DomainError("selected noise segment is silent")
    a = snr_scale(p_s, p_n, snr_db)
    out = AudioBuffer(s + a * n, signal.rate_hz)
    return (out, a) if return_scale else out


def measured_snr(clean, mixed):
    """Post-hoc SNR in dB of ``mixed`` relative to ``clean`` (arrays or buffers)."""
    clean = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    residual = np.asarray(getattr(mixed, "samples", mixed), dtype=np.float64) - clean
    return 10.0 * np.log10(power(clean) / power(residual))


def _lowpass_taps(up, down, kaiser_beta=8.6, zeros_per_side=10, cutoff=0.95):
    max_rate = max(up, down)
    half_len = zeros_per_side * max_rate
    return sps.firwin(2 * half_len + 1, cutoff / max_rate, window=("kaiser", kaiser_beta))


def _resample_ratio(samples, up, down):
    g = gcd(up, down)
    up, down = up // g, down // g
    if up == down:
        return samples.copy()
    taps = _lowpass_taps(up, down)
    return sps.resample_poly(samples, up, down, window=taps)


def resample(signal, to_hz):
    """Polyphase windowed-sinc resampling (Kaiser window, cutoff 0.95 Nyquist)."""
    to_hz = check_rate(to_hz, name="to_hz")
    if to_hz == signal.rate_hz:
        return AudioBuffer(signal.samples.copy(), to_hz)
    out = _resample_ratio(signal.samples, to_hz, signal.rate_hz)
    return AudioBuffer(out, to_hz)


def speed_perturb(signal, factor):
    """Play ``signal`` ``factor`` times faster: resample to rate/factor, keep the rate label."""
    factor = float(factor)
    if not factor > 0:
        raise ValidationError(f"speed factor must be positive, got {factor}")
    if factor == 1.0:
        return AudioBuffer(signal.samples.copy(), signal.rate_hz)
    ratio = Fraction(1.0 / factor).limit_denominator(200)
    out = _resample_ratio(signal.samples, ratio.numerator, ratio.denominator)
    return AudioBuffer(out, signal.rate_hz)


@dataclass(frozen=True)
class MaskPolicy:
    """How many zeroed chunks to draw and how long each may be (in samples).

    ``chunks`` pins explicit half-open ``(start, stop)`` spans and bypasses sampling.
    """

    min_chunks: int = 0
    max_chunks: int = 0
    min_len: int = 0
    max_len: int = 0
    chunks: tuple = field(default=())

    @property
    def min_total(self):
        if self.chunks:
            return sum(b - a for a, b in self.chunks)
        return self.min_chunks * self.min_len

    @property
    def max_total(self):
        if self.chunks:
            return sum(b - a for a, b in self.chunks)
        return self.max_chunks * self.max_len

    def fitted(self, n):
        """This policy with chunk counts/lengths reduced until it can apply to ``n`` samples."""
        if self.chunks:
            return self
        max_len = min(self.max_len, n)
        min_len = min(self.min_len, max_len)
        max_chunks = self.max_chunks if max_len == 0 else min(self.max_chunks, n // max_len)
        return MaskPolicy(min(self.min_chunks, max_chunks), max_chunks, min_len, max_len)

    def validate(self, n):
        if self.chunks:
            for a, b in self.chunks:
                if not 0 <= a <= b <= n:
                    raise ValidationError(f"mask chunk ({a}, {b}) outside [0, {n}]")
            return
        if not 0 <= self.min_chunks <= self.max_chunks:
            raise ValidationError("need 0 <= min_chunks <= max_chunks")
        if not 0 <= self.min_len <= self.max_len <= n:
            raise ValidationError(f"need 0 <= min_len <= max_len <= {n}")
        if self.max_chunks * self.max_len > n:
            raise ValidationError(
                f"policy can zero up to {self.max_chunks * self.max_len} samples, signal has {n}"
            )


def draw_mask_spans(n, policy, seed):
    """Sample non-overlapping zeroed spans for a length-``n`` signal."""
    policy.validate(n)
    if policy.chunks:
        return [tuple(c) for c in policy.chunks]
    rng = np.random.default_rng(seed)
    k = int(rng.integers(policy.min_chunks, policy.max_chunks + 1))
    if k == 0:
        return []
    lengths = rng.integers(policy.min_len, policy.max_len + 1, size=k)
    free = n - int(lengths.sum())
    cuts = np.sort(rng.integers(0, free + 1, size=k))
    spans = []
    consumed = 0
    for cut, length in zip(cuts, lengths):
        start = int(cut) + consumed
        spans.append((start, start + int(length)))
        consumed += int(length)
    return spans


def time_mask(signal, policy, seed=0):
    """Zero random contiguous chunks of the waveform (time-domain SpecAugment)."""
    out = signal.samples.copy()
    for a, b in draw_mask_spans(out.size, policy, seed):
        out[a:b] = 0.0
    return AudioBuffer(out, signal.rate_hz)


def synth_noise(kind, n, rate_hz=16000, seed=0):
    """Deterministic synthetic noise: ``white``, ``pink`` or ``brown``."""
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(n)
    if kind == "white":
        x = white
    elif kind in ("pink", "brown"):
        spec = np.fft.rfft(white)
        f = np.fft.rfftfreq(n, d=1.0 / rate_hz)
        f[0] = f[1] if n > 1 else 1.0
        spec /= np.sqrt(f) if kind == "pink" else f
        x = np.fft.irfft(spec, n)
    else:
        raise ValidationError(f"unknown synthetic noise kind {kind!r}")
    x = x / (np.max(np.abs(x)) + 1e-12) * 0.5
    return AudioBuffer(x, rate_hz)


def read_wav(path):
    """Read a 16-bit PCM mono WAV into an :class:`AudioBuffer` scaled to [-1, 1]."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ValidationError(f"{path}: only 16-bit PCM mono WAV is supported")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return AudioBuffer(data, rate)


def write_wav(path, audio):
    """Write 16-bit PCM mono little-endian; samples are clamped to [-1, 1] here."""
    x = np.clip(audio.samples, -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.rate_hz)
        w.writeframes(pcm.tobytes())
