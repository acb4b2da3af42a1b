"""Log-mel filterbanks and the seeded stand-in for a frozen wav2vec-style extractor."""

import functools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ._validation import ValidationError, check_matrix

LOG_FLOOR = 1e-10


@dataclass(eq=False)
class FeatureMatrix:
    values: np.ndarray
    frame_shift_s: float
    origin: str = "mel"

    def __post_init__(self):
        self.values = check_matrix(self.values)
        if self.origin not in ("mel", "frozen_extractor", "concat"):
            raise ValidationError(f"unknown feature origin {self.origin!r}")

    @property
    def n_frames(self):
        return self.values.shape[0]

    @property
    def dims(self):
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels, rate_hz, fmin=0.0, fmax=None):
    """Center frequencies (Hz) of the ``n_mels`` triangular filters."""
    fmax = rate_hz / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


@functools.lru_cache(maxsize=32)
def mel_filter_matrix(n_mels, n_fft, rate_hz, fmin=0.0, fmax=None):
    """HTK-scale triangular filters evaluated on the rfft bin frequencies, peak 1."""
    fmax = rate_hz / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / rate_hz)
    lower = (freqs[None, :] - edges[:-2, None]) / (edges[1:-1] - edges[:-2])[:, None]
    upper = (edges[2:, None] - freqs[None, :]) / (edges[2:] - edges[1:-1])[:, None]
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb.setflags(write=False)
    return fb


def frame_count(n_samples, win, hop):
    return (n_samples - win) // hop + 1


def mel_filterbank(signal, n_mels=80, win_s=0.025, hop_s=0.010, n_fft=None, floor=LOG_FLOOR):
    """Log mel power spectrum, one row per full analysis window (no padding)."""
    rate = signal.rate_hz
    win = int(round(win_s * rate))
    hop = int(round(hop_s * rate))
    if win <= 0 or hop <= 0:
        raise ValidationError("window and hop must be at least one sample")
    x = signal.samples
    if x.size < win:
        raise ValidationError(f"signal of {x.size} samples is shorter than one {win}-sample window")
    n_fft = n_fft or 1 << (win - 1).bit_length()
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    spec = np.abs(np.fft.rfft(frames * np.hamming(win), n=n_fft, axis=1)) ** 2
    mel = spec @ mel_filter_matrix(n_mels, n_fft, rate).T
    return FeatureMatrix(np.log(mel + floor), hop / rate, "mel")


def cmvn(features):
    """Per-utterance mean/variance normalisation (off by default in the pipeline)."""
    v = features.values
    std = v.std(axis=0)
    out = (v - v.mean(axis=0)) / np.where(std > 0, std, 1.0)
    return FeatureMatrix(out, features.frame_shift_s, features.origin)


@dataclass(frozen=True)
class FrozenExtractorConfig:
    out_dim: int = 1024
    channels: int = 128
    trainable: bool = False
    seed: int = 0
    rate_hz: int = 16000

    # wav2vec 2.0 feature-encoder geometry: total stride 320 -> 50 frames/s at 16 kHz
    kernels: tuple = (10, 3, 3, 3, 3, 2, 2)
    strides: tuple = (5, 2, 2, 2, 2, 2, 2)

    def __post_init__(self):
        if self.out_dim <= 0 or self.channels <= 0:
            raise ValidationError("extractor dims must be positive")

    @property
    def total_stride(self):
        return int(np.prod(self.strides))

    @property
    def frames_per_second(self):
        return self.rate_hz / self.total_stride


class ConvFeatureEncoder(nn.Module):
    """Strided temporal convolutions, each followed by layer norm and GELU."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        layers = []
        c_in = 1
        for k, s in zip(cfg.kernels, cfg.strides):
            layers.append(nn.Conv1d(c_in, cfg.channels, k, stride=s))
            c_in = cfg.channels
        self.convs = nn.ModuleList(layers)
        self.norms = nn.ModuleList(nn.LayerNorm(cfg.channels) for _ in layers)
        self.proj = nn.Linear(cfg.channels, cfg.out_dim)
        gen = torch.Generator().manual_seed(cfg.seed)
        with torch.no_grad():
            for p in self.parameters():
                if p.dim() > 1:
                    fan_in = p[0].numel()
                    bound = 1.0 / np.sqrt(fan_in) * np.sqrt(3.0)
                    p.copy_(torch.empty(p.shape).uniform_(-bound, bound, generator=gen))
                else:
                    p.zero_()
            for norm in self.norms:
                norm.weight.fill_(1.0)
        self.requires_grad_(cfg.trainable)

    def output_length(self, n_samples):
        n = n_samples
        for k, s in zip(self.cfg.kernels, self.cfg.strides):
            n = (n - k) // s + 1
        return n

    def forward(self, wav):
        """``wav``: (batch, samples) -> (batch, frames, out_dim)."""
        wav = (wav - wav.mean(dim=1, keepdim=True)) / (wav.std(dim=1, keepdim=True) + 1e-5)
        h = wav.unsqueeze(1)
        for conv, norm in zip(self.convs, self.norms):
            h = conv(h)
            h = nn.functional.gelu(norm(h.transpose(1, 2))).transpose(1, 2)
        return self.proj(h.transpose(1, 2))


@functools.lru_cache(maxsize=8)
def _frozen_encoder(cfg):
    enc = ConvFeatureEncoder(cfg)
    enc.eval()
    return enc


def toy_frozen_extract(signal, cfg=FrozenExtractorConfig()):
    """Seeded random conv stack producing ~50 frames/s of ``cfg.out_dim`` vectors."""
    if signal.rate_hz != cfg.rate_hz:
        raise ValidationError(f"extractor expects {cfg.rate_hz} Hz input, got {signal.rate_hz} Hz")
    enc = _frozen_encoder(cfg)
    if enc.output_length(signal.samples.size) < 1:
        raise ValidationError("signal too short for the extractor receptive field")
    with torch.no_grad():
        out = enc(torch.as_tensor(signal.samples, dtype=torch.float32).unsqueeze(0))[0]
    return FeatureMatrix(out.numpy().astype(np.float64), cfg.total_stride / cfg.rate_hz, "frozen_extractor")


# -- feature cache: <dir>/<utt_id>.feat ------------------------------------

_CACHE_HEADER = struct.Struct("<IId")


def write_feature_cache(directory, utt_id, features):
    path = Path(directory) / f"{utt_id}.feat"
    v = np.ascontiguousarray(features.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(v.shape[1], v.shape[0], features.frame_shift_s))
        fh.write(v.tobytes())
    return path


def read_feature_cache(directory, utt_id, origin="mel"):
    path = Path(directory) / f"{utt_id}.feat"
    raw = path.read_bytes()
    dims, frames, shift = _CACHE_HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f4", offset=_CACHE_HEADER.size)
    if body.size != dims * frames:
        raise ValidationError(f"{path}: body has {body.size} floats, header says {dims}x{frames}")
    return FeatureMatrix(body.reshape(frames, dims).astype(np.float64), shift, origin)
