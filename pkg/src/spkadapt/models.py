"""The three networks: wav2vec-style CTC head, transformer CTC/attention ASR, transformer LM.

Speaker prototypes enter through :class:`~spkadapt.neural.layers.ConcatLinear`
layers, so a model with the speaker columns zeroed computes exactly what the
matching baseline computes.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ._validation import ValidationError, check_probability
from .features import ConvFeatureEncoder, FrozenExtractorConfig
from .neural.attention import DecoderBlock, EncoderBlock, causal_mask, padding_mask, sinusoidal_pe
from .neural.layers import DEFAULT_DROPOUT, LEAKY_SLOPE, ConcatLinear, MaskedBatchNorm, TimeConv1d, init_parameters

INJECTION_POINTS = ("frontend", "post_encoder", "none")


@dataclass(frozen=True)
class W2v2DownstreamConfig:
    vocab: int
    input_dim: int = 1024
    speaker_dim: int = 0
    n_blocks: int = 3
    hidden_dim: int = 1024
    dropout: float = DEFAULT_DROPOUT
    extractor: FrozenExtractorConfig = None

    def __post_init__(self):
        if self.n_blocks != 3:
            raise ValidationError("the downstream head has exactly three encoder blocks")
        if self.vocab < 2 or self.hidden_dim < 1 or self.input_dim < 1 or self.speaker_dim < 0:
            raise ValidationError("invalid downstream dimensions")
        check_probability(self.dropout, "dropout", upper_inclusive=False)
        if self.extractor is not None and self.extractor.out_dim != self.input_dim:
            raise ValidationError("extractor out_dim must equal input_dim")


@dataclass(frozen=True)
class TransformerAsrConfig:
    vocab: int
    input_dim: int = 80
    speaker_dim: int = 0
    d_model: int = 256
    n_enc: int = 12
    n_dec: int = 6
    n_heads: int = 4
    d_ff: int = 1024
    cnn_channels: tuple = None
    cnn_kernel: int = 3
    cnn_strides: tuple = (2, 2, 1)
    dropout: float = DEFAULT_DROPOUT
    ctc_weight_train: float = 0.3
    injection: str = "frontend"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValidationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.injection not in INJECTION_POINTS:
            raise ValidationError(f"injection must be one of {INJECTION_POINTS}")
        check_probability(self.ctc_weight_train, "ctc_weight_train")
        check_probability(self.dropout, "dropout", upper_inclusive=False)
        if self.cnn_channels is not None and len(self.cnn_channels) != len(self.cnn_strides):
            raise ValidationError("cnn_channels and cnn_strides must have equal length")

    @property
    def channels(self):
        if self.cnn_channels is not None:
            return tuple(self.cnn_channels)
        n = len(self.cnn_strides)
        return tuple([max(self.d_model // 2, 1)] * (n - 2) + [self.d_model] * min(n, 2))

    @property
    def effective_speaker_dim(self):
        return 0 if self.injection == "none" else self.speaker_dim


@dataclass(frozen=True)
class TransformerLmConfig:
    vocab: int
    d_model: int = 768
    d_ff: int = 3072
    n_blocks: int = 12
    n_heads: int = 12
    dropout: float = DEFAULT_DROPOUT

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValidationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


def lengths_mask(lengths, max_len):
    """Bool (B, max_len), True at valid frames."""
    return ~padding_mask(lengths, max_len)


def _speaker_frames(speaker, n_frames):
    return speaker[:, None, :].expand(speaker.shape[0], n_frames, speaker.shape[1])


class W2v2Downstream(nn.Module):
    """[optional conv extractor] -> concat speaker -> 3 x (linear, BN, leakyReLU, dropout) -> linear."""

    def __init__(self, cfg, seed=0):
        super().__init__()
        self.cfg = cfg
        if cfg.extractor is not None and cfg.extractor.trainable:
            self.extractor = ConvFeatureEncoder(cfg.extractor)
        else:
            self.extractor = None
        dims = [cfg.input_dim] + [cfg.hidden_dim] * cfg.n_blocks
        self.linears = nn.ModuleList(
            ConcatLinear(dims[i], dims[i + 1], cfg.speaker_dim if i == 0 else 0) for i in range(cfg.n_blocks)
        )
        self.norms = nn.ModuleList(MaskedBatchNorm(cfg.hidden_dim) for _ in range(cfg.n_blocks))
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.drop = nn.Dropout(cfg.dropout)
        self.out = ConcatLinear(cfg.hidden_dim, cfg.vocab)
        init_parameters(self, seed)
        if self.extractor is not None:
            # keep the extractor's own seeded init so it matches the frozen pathway
            self.extractor.load_state_dict(ConvFeatureEncoder(cfg.extractor).state_dict())
            self.extractor.requires_grad_(True)

    def output_lengths(self, lengths):
        if self.extractor is None:
            return torch.as_tensor(lengths)
        return torch.as_tensor([self.extractor.output_length(int(n)) for n in lengths])

    def forward(self, x, lengths, speaker=None):
        """``x``: (B, T, D) features, or (B, N) waveforms with a trainable extractor."""
        if self.extractor is not None:
            x = self.extractor(x)
        lengths = self.output_lengths(lengths)
        B, T, D = x.shape
        if speaker is not None:
            if self.cfg.speaker_dim == 0:
                raise ValidationError("baseline model given a speaker vector")
            if speaker.shape[-1] != self.cfg.speaker_dim:
                raise ValidationError(f"speaker dim {speaker.shape[-1]} != {self.cfg.speaker_dim}")
            x = torch.cat([x, _speaker_frames(speaker.to(x.dtype), T)], dim=-1)
        width = self.cfg.input_dim + self.cfg.speaker_dim
        if x.shape[-1] != width:
            raise ValidationError(f"input width {x.shape[-1]} != expected {width}")
        mask = lengths_mask(lengths, T)
        h = x
        for lin, bn in zip(self.linears, self.norms):
            h = self.drop(self.act(bn(lin(h), mask)))
        return torch.log_softmax(self.out(h), dim=-1), lengths


class CnnFrontend(nn.Module):
    """Strided temporal convolutions shortening the sequence (default 4x)."""

    def __init__(self, cfg):
        super().__init__()
        chans = (cfg.input_dim,) + cfg.channels
        pad = cfg.cnn_kernel // 2
        self.convs = nn.ModuleList(
            TimeConv1d(chans[i], chans[i + 1], cfg.cnn_kernel, s, pad) for i, s in enumerate(cfg.cnn_strides)
        )

    def output_lengths(self, lengths):
        out = []
        for n in lengths:
            n = int(n)
            for conv in self.convs:
                n = conv.output_length(n)
            out.append(n)
        return torch.as_tensor(out)

    def forward(self, x, lengths):
        lengths = torch.as_tensor(lengths)
        for conv in self.convs:
            x = torch.relu(conv(x))
            lengths = torch.as_tensor([conv.output_length(int(n)) for n in lengths])
            # zero padded frames so results never depend on batch padding
            x = x * lengths_mask(lengths, x.shape[1])[..., None].to(x.dtype)
        return x, lengths


class TransformerAsr(nn.Module):
    def __init__(self, cfg, seed=0):
        super().__init__()
        self.cfg = cfg
        E = cfg.effective_speaker_dim
        d = cfg.d_model
        self.frontend = CnnFrontend(cfg)
        self.in_proj = ConcatLinear(cfg.channels[-1], d, E if cfg.injection == "frontend" else 0)
        self.encoder = nn.ModuleList(
            EncoderBlock(d, cfg.n_heads, cfg.d_ff, cfg.dropout) for _ in range(cfg.n_enc)
        )
        self.ctc_head = ConcatLinear(d, cfg.vocab, E if cfg.injection == "post_encoder" else 0)
        self.embed = nn.Embedding(cfg.vocab, d)
        self.decoder = nn.ModuleList(
            DecoderBlock(d, cfg.n_heads, cfg.d_ff, cfg.dropout) for _ in range(cfg.n_dec)
        )
        self.dec_head = ConcatLinear(d, cfg.vocab, E if cfg.injection == "post_encoder" else 0)
        self.drop = nn.Dropout(cfg.dropout)
        init_parameters(self, seed)

    def _pe(self, n, like):
        return torch.as_tensor(sinusoidal_pe(n, self.cfg.d_model), dtype=like.dtype)

    def _with_speaker(self, h, speaker, point):
        if self.cfg.injection != point or self.cfg.effective_speaker_dim == 0:
            return h
        if speaker is None:
            raise ValidationError(f"model injects speaker vectors at {point}; none given")
        if speaker.shape[-1] != self.cfg.speaker_dim:
            raise ValidationError(f"speaker dim {speaker.shape[-1]} != {self.cfg.speaker_dim}")
        return torch.cat([h, _speaker_frames(speaker.to(h.dtype), h.shape[1])], dim=-1)

    def encode(self, x, lengths, speaker=None):
        """Return ``(memory, enc_lengths, ctc_logprobs)``."""
        if x.shape[-1] != self.cfg.input_dim:
            raise ValidationError(f"feature dim {x.shape[-1]} != {self.cfg.input_dim}")
        if speaker is not None and self.cfg.effective_speaker_dim == 0:
            raise ValidationError("baseline model given a speaker vector")
        h, lengths = self.frontend(x, lengths)
        h = self.in_proj(self._with_speaker(h, speaker, "frontend"))
        h = self.drop(h + self._pe(h.shape[1], h))
        pad = padding_mask(lengths, h.shape[1])[:, None, :]
        for block in self.encoder:
            h = block(h, pad)
        ctc = torch.log_softmax(self.ctc_head(self._with_speaker(h, speaker, "post_encoder")), dim=-1)
        return h, lengths, ctc

    def decode(self, memory, mem_lengths, prefix, speaker=None):
        """Next-token log-posteriors for every position of ``prefix`` (B, U)."""
        U = prefix.shape[1]
        y = self.embed(prefix)
        y = self.drop(y + self._pe(U, y))
        self_mask = causal_mask(U)
        mem_mask = padding_mask(mem_lengths, memory.shape[1])[:, None, :]
        for block in self.decoder:
            y = block(y, memory, self_mask, mem_mask)
        return torch.log_softmax(self.dec_head(self._with_speaker(y, speaker, "post_encoder")), dim=-1)

    def forward(self, x, lengths, prefix, speaker=None):
        memory, enc_lengths, ctc = self.encode(x, lengths, speaker)
        return ctc, enc_lengths, self.decode(memory, enc_lengths, prefix, speaker)


class TransformerLm(nn.Module):
    """Decoder-only transformer (encoder blocks under a causal mask)."""

    def __init__(self, cfg, seed=0):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab, cfg.d_model)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.dropout) for _ in range(cfg.n_blocks)
        )
        self.head = nn.Linear(cfg.d_model, cfg.vocab)
        self.drop = nn.Dropout(cfg.dropout)
        init_parameters(self, seed)

    def forward(self, tokens):
        U = tokens.shape[1]
        h = self.embed(tokens)
        h = self.drop(h + torch.as_tensor(sinusoidal_pe(U, self.cfg.d_model), dtype=h.dtype))
        mask = causal_mask(U)
        for block in self.blocks:
            h = block(h, mask)
        return torch.log_softmax(self.head(h), dim=-1)


def joint_loss(ctc_part, kl_part, ctc_weight):
    """``ctc_weight * CTC + (1 - ctc_weight) * KL``."""
    w = check_probability(ctc_weight, "ctc_weight")
    return w * ctc_part + (1.0 - w) * kl_part


# -- single-utterance functional wrappers ---------------------------------

def _dtype(model):
    return next(model.parameters()).dtype


def _speaker_tensor(prototype, dtype):
    if prototype is None:
        return None
    vec = getattr(prototype, "vector", prototype)
    return torch.as_tensor(np.asarray(vec), dtype=dtype)[None, :]


def w2v2_forward(model, features, prototype=None):
    """Log-posteriors (T, V) for one utterance, prototype concatenated before block 1."""
    values = getattr(features, "values", features)
    dt = _dtype(model)
    x = torch.as_tensor(np.asarray(values), dtype=dt)[None]
    with torch.no_grad():
        lp, _ = model(x, [x.shape[1]], _speaker_tensor(prototype, dt))
    return lp[0]


def transformer_forward(model, features, target_prefix, prototype=None):
    """``(ctc_logprobs (T', V), decoder_logprobs (U, V))`` for one utterance."""
    if len(target_prefix) == 0:
        raise ValidationError("target_prefix must contain at least the BOS token")
    values = getattr(features, "values", features)
    dt = _dtype(model)
    x = torch.as_tensor(np.asarray(values), dtype=dt)[None]
    prefix = torch.as_tensor([list(target_prefix)], dtype=torch.long)
    with torch.no_grad():
        ctc, _, dec = model(x, [x.shape[1]], prefix, _speaker_tensor(prototype, dt))
    return ctc[0], dec[0]


def lm_forward(lm, token_prefix):
    """Next-token log-posteriors (U, V) for each position of a non-empty prefix."""
    if len(token_prefix) == 0:
        raise ValidationError("LM prefix must not be empty")
    with torch.no_grad():
        return lm(torch.as_tensor([list(token_prefix)], dtype=torch.long))[0]
