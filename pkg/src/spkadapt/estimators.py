"""scikit-learn style estimators wrapping the feature, speaker and model code.

The ASR estimators follow the ``fit`` / ``predict`` / ``score`` protocol with
``get_params`` / ``set_params`` inherited from :class:`sklearn.base.BaseEstimator`.
Speaker information is passed as a per-utterance ``speaker_vectors`` argument
(usually looked up from a :class:`SpeakerPrototypeConcatenator`).
"""

import dataclasses
import zlib
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ValidationError, check_feature_list, check_speaker_vectors
from .corpus import TokenInventory, build_char_inventory, detokenize, tokenize
from .decode import ctc_greedy, joint_beam_search
from .evaluation import corpus_wer
from .features import FeatureMatrix, FrozenExtractorConfig, cmvn, mel_filterbank, toy_frozen_extract
from .models import (
    TransformerAsr,
    TransformerAsrConfig,
    TransformerLm,
    TransformerLmConfig,
    W2v2Downstream,
    W2v2DownstreamConfig,
    joint_loss,
)
from .neural.checkpoint import load_checkpoint, save_checkpoint
from .neural.losses import ctc_loss, kl_smoothed_loss
from .neural.optim import Optimizer, OptimizerConfig
from .neural.schedule import ScheduleConfig
from .signal import AudioBuffer, MaskPolicy, mix_at_snr, speed_perturb, synth_noise, time_mask
from .speaker import PrototypeTable, SpeakerEmbedding, concat_speaker
from .training import MetricsLog, TrainConfig, checkpoint_path, pad_batch, pad_tokens, train_loop

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def utterance_seed(seed, key):
    """Stable per-utterance seed so every consumer of ``key`` draws the same noise."""
    return (int(seed) * 2654435761 + zlib.crc32(str(key).encode())) % (2**32)


# -- transformers ------------------------------------------------------------

class MelFilterbank(TransformerMixin, BaseEstimator):
    """Audio buffers -> log-mel feature matrices."""

    def __init__(self, n_mels=80, win_s=0.025, hop_s=0.010, normalize=False):
        self.n_mels = n_mels
        self.win_s = win_s
        self.hop_s = hop_s
        self.normalize = normalize

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = []
        for audio in X:
            fm = mel_filterbank(audio, self.n_mels, self.win_s, self.hop_s)
            out.append((cmvn(fm) if self.normalize else fm).values)
        return out


class FrozenFeatureExtractor(TransformerMixin, BaseEstimator):
    """Audio buffers -> ~50 frames/s of 1024-dim vectors from the seeded conv stack."""

    def __init__(self, out_dim=1024, channels=128, seed=0):
        self.out_dim = out_dim
        self.channels = channels
        self.seed = seed

    def config(self, trainable=False):
        return FrozenExtractorConfig(self.out_dim, self.channels, trainable, self.seed)

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        cfg = self.config()
        return [toy_frozen_extract(a, cfg).values for a in X]


class NoiseAugmenter(TransformerMixin, BaseEstimator):
    """Mix noise into audio at a fixed SNR; the crop offset depends on (seed, key) only."""

    def __init__(self, snr_db=0.0, noise="synthetic:white", seed=0):
        self.snr_db = snr_db
        self.noise = noise
        self.seed = seed

    def fit(self, X, y=None):
        return self

    def _noise_for(self, audio, key):
        if isinstance(self.noise, AudioBuffer):
            return self.noise
        kind = str(self.noise).split(":", 1)[-1]
        n = max(len(audio) * 2, 1)
        return synth_noise(kind, n, audio.rate_hz, seed=utterance_seed(self.seed, f"noise:{key}"))

    def transform(self, X, keys=None):
        keys = list(range(len(X))) if keys is None else list(keys)
        return [
            mix_at_snr(a, self._noise_for(a, k), self.snr_db, seed=utterance_seed(self.seed, k))
            for a, k in zip(X, keys)
        ]


class SpeakerPrototypeConcatenator(TransformerMixin, BaseEstimator):
    """Pool utterance embeddings into per-speaker prototypes and append them to features.

    ``fit(embeddings, speaker_ids)`` takes an (n_utts, E) array; ``transform``
    takes feature matrices plus the speaker of each one.
    """

    def __init__(self, scaling="minmax01", scale_stage="prototype"):
        self.scaling = scaling
        self.scale_stage = scale_stage

    def fit(self, embeddings, speaker_ids):
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(speaker_ids):
            raise ValidationError("embeddings must be (n_utterances, dim) aligned with speaker_ids")
        from .corpus import UtteranceRecord

        records = [UtteranceRecord(f"u{i}", s, "-", "-", 1.0) for i, s in enumerate(speaker_ids)]
        table = {f"u{i}": SpeakerEmbedding(f"u{i}", v) for i, v in enumerate(emb)}
        self.table_ = PrototypeTable.from_embeddings(table, records, self.scaling, self.scale_stage)
        return self

    @classmethod
    def from_table(cls, table):
        self = cls(scaling=table.fallback.scaling)
        self.table_ = table
        return self

    def vectors_for(self, speaker_ids):
        check_is_fitted(self, "table_")
        return [self.table_[s].vector for s in speaker_ids]

    def transform(self, X, speaker_ids):
        check_is_fitted(self, "table_")
        mats = check_feature_list(X)
        return [
            concat_speaker(FeatureMatrix(m, 0.01), self.table_[s]).values for m, s in zip(mats, speaker_ids)
        ]


# -- ASR estimators ----------------------------------------------------------

def _jsonable(value):
    if isinstance(value, TokenInventory):
        return {"__inventory__": [value.tokens, list(value.special_indices)]}
    if isinstance(value, MaskPolicy):
        return {"__mask__": dataclasses.asdict(value)}
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, BaseEstimator):
        return None
    if isinstance(value, Path):
        return str(value)
    return value


def _from_json(value):
    if isinstance(value, dict) and "__inventory__" in value:
        tokens, idx = value["__inventory__"]
        return TokenInventory(tokens, *idx)
    if isinstance(value, dict) and "__mask__" in value:
        d = value["__mask__"]
        d["chunks"] = tuple(tuple(c) for c in d["chunks"])
        return MaskPolicy(**d)
    if isinstance(value, list):
        return tuple(_from_json(v) for v in value)
    return value


class _SpeakerASRBase(BaseEstimator):
    """Shared fitting, featurisation and persistence for the two ASR estimators."""

    def _dtype(self):
        return _DTYPES[self.dtype]

    # inputs ---------------------------------------------------------------
    def _is_audio(self, X):
        return len(X) > 0 and isinstance(X[0], AudioBuffer)

    def _audio_to_features(self, audio):
        raise NotImplementedError

    def _augment_audio(self, audio, key, epoch):
        rng = np.random.default_rng(utterance_seed(self.seed, f"aug:{epoch}:{key}"))
        if self.speed_factors:
            audio = speed_perturb(audio, self.speed_factors[int(rng.integers(len(self.speed_factors)))])
        if self.mask_policy is not None:
            audio = time_mask(audio, self.mask_policy.fitted(len(audio)), seed=int(rng.integers(2**31)))
        return audio

    def _prepare(self, X):
        if self._is_audio(X):
            return [self._audio_to_features(a) for a in X]
        return check_feature_list(X)

    def _targets(self, y):
        seqs = [tokenize(t, self.inventory_) for t in y]
        for t, s in zip(y, seqs):
            if not s:
                raise ValidationError(f"empty target for transcript {t!r}")
        return seqs

    def _speaker_tensor(self, vecs):
        if vecs is None:
            return None
        return torch.as_tensor(np.stack(vecs), dtype=self._dtype())

    def _check_speakers(self, speaker_vectors, n):
        vecs = check_speaker_vectors(speaker_vectors, n)
        if self.speaker_dim_ and vecs is None:
            raise ValidationError("this model was fitted with speaker vectors; pass speaker_vectors")
        if not self.speaker_dim_ and vecs is not None:
            raise ValidationError("this baseline model takes no speaker vectors")
        if vecs is not None and vecs[0].size != self.speaker_dim_:
            raise ValidationError(f"speaker dim {vecs[0].size} != fitted {self.speaker_dim_}")
        return vecs

    # fitting ----------------------------------------------------------------
    def _optimizer_cfg(self):
        if self.optimizer == "adam":
            return OptimizerConfig("adam", self.lr, self.beta1, self.beta2, epsilon=self.eps or 1e-8)
        if self.optimizer == "adadelta":
            return OptimizerConfig.adadelta(self.lr, self.rho, self.eps or 1e-6)
        raise ValidationError(f"unknown optimizer {self.optimizer!r}")

    def _optimizer(self, model):
        return Optimizer([(model.parameters(), self._optimizer_cfg())])

    def _schedule(self):
        return ScheduleConfig(self.schedule, self.warmup_steps, self.lr, self.anneal_factor,
                              self.improvement_threshold)

    def fit(self, X, y, speaker_vectors=None, X_valid=None, y_valid=None, speaker_vectors_valid=None):
        y = list(y)
        if len(X) != len(y):
            raise ValidationError(f"{len(X)} inputs but {len(y)} transcripts")
        self.inventory_ = self.inventory if self.inventory is not None else build_char_inventory(y)
        vecs = check_speaker_vectors(speaker_vectors, len(y))
        self.speaker_dim_ = 0 if vecs is None else vecs[0].size
        audio_in = self._is_audio(X)
        feats = self._model_inputs(X)
        self.input_dim_ = self._input_dim(feats)
        targets = self._targets(y)
        torch.manual_seed(self.seed)
        self.model_ = self._build_model().to(self._dtype())
        items = [
            {"x": f, "y": t, "spk": None if vecs is None else vecs[i]}
            for i, (f, t) in enumerate(zip(feats, targets))
        ]
        augment = None
        if audio_in and (self.speed_factors or self.mask_policy is not None):
            def augment(i, epoch):
                a = self._augment_audio(X[i], i, epoch)
                return dict(items[i], x=self._model_inputs([a])[0])

        validate = None
        if X_valid is not None:
            valid_in = self._model_inputs(X_valid)
            vvecs = self._check_speakers(speaker_vectors_valid, len(X_valid))
            ref = list(y_valid)

            def validate(model):
                return corpus_wer(ref, self._fast_decode(valid_in, vvecs))

        cfg = TrainConfig(self.epochs, self.max_steps, self.batch_size, self.accum_factor,
                          self.log_every, 1, self.seed)
        opt = self._optimizer(self.model_)

        def on_epoch(epoch, step, metrics):
            if self.checkpoint_dir:
                self.save(checkpoint_path(self.checkpoint_dir, epoch), optimizer=opt,
                          extra={"epoch": epoch, "step": step})

        self.metrics_ = train_loop(self.model_, items, self._loss, opt, self._schedule(), cfg,
                                   validate=validate, augment=augment, on_epoch=on_epoch)
        return self

    # prediction -------------------------------------------------------------
    def predict(self, X, speaker_vectors=None):
        check_is_fitted(self, "model_")
        inputs = self._model_inputs(X)
        vecs = self._check_speakers(speaker_vectors, len(inputs))
        return [detokenize(t, self.inventory_) for t in self._decode_tokens(inputs, vecs)]

    def score(self, X, y, speaker_vectors=None):
        """Negative corpus WER in percent (higher is better)."""
        return -corpus_wer(list(y), self.predict(X, speaker_vectors))

    # persistence ------------------------------------------------------------
    def save(self, path, optimizer=None, extra=None):
        check_is_fitted(self, "model_")
        names = {id(p): n for n, p in self.model_.named_parameters()}
        meta = {
            "class": type(self).__name__,
            # where snapshots went is not part of the model
            "params": {k: _jsonable(None if k == "checkpoint_dir" else v)
                       for k, v in self.get_params(deep=False).items()},
            "inventory": _jsonable(self.inventory_),
            "input_dim": self.input_dim_,
            "speaker_dim": self.speaker_dim_,
            **(extra or {}),
        }
        opt_state = {}
        if optimizer is not None:
            opt_state = optimizer.named_state(names)
            meta["optimizer_steps"] = optimizer.steps
        save_checkpoint(path, self.model_.state_dict(), opt_state, meta)

    def _restore(self, tensors, meta):
        self.inventory_ = _from_json(meta["inventory"])
        self.input_dim_ = meta["input_dim"]
        self.speaker_dim_ = meta["speaker_dim"]
        self.variant_ = meta.get("variant", "xvector" if self.speaker_dim_ else "baseline")
        self.model_ = self._build_model().to(self._dtype())
        self.model_.load_state_dict(tensors)
        self.model_.eval()
        return self


class W2v2SpeakerASR(_SpeakerASRBase):
    """Frame-local CTC head on top of frozen (or fine-tuned) extractor features.

    Speaker prototypes are concatenated to every extractor frame before the
    first of three linear/batch-norm/leakyReLU/dropout blocks. Decoding is the
    CTC best path.
    """

    def __init__(self, inventory=None, hidden_dim=1024, dropout=0.1, frontend="frozen",
                 extractor_dim=1024, extractor_channels=128, extractor_seed=0, extractor_trainable=False,
                 extractor_lr=1e-3, optimizer="adadelta", lr=1.0, beta1=0.9, beta2=0.99, rho=0.95, eps=None,
                 schedule="validation_anneal", warmup_steps=25000, anneal_factor=0.8,
                 improvement_threshold=0.0025, epochs=30, max_steps=None, batch_size=6, accum_factor=1,
                 speed_factors=(), mask_policy=None, log_every=10, seed=0, dtype="float32",
                 checkpoint_dir=None):
        self.inventory = inventory
        self.hidden_dim = hidden_dim
        self.dropout = dropout
        self.frontend = frontend
        self.extractor_dim = extractor_dim
        self.extractor_channels = extractor_channels
        self.extractor_seed = extractor_seed
        self.extractor_trainable = extractor_trainable
        self.extractor_lr = extractor_lr
        self.optimizer = optimizer
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.rho = rho
        self.eps = eps
        self.schedule = schedule
        self.warmup_steps = warmup_steps
        self.anneal_factor = anneal_factor
        self.improvement_threshold = improvement_threshold
        self.epochs = epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.accum_factor = accum_factor
        self.speed_factors = speed_factors
        self.mask_policy = mask_policy
        self.log_every = log_every
        self.seed = seed
        self.dtype = dtype
        self.checkpoint_dir = checkpoint_dir

    def _extractor_cfg(self):
        return FrozenExtractorConfig(self.extractor_dim, self.extractor_channels,
                                     self.extractor_trainable, self.extractor_seed)

    def _audio_to_features(self, audio):
        if self.frontend == "mel":
            return mel_filterbank(audio).values
        return toy_frozen_extract(audio, FrozenExtractorConfig(self.extractor_dim, self.extractor_channels,
                                                               False, self.extractor_seed)).values

    def _model_inputs(self, X):
        if self.extractor_trainable:
            if not self._is_audio(X):
                raise ValidationError("a trainable extractor needs raw audio input")
            return [a.samples[:, None] for a in X]
        return self._prepare(X)

    def _input_dim(self, feats):
        return self.extractor_dim if self.extractor_trainable else feats[0].shape[1]

    def _build_model(self):
        cfg = W2v2DownstreamConfig(
            vocab=len(self.inventory_), input_dim=self.input_dim_, speaker_dim=self.speaker_dim_,
            hidden_dim=self.hidden_dim, dropout=self.dropout,
            extractor=self._extractor_cfg() if self.extractor_trainable else None,
        )
        return W2v2Downstream(cfg, seed=self.seed)

    def _optimizer(self, model):
        head_cfg = self._optimizer_cfg()
        if model.extractor is None:
            return Optimizer([(model.parameters(), head_cfg)])
        ext = set(id(p) for p in model.extractor.parameters())
        head = [p for p in model.parameters() if id(p) not in ext]
        adam = OptimizerConfig("adam", self.extractor_lr, 0.9, 0.99)
        return Optimizer([(model.extractor.parameters(), adam), (head, head_cfg)])

    def _forward(self, model, xs, vecs):
        x, lengths = pad_batch(xs, self._dtype())
        if self.extractor_trainable:
            x = x[..., 0]
        elif vecs is not None:
            x = torch.cat([x, torch.as_tensor(np.stack(vecs), dtype=x.dtype)[:, None, :].expand(-1, x.shape[1], -1)], -1)
        spk = self._speaker_tensor(vecs) if self.extractor_trainable else None
        return model(x, lengths, spk)

    def _loss(self, model, batch):
        vecs = None if batch[0]["spk"] is None else [b["spk"] for b in batch]
        lp, lengths = self._forward(model, [b["x"] for b in batch], vecs)
        return ctc_loss(lp, [b["y"] for b in batch], self.inventory_.blank_index, lengths, "sum")

    def predict_log_proba(self, X, speaker_vectors=None):
        check_is_fitted(self, "model_")
        inputs = self._model_inputs(X)
        vecs = self._check_speakers(speaker_vectors, len(inputs))
        self.model_.eval()
        out = []
        with torch.no_grad():
            for i, x in enumerate(inputs):
                lp, lengths = self._forward(self.model_, [x], None if vecs is None else [vecs[i]])
                out.append(lp[0, : int(lengths[0])].double().numpy())
        return out

    def _decode_tokens(self, inputs, vecs):
        self.model_.eval()
        out = []
        with torch.no_grad():
            for i, x in enumerate(inputs):
                lp, lengths = self._forward(self.model_, [x], None if vecs is None else [vecs[i]])
                out.append(ctc_greedy(lp[0, : int(lengths[0])].numpy(), self.inventory_.blank_index))
        return out

    def _fast_decode(self, inputs, vecs):
        was_training = self.model_.training
        toks = self._decode_tokens(inputs, vecs)
        self.model_.train(was_training)
        return [detokenize(t, self.inventory_) for t in toks]


class TransformerSpeakerASR(_SpeakerASRBase):
    """CNN frontend + transformer encoder/decoder trained on CTC + label-smoothed KL.

    ``injection`` selects where speaker prototypes enter: after the CNN
    frontend (``"frontend"``), at the output linear layers after the
    transformer (``"post_encoder"``), or nowhere (``"none"``). Prediction runs
    joint CTC/attention beam search with optional shallow fusion of ``lm``.
    """

    def __init__(self, inventory=None, d_model=256, n_enc=12, n_dec=6, n_heads=4, d_ff=1024,
                 cnn_channels=None, dropout=0.1, injection="frontend", ctc_weight=0.3, label_smoothing=0.1,
                 frontend="mel", n_mels=80, normalize=False, optimizer="adam", lr=1e-3, beta1=0.9, beta2=0.98,
                 rho=0.95, eps=None, schedule="noam", warmup_steps=25000, anneal_factor=0.8,
                 improvement_threshold=0.0025, epochs=60, max_steps=None, batch_size=16, accum_factor=3,
                 speed_factors=(), mask_policy=None, beam=60, lm=None, lm_weight=0.6, ctc_decode_weight=0.3,
                 max_len_ratio=1.5, log_every=10, seed=0, dtype="float32", checkpoint_dir=None):
        self.inventory = inventory
        self.d_model = d_model
        self.n_enc = n_enc
        self.n_dec = n_dec
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.cnn_channels = cnn_channels
        self.dropout = dropout
        self.injection = injection
        self.ctc_weight = ctc_weight
        self.label_smoothing = label_smoothing
        self.frontend = frontend
        self.n_mels = n_mels
        self.normalize = normalize
        self.optimizer = optimizer
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.rho = rho
        self.eps = eps
        self.schedule = schedule
        self.warmup_steps = warmup_steps
        self.anneal_factor = anneal_factor
        self.improvement_threshold = improvement_threshold
        self.epochs = epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.accum_factor = accum_factor
        self.speed_factors = speed_factors
        self.mask_policy = mask_policy
        self.beam = beam
        self.lm = lm
        self.lm_weight = lm_weight
        self.ctc_decode_weight = ctc_decode_weight
        self.max_len_ratio = max_len_ratio
        self.log_every = log_every
        self.seed = seed
        self.dtype = dtype
        self.checkpoint_dir = checkpoint_dir

    def _audio_to_features(self, audio):
        fm = mel_filterbank(audio, self.n_mels)
        return (cmvn(fm) if self.normalize else fm).values

    def _model_inputs(self, X):
        return self._prepare(X)

    def _input_dim(self, feats):
        return feats[0].shape[1]

    def _config(self):
        return TransformerAsrConfig(
            vocab=len(self.inventory_), input_dim=self.input_dim_, speaker_dim=self.speaker_dim_,
            d_model=self.d_model, n_enc=self.n_enc, n_dec=self.n_dec, n_heads=self.n_heads, d_ff=self.d_ff,
            cnn_channels=None if self.cnn_channels is None else tuple(self.cnn_channels),
            dropout=self.dropout, ctc_weight_train=self.ctc_weight,
            injection=self.injection if self.speaker_dim_ else "none",
        )

    def _build_model(self):
        return TransformerAsr(self._config(), seed=self.seed)

    def _loss(self, model, batch):
        inv = self.inventory_
        x, lengths = pad_batch([b["x"] for b in batch], self._dtype())
        spk = None if batch[0]["spk"] is None else self._speaker_tensor([b["spk"] for b in batch])
        dec_in = pad_tokens([[inv.bos_index, *b["y"]] for b in batch], inv.eos_index)
        dec_out = pad_tokens([[*b["y"], inv.eos_index] for b in batch], -1)
        ctc, enc_lengths, dec = model(x, lengths, dec_in, spk)
        l_ctc = ctc_loss(ctc, [b["y"] for b in batch], inv.blank_index, enc_lengths, "sum")
        l_kl = kl_smoothed_loss(dec, dec_out, self.label_smoothing, ignore_index=-1, reduction="sum")
        return joint_loss(l_ctc, l_kl, self.ctc_weight)

    def _lm_module(self):
        if self.lm is None:
            return None
        return getattr(self.lm, "model_", self.lm)

    def decode_hypotheses(self, X, speaker_vectors=None):
        """Full :class:`~spkadapt.decode.Hypothesis` objects from joint beam search."""
        check_is_fitted(self, "model_")
        inputs = self._model_inputs(X)
        vecs = self._check_speakers(speaker_vectors, len(inputs))
        inv = self.inventory_
        self.model_.eval()
        lm = self._lm_module()
        out = []
        for i, x in enumerate(inputs):
            n_enc = int(self.model_.frontend.output_lengths([x.shape[0]])[0])
            out.append(joint_beam_search(
                self.model_, lm, x, None if vecs is None else vecs[i], self.beam, self.lm_weight,
                self.ctc_decode_weight, max_len=max(1, int(np.ceil(self.max_len_ratio * n_enc))),
                bos=inv.bos_index, eos=inv.eos_index, blank=inv.blank_index,
            ))
        return out

    def _decode_tokens(self, inputs, vecs):
        hyps = self.decode_hypotheses(inputs, vecs)
        return [[t for t in h.tokens if t != self.inventory_.eos_index] for h in hyps]

    def _fast_decode(self, inputs, vecs):
        was_training = self.model_.training
        self.model_.eval()
        out = []
        with torch.no_grad():
            for i, x in enumerate(inputs):
                xt = torch.as_tensor(x, dtype=self._dtype())[None]
                spk = None if vecs is None else self._speaker_tensor([vecs[i]])
                _, _, ctc = self.model_.encode(xt, [x.shape[0]], spk)
                out.append(detokenize(ctc_greedy(ctc[0].numpy(), self.inventory_.blank_index), self.inventory_))
        self.model_.train(was_training)
        return out


class TransformerLanguageModel(BaseEstimator):
    """Causal transformer LM over the ASR token inventory, used for shallow fusion."""

    def __init__(self, inventory=None, d_model=264, d_ff=1024, n_blocks=12, n_heads=12, dropout=0.1,
                 lr=1e-3, epochs=10, batch_size=16, log_every=10, seed=0, dtype="float32"):
        self.inventory = inventory
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.dropout = dropout
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.log_every = log_every
        self.seed = seed
        self.dtype = dtype

    def _build(self):
        cfg = TransformerLmConfig(len(self.inventory_), self.d_model, self.d_ff, self.n_blocks,
                                  self.n_heads, self.dropout)
        return TransformerLm(cfg, seed=self.seed).to(_DTYPES[self.dtype])

    def fit(self, texts, y=None):
        texts = list(texts)
        self.inventory_ = self.inventory if self.inventory is not None else build_char_inventory(texts)
        inv = self.inventory_
        self.model_ = self._build()
        items = [tokenize(t, inv) for t in texts]

        def loss_fn(model, batch):
            inp = pad_tokens([[inv.bos_index, *s] for s in batch], inv.eos_index)
            out = pad_tokens([[*s, inv.eos_index] for s in batch], -1)
            return kl_smoothed_loss(model(inp), out, 0.0, ignore_index=-1, reduction="sum")

        opt = Optimizer([(self.model_.parameters(), OptimizerConfig("adam", self.lr, 0.9, 0.98))])
        cfg = TrainConfig(self.epochs, None, self.batch_size, 1, self.log_every, 1, self.seed)
        self.metrics_ = train_loop(self.model_, items, loss_fn, opt, ScheduleConfig("constant"), cfg)
        return self

    def score_text(self, text):
        """Log-probability of ``text`` followed by EOS."""
        check_is_fitted(self, "model_")
        inv = self.inventory_
        toks = tokenize(text, inv)
        with torch.no_grad():
            lp = self.model_(torch.as_tensor([[inv.bos_index, *toks]]))[0].double()
        return float(sum(lp[i, t] for i, t in enumerate([*toks, inv.eos_index])))

    def save(self, path, extra=None):
        check_is_fitted(self, "model_")
        meta = {
            "class": type(self).__name__,
            "params": {k: _jsonable(v) for k, v in self.get_params(deep=False).items()},
            "inventory": _jsonable(self.inventory_),
            **(extra or {}),
        }
        save_checkpoint(path, self.model_.state_dict(), meta=meta)

    def _restore(self, tensors, meta):
        self.inventory_ = _from_json(meta["inventory"])
        self.model_ = self._build()
        self.model_.load_state_dict(tensors)
        self.model_.eval()
        return self


_ESTIMATORS = {c.__name__: c for c in (W2v2SpeakerASR, TransformerSpeakerASR, TransformerLanguageModel)}


def load_estimator(path):
    """Rebuild a fitted estimator from a checkpoint written by ``save``."""
    tensors, _, meta = load_checkpoint(path)
    cls = _ESTIMATORS.get(meta.get("class"))
    if cls is None:
        raise ValidationError(f"{path}: unknown estimator class {meta.get('class')!r}")
    params = {k: _from_json(v) for k, v in meta["params"].items()}
    est = cls(**params)
    return est._restore(tensors, meta)


def metrics_of(estimator):
    check_is_fitted(estimator, "metrics_")
    return estimator.metrics_ if isinstance(estimator.metrics_, MetricsLog) else MetricsLog(estimator.metrics_)
