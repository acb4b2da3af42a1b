"""Speaker embeddings, per-speaker prototypes and frame-wise concatenation."""

from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, check_vector
from .features import FeatureMatrix, mel_filterbank

EMBEDDING_KINDS = ("xvector", "ecapa", "oracle_onehot", "other")
SCALINGS = ("minmax01", "none", "zscore")


@dataclass(eq=False)
class SpeakerEmbedding:
    utt_id: str
    vector: np.ndarray
    kind: str = "other"

    def __post_init__(self):
        self.vector = check_vector(self.vector, name=f"embedding[{self.utt_id}]")
        if self.kind not in EMBEDDING_KINDS:
            raise ValidationError(f"unknown embedding kind {self.kind!r}")

    @property
    def dim(self):
        return self.vector.size


@dataclass(eq=False)
class SpeakerPrototype:
    speaker_id: str
    vector: np.ndarray
    n_pooled: int
    scaling: str = "minmax01"

    def __post_init__(self):
        self.vector = check_vector(self.vector, name=f"prototype[{self.speaker_id}]")
        if self.n_pooled < 1:
            raise ValidationError("a prototype pools at least one utterance")
        if self.scaling not in SCALINGS:
            raise ValidationError(f"unknown scaling {self.scaling!r}")

    @property
    def dim(self):
        return self.vector.size


def load_embeddings(path, kind="other"):
    """Read ``utt_id v1 v2 ...`` rows into an ordered ``{utt_id: SpeakerEmbedding}``."""
    out = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            utt_id, *vals = line.split()
            try:
                vec = np.array([float(v) for v in vals])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: non-numeric component") from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValidationError(f"{path}:{lineno}: dim {vec.size} differs from {dim}")
            if utt_id in out:
                raise ValidationError(f"{path}:{lineno}: duplicate utt_id {utt_id!r}")
            out[utt_id] = SpeakerEmbedding(utt_id, vec, kind)
    return out


def save_embeddings(path, embeddings, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for emb in embeddings.values():
            fh.write(emb.utt_id + " " + " ".join(repr(float(v)) for v in emb.vector) + "\n")


def minmax_scale(vector):
    """Map components onto [0, 1]; a constant vector maps to all 0.5."""
    v = check_vector(vector)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full_like(v, 0.5)
    return (v - lo) / (hi - lo)


def zscore_scale(vector):
    v = check_vector(vector)
    sd = v.std()
    return np.zeros_like(v) if sd == 0 else (v - v.mean()) / sd


def apply_scaling(vector, scaling):
    if scaling == "minmax01":
        return minmax_scale(vector)
    if scaling == "zscore":
        return zscore_scale(vector)
    if scaling == "none":
        return check_vector(vector).copy()
    raise ValidationError(f"unknown scaling {scaling!r}")


def speaker_prototype(embeddings, manifest, scaling="minmax01", scale_stage="prototype"):
    """Average each speaker's utterance embeddings into one prototype.

    ``scale_stage="prototype"`` scales the pooled mean; ``"utterance"`` scales
    every utterance vector before pooling.
    """
    if scale_stage not in ("prototype", "utterance"):
        raise ValidationError(f"unknown scale_stage {scale_stage!r}")
    pooled = {}
    for rec in manifest:
        if rec.utt_id not in embeddings:
            raise ValidationError(f"no embedding for utterance {rec.utt_id!r}")
        vec = embeddings[rec.utt_id].vector
        if scale_stage == "utterance":
            vec = apply_scaling(vec, scaling)
        pooled.setdefault(rec.speaker_id, []).append(vec)
    dims = {v.size for vs in pooled.values() for v in vs}
    if len(dims) > 1:
        raise ValidationError(f"inconsistent embedding dims {sorted(dims)}")
    protos = {}
    for spk, vecs in pooled.items():
        mean = np.mean(np.stack(vecs), axis=0)
        if scale_stage == "prototype":
            mean = apply_scaling(mean, scaling)
        protos[spk] = SpeakerPrototype(spk, mean, len(vecs), scaling)
    return protos


class PrototypeTable:
    """Prototype lookup with a global-mean fallback for unseen speakers."""

    def __init__(self, prototypes, fallback):
        self.prototypes = dict(prototypes)
        self.fallback = fallback

    @classmethod
    def from_embeddings(cls, embeddings, manifest, scaling="minmax01", scale_stage="prototype"):
        protos = speaker_prototype(embeddings, manifest, scaling, scale_stage)
        everything = [embeddings[r.utt_id].vector for r in manifest]
        if scale_stage == "utterance":
            everything = [apply_scaling(v, scaling) for v in everything]
        mean = np.mean(np.stack(everything), axis=0)
        if scale_stage == "prototype":
            mean = apply_scaling(mean, scaling)
        return cls(protos, SpeakerPrototype("<global>", mean, len(everything), scaling))

    def __getitem__(self, speaker_id):
        return self.prototypes.get(speaker_id, self.fallback)

    def __contains__(self, speaker_id):
        return speaker_id in self.prototypes

    @property
    def dim(self):
        return self.fallback.dim


def save_prototypes(path, table, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for p in [*table.prototypes.values(), table.fallback]:
            vals = " ".join(repr(float(v)) for v in p.vector)
            fh.write(f"{p.speaker_id} {p.n_pooled} {p.scaling} {vals}\n")


def load_prototypes(path):
    protos, fallback = {}, None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            spk, n, scaling, *vals = line.split()
            p = SpeakerPrototype(spk, np.array([float(v) for v in vals]), int(n), scaling)
            if spk == "<global>":
                fallback = p
            else:
                protos[spk] = p
    if fallback is None:
        raise ValidationError(f"{path}: missing <global> fallback prototype")
    return PrototypeTable(protos, fallback)


def concat_speaker(features, prototype):
    """Append the prototype to every frame: T x D -> T x (D + E)."""
    vec = prototype.vector if isinstance(prototype, SpeakerPrototype) else check_vector(prototype)
    v = features.values
    tiled = np.broadcast_to(vec.astype(v.dtype), (v.shape[0], vec.size))
    return FeatureMatrix(np.concatenate([v, tiled], axis=1), features.frame_shift_s, features.origin)


def oracle_onehot_embeddings(manifest):
    """One-hot speaker identity per utterance, speakers indexed in sorted order."""
    speakers = sorted({r.speaker_id for r in manifest})
    index = {s: i for i, s in enumerate(speakers)}
    out = {}
    for r in manifest:
        v = np.zeros(len(speakers))
        v[index[r.speaker_id]] = 1.0
        out[r.utt_id] = SpeakerEmbedding(r.utt_id, v, "oracle_onehot")
    return out


class ToyEmbedder:
    """Untrained stand-in for an x-vector / ECAPA extractor.

    Statistics pooling (mean and std) over 24-dim log-mel frames followed by a
    fixed seeded projection. Carries real speaker signal on the toy corpus but
    is not a trained speaker model.
    """

    DIMS = {"xvector": 512, "ecapa": 192}

    def __init__(self, kind="xvector", seed=0, n_mels=24):
        if kind not in self.DIMS:
            raise ValidationError(f"toy embedder supports {sorted(self.DIMS)}, got {kind!r}")
        self.kind = kind
        self.n_mels = n_mels
        rng = np.random.default_rng([seed, self.DIMS[kind]])
        self.projection = rng.standard_normal((self.DIMS[kind], 2 * n_mels)) / np.sqrt(2 * n_mels)

    def embed(self, utt_id, audio):
        fb = mel_filterbank(audio, n_mels=self.n_mels).values
        stats = np.concatenate([fb.mean(axis=0), fb.std(axis=0)])
        return SpeakerEmbedding(utt_id, np.tanh(self.projection @ stats / 10.0), self.kind)
