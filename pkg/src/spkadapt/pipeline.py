"""Glue between a :class:`RunConfig` and the estimators, embedders and grid."""

from ._validation import ValidationError
from .estimators import TransformerLanguageModel, TransformerSpeakerASR, W2v2SpeakerASR
from .signal import MaskPolicy
from .speaker import ToyEmbedder, oracle_onehot_embeddings

# train-time variant name -> embedding kind (None: no speaker input)
VARIANT_KINDS = {"baseline": None, "ecapa": "ecapa", "xvector": "xvector", "oracle": "oracle_onehot",
                 "oracle_onehot": "oracle_onehot"}


def report_variant(variant):
    """Map a training variant name onto the report's column name."""
    if variant not in VARIANT_KINDS:
        raise ValidationError(f"unknown variant {variant!r}; choose from {sorted(VARIANT_KINDS)}")
    return "oracle_onehot" if variant == "oracle" else variant


def _augmentation(cfg):
    aug = cfg["augmentation"]
    speeds = tuple(float(s) for s in aug["speed_factors"] or ())
    if all(s == 1.0 for s in speeds):
        speeds = ()
    mask = None
    if aug["time_mask"]:
        mask = MaskPolicy(aug["mask_min_chunks"], aug["mask_max_chunks"], aug["mask_min_len"], aug["mask_max_len"])
    return speeds, mask


def estimator_from_config(cfg, inventory=None, checkpoint_dir=None):
    m, o, s, f, d = cfg["model"], cfg["optimizer"], cfg["schedule"], cfg["features"], cfg["decode"]
    speeds, mask = _augmentation(cfg)
    common = dict(
        inventory=inventory, dropout=m["dropout"], optimizer=o["kind"], lr=o["lr"], beta1=o["beta1"],
        beta2=o["beta2"], rho=o["rho"], eps=o["epsilon"], schedule=s["kind"], warmup_steps=s["warmup_steps"],
        anneal_factor=s["anneal_factor"], improvement_threshold=s["improvement_threshold"], epochs=s["epochs"],
        max_steps=s["max_steps"], batch_size=s["batch_size"], accum_factor=s["accum_factor"],
        speed_factors=speeds, mask_policy=mask, log_every=s["log_every"], seed=cfg.seed, dtype=m["dtype"],
        checkpoint_dir=checkpoint_dir,
    )
    if m["arch"] == "w2v2":
        return W2v2SpeakerASR(
            hidden_dim=m["hidden_dim"], frontend=f["frontend"], extractor_dim=f["extractor_dim"],
            extractor_channels=f["extractor_channels"], extractor_seed=f["extractor_seed"],
            extractor_trainable=f["extractor_trainable"], extractor_lr=o["extractor_lr"], **common,
        )
    return TransformerSpeakerASR(
        d_model=m["d_model"], n_enc=m["n_enc"], n_dec=m["n_dec"], n_heads=m["n_heads"], d_ff=m["d_ff"],
        injection=m["injection"], ctc_weight=m["ctc_weight"], label_smoothing=m["label_smoothing"],
        n_mels=f["n_mels"], normalize=f["normalize"], beam=d["beam"], lm_weight=d["lm_weight"],
        ctc_decode_weight=d["ctc_decode_weight"], max_len_ratio=d["max_len_ratio"], **common,
    )


def lm_from_config(cfg, inventory=None):
    m, s = cfg["model"], cfg["schedule"]
    return TransformerLanguageModel(
        inventory=inventory, d_model=m["lm_d_model"], d_ff=m["lm_d_ff"], n_blocks=m["lm_blocks"],
        n_heads=m["lm_heads"], dropout=m["dropout"], epochs=s["epochs"], batch_size=s["batch_size"],
        log_every=s["log_every"], seed=cfg.seed, dtype=m["dtype"],
    )


def embed_corpus(data, kind, seed=0):
    """Utterance embeddings for ``[(record, audio), ...]`` as ``{utt_id: SpeakerEmbedding}``."""
    if kind == "oracle_onehot":
        return oracle_onehot_embeddings([r for r, _ in data])
    embedder = ToyEmbedder(kind, seed)
    return {r.utt_id: embedder.embed(r.utt_id, a) for r, a in data}
