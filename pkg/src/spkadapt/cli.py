"""Command-line entry point: ``spkadapt <subcommand> [options]``.

Exit status is 0 on success, 1 on validation/runtime errors and 2 on usage errors.
"""

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from ._validation import ValidationError
from .config import resolve_config
from .corpus import (
    UtteranceRecord,
    build_char_inventory,
    detokenize,
    load_corpus,
    load_inventory,
    load_manifest,
    save_inventory,
    synth_toy_corpus,
    write_manifest,
)
from .decode import ctc_greedy
from .estimators import NoiseAugmenter, TransformerSpeakerASR, load_estimator
from .evaluation import GridVariant, corpus_wer, parse_report, render_report, run_grid
from .features import FrozenExtractorConfig, cmvn, mel_filterbank, toy_frozen_extract, write_feature_cache
from .neural.layers import NonFiniteError
from .pipeline import VARIANT_KINDS, embed_corpus, estimator_from_config, lm_from_config, report_variant
from .signal import DomainError, read_wav, write_wav
from .speaker import PrototypeTable, load_embeddings, load_prototypes, save_embeddings, save_prototypes

log = logging.getLogger("spkadapt")


def _pmap(fn, items, jobs):
    """Order-preserving map; results do not depend on ``jobs``."""
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(fn, items))


def _write_text(path, text, cfg):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(f"# {cfg.provenance()}\n{text}", encoding="utf-8")


def _sidecar(directory, cfg, what):
    Path(directory).mkdir(parents=True, exist_ok=True)
    (Path(directory) / "PROVENANCE").write_text(f"{cfg.provenance()}\n{what}\n", encoding="utf-8")


def _load(cfg, manifest):
    return load_corpus(manifest, cfg["corpus"]["rate_hz"])


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]


def _kv_pairs(items, flag):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ValidationError(f"{flag} expects name=path, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


# -- subcommands ----------------------------------------------------------------

def cmd_synth(cfg, args):
    c = cfg["corpus"]
    out = Path(args.out)
    train = synth_toy_corpus(out / "train", c["n_speakers"], c["utts_per_speaker"], c["toy_seed"], c["rate_hz"],
                             header=cfg.provenance())
    test = synth_toy_corpus(out / "test", c["n_speakers"], c["test_utts_per_speaker"], c["toy_seed"], c["rate_hz"],
                            utterance_seed=c["test_seed"], header=cfg.provenance())
    _sidecar(out / "train" / "wav", cfg, "synthetic toy corpus audio")
    _sidecar(out / "test" / "wav", cfg, "synthetic toy corpus audio")
    save_inventory(out / "tokens.txt", build_char_inventory([r.transcript for r in train]), header=cfg.provenance())
    print(f"wrote {len(train)} train and {len(test)} test utterances to {out}")


def cmd_augment(cfg, args):
    data = _load(cfg, args.manifest)
    out = Path(args.out)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    aug = NoiseAugmenter(args.snr, args.noise or cfg["augmentation"]["noise"], cfg.seed)
    mixed = _pmap(lambda ra: aug.transform([ra[1]], keys=[ra[0].utt_id])[0], data, args.jobs)
    records = []
    for (r, _), audio in zip(data, mixed):
        rel = f"wav/{r.utt_id}.wav"
        write_wav(out / rel, audio)
        records.append(UtteranceRecord(r.utt_id, r.speaker_id, rel, r.transcript, audio.duration_s))
    write_manifest(out / "manifest.txt", records, header=f"{cfg.provenance()} snr={args.snr}")
    _sidecar(out / "wav", cfg, f"noise mixed at {args.snr} dB")
    print(f"wrote {len(records)} utterances at {args.snr} dB SNR to {out}")


def cmd_features(cfg, args):
    f = cfg["features"]
    data = _load(cfg, args.manifest)
    ecfg = FrozenExtractorConfig(f["extractor_dim"], f["extractor_channels"], False, f["extractor_seed"])

    def one(item):
        r, audio = item
        if f["frontend"] == "mel":
            fm = mel_filterbank(audio, f["n_mels"], f["win_s"], f["hop_s"])
            return cmvn(fm) if f["normalize"] else fm
        return toy_frozen_extract(audio, ecfg)

    feats = _pmap(one, data, args.jobs)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    for (r, _), fm in zip(data, feats):
        write_feature_cache(args.out, r.utt_id, fm)
    _sidecar(args.out, cfg, f"{f['frontend']} features")
    print(f"wrote {len(feats)} feature files to {args.out}")


def cmd_embed(cfg, args):
    data = _load(cfg, args.manifest)
    kind = "oracle_onehot" if args.kind == "oracle" else args.kind
    emb = embed_corpus(data, kind, cfg["speaker"]["embed_seed"])
    save_embeddings(args.out, emb, header=f"{cfg.provenance()} kind={kind}")
    print(f"wrote {len(emb)} {kind} embeddings to {args.out}")


def cmd_prototypes(cfg, args):
    manifest = load_manifest(args.manifest)
    emb = load_embeddings(args.embeddings)
    table = PrototypeTable.from_embeddings(emb, manifest, cfg["speaker"]["scaling"], cfg["speaker"]["scale_stage"])
    save_prototypes(args.out, table, header=cfg.provenance())
    print(f"wrote {len(table.prototypes)} prototypes (+ global fallback) to {args.out}")


def _inventory(args, data):
    if args.inventory:
        return load_inventory(args.inventory)
    return build_char_inventory([r.transcript for r, _ in data])


def _speaker_vectors(variant, prototypes_path, records):
    if VARIANT_KINDS[variant] is None:
        return None, None
    if not prototypes_path:
        raise ValidationError(f"variant {variant!r} needs --prototypes")
    table = load_prototypes(prototypes_path)
    return table, [table[r.speaker_id].vector for r in records]


def cmd_train(cfg, args):
    report_variant(args.variant)
    data = _load(cfg, args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inv = _inventory(args, data)
    est = estimator_from_config(cfg, inv, checkpoint_dir=out / "checkpoints")
    _, vecs = _speaker_vectors(args.variant, args.prototypes, [r for r, _ in data])
    valid = {}
    if args.valid:
        vdata = _load(cfg, args.valid)
        _, vvecs = _speaker_vectors(args.variant, args.prototypes, [r for r, _ in vdata])
        valid = dict(X_valid=[a for _, a in vdata], y_valid=[r.transcript for r, _ in vdata],
                     speaker_vectors_valid=vvecs)
    est.fit([a for _, a in data], [r.transcript for r, _ in data], speaker_vectors=vecs, **valid)
    if (out / "checkpoints").is_dir():
        _sidecar(out / "checkpoints", cfg, f"{args.variant} epoch snapshots")
    est.save(out / "model.ckpt", extra={"provenance": cfg.provenance(), "variant": args.variant,
                                        "config": cfg.to_text()})
    est.metrics_.write(out / "metrics.log", header=cfg.provenance())
    print(f"trained {args.variant} {cfg['model']['arch']} model -> {out / 'model.ckpt'}")


def cmd_train_lm(cfg, args):
    texts = [r.transcript for r in load_manifest(args.manifest)]
    inv = load_inventory(args.inventory) if args.inventory else None
    lm = lm_from_config(cfg, inv).fit(texts)
    lm.save(args.out, extra={"provenance": cfg.provenance()})
    print(f"trained language model on {len(texts)} transcripts -> {args.out}")


def _load_model(path, cfg, lm_path=None):
    est = load_estimator(path)
    if hasattr(est, "beam"):
        d = cfg["decode"]
        est.set_params(beam=d["beam"], lm_weight=d["lm_weight"], ctc_decode_weight=d["ctc_decode_weight"],
                       max_len_ratio=d["max_len_ratio"])
        if lm_path:
            est.set_params(lm=load_estimator(lm_path))
    return est


def cmd_decode(cfg, args):
    data = _load(cfg, args.manifest)
    est = _load_model(args.model, cfg, args.lm)
    records = [r for r, _ in data]
    vecs = None
    if est.speaker_dim_:
        _, vecs = _speaker_vectors(est.variant_, args.prototypes, records)
    audio = [a for _, a in data]

    def one(i):
        v = None if vecs is None else [vecs[i]]
        if isinstance(est, TransformerSpeakerASR):
            h = est.decode_hypotheses([audio[i]], v)[0]
            toks = [t for t in h.tokens if t != est.inventory_.eos_index]
            return detokenize(toks, est.inventory_), h.total
        lp = est.predict_log_proba([audio[i]], v)[0]
        # score of the best path the greedy decoder follows
        return detokenize(ctc_greedy(lp, est.inventory_.blank_index), est.inventory_), float(lp.max(axis=1).sum())

    results = _pmap(one, range(len(data)), args.jobs)
    lines = [f"{r.utt_id}\t{hyp}\t{score!r}" for r, (hyp, score) in zip(records, results)]
    _write_text(args.out, "\n".join(lines) + "\n", cfg)
    print(f"decoded {len(lines)} utterances -> {args.out}")


def read_hypotheses(path):
    out = {}
    for line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(f"{path}: expected utt_id<TAB>hypothesis<TAB>score, got {line!r}")
        out[parts[0]] = parts[1]
    return out


def cmd_score(cfg, args):
    records = load_manifest(args.manifest)
    hyps = read_hypotheses(args.hyp)
    missing = [r.utt_id for r in records if r.utt_id not in hyps]
    if missing:
        raise ValidationError(f"no hypothesis for {len(missing)} utterances (first: {missing[0]})")
    value = corpus_wer([r.transcript for r in records], [hyps[r.utt_id] for r in records])
    if args.out:
        _write_text(args.out, f"wer {value!r}\n", cfg)
    print(f"WER {value:.2f}")


def cmd_grid(cfg, args):
    models = _kv_pairs(args.model, "--model")
    protos = _kv_pairs(args.prototypes, "--prototypes")
    tests = _kv_pairs(args.test, "--test")
    variants = {}
    for name, path in models.items():
        rv = report_variant(name)
        est = _load_model(path, cfg, args.lm)
        table = None
        if est.speaker_dim_:
            if name not in protos:
                raise ValidationError(f"variant {name!r} needs --prototypes {name}=PATH")
            table = load_prototypes(protos[name])
        variants[rv] = GridVariant(est, table)
    testsets = {name: _load(cfg, path) for name, path in tests.items()}
    noise = args.noise or cfg["augmentation"]["noise"]
    if not noise.startswith("synthetic:"):
        noise = read_wav(noise)
    report = run_grid(variants, testsets, cfg["eval"]["snrs"], noise, cfg.seed, cfg.hash(), jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(render_report(report, "csv"), encoding="utf-8")
    (out / "report.txt").write_text(render_report(report, "table"), encoding="utf-8")
    hashes = [f"{ts}\t{snr}\t{i}\t{h}" for (ts, snr), hs in report.audio_hashes.items() for i, h in enumerate(hs)]
    _write_text(out / "audio_hashes.tsv", "\n".join(hashes) + "\n", cfg)
    sys.stdout.write(render_report(report, "table"))


def cmd_report(cfg, args):
    src = Path(args.grid)
    path = src / "report.csv" if src.is_dir() else src
    report = parse_report(path.read_text(encoding="utf-8"))
    text = render_report(report, args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_selftest(cfg, args):
    from .selftest import run_selftest

    failures = run_selftest(verbose=True)
    if failures:
        raise ValidationError(f"{failures} self-test check(s) failed")


COMMANDS = {
    "synth": cmd_synth, "augment": cmd_augment, "features": cmd_features, "embed": cmd_embed,
    "prototypes": cmd_prototypes, "train": cmd_train, "train-lm": cmd_train_lm, "decode": cmd_decode,
    "score": cmd_score, "grid": cmd_grid, "report": cmd_report, "selftest": cmd_selftest,
}


def build_parser():
    p = argparse.ArgumentParser(prog="spkadapt", description="Speaker-adapted ASR toolkit")
    p.add_argument("--config", default="toy_w2v2", help="config path or name (see $SPKADAPT_CONFIG_DIR)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
    p.add_argument("--jobs", type=int, default=1, help="parallel per-utterance workers")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the synthetic toy corpus (train/, test/, tokens.txt)")
    s.add_argument("--out", required=True)

    s = sub.add_parser("augment", help="mix noise into a manifest at a fixed SNR")
    s.add_argument("--manifest", required=True)
    s.add_argument("--snr", type=float, required=True)
    s.add_argument("--noise", help="noise WAV or synthetic:white|pink|brown")
    s.add_argument("--out", required=True)

    s = sub.add_parser("features", help="write a per-utterance feature cache")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("embed", help="utterance speaker embeddings")
    s.add_argument("--manifest", required=True)
    s.add_argument("--kind", choices=["xvector", "ecapa", "oracle"], required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("prototypes", help="pool embeddings into per-speaker prototypes")
    s.add_argument("--manifest", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train one ASR variant")
    s.add_argument("--manifest", required=True)
    s.add_argument("--valid")
    s.add_argument("--variant", choices=["baseline", "ecapa", "xvector", "oracle"], default="baseline")
    s.add_argument("--prototypes")
    s.add_argument("--inventory")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train-lm", help="train the shallow-fusion language model")
    s.add_argument("--manifest", required=True)
    s.add_argument("--inventory")
    s.add_argument("--out", required=True)

    s = sub.add_parser("decode", help="decode a manifest (utt_id<TAB>hyp<TAB>score)")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--prototypes")
    s.add_argument("--lm")
    s.add_argument("--out", required=True)

    s = sub.add_parser("score", help="WER of a decode file against a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--out")

    s = sub.add_parser("grid", help="variant x SNR evaluation grid")
    s.add_argument("--model", action="append", required=True, metavar="VARIANT=CKPT")
    s.add_argument("--prototypes", action="append", metavar="VARIANT=PATH")
    s.add_argument("--test", action="append", required=True, metavar="NAME=MANIFEST")
    s.add_argument("--noise")
    s.add_argument("--lm")
    s.add_argument("--out", required=True)

    s = sub.add_parser("report", help="render a grid report")
    s.add_argument("--grid", required=True, help="grid directory or report.csv")
    s.add_argument("--format", choices=["table", "csv"], default="table")
    s.add_argument("--out")

    sub.add_parser("selftest", help="run the built-in oracle checks")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        cfg = resolve_config(args.config).apply_overrides(args.set)
        COMMANDS[args.command](cfg, args)
    except (ValidationError, DomainError, NonFiniteError, OSError, KeyError) as exc:
        print(f"spkadapt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
