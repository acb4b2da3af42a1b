"""WER scoring, relative improvements, the variant x noise grid and report rendering."""

import csv
import hashlib
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources

import numpy as np

from ._validation import ValidationError
from .config import tool_version

VARIANTS = ("baseline", "ecapa", "xvector", "oracle_onehot")
SNRS = ("clean", "18", "9", "0")
CSV_HEADER = ("variant", "testset", "snr", "wer", "delta_pct")
VARIANT_TITLES = {"baseline": "Baseline", "ecapa": "ECAPA-TDNN", "xvector": "X-vector", "oracle_onehot": "Oracle"}


class ConfigurationError(ValidationError):
    pass


# -- WER ----------------------------------------------------------------------

def words(text):
    return text.lower().split()


def align_counts(ref, hyp):
    """(substitutions, deletions, insertions) of a minimum-cost alignment.

    Among equal-cost alignments the backtrace prefers a substitution (or
    match), then a deletion, then an insertion.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), dl, ins


def _as_words(x):
    return words(x) if isinstance(x, str) else list(x)


def wer(reference, hypothesis):
    """Word error rate in percent; strings are lowercased and whitespace-split."""
    ref, hyp = _as_words(reference), _as_words(hypothesis)
    if not ref:
        raise ValidationError("reference must contain at least one word")
    return 100.0 * sum(align_counts(ref, hyp)) / len(ref)


def corpus_wer(references, hypotheses):
    """Pooled WER: total errors over total reference words."""
    if len(references) != len(hypotheses):
        raise ValidationError(f"{len(references)} references but {len(hypotheses)} hypotheses")
    errors = n = 0
    for r, h in zip(references, hypotheses):
        ref, hyp = _as_words(r), _as_words(h)
        if not ref:
            raise ValidationError("reference must contain at least one word")
        errors += sum(align_counts(ref, hyp))
        n += len(ref)
    if n == 0:
        raise ValidationError("no references")
    return 100.0 * errors / n


def relative_improvement(base_wer, adapted_wer):
    """(base - adapted) / base * 100 at one decimal, halves rounded away from zero.

    Returns ``None`` when ``base_wer`` is 0 (undefined).
    """
    base, adapted = Decimal(repr(float(base_wer))), Decimal(repr(float(adapted_wer)))
    if base < 0 or adapted < 0:
        raise ValidationError("WER values must be non-negative")
    if base == 0:
        return None
    value = (base - adapted) / base * 100
    return float(value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


# -- report types -------------------------------------------------------------

@dataclass
class EvalCell:
    variant: str
    snr: str
    testset: str
    wer: float
    delta_pct: float = None

    def __post_init__(self):
        self.snr = str(self.snr)
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")
        if self.snr not in SNRS:
            raise ValidationError(f"unknown snr condition {self.snr!r}")
        if not self.wer >= 0:
            raise ValidationError(f"wer must be >= 0, got {self.wer}")
        if self.variant == "baseline" and self.delta_pct is not None:
            raise ValidationError("baseline cells carry no delta_pct")


@dataclass
class EvalReport:
    cells: list
    config_hash: str = ""
    seed: int = 0
    audio_hashes: dict = field(default_factory=dict, compare=False)

    def validate(self):
        seen = set()
        for c in self.cells:
            key = (c.variant, c.testset, c.snr)
            if key in seen:
                raise ValidationError(f"duplicate cell {key}")
            seen.add(key)
        conditions = {(c.testset, c.snr) for c in self.cells}
        variants = {c.variant for c in self.cells}
        for ts, snr in conditions:
            if ("baseline", ts, snr) not in seen:
                raise ConfigurationError(f"no baseline cell for testset {ts!r} at snr {snr}")
            for v in variants:
                if (v, ts, snr) not in seen:
                    raise ValidationError(f"grid incomplete: missing {v} / {ts} / {snr}")
        return self

    def cell(self, variant, testset, snr):
        for c in self.cells:
            if (c.variant, c.testset, c.snr) == (variant, testset, str(snr)):
                return c
        raise KeyError((variant, testset, snr))


def attach_deltas(cells):
    """Fill ``delta_pct`` of every non-baseline cell from the baseline in its (testset, snr)."""
    base = {(c.testset, c.snr): c.wer for c in cells if c.variant == "baseline"}
    for c in cells:
        if c.variant == "baseline":
            continue
        if (c.testset, c.snr) not in base:
            raise ConfigurationError(f"no baseline for testset {c.testset!r} at snr {c.snr}")
        c.delta_pct = relative_improvement(base[(c.testset, c.snr)], c.wer)
    return cells


def best_cells(report):
    """Cells holding the largest Δ% of their testset across all conditions and variants."""
    best = {}
    for c in report.cells:
        if c.delta_pct is None:
            continue
        if c.testset not in best or c.delta_pct > best[c.testset]:
            best[c.testset] = c.delta_pct
    return {(c.variant, c.testset, c.snr) for c in report.cells
            if c.delta_pct is not None and c.delta_pct == best[c.testset]}


# -- grid ---------------------------------------------------------------------

def audio_hash(audio):
    h = hashlib.sha256()
    h.update(str(audio.rate_hz).encode())
    h.update(np.ascontiguousarray(audio.samples, dtype=np.float64).tobytes())
    return h.hexdigest()


@dataclass
class GridVariant:
    """One system in the grid: a fitted ASR estimator plus its prototype table (or None)."""

    estimator: object
    prototypes: object = None


def _inventory_tokens(est):
    return list(getattr(est, "inventory_").tokens)


def run_grid(variants, testsets, snrs, noise=None, seed=0, config_hash="", jobs=1):
    """Decode every (variant, testset, snr) cell and attach Δ% against the baseline.

    ``variants`` maps variant name -> :class:`GridVariant`; ``testsets`` maps
    name -> list of ``(UtteranceRecord, AudioBuffer)``. Noisy audio is built
    once per (testset, snr) with a per-utterance seed so every variant hears
    the same signal; its hashes are kept on the report.
    """
    from .estimators import NoiseAugmenter

    if "baseline" not in variants:
        raise ConfigurationError("the grid needs a 'baseline' variant")
    snrs = [str(s) for s in snrs]
    if any(s != "clean" for s in snrs) and noise is None:
        raise ConfigurationError("a noise source is required for non-clean conditions")
    vocab = {name: _inventory_tokens(v.estimator) for name, v in variants.items()}
    if len({tuple(t) for t in vocab.values()}) != 1:
        raise ConfigurationError("all grid checkpoints must share one token inventory")
    order = [v for v in VARIANTS if v in variants]
    cells, hashes = [], {}
    for ts_name, items in testsets.items():
        records = [r for r, _ in items]
        refs = [r.transcript for r in records]
        for snr in snrs:
            if snr == "clean":
                audio = [a for _, a in items]
            else:
                aug = NoiseAugmenter(float(snr), noise, seed)
                audio = aug.transform([a for _, a in items], keys=[f"{ts_name}:{r.utt_id}" for r in records])
            hashes[(ts_name, snr)] = [audio_hash(a) for a in audio]
            for name in order:
                v = variants[name]
                vecs = None if v.prototypes is None else [v.prototypes[r.speaker_id].vector for r in records]
                hyps = _predict(v.estimator, audio, vecs, jobs)
                cells.append(EvalCell(name, snr, ts_name, corpus_wer(refs, hyps)))
    attach_deltas(cells)
    return EvalReport(cells, config_hash, seed, hashes).validate()


def _predict(est, audio, vecs, jobs):
    if jobs <= 1 or len(audio) < 2:
        return est.predict(audio, vecs)
    from concurrent.futures import ThreadPoolExecutor

    chunks = [list(range(i, len(audio), jobs)) for i in range(jobs)]
    with ThreadPoolExecutor(jobs) as pool:
        parts = list(pool.map(
            lambda idx: est.predict([audio[i] for i in idx], None if vecs is None else [vecs[i] for i in idx]),
            [c for c in chunks if c],
        ))
    out = [None] * len(audio)
    for idx, hyps in zip([c for c in chunks if c], parts):
        for i, h in zip(idx, hyps):
            out[i] = h
    return out


# -- rendering ----------------------------------------------------------------

def _fmt_wer(x):
    short = f"{x:.2f}"
    return short if float(short) == x else repr(float(x))


def _fmt_delta(x):
    return "" if x is None else f"{x:.1f}"


def _canonical(report):
    testsets = list(dict.fromkeys(c.testset for c in report.cells))
    return sorted(report.cells, key=lambda c: (SNRS.index(c.snr), testsets.index(c.testset),
                                                VARIANTS.index(c.variant)))


def render_report(report, fmt="table"):
    """Aligned text table (``fmt="table"``) or lossless CSV (``fmt="csv"``).

    Rows are grouped by SNR then testset; the largest Δ% per testset is
    starred in the table and flagged in a trailing CSV comment.
    """
    report.validate()
    cells = _canonical(report)
    meta = f"# config_hash={report.config_hash} seed={report.seed} version={tool_version()}"
    if fmt == "csv":
        buf = io.StringIO()
        buf.write(meta + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for c in cells:
            w.writerow([c.variant, c.testset, c.snr, _fmt_wer(c.wer), _fmt_delta(c.delta_pct)])
        return buf.getvalue()
    if fmt != "table":
        raise ValidationError(f"unknown report format {fmt!r}")
    best = best_cells(report)
    variants = [v for v in VARIANTS if any(c.variant == v for c in cells)]
    header = ["SNR", "Testset", "Baseline WER"]
    for v in variants[1:]:
        header += [f"{VARIANT_TITLES[v]} WER", f"{VARIANT_TITLES[v]} Δ%"]
    rows = []
    for c in cells:
        if c.variant != "baseline":
            continue
        row = ["-" if c.snr == "clean" else c.snr, c.testset, _fmt_wer(c.wer)]
        for v in variants[1:]:
            o = report.cell(v, c.testset, c.snr)
            mark = "*" if (v, c.testset, c.snr) in best else ""
            row += [_fmt_wer(o.wer), (_fmt_delta(o.delta_pct) or "n/a") + mark]
        rows.append(row)
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = [meta, "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(x.rjust(w) if i >= 2 else x.ljust(w) for i, (x, w) in enumerate(zip(r, widths))).rstrip()
              for r in rows]
    lines.append("* largest Δ% for the testset")
    return "\n".join(lines) + "\n"


def _parse_meta(line):
    fields = dict(kv.split("=", 1) for kv in line.lstrip("# ").split())
    return fields.get("config_hash", ""), int(fields.get("seed", 0))


def parse_report(text):
    """Inverse of :func:`render_report` for both formats."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ValidationError("report is missing its metadata line")
    config_hash, seed = _parse_meta(lines[0])
    if lines[1].split(",") == list(CSV_HEADER):
        cells = []
        for row in csv.reader(lines[2:]):
            variant, testset, snr, w, d = row
            cells.append(EvalCell(variant, snr, testset, float(w), None if d == "" else float(d)))
        return EvalReport(cells, config_hash, seed).validate()
    header = [h for h in lines[1].split("  ") if h.strip()]
    titles = {t: v for v, t in VARIANT_TITLES.items()}
    variants = ["baseline"] + [titles[h[:-4].strip()] for h in header[3:] if h.endswith(" WER")]
    cells = []
    for line in lines[3:]:
        if line.startswith("*"):
            continue
        parts = line.split()
        snr = "clean" if parts[0] == "-" else parts[0]
        # testset names may contain spaces: everything between SNR and the numeric tail
        n_num = 1 + 2 * (len(variants) - 1)
        testset = " ".join(parts[1:len(parts) - n_num])
        nums = parts[len(parts) - n_num:]
        cells.append(EvalCell("baseline", snr, testset, float(nums[0])))
        for k, v in enumerate(variants[1:]):
            w, d = nums[1 + 2 * k], nums[2 + 2 * k].rstrip("*")
            cells.append(EvalCell(v, snr, testset, float(w), None if d == "n/a" else float(d)))
    return EvalReport(cells, config_hash, seed).validate()


# -- published table ----------------------------------------------------------

def load_table1():
    """Published WERs and Δ% per architecture: ``{arch: [row dicts]}``."""
    text = resources.files("spkadapt.data").joinpath("table1.csv").read_text(encoding="utf-8")
    out = {}
    for row in csv.DictReader(ln for ln in text.splitlines() if not ln.startswith("#")):
        out.setdefault(row["arch"], []).append(row)
    return out


def table1_report(arch):
    """An :class:`EvalReport` built from the published WERs, Δ% recomputed."""
    cells = []
    for row in load_table1()[arch]:
        ts = row["testset"]
        cells.append(EvalCell("baseline", row["snr"], ts, float(row["baseline"])))
        cells.append(EvalCell("ecapa", row["snr"], ts, float(row["ecapa_wer"])))
        cells.append(EvalCell("xvector", row["snr"], ts, float(row["xvector_wer"])))
    attach_deltas(cells)
    return EvalReport(cells, "table1", 0).validate()
