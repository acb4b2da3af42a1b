"""Manifests, token inventories and the synthetic toy corpus."""

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import ValidationError
from .signal import AudioBuffer, read_wav, resample, write_wav

SPACE_SYMBOL = "▁"
SPECIAL_NAMES = ("blank", "bos", "eos", "unk")
DEFAULT_SPECIALS = ("<blank>", "<s>", "</s>", "<unk>")


class ManifestError(ValidationError):
    pass


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    audio_path: str
    transcript: str
    duration_s: float

    def __post_init__(self):
        if not self.utt_id:
            raise ManifestError("empty utt_id")
        if not self.speaker_id:
            raise ManifestError(f"{self.utt_id}: empty speaker_id")
        if not self.duration_s > 0:
            raise ManifestError(f"{self.utt_id}: duration_s must be > 0, got {self.duration_s}")
        if not " ".join(self.transcript.split()):
            raise ManifestError(f"{self.utt_id}: empty transcript")

    def to_line(self):
        return "|".join(
            [self.utt_id, self.speaker_id, self.audio_path, repr(float(self.duration_s)), self.transcript]
        )


def parse_manifest_line(line, lineno=0):
    parts = line.rstrip("\n").split("|", 4)
    if len(parts) != 5:
        raise ManifestError(f"line {lineno}: expected 5 '|'-separated fields, got {len(parts)}")
    utt_id, speaker_id, audio_path, duration, transcript = parts
    try:
        duration_s = float(duration)
    except ValueError:
        raise ManifestError(f"line {lineno}: bad duration {duration!r}") from None
    try:
        return UtteranceRecord(utt_id, speaker_id, audio_path, transcript, duration_s)
    except ManifestError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from None


def load_manifest(path):
    """Read a ``utt_id|speaker_id|audio_path|duration_s|transcript`` manifest.

    Blank lines and ``#`` comment lines (provenance headers) are skipped.
    """
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            rec = parse_manifest_line(line, lineno)
            if rec.utt_id in seen:
                raise ManifestError(f"line {lineno}: duplicate utt_id {rec.utt_id!r}")
            seen.add(rec.utt_id)
            records.append(rec)
    return records


def write_manifest(path, records, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for rec in records:
            fh.write(rec.to_line() + "\n")


def resolve_audio_path(record, manifest_dir):
    p = Path(record.audio_path)
    return p if p.is_absolute() else Path(manifest_dir) / p


@dataclass
class TokenInventory:
    """Ordered token list with the positions of the four special symbols."""

    tokens: list
    blank_index: int = 0
    bos_index: int = 1
    eos_index: int = 2
    unk_index: int = 3

    def __post_init__(self):
        self.tokens = list(self.tokens)
        special = [self.blank_index, self.bos_index, self.eos_index, self.unk_index]
        if len(set(special)) != 4:
            raise ValidationError(f"special indices must be distinct, got {special}")
        if any(not 0 <= i < len(self.tokens) for i in special):
            raise ValidationError("special index out of range")
        if len(self.tokens) - 4 < 2:
            raise ValidationError("inventory needs at least 2 non-special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValidationError("duplicate tokens in inventory")
        self._index = {t: i for i, t in enumerate(self.tokens)}
        regular = [t for i, t in enumerate(self.tokens) if i not in special]
        self.char_level = all(len(t) == 1 for t in regular)
        self._max_len = max(len(t) for t in regular)

    def __len__(self):
        return len(self.tokens)

    @property
    def special_indices(self):
        return (self.blank_index, self.bos_index, self.eos_index, self.unk_index)

    def index(self, token):
        return self._index.get(token, self.unk_index)


def build_char_inventory(transcripts, specials=DEFAULT_SPECIALS):
    chars = sorted({c for t in transcripts for c in t})
    return TokenInventory(list(specials) + chars)


def load_inventory(path):
    """Load a token file whose first four lines declare ``blank/bos/eos/unk``."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    if len(lines) < 4:
        raise ValidationError(f"{path}: missing the 4-line special-token header")
    specials = {}
    for ln in lines[:4]:
        name, _, tok = ln.partition("\t")
        if name not in SPECIAL_NAMES or not tok:
            raise ValidationError(f"{path}: bad header line {ln!r}; expected '<name>\\t<token>'")
        specials[name] = tok
    if set(specials) != set(SPECIAL_NAMES):
        raise ValidationError(f"{path}: header must declare {SPECIAL_NAMES}")
    body = [" " if t == SPACE_SYMBOL else t for t in lines[4:]]
    ordered = [specials[n] for n in SPECIAL_NAMES]
    tokens = ordered + [t for t in body if t not in ordered]
    return TokenInventory(tokens, *(tokens.index(specials[n]) for n in SPECIAL_NAMES))


def save_inventory(path, inv, header=None):
    special = inv.special_indices
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for name, idx in zip(SPECIAL_NAMES, special):
            fh.write(f"{name}\t{inv.tokens[idx]}\n")
        for i, tok in enumerate(inv.tokens):
            if i not in special:
                fh.write((SPACE_SYMBOL if tok == " " else tok) + "\n")


def tokenize(transcript, inventory):
    """Map text to token indices; symbols outside the inventory become ``unk_index``."""
    if inventory.char_level:
        return [inventory.index(c) for c in transcript]
    # subword inventories follow the sentencepiece word-boundary convention
    text = SPACE_SYMBOL + transcript.replace(" ", SPACE_SYMBOL) if transcript else ""
    out, i = [], 0
    while i < len(text):
        for n in range(min(inventory._max_len, len(text) - i), 0, -1):
            piece = text[i:i + n]
            if piece in inventory._index and inventory._index[piece] not in inventory.special_indices:
                out.append(inventory._index[piece])
                i += n
                break
        else:
            out.append(inventory.unk_index)
            i += 1
    return out


def detokenize(indices, inventory):
    skip = {inventory.blank_index, inventory.bos_index, inventory.eos_index}
    text = "".join(inventory.tokens[i] for i in indices if i not in skip)
    if inventory.char_level:
        return text
    return text.replace(SPACE_SYMBOL, " ").lstrip(" ")


# -- toy corpus ------------------------------------------------------------

TOY_PHRASES = (
    "go up",
    "go down",
    "stop now",
    "turn on",
    "turn off",
    "open door",
    "yes",
    "no",
)

# fixed (F1, F2) resonance pair per symbol, shared by every speaker and seed
_PHONE_RNG = np.random.default_rng(20230)
_PHONES = {
    c: (float(_PHONE_RNG.uniform(300, 1000)), float(_PHONE_RNG.uniform(1000, 3200)))
    for c in sorted({c for p in TOY_PHRASES for c in p if c != " "})
}


@dataclass(frozen=True)
class ToySpeaker:
    speaker_id: str
    f0_hz: float
    tract_scale: float
    resonances: tuple


def sample_speakers(n_speakers, seed):
    """Draw speakers with well separated F0 in [90, 300] Hz and a 3-peak envelope."""
    rng = np.random.default_rng(seed)
    width = 210.0 / n_speakers
    order = rng.permutation(n_speakers)
    speakers = []
    for i in range(n_speakers):
        f0 = 90.0 + width * (order[i] + 0.5) + rng.uniform(-0.1, 0.1) * width
        speakers.append(
            ToySpeaker(
                speaker_id=f"spk{i:02d}",
                f0_hz=float(f0),
                tract_scale=float(rng.uniform(0.85, 1.15)),
                resonances=tuple(
                    float(rng.uniform(lo, hi)) for lo, hi in ((250, 900), (900, 2500), (2500, 4500))
                ),
            )
        )
    return speakers


def _envelope(freqs, centers, bandwidth):
    resp = np.zeros_like(freqs)
    for c in centers:
        resp += 1.0 / (1.0 + ((freqs - c) / bandwidth) ** 2)
    return resp


def _phone_segment(ch, speaker, n, rate, f0, phase_rng):
    t = np.arange(n) / rate
    if ch == " ":
        return 0.003 * phase_rng.standard_normal(n)
    f1, f2 = _PHONES[ch]
    harmonics = np.arange(1, int(7000 // f0) + 1) * f0
    amp = _envelope(harmonics, (f1 * speaker.tract_scale, f2 * speaker.tract_scale), 120.0)
    amp *= 0.35 + _envelope(harmonics, speaker.resonances, 300.0)
    phases = phase_rng.uniform(0, 2 * np.pi, size=harmonics.size)
    seg = np.sin(2 * np.pi * np.outer(t, harmonics) + phases) @ amp
    return seg / (np.max(np.abs(seg)) + 1e-12)


def synth_utterance(text, speaker, rate_hz=16000, seed=0, char_s=0.1, pad_s=0.1):
    """Render ``text`` symbol-by-symbol as harmonic segments voiced by ``speaker``."""
    rng = np.random.default_rng(seed)
    f0 = speaker.f0_hz * (1.0 + rng.uniform(-0.02, 0.02))
    pad = int(pad_s * rate_hz)
    fade = int(0.01 * rate_hz)
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, fade))
    pieces = [0.003 * rng.standard_normal(pad)]
    for ch in text:
        n = int(round(char_s * rate_hz * rng.uniform(0.9, 1.1)))
        seg = _phone_segment(ch, speaker, n, rate_hz, f0, rng)
        if ch != " ":
            seg[:fade] *= ramp
            seg[-fade:] *= ramp[::-1]
        pieces.append(seg)
    pieces.append(0.003 * rng.standard_normal(pad))
    x = 0.3 * np.concatenate(pieces)
    return AudioBuffer(x, rate_hz)


def synth_toy_corpus(
    out_dir, n_speakers, utts_per_speaker, seed, rate_hz=16000, utterance_seed=None, header=None
):
    """Write a deterministic toy corpus (WAVs + ``manifest.txt``) into ``out_dir``.

    Speakers are drawn from ``seed``; phrases and renderings from
    ``utterance_seed`` (defaults to ``seed``), so a held-out test set for the
    same speakers is a second call with another ``utterance_seed``.
    Returns the list of records; audio paths are relative to ``out_dir``.
    """
    if n_speakers < 2:
        raise ValidationError(f"n_speakers must be >= 2, got {n_speakers}")
    if utts_per_speaker < 1:
        raise ValidationError(f"utts_per_speaker must be >= 1, got {utts_per_speaker}")
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    speakers = sample_speakers(n_speakers, seed)
    rng = np.random.default_rng([seed if utterance_seed is None else utterance_seed, 1])
    records = []
    for spk in speakers:
        for j in range(utts_per_speaker):
            text = TOY_PHRASES[int(rng.integers(len(TOY_PHRASES)))]
            utt_id = f"{spk.speaker_id}-utt{j:03d}"
            audio = synth_utterance(text, spk, rate_hz, seed=int(rng.integers(2**31)))
            rel = os.path.join("wav", f"{utt_id}.wav")
            write_wav(out_dir / rel, audio)
            records.append(UtteranceRecord(utt_id, spk.speaker_id, rel, text, audio.duration_s))
    write_manifest(out_dir / "manifest.txt", records, header=header)
    return records


def load_corpus(manifest_path, rate_hz=None):
    """``[(record, AudioBuffer), ...]`` for every manifest entry, in manifest order.

    With ``rate_hz`` every file is resampled on load, so anything done to the
    audio afterwards (noise mixing included) happens at the target rate.
    """
    manifest_path = Path(manifest_path)
    records = load_manifest(manifest_path)
    out = []
    for r in records:
        audio = read_wav(resolve_audio_path(r, manifest_path.parent))
        if rate_hz is not None and audio.rate_hz != rate_hz:
            audio = resample(audio, rate_hz)
        out.append((r, audio))
    return out
