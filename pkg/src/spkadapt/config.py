"""Sectioned INI run configuration with typed keys, overrides and a stable hash."""

import configparser
import hashlib
import json
import os
from importlib import metadata, resources
from pathlib import Path

from ._validation import ValidationError

CONFIG_DIR_ENV = "SPKADAPT_CONFIG_DIR"

# Every key the pipeline reads, with its type and default. ``None`` means "unset".
SCHEMA = {
    "run": {"seed": (int, 0)},
    "corpus": {
        "n_speakers": (int, 4),
        "utts_per_speaker": (int, 5),
        "test_utts_per_speaker": (int, 3),
        "rate_hz": (int, 16000),
        "toy_seed": (int, 0),
        "test_seed": (int, 1000),
        "inventory": (str, None),
    },
    "augmentation": {
        "noise": (str, "synthetic:white"),
        "speed_factors": (tuple, (0.95, 1.0, 1.05)),
        "time_mask": (bool, True),
        "mask_min_chunks": (int, 1),
        "mask_max_chunks": (int, 5),
        "mask_min_len": (int, 1000),
        "mask_max_len": (int, 2000),
    },
    "features": {
        "frontend": (str, "mel"),
        "n_mels": (int, 80),
        "win_s": (float, 0.025),
        "hop_s": (float, 0.010),
        "normalize": (bool, False),
        "extractor_dim": (int, 1024),
        "extractor_channels": (int, 128),
        "extractor_seed": (int, 0),
        "extractor_trainable": (bool, False),
    },
    "speaker": {
        "scaling": (str, "minmax01"),
        "scale_stage": (str, "prototype"),
        "embed_seed": (int, 0),
    },
    "model": {
        "arch": (str, "w2v2"),
        "hidden_dim": (int, 1024),
        "d_model": (int, 256),
        "n_enc": (int, 12),
        "n_dec": (int, 6),
        "n_heads": (int, 4),
        "d_ff": (int, 1024),
        "dropout": (float, 0.1),
        "injection": (str, "frontend"),
        "ctc_weight": (float, 0.3),
        "label_smoothing": (float, 0.1),
        "dtype": (str, "float32"),
        "lm_d_model": (int, 264),
        "lm_d_ff": (int, 1024),
        "lm_blocks": (int, 12),
        "lm_heads": (int, 12),
    },
    "optimizer": {
        "kind": (str, "adadelta"),
        "lr": (float, 1.0),
        "beta1": (float, 0.9),
        "beta2": (float, 0.99),
        "rho": (float, 0.95),
        "epsilon": (float, None),
        "extractor_lr": (float, 1e-3),
    },
    "schedule": {
        "kind": (str, "validation_anneal"),
        "warmup_steps": (int, 25000),
        "anneal_factor": (float, 0.8),
        "improvement_threshold": (float, 0.0025),
        "epochs": (int, 30),
        "max_steps": (int, None),
        "batch_size": (int, 6),
        "accum_factor": (int, 1),
        "log_every": (int, 10),
    },
    "decode": {
        "beam": (int, 60),
        "lm_weight": (float, 0.6),
        "ctc_decode_weight": (float, 0.3),
        "max_len_ratio": (float, 1.5),
    },
    "eval": {
        "snrs": (tuple, ("clean", "18", "9", "0")),
        "variants": (tuple, ("baseline", "ecapa", "xvector")),
    },
}

CHOICES = {
    ("features", "frontend"): {"mel", "frozen"},
    ("speaker", "scaling"): {"minmax01", "zscore", "none"},
    ("speaker", "scale_stage"): {"prototype", "utterance"},
    ("model", "arch"): {"w2v2", "transformer"},
    ("model", "injection"): {"frontend", "post_encoder", "none"},
    ("model", "dtype"): {"float32", "float64"},
    ("optimizer", "kind"): {"adam", "adadelta"},
    ("schedule", "kind"): {"noam", "validation_anneal", "constant"},
}


def tool_version():
    try:
        return metadata.version("spkadapt")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _parse_value(kind, raw, where):
    raw = raw.strip()
    if raw == "" or raw.lower() == "none":
        return None
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            try:
                return tuple(float(p) for p in parts)
            except ValueError:
                return tuple(parts)
        return kind(raw)
    except ValueError:
        raise ValidationError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


def _format_value(value):
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    return str(value)


class RunConfig:
    """Typed view over the sectioned config; access as ``cfg["model"]["arch"]``."""

    def __init__(self, values=None):
        self.values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section, keys in (values or {}).items():
            for key, value in keys.items():
                self.set(section, key, value)
        self.validate()

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self):
        return self.values["run"]["seed"]

    def set(self, section, key, value):
        if section not in SCHEMA:
            raise ValidationError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ValidationError(f"unknown config key {section}.{key}")
        kind = SCHEMA[section][key][0]
        if isinstance(value, str) and kind is not str:
            value = _parse_value(kind, value, f"{section}.{key}")
        elif isinstance(value, str):
            value = _parse_value(str, value, f"{section}.{key}")
        elif isinstance(value, list):
            value = tuple(value)
        self.values[section][key] = value

    def validate(self):
        for (section, key), allowed in CHOICES.items():
            v = self.values[section][key]
            if v not in allowed:
                raise ValidationError(f"{section}.{key} must be one of {sorted(allowed)}, got {v!r}")
        snrs = self.values["eval"]["snrs"]
        self.values["eval"]["snrs"] = tuple(
            "clean" if str(s) == "clean" else str(int(float(s))) for s in snrs
        )
        return self

    @classmethod
    def from_text(cls, text, source="<config>"):
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ValidationError(f"{source}: {exc}") from None
        cfg = cls.__new__(cls)
        cfg.values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
        return cfg.validate()

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls.from_text(path.read_text(encoding="utf-8"), str(path))

    def apply_overrides(self, overrides):
        """Apply ``section.key=value`` strings in order."""
        for item in overrides or ():
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ValidationError(f"override must look like section.key=value, got {item!r}")
            lhs, value = item.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            self.set(section, key, value)
        return self.validate()

    def to_text(self):
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_format_value(v)}" for k, v in keys.items()]
            lines.append("")
        return "\n".join(lines)

    def hash(self):
        canon = json.dumps(self.values, sort_keys=True, default=list)
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def provenance(self):
        return f"spkadapt {tool_version()} config={self.hash()} seed={self.seed}"


def shipped_configs():
    return sorted(p.name for p in resources.files("spkadapt.data").iterdir() if p.name.endswith(".ini"))


def resolve_config(name):
    """Find a config by path, then in ``$SPKADAPT_CONFIG_DIR``, then among the shipped ones."""
    candidates = [Path(name)]
    env_dir = os.environ.get(CONFIG_DIR_ENV)
    stems = [name] if name.endswith(".ini") else [name, f"{name}.ini"]
    if env_dir:
        candidates += [Path(env_dir) / s for s in stems]
    for c in candidates:
        if c.is_file():
            return RunConfig.load(c)
    for s in stems:
        res = resources.files("spkadapt.data").joinpath(s)
        if res.is_file():
            return RunConfig.from_text(res.read_text(encoding="utf-8"), s)
    raise ValidationError(f"config {name!r} not found (looked in cwd, ${CONFIG_DIR_ENV}, shipped configs)")
