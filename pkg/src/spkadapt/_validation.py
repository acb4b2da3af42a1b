"""Input validation helpers shared by the estimators and the functional API."""

import numbers

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented contract."""


def check_audio(samples, name="signal", allow_empty=False):
    """Return ``samples`` as a finite 1-D float64 array."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name}: expected a 1-D sample array, got shape {arr.shape}")
    if arr.size == 0 and not allow_empty:
        raise ValidationError(f"{name}: empty audio buffer")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: non-finite samples")
    return arr


def check_rate(rate_hz, name="rate_hz"):
    if not isinstance(rate_hz, numbers.Integral) or rate_hz <= 0:
        raise ValidationError(f"{name} must be a positive integer, got {rate_hz!r}")
    return int(rate_hz)


def check_matrix(values, name="features", min_rows=1):
    """Return ``values`` as a finite 2-D float array (dtype preserved if float)."""
    arr = np.asarray(values)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name}: expected a 2-D frames x dims matrix, got shape {arr.shape}")
    if arr.shape[0] < min_rows:
        raise ValidationError(f"{name}: need at least {min_rows} frame(s), got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: non-finite values")
    return arr


def check_vector(values, name="vector"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError(f"{name}: expected a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: non-finite components")
    return arr


def check_feature_list(X, name="X"):
    """Validate a ragged batch of utterance feature matrices with a common width."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    mats = [check_matrix(x, name=f"{name}[{i}]") for i, x in enumerate(X)]
    if not mats:
        raise ValidationError(f"{name}: empty batch")
    widths = {m.shape[1] for m in mats}
    if len(widths) != 1:
        raise ValidationError(f"{name}: inconsistent feature dims {sorted(widths)}")
    return mats


def check_speaker_vectors(speaker_vectors, n, name="speaker_vectors"):
    """Validate per-utterance speaker vectors; ``None`` passes through."""
    if speaker_vectors is None:
        return None
    vecs = [check_vector(v, name=f"{name}[{i}]") for i, v in enumerate(speaker_vectors)]
    if len(vecs) != n:
        raise ValidationError(f"{name}: expected {n} vectors, got {len(vecs)}")
    dims = {v.size for v in vecs}
    if len(dims) != 1:
        raise ValidationError(f"{name}: inconsistent dims {sorted(dims)}")
    return vecs


def check_probability(value, name, upper_inclusive=True):
    value = float(value)
    ok = 0.0 <= value <= 1.0 if upper_inclusive else 0.0 <= value < 1.0
    if not ok:
        bound = "]" if upper_inclusive else ")"
        raise ValidationError(f"{name} must lie in [0, 1{bound}, got {value}")
    return value
