"""Small input-validation and seeding helpers used across modules."""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ValidationError


def check_positive_int(name, value):
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
        raise ValidationError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_non_negative(name, value):
    if value < 0:
        raise ValidationError(f"{name} must be non-negative, got {value!r}")
    return value


def check_probability(name, value):
    if not (0.0 <= value <= 1.0):
        raise ValidationError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)


def check_in_range(name, value, low, high):
    """Half-open range check: low <= value < high."""
    if not (low <= value < high):
        raise ValidationError(f"{name} must lie in [{low}, {high}), got {value!r}")
    return value


def check_finite(name, array):
    arr = np.asarray(array)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def rng_from(seed) -> np.random.Generator:
    """A fresh PCG64 generator; ``seed`` may be an int or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def derive_seed(seed, *tokens) -> int:
    """Deterministically derive a sub-seed from a root seed and string tokens.

    Stage- and sequence-specific randomness all flows from one root seed; the
    derivation is a hash so unrelated stages never share streams.
    """
    text = "|".join([str(int(seed))] + [str(t) for t in tokens])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)
