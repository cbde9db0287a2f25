"""Input validation helpers shared by the estimators and library functions."""

from __future__ import annotations

import numpy as np


def check_features(x, feat_dim=None):
    """Return ``x`` as a finite float64 (T, D) array with T >= 1."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"feature sequence must be 2-D (frames x dims), got shape {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("feature sequence is empty")
    if feat_dim is not None and x.shape[1] != feat_dim:
        raise ValueError(f"feature dimension {x.shape[1]} does not match model dimension {feat_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature sequence contains non-finite values")
    return x


def check_tokens(y, vocab_size=None, max_len=64):
    """Return ``y`` as a tuple of label ids in ``1..vocab_size``."""
    y = tuple(int(t) for t in y)
    if len(y) > max_len:
        raise ValueError(f"label sequence longer than {max_len}")
    if vocab_size is not None:
        bad = [t for t in y if t < 1 or t > vocab_size]
        if bad:
            raise ValueError(f"token ids out of vocabulary range 1..{vocab_size}: {bad[:5]}")
    return y


def check_paired(X, y=None):
    """Check that X is a non-empty list of sequences and y (if given) aligns with it."""
    X = list(X)
    if not X:
        raise ValueError("empty input")
    if y is not None:
        y = list(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} sequences but y has {len(y)}")
    return X, y


def check_probability_band(low, high):
    if not (0.0 <= low < high <= 1.0):
        raise ValueError(f"invalid confidence band [{low}, {high}]; need 0 <= low < high <= 1")
    return float(low), float(high)
