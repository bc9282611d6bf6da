"""Decision layer: argmax classification and cosine verification scoring."""

from __future__ import annotations

import numpy as np

from .errors import EmptyEnrollment, NonFiniteScore, ShapeMismatch, ZeroNorm


def classify(cos_row) -> int:
    """Index of the largest score; ties go to the lowest index."""
    row = np.asarray(cos_row, dtype=np.float64)
    if row.ndim != 1 or row.shape[0] < 2:
        raise ShapeMismatch("need a 1-D row with at least two classes")
    if not np.all(np.isfinite(row)):
        raise NonFiniteScore("class scores contain NaN or Inf")
    return int(np.argmax(row))


def _unit(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x)
    if n == 0:
        raise ZeroNorm("zero-norm embedding")
    return x / n


def cosine_score(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return float(np.clip(np.dot(_unit(a), _unit(b)), -1.0, 1.0))


def enroll_model(embeddings) -> np.ndarray:
    """Mean of length-normalised enrollment embeddings, renormalised."""
    embs = [np.asarray(e, dtype=np.float64) for e in embeddings]
    if not embs:
        raise EmptyEnrollment("no enrollment embeddings")
    if len({e.shape for e in embs}) != 1:
        raise ShapeMismatch("enrollment embeddings differ in dimension")
    return _unit(np.mean([_unit(e) for e in embs], axis=0))
