"""Fixed-dimension semantic embeddings: patch averaging, cosine similarity,
and the running-mean update used to aggregate landmark appearance.

Embeddings are plain float ndarrays of a run-level dimension (default 384).
Validation happens at ingestion and at construction points; a zero vector is
never a legal embedding.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateEmbeddingError, InputError

DEFAULT_DIM = 384


def validate_embedding(values: np.ndarray, dim: int | None = None) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim != 1:
        raise DegenerateEmbeddingError("embedding must be a 1-D vector")
    if dim is not None and v.shape[0] != dim:
        raise DegenerateEmbeddingError(
            f"embedding dimension {v.shape[0]} does not match run dimension {dim}")
    if not np.all(np.isfinite(v)):
        raise DegenerateEmbeddingError("embedding has non-finite entries")
    if not np.any(v):
        raise DegenerateEmbeddingError("embedding is the zero vector")
    return v


def patch_average(grid: np.ndarray) -> np.ndarray:
    """Collapse an N x D patch-feature grid to one D-vector by per-column mean."""
    g = np.asarray(grid, dtype=float)
    if g.ndim != 2 or g.shape[0] < 1:
        raise InputError("patch grid must be an N x D matrix with N >= 1")
    if not np.all(np.isfinite(g)):
        raise InputError("patch grid has non-finite entries")
    mean = g.mean(axis=0)
    return validate_embedding(mean)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """S_C(a, b) = a.b / (|a| |b|), in [-1, 1]."""
    a = validate_embedding(a)
    b = validate_embedding(b)
    if a.shape != b.shape:
        raise DegenerateEmbeddingError("embedding dimensions differ")
    s = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return max(-1.0, min(1.0, s))


def aggregate_embedding(current: np.ndarray, count: int, new_obs: np.ndarray) -> np.ndarray:
    """Running mean over all accepted observations of a landmark.

    `current` is the mean of `count` observations; returns the mean after
    folding in `new_obs`.
    """
    if count < 1:
        raise InputError("observation count must be >= 1")
    current = validate_embedding(current)
    new_obs = validate_embedding(new_obs, dim=current.shape[0])
    return (count * current + new_obs) / (count + 1)
