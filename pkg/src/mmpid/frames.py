"""Quality-based frame selection: exactly K frames per modality.

When a clip has at least K frames the K highest-quality ones are kept
(ties broken by the smaller original index). When it has fewer, every
original frame is kept once and the deficit is filled by uniform draws
with replacement, so each original appears at least once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TOP_K = 32


@dataclass
class SelectedFrames:
    """Exactly K frames with bookkeeping back to the source track."""

    modality: str
    vectors: np.ndarray         # (k, dim)
    qualities: np.ndarray       # (k,)
    source_indices: np.ndarray  # (k,) original frame indices, repeats allowed


def select_top_k(vectors, qualities, k, rng, modality="face"):
    """Pick exactly `k` frames by descending quality.

    vectors : (T, dim) frame embeddings
    qualities : (T,) non-negative scores
    rng : numpy Generator, consumed only when T < k (resampling)

    Returns None for an empty track: the caller treats the modality as
    absent and substitutes a zero feature.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    qualities = np.asarray(qualities, dtype=np.float64)
    n = vectors.shape[0]
    if n == 0:
        return None
    if k < 1:
        raise ValueError("k must be >= 1")

    # descending quality, ties by ascending original index
    order = np.lexsort((np.arange(n), -qualities))
    if n >= k:
        idx = order[:k]
    else:
        extra = rng.integers(0, n, size=k - n)
        idx = np.concatenate([order, order[extra]])

    return SelectedFrames(modality=modality,
                          vectors=vectors[idx],
                          qualities=qualities[idx],
                          source_indices=idx.astype(np.int64))
