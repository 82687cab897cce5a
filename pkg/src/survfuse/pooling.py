"""Self-attention pooling of token hidden states into fixed-size vectors."""

from __future__ import annotations

import numpy as np


def attention_pool(hidden: np.ndarray) -> np.ndarray:
    """Pool an L x d hidden-state matrix to a length-d vector.

    A = row_softmax(H H^T), pooled rows H~ = A H, output z = column mean of H~.
    No 1/sqrt(d) scaling on the score matrix; softmax subtracts the row max.
    """
    h = np.asarray(hidden, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] < 1:
        raise ValueError(f"expected a non-empty L x d matrix, got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite hidden states")
    scores = h @ h.T
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    pooled = weights @ h
    return pooled.mean(axis=0)


def pool_all(hidden_by_id: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Pool every sample in a hidden-state mapping, preserving order."""
    return {sid: attention_pool(h) for sid, h in hidden_by_id.items()}
