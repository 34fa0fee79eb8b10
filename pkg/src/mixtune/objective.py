"""Nearest-neighbor contrastive loss with a FIFO support queue.

The anchor's role in the loss is indirect: each anchor embedding is swapped
for the (re-normalized mean of the) top-k most similar queue entries before
similarities against the batch positives are computed.  Queue entries are
constants in differentiation, so the loss gradient w.r.t. the anchor
embeddings is identically zero and all parameter gradients arrive through
the positive stream.

``mixed_loss`` generalizes the one-hot objective to row-stochastic labels
(cross-entropy between softmax similarities and smoothed labels) and reduces
bit-for-bit to ``nnclr_loss`` when the labels are one-hot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StateError

__all__ = ["SupportQueue", "ContrastiveBatch", "nn_lookup", "queue_push", "nnclr_loss", "mixed_loss"]

NORM_ATOL = 1e-6
ROW_SUM_ATOL = 1e-9


class SupportQueue:
    """FIFO store of unit-norm embeddings, evicting oldest-first.

    Single-writer: pushes happen between optimization steps; reads between
    pushes are safe from any thread.
    """

    def __init__(self, capacity: int, dim: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._entries: list[np.ndarray] = []
        self._stacked: np.ndarray | None = None  # rebuilt lazily after pushes

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> np.ndarray:
        """Entries as a (len, dim) array, oldest first."""
        if not self._entries:
            raise StateError("queue is empty")
        if self._stacked is None:
            self._stacked = np.stack(self._entries)
        return self._stacked


def queue_push(q: SupportQueue, batch_pos: np.ndarray) -> None:
    """Append unit-norm vectors in batch order, then evict down to capacity."""
    batch_pos = np.atleast_2d(np.asarray(batch_pos, dtype=np.float64))
    norms = np.linalg.norm(batch_pos, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_ATOL):
        raise ValueError("queue entries must be unit-norm")
    if q.dim is None:
        q.dim = batch_pos.shape[1]
    elif batch_pos.shape[1] != q.dim:
        raise ValueError(f"expected dim {q.dim}, got {batch_pos.shape[1]}")
    for v in batch_pos:
        q._entries.append(v.copy())
    while len(q._entries) > q.capacity:
        q._entries.pop(0)
    q._stacked = None


def nn_lookup(q: SupportQueue, z: np.ndarray, k: int = 1) -> np.ndarray:
    """Re-normalized mean of the k queue entries most similar to ``z``.

    Ties break toward the lowest insertion index.  The result carries no
    gradient; callers treat it as a constant.
    """
    if len(q) == 0:
        raise StateError("nearest-neighbor lookup on an empty queue")
    if not (1 <= k <= len(q)):
        raise IndexError(f"k={k} outside [1, {len(q)}]")
    entries = q.entries
    sims = entries @ np.asarray(z, dtype=np.float64)
    top = np.argsort(-sims, kind="stable")[:k]
    mean = entries[top].mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise ValueError("top-k entries cancel; mean has no direction")
    return mean / norm


@dataclass
class ContrastiveBatch:
    """Anchor/positive embeddings with a row-stochastic label matrix.

    ``z`` and ``z_pos`` are |B|×d and unit-norm per row; ``y`` rows sum to 1.
    """

    z: np.ndarray
    z_pos: np.ndarray
    y: np.ndarray
    tau: float

    def __post_init__(self) -> None:
        self.z = np.asarray(self.z, dtype=np.float64)
        self.z_pos = np.asarray(self.z_pos, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        b = self.z.shape[0]
        if self.z.ndim != 2 or self.z_pos.shape != self.z.shape or self.y.shape != (b, b):
            raise ValueError("need z, z_pos of shape (B, d) and y of shape (B, B)")
        if self.tau <= 0:
            raise ValueError("temperature must be > 0")
        for name, arr in (("z", self.z), ("z_pos", self.z_pos)):
            if np.any(np.abs(np.linalg.norm(arr, axis=1) - 1.0) > NORM_ATOL):
                raise ValueError(f"{name} rows must be unit-norm")
        _check_rows(self.y)


def _check_rows(y: np.ndarray) -> None:
    if np.any(y < -1e-12) or np.any(np.abs(y.sum(axis=1) - 1.0) > ROW_SUM_ATOL):
        raise ValueError("label rows must be non-negative and sum to 1")


def _similarities(cb: ContrastiveBatch, q: SupportQueue, k: int):
    """sims[i, l] = NN(z_i) · z_pos_l / tau; also returns the NN stack."""
    nn = np.stack([nn_lookup(q, cb.z[i], k) for i in range(cb.z.shape[0])])
    return (nn @ cb.z_pos.T) / cb.tau, nn


def _weighted_ce(sims: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy between softmax(sims) and y, plus d loss/d sims
    for the mean-over-rows reduction."""
    shifted = sims - sims.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_softmax = shifted - logsumexp
    per_row = -(y * log_softmax).sum(axis=1)
    softmax = np.exp(log_softmax)
    d_sims = (softmax - y) / sims.shape[0]
    return per_row, d_sims


def _loss(cb: ContrastiveBatch, q: SupportQueue, k: int):
    if cb.tau <= 0:
        raise ValueError("temperature must be > 0")
    _check_rows(cb.y)
    sims, nn = _similarities(cb, q, k)
    per_row, d_sims = _weighted_ce(sims, cb.y)
    loss = float(per_row.mean())
    d_z_pos = (d_sims / cb.tau).T @ nn
    d_z = np.zeros_like(cb.z)  # lookup output is a constant w.r.t. z
    return loss, d_z, d_z_pos


def nnclr_loss(cb: ContrastiveBatch, q: SupportQueue, k: int = 1):
    """Mean over anchors of -log softmax similarity at the labeled positive.

    Requires one-hot label rows; the labeled positive for anchor i is the
    row's hot index.  Returns (loss, d_loss/d_z, d_loss/d_z_pos).
    """
    hot = cb.y == 1.0
    if not np.array_equal(cb.y != 0.0, hot) or np.any(hot.sum(axis=1) != 1):
        raise ValueError("nnclr_loss needs one-hot label rows")
    return _loss(cb, q, k)


def mixed_loss(cb: ContrastiveBatch, q: SupportQueue, k: int = 1):
    """Cross-entropy between softmax similarities and smoothed labels.

    Equals :func:`nnclr_loss` exactly when labels are one-hot.  Returns
    (loss, d_loss/d_z, d_loss/d_z_pos).
    """
    return _loss(cb, q, k)
