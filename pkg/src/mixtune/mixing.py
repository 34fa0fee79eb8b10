"""Batch mixing in input and virtual-label space.

The main mode replaces one time-contiguous, full-frequency-band region of an
anchor spectrogram with the same region of a partner, and smooths the virtual
label (one-hot over the batch) by the fraction of content actually replaced.
Variants: two-dimensional boxes (time and frequency), elementwise mixup, and
a pass-through mode.

The box length in time is T·sqrt(1-lambda) with lambda ~ Beta(alpha, alpha);
a box that overruns the right edge is clamped there and the label coefficient
is recomputed from the realized replaced fraction (``lam_eff``), so the label
always matches the actual content mixture.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import Fbank

__all__ = [
    "MixMode",
    "MixParams",
    "BoundingBox",
    "MixedPair",
    "sample_lambda",
    "sample_bbox_t",
    "sample_bbox_tf",
    "make_mask",
    "mix_batch",
    "label_matrix",
]


class MixMode(str, Enum):
    T_CUTMIX = "t_cutmix"
    TF_CUTMIX = "tf_cutmix"
    MIXUP = "mixup"
    NONE = "none"


@dataclass
class MixParams:
    alpha: float = 1.0
    mode: MixMode = MixMode.T_CUTMIX

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        self.mode = MixMode(self.mode)


@dataclass
class BoundingBox:
    """Replacement region; width clamps at the right/top edges at use time."""

    s_t: int
    w_t: int
    s_f: int
    w_f: int

    def realized_t(self, t_len: int) -> tuple[int, int]:
        """(start, end) of the box along time after clamping to [0, T)."""
        return self.s_t, min(self.s_t + self.w_t, t_len)

    def realized_f(self, f_len: int) -> tuple[int, int]:
        return self.s_f, min(self.s_f + self.w_f, f_len)


@dataclass
class MixedPair:
    """One mixed sample with its smoothed virtual label.

    ``y`` is a probability vector over the batch with mass ``lam_eff`` at
    the anchor index ``i`` and ``1 - lam_eff`` at the partner index ``j``.
    ``bbox`` is None for the mixup and pass-through modes.
    """

    m: Fbank
    y: np.ndarray
    i: int
    j: int
    lam_eff: float
    bbox: BoundingBox | None = None

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=np.float64)
        if not (0.0 <= self.lam_eff <= 1.0):
            raise ValueError(f"lam_eff {self.lam_eff} outside [0, 1]")
        if np.any(self.y < 0) or abs(self.y.sum() - 1.0) > 1e-9:
            raise ValueError("label vector must be non-negative and sum to 1")
        if np.count_nonzero(self.y) > 2:
            raise ValueError("label vector may have at most two nonzero entries")


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """One draw from Beta(alpha, alpha)."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    return float(rng.beta(alpha, alpha))


def sample_bbox_t(t_len: int, f_len: int, lam: float, rng: np.random.Generator) -> BoundingBox:
    """Time-axis box: w_t = round(T*sqrt(1-lam)), s_t uniform, full bandwidth."""
    if t_len < 1 or f_len < 1:
        raise ValueError("t_len and f_len must be >= 1")
    if not (0.0 <= lam <= 1.0):
        raise ValueError("lambda must lie in [0, 1]")
    w_t = int(np.rint(t_len * np.sqrt(1.0 - lam)))
    s_t = int(rng.integers(0, t_len))
    return BoundingBox(s_t=s_t, w_t=w_t, s_f=0, w_f=f_len)


def sample_bbox_tf(t_len: int, f_len: int, lam: float, rng: np.random.Generator) -> BoundingBox:
    """Two-dimensional box: both widths scale with sqrt(1-lam)."""
    bb = sample_bbox_t(t_len, f_len, lam, rng)
    w_f = int(np.rint(f_len * np.sqrt(1.0 - lam)))
    s_f = int(rng.integers(0, f_len))
    return BoundingBox(s_t=bb.s_t, w_t=bb.w_t, s_f=s_f, w_f=w_f)


def make_mask(bb: BoundingBox, t_len: int, f_len: int) -> np.ndarray:
    """Binary T×F matrix: 0 inside the realized box, 1 elsewhere."""
    if not (0 <= bb.s_t < t_len) or not (0 <= bb.s_f <= f_len):
        raise ValueError("bounding box start outside the matrix")
    mask = np.ones((t_len, f_len), dtype=np.float64)
    t0, t1 = bb.realized_t(t_len)
    f0, f1 = bb.realized_f(f_len)
    mask[t0:t1, f0:f1] = 0.0
    return mask


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation with no fixed points (rejection sampled)."""
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def label_matrix(pairs: list[MixedPair]) -> np.ndarray:
    """Stack the pairs' label vectors into a row-stochastic |B|×|B| matrix."""
    return np.stack([p.y for p in pairs])


def mix_batch(batch, params: MixParams, rng: np.random.Generator) -> list[MixedPair]:
    """Mix a batch against a derangement of itself.

    One lambda is drawn for the whole batch; each anchor i is paired with
    j = pi(i) for a random derangement pi and gets its own box draw.  The
    label coefficient is the realized (post-clamp) kept fraction, not the
    raw lambda, except in mixup mode where the two coincide.

    ``batch`` is a sequence of :class:`~mixtune.data.Fbank` or an (n, T, F)
    array; all items must share one shape.
    """
    if isinstance(batch, np.ndarray):
        values = batch
    else:
        values = np.stack([b.values if isinstance(b, Fbank) else np.asarray(b) for b in batch])
    if values.ndim != 3:
        raise ValueError("batch must stack to (n, T, F)")
    n, t_len, f_len = values.shape
    if n < 2:
        raise ValueError(f"need at least 2 items to mix, got {n}")

    if params.mode is MixMode.NONE:
        out = []
        for i in range(n):
            y = np.zeros(n)
            y[i] = 1.0
            out.append(MixedPair(m=Fbank(values[i].copy()), y=y, i=i, j=i, lam_eff=1.0))
        return out

    lam = sample_lambda(params.alpha, rng)
    perm = _derangement(n, rng)
    out = []
    for i in range(n):
        j = int(perm[i])
        y = np.zeros(n)
        if params.mode is MixMode.MIXUP:
            m = lam * values[i] + (1.0 - lam) * values[j]
            lam_eff = lam
            bbox = None
        else:
            if params.mode is MixMode.T_CUTMIX:
                bbox = sample_bbox_t(t_len, f_len, lam, rng)
            else:
                bbox = sample_bbox_tf(t_len, f_len, lam, rng)
            t0, t1 = bbox.realized_t(t_len)
            f0, f1 = bbox.realized_f(f_len)
            m = values[i].copy()
            m[t0:t1, f0:f1] = values[j][t0:t1, f0:f1]
            lam_eff = 1.0 - ((t1 - t0) * (f1 - f0)) / (t_len * f_len)
        y[i] += lam_eff
        y[j] += 1.0 - lam_eff
        out.append(MixedPair(m=Fbank(np.asarray(m)), y=y, i=i, j=j, lam_eff=lam_eff, bbox=bbox))
    return out
