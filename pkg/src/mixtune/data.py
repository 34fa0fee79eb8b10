"""Spectrogram features, synthetic datasets, and the on-disk dataset format.

A dataset is a stack of equally-shaped time/frequency matrices ("fbanks",
log-mel filterbank energies) plus optional integer class labels.  Labels are
consumed only by the few-shot evaluator; the tuning loops never see them.

On disk a dataset is a JSON manifest (``<stem>.json``) next to a raw
little-endian float32 blob (``<stem>.f32``) laid out item-major, then time,
then frequency.  The round trip through disk is exact because fbank values
are stored as float32 in memory as well.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError

LOG_FLOOR = 1e-10  # silent frames clamp to log(1e-10) instead of -inf

__all__ = [
    "Fbank",
    "Dataset",
    "SynthSpec",
    "compute_fbank",
    "mel_filterbank",
    "read_wav",
    "generate_synthetic",
    "save_dataset",
    "load_dataset",
]


@dataclass
class Fbank:
    """One T×F matrix of log-mel energies."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError(f"fbank must be a non-empty 2-D matrix, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("fbank contains non-finite values")

    @property
    def t_len(self) -> int:
        return self.values.shape[0]

    @property
    def f_len(self) -> int:
        return self.values.shape[1]


@dataclass
class Dataset:
    """Ordered fbank stack with optional per-item class ids.

    ``values`` has shape (n, T, F); ``labels`` is None or an int array of
    length n with class ids contiguous from 0.
    """

    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"dataset values must be (n, T, F), got shape {self.values.shape}")
        if self.values.shape[0] > 0 and (self.values.shape[1] < 1 or self.values.shape[2] < 1):
            raise ValueError("items must be non-empty matrices")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("dataset contains non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.values.shape[0],):
                raise ValueError(
                    f"labels length {self.labels.shape} does not match {self.values.shape[0]} items"
                )
            if self.labels.size and (self.labels.min() < 0 or not np.array_equal(
                np.unique(self.labels), np.arange(self.labels.max() + 1)
            )):
                raise ValueError("class ids must be contiguous from 0")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def t_len(self) -> int:
        return self.values.shape[1]

    @property
    def f_len(self) -> int:
        return self.values.shape[2]

    def __len__(self) -> int:
        return self.n

    def item(self, i: int) -> Fbank:
        return Fbank(self.values[i])

    @property
    def n_classes(self) -> int:
        if self.labels is None:
            raise ValueError("dataset has no labels")
        return int(self.labels.max()) + 1 if self.labels.size else 0


@dataclass
class SynthSpec:
    """Recipe for a labeled synthetic dataset with known class structure.

    Each class is a set of (frequency-bin, modulation-rate) ridge
    signatures; items of a class are sums of amplitude-modulated ridges at
    those bins (a class-specific base phase with small per-item jitter,
    mild amplitude jitter) plus Gaussian noise.  Disjoint bins between
    classes give a nearest-centroid ceiling of 100%; ``noise_sigma``
    controls how far below it raw features land.
    """

    n_classes: int = 8
    per_class: int = 50
    t_len: int = 64
    f_len: int = 8
    class_signature: list[list[tuple[int, int]]] | None = None
    noise_sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.per_class < 1 or self.t_len < 1 or self.f_len < 1:
            raise ValueError("counts must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.class_signature is not None:
            if len(self.class_signature) != self.n_classes:
                raise ValueError("class_signature must have one entry per class")
            for sig in self.class_signature:
                for (b, rate) in sig:
                    if not (0 <= b < self.f_len):
                        raise ValueError(f"frequency bin {b} out of range [0, {self.f_len})")
                    if rate < 0:
                        raise ValueError("modulation rate must be >= 0")

    def signatures(self) -> list[list[tuple[int, int]]]:
        """Per-class ridge signatures; default assigns class c the bin c mod F."""
        if self.class_signature is not None:
            return self.class_signature
        return [[(c % self.f_len, 1 + c % 4)] for c in range(self.n_classes)]


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sr: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular mel filters spanning 0..sr/2, shape (n_mels, n_fft//2 + 1)."""
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    n_bins = n_fft // 2 + 1
    freqs = np.arange(n_bins) * (sr / n_fft)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - freqs) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mel_bin_center_hz(sr: int, n_mels: int, b: int) -> float:
    """Center frequency (Hz) of triangular mel filter ``b``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2.0), n_mels + 2))
    return float(edges[b + 1])


def compute_fbank(
    pcm: np.ndarray,
    sr: int = 16000,
    n_mels: int = 128,
    win_len: int = 400,
    hop_len: int = 160,
) -> Fbank:
    """Log-mel filterbank features of a PCM signal.

    Frames of ``win_len`` samples are taken every ``hop_len`` samples
    (T = 1 + floor((len - win) / hop) frames; trailing samples short of a
    full frame are dropped).  Each frame is Hann-windowed, its magnitude
    spectrum taken by DFT, passed through a triangular mel filterbank
    covering 0..sr/2, and log-compressed with a floor of ``LOG_FLOOR``.
    """
    pcm = np.asarray(pcm, dtype=np.float64)
    if pcm.ndim != 1:
        raise ValueError("pcm must be 1-D")
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if not (0 < hop_len <= win_len):
        raise ValueError("need 0 < hop_len <= win_len")
    if len(pcm) < win_len:
        raise ValueError(f"pcm too short: {len(pcm)} samples < window of {win_len}")
    if not np.all(np.isfinite(pcm)):
        raise ValueError("pcm contains non-finite samples")

    n_frames = 1 + (len(pcm) - win_len) // hop_len
    idx = np.arange(win_len)[None, :] + hop_len * np.arange(n_frames)[:, None]
    frames = pcm[idx] * np.hanning(win_len)[None, :]
    mag = np.abs(np.fft.rfft(frames, axis=1))
    fb = mel_filterbank(sr, win_len, n_mels)
    mel = mag @ fb.T
    values = np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)
    return Fbank(values)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a 16-bit PCM mono WAV file; returns (samples in [-1, 1], rate)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"expected mono WAV, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ValueError(f"expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        raw = w.readframes(w.getnframes())
        sr = w.getframerate()
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return pcm, sr


def generate_synthetic(spec: SynthSpec, seed: int) -> Dataset:
    """Labeled synthetic dataset; a pure function of (spec, seed).

    Items are ordered class-major (all of class 0, then class 1, ...), so
    labels are contiguous from 0.
    """
    rng = np.random.default_rng(seed)
    sigs = spec.signatures()
    t = np.arange(spec.t_len, dtype=np.float64)
    items = np.empty((spec.n_classes * spec.per_class, spec.t_len, spec.f_len), dtype=np.float32)
    labels = np.repeat(np.arange(spec.n_classes), spec.per_class)
    for c in range(spec.n_classes):
        for k in range(spec.per_class):
            m = np.zeros((spec.t_len, spec.f_len), dtype=np.float64)
            for ridge, (b, rate) in enumerate(sigs[c]):
                # class-specific base phase (golden-ratio spaced) keeps items
                # of one class near a shared prototype; jitter and amplitude
                # wobble provide within-class variation on top of the noise
                base_phase = 2.0 * np.pi * (((c + 3 * ridge) * 0.618033988749895) % 1.0)
                phase = base_phase + rng.uniform(-0.5, 0.5)
                amp = rng.uniform(0.75, 1.25)
                m[:, b] += amp * (0.5 + 0.5 * np.sin(2.0 * np.pi * rate * t / spec.t_len + phase))
            if spec.noise_sigma > 0:
                m += rng.normal(0.0, spec.noise_sigma, size=m.shape)
            items[c * spec.per_class + k] = m.astype(np.float32)
    return Dataset(values=items, labels=labels)


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix == ".json":
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".f32")


def save_dataset(ds: Dataset, stem) -> None:
    """Write ``<stem>.json`` manifest and ``<stem>.f32`` float32 blob."""
    manifest_path, blob_path = _paths(stem)
    manifest = {
        "n": ds.n,
        "t_len": ds.t_len,
        "f_len": ds.f_len,
        "labels": None if ds.labels is None else [int(x) for x in ds.labels],
        "dtype": "f4",
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True)
        fh.write("\n")
    ds.values.astype("<f4").tofile(blob_path)


def load_dataset(stem) -> Dataset:
    """Inverse of :func:`save_dataset`; validates manifest against blob size."""
    manifest_path, blob_path = _paths(stem)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    dtype = manifest.get("dtype")
    if dtype != "f4":
        raise ValueError(f"unknown dtype {dtype!r} in manifest {manifest_path}")
    n, t_len, f_len = int(manifest["n"]), int(manifest["t_len"]), int(manifest["f_len"])
    raw = np.fromfile(blob_path, dtype="<f4")
    if raw.size != n * t_len * f_len:
        raise CorruptionError(
            f"blob {blob_path} holds {raw.size} floats, manifest expects {n * t_len * f_len}"
        )
    labels = manifest.get("labels")
    if labels is not None and len(labels) != n:
        raise CorruptionError(f"manifest lists {len(labels)} labels for {n} items")
    return Dataset(values=raw.reshape(n, t_len, f_len), labels=labels)
