"""Episodic N-way K-shot evaluation with a nearest-centroid classifier.

Features are the encoder's mean-pooled final-block tokens, L2-normalized;
each episode samples N classes and K+Q items per class, classifies queries
by cosine similarity to the re-normalized support centroids, and the report
aggregates mean accuracy with a normal-approximation 95% confidence
interval over episodes.

Episodes draw from rng streams derived from (seed, episode index), so
results are independent of how many worker threads evaluate them.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .data import Dataset

__all__ = [
    "Episode",
    "EvalReport",
    "sample_episode",
    "nearest_centroid",
    "extract_features",
    "evaluate_features",
    "evaluate",
    "export_embeddings",
    "load_embeddings",
]


@dataclass
class Episode:
    """One sampled task: index sets plus (after scoring) the labels."""

    way: int
    shot: int
    query_per_class: int
    support: np.ndarray  # (way, shot) dataset indices
    query: np.ndarray  # (way, query_per_class) dataset indices
    true_labels: np.ndarray | None = None
    predicted_labels: np.ndarray | None = None


@dataclass
class EvalReport:
    mean_accuracy: float  # percent
    ci95: float  # percent
    n_episodes: int
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (0.0 <= self.mean_accuracy <= 100.0) or self.ci95 < 0.0:
            raise ValueError("accuracy must lie in [0, 100] and ci95 must be >= 0")

    def summary(self) -> str:
        return (
            f"{self.config.get('way', '?')}-way {self.config.get('shot', '?')}-shot: "
            f"{self.mean_accuracy:.2f}% +/- {self.ci95:.2f} ({self.n_episodes} episodes)"
        )

    def to_json(self) -> str:
        doc = {
            "mean_accuracy": self.mean_accuracy,
            "ci95": self.ci95,
            "n_episodes": self.n_episodes,
            "config": self.config,
        }
        return json.dumps(doc, sort_keys=True)


def sample_episode(ds: Dataset, way: int, shot: int, query_per_class: int,
                   rng: np.random.Generator) -> Episode:
    """Sample ``way`` classes, then ``shot`` support + ``query_per_class``
    query items per class, all without replacement."""
    if ds.labels is None:
        raise ValueError("episodic sampling needs a labeled dataset")
    n_classes = ds.n_classes
    if way > n_classes:
        raise ValueError(f"{way}-way episode from a {n_classes}-class dataset")
    need = shot + query_per_class
    classes = rng.choice(n_classes, size=way, replace=False)
    support = np.empty((way, shot), dtype=np.int64)
    query = np.empty((way, query_per_class), dtype=np.int64)
    for row, c in enumerate(classes):
        pool = np.flatnonzero(ds.labels == c)
        if pool.size < need:
            raise ValueError(f"class {c} has {pool.size} items, episode needs {need}")
        picked = rng.choice(pool, size=need, replace=False)
        support[row] = picked[:shot]
        query[row] = picked[shot:]
    true = np.repeat(np.arange(way), query_per_class)
    return Episode(way=way, shot=shot, query_per_class=query_per_class,
                   support=support, query=query, true_labels=true)


def nearest_centroid(support_feats: np.ndarray, support_labels: np.ndarray,
                     query_feats: np.ndarray) -> np.ndarray:
    """Cosine nearest-centroid predictions; ties go to the lowest class id."""
    support_feats = np.asarray(support_feats, dtype=np.float64)
    query_feats = np.asarray(query_feats, dtype=np.float64)
    support_labels = np.asarray(support_labels)
    classes = np.unique(support_labels)
    if classes.size == 0:
        raise ValueError("no support examples")
    centroids = np.empty((classes.size, support_feats.shape[1]))
    for row, c in enumerate(classes):
        members = support_feats[support_labels == c]
        if members.shape[0] == 0:
            raise ValueError(f"class {c} has no support examples")
        mean = members.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-30:
            raise ValueError(f"support centroid for class {c} has no direction")
        centroids[row] = mean / norm
    sims = query_feats @ centroids.T
    return classes[np.argmax(sims, axis=1)]


def extract_features(state: enc.EncoderState, ds: Dataset, batch: int = 64) -> np.ndarray:
    """L2-normalized pooled backbone features for every item."""
    feats = []
    for lo in range(0, ds.n, batch):
        _, pooled, _ = enc.forward(state, ds.values[lo:lo + batch])
        feats.append(pooled)
    pooled = np.concatenate(feats, axis=0) if feats else np.zeros((0, state.config.dim))
    norms = np.linalg.norm(pooled, axis=1, keepdims=True)
    if np.any(norms < 1e-30):
        raise ValueError("an item produced a zero feature vector")
    return pooled / norms


def _episode_accuracy(feats: np.ndarray, ep: Episode) -> float:
    sup = feats[ep.support.reshape(-1)]
    sup_labels = np.repeat(np.arange(ep.way), ep.shot)
    pred = nearest_centroid(sup, sup_labels, feats[ep.query.reshape(-1)])
    ep.predicted_labels = pred
    return float(np.mean(pred == ep.true_labels))


def evaluate_features(
    feats: np.ndarray,
    labels: np.ndarray,
    way: int = 5,
    shot: int = 1,
    query_per_class: int = 15,
    episodes: int = 600,
    seed: int = 0,
    threads: int = 1,
) -> EvalReport:
    """Episodic evaluation over precomputed (unit-norm) features."""
    if episodes < 2:
        raise ValueError("need at least 2 episodes for a confidence interval")
    ds = Dataset(values=np.zeros((len(labels), 1, 1), dtype=np.float32), labels=labels)
    streams = np.random.SeedSequence(seed).spawn(episodes)

    def one(i: int) -> float:
        ep = sample_episode(ds, way, shot, query_per_class, np.random.default_rng(streams[i]))
        return _episode_accuracy(feats, ep)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = np.array(list(pool.map(one, range(episodes))))
    else:
        accs = np.array([one(i) for i in range(episodes)])
    accs = accs * 100.0
    mean = float(accs.mean())
    ci95 = float(1.96 * accs.std(ddof=1) / np.sqrt(episodes))
    return EvalReport(
        mean_accuracy=mean,
        ci95=ci95,
        n_episodes=episodes,
        config={"way": way, "shot": shot, "query_per_class": query_per_class, "seed": seed},
    )


def evaluate(
    state: enc.EncoderState,
    ds: Dataset,
    way: int = 5,
    shot: int = 1,
    query_per_class: int = 15,
    episodes: int = 600,
    seed: int = 0,
    threads: int = 1,
) -> EvalReport:
    """Episodic evaluation of an encoder's backbone features on a labeled
    dataset."""
    if ds.labels is None:
        raise ValueError("evaluation needs a labeled dataset")
    feats = extract_features(state, ds)
    return evaluate_features(feats, ds.labels, way, shot, query_per_class, episodes, seed, threads)


def export_embeddings(state: enc.EncoderState, ds: Dataset, path) -> None:
    """CSV of per-item features: item_id, label, feat_0..feat_{d-1}.

    Exports the same normalized backbone features evaluation uses; floats
    carry 9 significant digits.
    """
    if ds.labels is None:
        raise ValueError("export needs a labeled dataset")
    feats = extract_features(state, ds)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "label"] + [f"feat_{i}" for i in range(feats.shape[1])])
        for i in range(ds.n):
            w.writerow([i, int(ds.labels[i])] + [f"{v:.9g}" for v in feats[i]])


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an embeddings CSV back as (features, labels)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:2] != ["item_id", "label"]:
        raise ValueError(f"{path} is not an embeddings CSV")
    dim = len(header) - 2
    feats = np.zeros((len(body), dim))
    labels = np.zeros(len(body), dtype=np.int64)
    for r, row in enumerate(body):
        labels[r] = int(row[1])
        feats[r] = [float(v) for v in row[2:]]
    return feats, labels
