"""Embedding-space diagnostics: centroid distances, rank buckets, exports.

Distances are squared Euclidean throughout. d_all averages a sample's
distance over every class centroid, d_cor is the distance to its true class,
and d_mis — defined only for misclassified samples — the distance to the
(wrong) predicted class. A sample's rank is the 1-based position of its true
class when the per-class distances are sorted ascending (ties by class
index); rank buckets follow the {1}, {2..5}, {6..10}, {11..20}, ... scheme.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatchError, MissingCentroidError


@dataclass
class ClassCentroids:
    vectors: np.ndarray   # (K, C_g); rows for absent classes are zero
    counts: np.ndarray    # (K,) member counts

    @property
    def class_count(self) -> int:
        return self.vectors.shape[0]

    def has(self, label: int) -> bool:
        return bool(self.counts[label] > 0)


def class_centroids(pairs, class_count: int | None = None) -> ClassCentroids:
    """Mean embedding per class from (embedding, label) pairs."""
    pairs = [(np.asarray(v, dtype=np.float64), int(label)) for v, label in pairs]
    if not pairs:
        raise LengthMismatchError("need at least one embedding")
    k = class_count if class_count is not None \
        else max(label for _, label in pairs) + 1
    dim = pairs[0][0].shape[0]
    sums = np.zeros((k, dim))
    counts = np.zeros(k, dtype=np.int64)
    for v, label in pairs:
        sums[label] += v
        counts[label] += 1
    vectors = np.zeros_like(sums)
    np.divide(sums, counts[:, None], out=vectors, where=counts[:, None] > 0)
    return ClassCentroids(vectors, counts)


def graph_distances(embedding, centroids: ClassCentroids, label: int,
                    prediction: int):
    """(d_all, d_cor, d_mis); d_mis is None when the prediction is correct."""
    missing = np.flatnonzero(centroids.counts == 0)
    if missing.size:
        raise MissingCentroidError(
            f"no centroid for classes {missing.tolist()}")
    v = np.asarray(embedding, dtype=np.float64)
    per_class = ((centroids.vectors - v) ** 2).sum(axis=1)
    d_all = float(per_class.mean())
    d_cor = float(per_class[label])
    d_mis = float(per_class[prediction]) if prediction != label else None
    return d_all, d_cor, d_mis


@dataclass
class SampleDistance:
    index: int
    label: int
    prediction: int
    d_all: float
    d_cor: float
    d_mis: float | None
    rank: int

    @property
    def correct(self) -> bool:
        return self.prediction == self.label


@dataclass
class DistanceReport:
    rows: list

    def _mean(self, values):
        return float(np.mean(values)) if values else float("nan")

    @property
    def mean_d_all(self) -> float:
        return self._mean([r.d_all for r in self.rows])

    @property
    def mean_d_cor_correct(self) -> float:
        return self._mean([r.d_cor for r in self.rows if r.correct])

    @property
    def mean_d_cor_incorrect(self) -> float:
        return self._mean([r.d_cor for r in self.rows if not r.correct])

    @property
    def mean_d_mis(self) -> float:
        return self._mean([r.d_mis for r in self.rows if not r.correct])


def distance_report(embeddings, labels, predictions,
                    centroids: ClassCentroids) -> DistanceReport:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if not (len(embeddings) == len(labels) == len(predictions)):
        raise LengthMismatchError("embeddings/labels/predictions differ in length")
    missing = np.flatnonzero(centroids.counts == 0)
    if missing.size:
        raise MissingCentroidError(f"no centroid for classes {missing.tolist()}")
    k = centroids.class_count
    rows = []
    for i, (v, label, pred) in enumerate(zip(embeddings, labels, predictions)):
        per_class = ((centroids.vectors - v) ** 2).sum(axis=1)
        order = np.lexsort((np.arange(k), per_class))  # ties by class index
        rank = int(np.flatnonzero(order == label)[0]) + 1
        d_mis = float(per_class[pred]) if pred != label else None
        rows.append(SampleDistance(i, int(label), int(pred),
                                   float(per_class.mean()),
                                   float(per_class[label]), d_mis, rank))
    return DistanceReport(rows)


DEFAULT_BUCKETS = ((1, 1), (2, 5), (6, 10), (11, 20), (21, 40), (41, 60))


@dataclass
class RankBucket:
    lo: int
    hi: int
    count: int
    accuracy: float | None

    @property
    def label(self) -> str:
        return f"rank{self.lo}" if self.lo == self.hi \
            else f"rank{self.lo}-{self.hi}"


def rank_report(rows, buckets=DEFAULT_BUCKETS) -> list:
    """Accuracy per rank bucket, up to the last populated bucket."""
    max_rank = max((r.rank for r in rows), default=0)
    edges = list(buckets)
    while edges and edges[-1][1] < max_rank:  # extend by 20s if ever needed
        edges.append((edges[-1][1] + 1, edges[-1][1] + 20))
    out = []
    for lo, hi in edges:
        members = [r for r in rows if lo <= r.rank <= hi]
        acc = float(np.mean([r.correct for r in members])) if members else None
        out.append(RankBucket(lo, hi, len(members), acc))
    while out and out[-1].count == 0:
        out.pop()
    return out


def per_class_accuracy(predictions, labels, class_count: int) -> dict:
    """{class: accuracy} for classes that appear in `labels`."""
    if len(predictions) != len(labels):
        raise LengthMismatchError("predictions/labels differ in length")
    correct = np.zeros(class_count, dtype=np.int64)
    total = np.zeros(class_count, dtype=np.int64)
    for pred, label in zip(predictions, labels):
        total[label] += 1
        correct[label] += int(pred == label)
    return {c: correct[c] / total[c] for c in range(class_count) if total[c]}


def export_embeddings(embeddings, features, labels, predictions, path):
    """TSV: label, prediction, graph-embedding columns, feature columns.
    Values are written at float32 precision (9 significant digits)."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    n = len(labels)
    if not (len(embeddings) == len(features) == n == len(predictions)):
        raise LengthMismatchError("embedding export inputs differ in length")
    e_dim = embeddings.shape[1] if n else 0
    f_dim = features.shape[1] if n else 0
    with open(path, "w", encoding="utf-8") as f:
        header = ["label", "prediction"]
        header += [f"g{i}" for i in range(e_dim)]
        header += [f"f{i}" for i in range(f_dim)]
        f.write("\t".join(header) + "\n")
        for i in range(n):
            cells = [str(int(labels[i])), str(int(predictions[i]))]
            cells += [f"{np.float32(x):.9g}" for x in embeddings[i]]
            cells += [f"{np.float32(x):.9g}" for x in features[i]]
            f.write("\t".join(cells) + "\n")


def write_distance_csv(report: DistanceReport, path):
    """CSV: sample_id, label, prediction, d_all, d_cor, d_mis (empty when
    correct), rank."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "label", "prediction",
                         "d_all", "d_cor", "d_mis", "rank"])
        for r in report.rows:
            writer.writerow([r.index, r.label, r.prediction,
                             f"{r.d_all:.17g}", f"{r.d_cor:.17g}",
                             "" if r.d_mis is None else f"{r.d_mis:.17g}",
                             r.rank])
