"""Centroids, graph distances, rank buckets, per-class accuracy, exports."""

import numpy as np
import pytest

from skelcontrast import diagnostics as diag
from skelcontrast.errors import LengthMismatchError, MissingCentroidError


def test_singleton_centroid_equals_sample():
    v = np.array([1.0, -2.0, 0.5])
    cents = diag.class_centroids([(v, 0), (2 * v, 1)])
    assert np.array_equal(cents.vectors[0], v)
    assert np.array_equal(cents.vectors[1], 2 * v)
    assert cents.counts.tolist() == [1, 1]


def test_antipodal_pair_gives_zero_centroid():
    cents = diag.class_centroids([(np.array([1.0, 0.0]), 0),
                                  (np.array([-1.0, 0.0]), 0)])
    assert np.array_equal(cents.vectors[0], [0.0, 0.0])


def test_centroids_match_accumulation_oracle():
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(40, 6))
    labels = rng.integers(0, 3, size=40)
    cents = diag.class_centroids(zip(vecs, labels), class_count=3)
    for c in range(3):
        mask = labels == c
        assert np.max(np.abs(cents.vectors[c] - vecs[mask].mean(axis=0))) < 1e-12
        assert cents.counts[c] == mask.sum()


def test_distance_at_own_centroid_is_zero():
    cents = diag.class_centroids([(np.array([1.0, 2.0]), 0),
                                  (np.array([0.0, 0.0]), 1)])
    d_all, d_cor, d_mis = diag.graph_distances(np.array([1.0, 2.0]), cents, 0, 0)
    assert d_cor == 0.0
    assert d_mis is None
    assert d_all == (0.0 + (1.0 + 4.0)) / 2.0


def test_two_class_distance_mean():
    cents = diag.ClassCentroids(np.array([[0.0, 0.0], [3.0, 4.0]]),
                                np.array([1, 1]))
    g = np.array([0.0, 0.0])
    d_all, d_cor, d_mis = diag.graph_distances(g, cents, 1, 0)
    assert d_all == (0.0 + 25.0) / 2.0
    assert d_cor == 25.0
    assert d_mis == 0.0  # misclassified toward class 0


def test_missing_centroid_raises():
    cents = diag.ClassCentroids(np.zeros((3, 2)), np.array([2, 0, 1]))
    with pytest.raises(MissingCentroidError):
        diag.graph_distances(np.zeros(2), cents, 0, 0)


def test_distance_report_bounds_and_rank_oracle():
    rng = np.random.default_rng(1)
    k, n, dim = 5, 60, 4
    vecs = rng.normal(size=(n, dim))
    labels = rng.integers(0, k, size=n)
    preds = rng.integers(0, k, size=n)
    cents = diag.class_centroids(
        list(zip(rng.normal(size=(k, dim)), range(k))), class_count=k)
    report = diag.distance_report(vecs, labels, preds, cents)

    for row, v, label, pred in zip(report.rows, vecs, labels, preds):
        per_class = ((cents.vectors - v) ** 2).sum(axis=1)
        assert per_class.min() - 1e-12 <= row.d_all <= per_class.max() + 1e-12
        # independent rank oracle: strictly closer classes, then index ties
        rank = 1 + int(np.sum(per_class < per_class[label])) \
            + int(np.sum((per_class == per_class[label])
                         & (np.arange(k) < label)))
        assert row.rank == rank
        assert (row.d_mis is None) == (pred == label)


def test_rank_report_degenerate_all_rank_one():
    cents = diag.class_centroids([(np.array([0.0, 0.0]), 0),
                                  (np.array([10.0, 0.0]), 1)])
    vecs = np.array([[0.1, 0.0], [9.9, 0.0]])
    report = diag.distance_report(vecs, [0, 1], [0, 1], cents)
    buckets = diag.rank_report(report.rows)
    assert len(buckets) == 1
    assert buckets[0].label == "rank1"
    assert buckets[0].count == 2
    assert buckets[0].accuracy == 1.0


def test_rank_report_bucket_scheme_and_population():
    rows = [diag.SampleDistance(i, 0, 0, 1.0, 1.0, None, rank)
            for i, rank in enumerate([1, 1, 2, 3, 5, 6, 10, 11])]
    rows += [diag.SampleDistance(8, 0, 1, 1.0, 1.0, 2.0, 4)]
    buckets = diag.rank_report(rows)
    assert [b.label for b in buckets] == ["rank1", "rank2-5", "rank6-10",
                                          "rank11-20"]
    assert sum(b.count for b in buckets) == len(rows)
    assert buckets[0].accuracy == 1.0
    assert abs(buckets[1].accuracy - 3.0 / 4.0) < 1e-12  # one wrong at rank 4


def test_rank_report_matches_sort_oracle():
    rng = np.random.default_rng(2)
    k, n = 4, 30
    vecs = rng.normal(size=(n, 3))
    labels = rng.integers(0, k, size=n)
    preds = rng.integers(0, k, size=n)
    cents = diag.class_centroids(
        list(zip(rng.normal(size=(k, 3)), range(k))), class_count=k)
    rows = diag.distance_report(vecs, labels, preds, cents).rows
    buckets = diag.rank_report(rows)
    for lo, hi in ((1, 1), (2, 5)):
        members = [r for r in rows if lo <= r.rank <= hi]
        got = next(b for b in buckets if (b.lo, b.hi) == (lo, hi))
        assert got.count == len(members)
        if members:
            assert abs(got.accuracy -
                       np.mean([r.correct for r in members])) < 1e-12


def test_per_class_accuracy():
    labels = [0, 0, 0, 0, 1, 1]
    preds = [0, 0, 0, 1, 1, 1]
    acc = diag.per_class_accuracy(preds, labels, class_count=3)
    assert acc[0] == 0.75
    assert acc[1] == 1.0
    assert 2 not in acc  # absent class reported absent
    assert diag.per_class_accuracy([0, 1], [0, 1], 2) == {0: 1.0, 1: 1.0}
    with pytest.raises(LengthMismatchError):
        diag.per_class_accuracy([0], [0, 1], 2)


def test_per_class_accuracy_matches_tally_oracle():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 5, size=100)
    preds = rng.integers(0, 5, size=100)
    acc = diag.per_class_accuracy(preds, labels, 5)
    for c in range(5):
        mask = labels == c
        if mask.sum():
            assert abs(acc[c] - (preds[mask] == c).mean()) < 1e-12


def test_export_embeddings_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    emb = rng.normal(size=(3, 4))
    feat = rng.normal(size=(3, 2))
    labels, preds = [0, 1, 2], [0, 2, 2]
    path = tmp_path / "emb.tsv"
    diag.export_embeddings(emb, feat, labels, preds, path)

    lines = path.read_text().strip().split("\n")
    assert len(lines) == 4  # header + 3 rows
    header = lines[0].split("\t")
    assert header == ["label", "prediction", "g0", "g1", "g2", "g3", "f0", "f1"]
    row = lines[1].split("\t")
    assert row[0] == "0" and row[1] == "0"
    got = np.array([float(x) for x in row[2:6]])
    assert np.array_equal(np.float32(got), np.float32(emb[0]))


def test_export_zero_samples_writes_header_only(tmp_path):
    path = tmp_path / "empty.tsv"
    diag.export_embeddings(np.zeros((0, 3)), np.zeros((0, 2)), [], [], path)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 1
    assert lines[0].startswith("label\tprediction")


def test_distance_csv_format(tmp_path):
    cents = diag.class_centroids([(np.array([0.0, 0.0]), 0),
                                  (np.array([2.0, 0.0]), 1)])
    report = diag.distance_report(np.array([[0.1, 0.0], [1.9, 0.0]]),
                                  [0, 1], [0, 0], cents)
    path = tmp_path / "dist.csv"
    diag.write_distance_csv(report, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "sample_id,label,prediction,d_all,d_cor,d_mis,rank"
    first = lines[1].split(",")
    assert first[5] == ""  # correct sample: empty d_mis
    second = lines[2].split(",")
    assert second[1] == "1" and second[2] == "0"
    assert float(second[5]) > 0.0
