import math

import numpy as np
import pytest

from reident import datagen, embedding, features, retrieval
from reident.retrieval import (
    Gallery,
    RankedList,
    accuracy_at_k,
    accuracy_curve,
    average_precision_at_5,
    build_gallery,
    classify,
    gallery_bytes,
    load_gallery,
    map_at_5,
    rank,
    save_gallery,
    write_curve_csv,
)


def make_gallery(embeddings, individual_ids, obs_ids=None):
    n = len(individual_ids)
    return Gallery(
        embeddings=np.asarray(embeddings, dtype=np.float64),
        obs_ids=np.asarray(obs_ids if obs_ids is not None else range(n)),
        individual_ids=np.asarray(individual_ids),
        sides=np.zeros(n, dtype=np.int64),
        days=np.zeros(n, dtype=np.int64),
    )


def random_gallery(n, n_classes, dim=128, seed=0, duplicates=0):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((n, dim))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    for i in range(duplicates):
        e[n - 1 - i] = e[i]  # exact ties to exercise obs_id tie-breaks
    ids = rng.integers(0, n_classes, size=n)
    return make_gallery(e, ids)


def oracle_rank(query, gallery):
    """Brute-force double loop + sort, independent of the library path."""
    rows = []
    for i in range(len(gallery)):
        d = math.sqrt(sum((a - b) ** 2 for a, b in zip(gallery.embeddings[i], query)))
        rows.append((d, int(gallery.obs_ids[i]), int(gallery.individual_ids[i])))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


class TestRank:
    def test_query_in_gallery_ranks_first_at_zero(self):
        g = random_gallery(20, 5, seed=1)
        ranked = rank(g.embeddings[7], g)
        assert ranked.obs_ids[0] == 7
        assert ranked.distances[0] == 0.0

    def test_matches_brute_force_oracle(self):
        g = random_gallery(500, 40, seed=2, duplicates=3)
        rng = np.random.default_rng(3)
        for _ in range(10):
            q = rng.standard_normal(128)
            q /= np.linalg.norm(q)
            ranked = rank(q, g)
            expected = oracle_rank(q, g)
            assert [int(o) for o in ranked.obs_ids] == [r[1] for r in expected]

    def test_tie_break_by_obs_id(self):
        e = np.zeros((3, 4))
        e[:, 0] = 1.0  # all identical embeddings
        g = make_gallery(e, [5, 6, 7], obs_ids=[30, 10, 20])
        ranked = rank(e[0], g)
        assert list(ranked.obs_ids) == [10, 20, 30]

    def test_distances_nondecreasing(self):
        g = random_gallery(100, 10, seed=4)
        q = np.random.default_rng(5).standard_normal(128)
        q /= np.linalg.norm(q)
        ranked = rank(q, g)
        assert np.all(np.diff(ranked.distances) >= 0)

    def test_dim_mismatch_and_empty(self):
        g = random_gallery(4, 2, seed=6)
        with pytest.raises(ValueError):
            rank(np.ones(64), g)
        empty = Gallery(np.zeros((0, 128)), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))
        with pytest.raises(ValueError):
            rank(np.ones(128), empty)


class TestClassify:
    def test_singleton_gallery(self):
        g = random_gallery(1, 1, seed=7)
        q = np.random.default_rng(8).standard_normal(128)
        assert classify(q / np.linalg.norm(q), g) == int(g.individual_ids[0])

    def test_equals_argmin_oracle(self):
        g = random_gallery(60, 8, seed=9)
        rng = np.random.default_rng(10)
        for _ in range(20):
            q = rng.standard_normal(128)
            q /= np.linalg.norm(q)
            assert classify(q, g) == oracle_rank(q, g)[0][2]

    def test_tie_at_minimum_takes_lower_obs_id(self):
        e = np.zeros((2, 4))
        e[:, 0] = 1.0
        g = make_gallery(e, [9, 3], obs_ids=[42, 17])
        assert classify(e[0], g) == 3  # obs 17 wins the tie


def ranked_from_labels(labels, true_positions=None):
    """Build a RankedList with the given individual ids at distances 0.1*i."""
    n = len(labels)
    return RankedList(
        obs_ids=np.arange(n),
        individual_ids=np.asarray(labels),
        distances=0.1 * np.arange(n, dtype=float),
    )


class TestAccuracyAtK:
    def test_hit_at_one(self):
        results = [(ranked_from_labels([3, 1, 2]), 3)]
        assert accuracy_at_k(results, 1) == 1.0

    def test_miss_then_hit_at_larger_k(self):
        results = [(ranked_from_labels([3, 1, 2]), 2)]
        assert accuracy_at_k(results, 1) == 0.0
        assert accuracy_at_k(results, 3) == 1.0

    def test_nondecreasing_in_k(self):
        rng = np.random.default_rng(11)
        results = []
        for _ in range(30):
            labels = rng.integers(0, 6, size=25)
            results.append((ranked_from_labels(labels), int(rng.integers(0, 6))))
        prev = 0.0
        for k in range(1, 26):
            acc = accuracy_at_k(results, k)
            assert acc >= prev
            prev = acc

    def test_errors(self):
        with pytest.raises(ValueError):
            accuracy_at_k([], 1)
        with pytest.raises(ValueError):
            accuracy_at_k([(ranked_from_labels([1]), 1)], 0)


class TestMapAt5:
    def test_all_top_five_relevant(self):
        labels = [4] * 6 + [1] * 4
        assert map_at_5([(ranked_from_labels(labels), 4)]) == 1.0

    def test_single_relevant_at_rank_three(self):
        labels = [9, 8, 5, 7, 6, 2]
        ap = average_precision_at_5(ranked_from_labels(labels), 5)
        assert abs(ap - 1.0 / 3.0) < 1e-12

    def test_hand_computed_cases(self):
        # (labels, true_id, expected AP@5) with R = count of true_id.
        cases = [
            ([1, 2, 1, 3, 4, 9], 1, (1.0 + 2.0 / 3.0) / 2.0),
            ([2, 1, 1, 9, 9, 9], 1, (1.0 / 2.0 + 2.0 / 3.0) / 2.0),
            ([7, 7, 7, 7, 7, 0], 7, 1.0),
            ([0, 7, 7, 7, 7, 7], 7, (1.0 / 2 + 2.0 / 3 + 3.0 / 4 + 4.0 / 5) / 5.0),
            ([5, 9, 9, 9, 9, 5], 5, (1.0) / 2.0),
        ]
        for labels, true_id, expected in cases:
            ap = average_precision_at_5(ranked_from_labels(labels), true_id)
            assert abs(ap - expected) < 1e-12, (labels, true_id)

    def test_requires_relevant_entry(self):
        with pytest.raises(ValueError):
            average_precision_at_5(ranked_from_labels([1, 2, 3]), 9)

    def test_bounds(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            labels = rng.integers(0, 4, size=12)
            true_id = int(labels[rng.integers(0, 12)])
            ap = average_precision_at_5(ranked_from_labels(labels), true_id)
            assert 0.0 <= ap <= 1.0


class TestAccuracyCurve:
    def _results(self, seed=13, n_queries=25, n_gallery=30, n_classes=5):
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(n_queries):
            labels = rng.integers(0, n_classes, size=n_gallery)
            out.append((ranked_from_labels(labels), int(rng.integers(0, n_classes))))
        return out

    def test_reaches_one_under_class_coverage(self):
        rng = np.random.default_rng(14)
        results = []
        for _ in range(10):
            labels = list(range(5)) * 4
            rng.shuffle(labels)
            results.append((ranked_from_labels(labels), int(rng.integers(0, 5))))
        curve = accuracy_curve(results)
        assert curve[-1][1] == 1.0

    def test_matches_per_k_recomputation(self):
        results = self._results()
        curve = dict(accuracy_curve(results))
        for k in (1, 2, 5, 17, 30):
            assert curve[k] == accuracy_at_k(results, k)

    def test_pointwise_at_least_k1(self):
        results = self._results(seed=15)
        curve = accuracy_curve(results)
        k1 = curve[0][1]
        assert all(acc >= k1 for _, acc in curve)

    def test_csv_format(self, tmp_path):
        curve = [(1, 0.5), (2, 0.75)]
        path = tmp_path / "curve.csv"
        write_curve_csv(path, curve)
        lines = path.read_text().splitlines()
        assert lines[0] == "k,accuracy"
        assert lines[1] == "1,0.5"


class TestBuildGallery:
    def _pipeline(self, n=6):
        obs = datagen.gen_population(n, 4, 200, seed=3)
        split = datagen.split_dataset(obs, 0.3, seed=3)
        backbone = features.build_backbone(1, 64)
        head = embedding.init_head(backbone.feature_dim, np.random.default_rng(0))
        return split, head, backbone

    def test_one_entry_per_support_observation(self):
        split, head, backbone = self._pipeline()
        g = build_gallery(head, backbone, split.support)
        assert len(g) == len(split.support)

    def test_deterministic(self):
        split, head, backbone = self._pipeline()
        g1 = build_gallery(head, backbone, split.support)
        g2 = build_gallery(head, backbone, split.support)
        assert np.array_equal(g1.embeddings, g2.embeddings)
        assert np.array_equal(g1.obs_ids, g2.obs_ids)

    def test_entries_unit_norm(self):
        split, head, backbone = self._pipeline()
        g = build_gallery(head, backbone, split.support)
        assert np.allclose(np.linalg.norm(g.embeddings, axis=1), 1.0, atol=1e-6)

    def test_empty_support_rejected(self):
        _, head, backbone = self._pipeline()
        with pytest.raises(ValueError):
            build_gallery(head, backbone, [])

    def test_single_observation_gallery(self):
        split, head, backbone = self._pipeline()
        g = build_gallery(head, backbone, split.support[:1])
        assert len(g) == 1


class TestGalleryFile:
    def test_round_trip(self, tmp_path):
        g = random_gallery(12, 3, seed=16)
        path = tmp_path / "gallery.bin"
        save_gallery(path, g)
        loaded = load_gallery(path)
        assert np.array_equal(loaded.obs_ids, g.obs_ids)
        assert np.array_equal(loaded.individual_ids, g.individual_ids)
        # Embeddings round through f32.
        assert np.allclose(loaded.embeddings, g.embeddings, atol=1e-6)

    def test_f32_round_trip_is_stable(self, tmp_path):
        g = random_gallery(5, 2, seed=17)
        p1 = tmp_path / "a.bin"
        p2 = tmp_path / "b.bin"
        save_gallery(p1, g)
        save_gallery(p2, load_gallery(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_and_truncation(self, tmp_path):
        g = random_gallery(3, 2, seed=18)
        path = tmp_path / "gallery.bin"
        save_gallery(path, g)
        raw = path.read_bytes()
        assert raw.startswith(b"REIDGAL1")
        path.write_bytes(raw[:-8])
        from reident.errors import DataFormatError

        with pytest.raises(DataFormatError):
            load_gallery(path)

    def test_bytes_equals_file(self, tmp_path):
        g = random_gallery(4, 2, seed=19)
        path = tmp_path / "gallery.bin"
        save_gallery(path, g)
        assert path.read_bytes() == gallery_bytes(g)

    def test_duplicate_obs_ids_rejected(self):
        e = np.eye(3, 128)
        with pytest.raises(ValueError):
            make_gallery(e, [1, 2, 3], obs_ids=[0, 0, 1])
