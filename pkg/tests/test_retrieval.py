"""Retrieval tests: exhaustive oracle agreement, metric hand counts,
and structural invariants of the ranking."""

import math

import numpy as np
import pytest

from polyemb import retrieval
from polyemb.errors import (DomainError, MissingGroundTruthError,
                            RetrievalError)


def cos_dist(a, b):
    num = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return 1.0 - num / (na * nb)


def oracle_ranking(ids, db, q):
    """Exhaustive double-loop scorer with (score, id) ordering."""
    scored = []
    for m in range(db.shape[0]):
        best = min(cos_dist(q[p], db[m, r])
                   for p in range(q.shape[0]) for r in range(db.shape[1]))
        scored.append((best, ids[m]))
    scored.sort()
    return [i for _, i in scored]


def random_index(rng, m, k, h=6):
    ids = [f"item{i:04d}" for i in range(m)]
    return ids, rng.standard_normal((m, k, h))


class TestQuery:
    def test_query_contained_in_index_ranks_first(self):
        rng = np.random.default_rng(50)
        ids, emb = random_index(rng, 20, 3)
        index = retrieval.build_index(ids, emb)
        ranked = retrieval.query(index, emb[7], top_k=3)
        assert ranked[0][0] == "item0007"
        assert ranked[0][1] == pytest.approx(0.0, abs=1e-12)

    def test_k1_reduces_to_nearest_neighbor(self):
        rng = np.random.default_rng(51)
        ids, emb = random_index(rng, 30, 1)
        index = retrieval.build_index(ids, emb)
        q = rng.standard_normal((1, 6))
        ranked = retrieval.query(index, q)
        dists = [cos_dist(q[0], emb[m, 0]) for m in range(30)]
        assert ranked[0][0] == ids[int(np.argmin(dists))]

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(52)
        for trial in range(10):
            m = int(rng.integers(5, 60))
            k = int(rng.integers(1, 6))
            ids, emb = random_index(rng, m, k)
            index = retrieval.build_index(ids, emb)
            q = rng.standard_normal((int(rng.integers(1, 6)), 6))
            ranked = retrieval.query(index, q)
            assert [i for i, _ in ranked] == oracle_ranking(ids, emb, q)

    def test_empty_index_rejected(self):
        with pytest.raises(RetrievalError):
            retrieval.build_index([], np.empty((0, 2, 3)))

    def test_duplicate_ids_rejected(self):
        with pytest.raises(RetrievalError):
            retrieval.build_index(["a", "a"], np.ones((2, 1, 3)))

    def test_zero_norm_rows_rejected(self):
        emb = np.ones((2, 1, 3))
        emb[1, 0] = 0.0
        with pytest.raises(DomainError):
            retrieval.build_index(["a", "b"], emb)

    def test_scale_invariance(self):
        rng = np.random.default_rng(53)
        ids, emb = random_index(rng, 15, 2)
        q = rng.standard_normal((2, 6))
        base = retrieval.scores(retrieval.build_index(ids, emb), q[None])[0]
        scales = rng.uniform(0.1, 9.0, (15, 2, 1))
        scaled = retrieval.scores(retrieval.build_index(ids, emb * scales),
                                  q[None] * 3.7)[0]
        assert np.max(np.abs(base - scaled)) < 1e-12

    def test_blocking_is_invisible(self, monkeypatch):
        rng = np.random.default_rng(54)
        ids, emb = random_index(rng, 40, 2)
        q = rng.standard_normal((3, 2, 6))
        base = retrieval.scores(retrieval.build_index(ids, emb), q)
        monkeypatch.setattr(retrieval, "_BLOCK_INSTANCES", 7)
        blocked = retrieval.scores(retrieval.build_index(ids, emb), q)
        assert np.array_equal(base, blocked)


class TestMetrics:
    def test_perfect_ranks(self):
        rep = retrieval.metrics_from_ranks([1, 1, 1], db_size=10)
        assert rep.r_at == {1: 1.0, 5: 1.0, 10: 1.0}
        assert rep.med_r == 1
        assert rep.nmr == pytest.approx(0.1)
        assert rep.rsum_contribution == pytest.approx(300.0)

    def test_hand_counted_ranks(self):
        rep = retrieval.metrics_from_ranks([2, 6, 11], db_size=20)
        assert rep.r_at[1] == 0.0
        assert rep.r_at[5] == pytest.approx(1.0 / 3.0)
        assert rep.r_at[10] == pytest.approx(2.0 / 3.0)
        assert rep.med_r == 6
        assert rep.nmr == pytest.approx(6.0 / 20.0)

    def test_even_count_takes_lower_median(self):
        rep = retrieval.metrics_from_ranks([3, 9], db_size=10)
        assert rep.med_r == 3

    def test_recall_monotone_in_k(self):
        rng = np.random.default_rng(55)
        ranks = rng.integers(1, 50, size=40)
        rep = retrieval.metrics_from_ranks(ranks, db_size=50)
        assert rep.r_at[1] <= rep.r_at[5] <= rep.r_at[10]
        assert all(r <= 50 for r in ranks)
        assert float(np.mean(ranks <= 50)) == 1.0


class TestEvaluate:
    def test_best_rank_among_multiple_ground_truths(self):
        rng = np.random.default_rng(56)
        ids, emb = random_index(rng, 10, 2)
        index = retrieval.build_index(ids, emb)
        queries = emb[[4]]
        rep = retrieval.evaluate(index, queries, [["item0009", "item0004"]])
        assert rep.r_at[1] == 1.0  # item0004 is the query itself

    def test_missing_ground_truth_collected(self):
        rng = np.random.default_rng(57)
        ids, emb = random_index(rng, 5, 1)
        index = retrieval.build_index(ids, emb)
        with pytest.raises(MissingGroundTruthError) as exc:
            retrieval.evaluate(index, emb[:3], [["item0000"], ["nope"], ["also-no"]])
        assert len(exc.value.missing) == 2

    def test_chance_level_recall_on_random_embeddings(self):
        # R@1 of random queries vs random db stays within 3 sigma of 1/M
        m, trials = 500, 20
        hits = 0
        for trial in range(trials):
            rng = np.random.default_rng(1000 + trial)
            ids, emb = random_index(rng, m, 2, h=8)
            index = retrieval.build_index(ids, emb)
            q = rng.standard_normal((1, 2, 8))
            gt = [[f"item{rng.integers(0, m):04d}"]]
            rep = retrieval.evaluate(index, q, gt)
            hits += int(rep.r_at[1] > 0)
        p = 1.0 / m
        sigma = math.sqrt(trials * p * (1 - p))
        assert abs(hits - trials * p) <= 3 * sigma + 1e-9

    def test_added_instance_shifts_ranks_by_at_most_one(self):
        rng = np.random.default_rng(58)
        ids, emb = random_index(rng, 25, 2)
        q = rng.standard_normal((2, 6))
        index = retrieval.build_index(ids, emb)
        row = retrieval.scores(index, q[None])[0]
        order = retrieval._full_ranking(index, row)
        ranks = {ids[i]: r + 1 for r, i in enumerate(order)}
        bigger = retrieval.build_index(
            ids + ["intruder"],
            np.concatenate([emb, rng.standard_normal((1, 2, 6))]))
        row2 = retrieval.scores(bigger, q[None])[0]
        order2 = retrieval._full_ranking(bigger, row2)
        ranks2 = {bigger.ids[i]: r + 1 for r, i in enumerate(order2)}
        for id_ in ids:
            assert ranks[id_] <= ranks2[id_] <= ranks[id_] + 1


class TestBidirectional:
    def test_identical_sides_are_perfect(self):
        rng = np.random.default_rng(59)
        z = rng.standard_normal((12, 2, 5))
        ids = [f"p{i}" for i in range(12)]
        report = retrieval.evaluate_bidirectional(ids, z, z.copy())
        assert report.rsum == pytest.approx(600.0)
        assert report.x_to_y.med_r == 1

    def test_rsum_is_sum_of_reported_recalls(self):
        rng = np.random.default_rng(60)
        zx = rng.standard_normal((30, 2, 5))
        zy = rng.standard_normal((30, 2, 5))
        ids = [f"p{i}" for i in range(30)]
        report = retrieval.evaluate_bidirectional(ids, zx, zy)
        expected = 100.0 * (sum(report.x_to_y.r_at.values())
                            + sum(report.y_to_x.r_at.values()))
        assert report.rsum == pytest.approx(expected, abs=1e-12)

    def test_database_storage_order_is_irrelevant(self):
        rng = np.random.default_rng(61)
        zx = rng.standard_normal((20, 2, 5))
        zy = rng.standard_normal((20, 2, 5))
        ids = [f"p{i}" for i in range(20)]
        base = retrieval.evaluate_bidirectional(ids, zx, zy)
        perm = rng.permutation(20)
        # reorder the stored pairs wholesale; ground truth follows the ids
        shuffled = retrieval.evaluate_bidirectional(
            [ids[i] for i in perm], zx[perm], zy[perm])
        assert shuffled.to_dict() == base.to_dict()

    def test_repairing_y_side_changes_only_its_database_direction(self):
        rng = np.random.default_rng(62)
        zx = rng.standard_normal((20, 2, 5))
        zy = rng.standard_normal((20, 2, 5))
        ids = [f"p{i}" for i in range(20)]
        base = retrieval.evaluate_bidirectional(ids, zx, zy)
        # swap which y embedding belongs to which pair id
        perm = np.roll(np.arange(20), 1)
        repaired = retrieval.evaluate_bidirectional(ids, zx, zy[perm])
        # y->x metrics are computed from the same multiset of queries/gt,
        # each y embedding still queried against the unchanged x database,
        # but its gt id changed; x->y faces a re-labeled database.
        assert repaired.to_dict() != base.to_dict()

    def test_query_against_itself_table_formats(self):
        rng = np.random.default_rng(63)
        z = rng.standard_normal((4, 1, 5))
        report = retrieval.evaluate_bidirectional(list("abcd"), z, z.copy())
        table = retrieval.format_table(report)
        assert "x->y" in table and "y->x" in table and "rsum" in table
