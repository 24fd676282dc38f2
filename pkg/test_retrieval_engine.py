import itertools

import numpy as np
import pytest

from conftest import random_unit_rows
from embedding_core import EmbeddingStore, chordal_distance
from errors import BudgetExceedsDatabase, DimensionMismatch, EmptyQueryClass, NormViolation, ZeroVector
from retrieval_engine import (
    Cache,
    ClassAverages,
    QuerySet,
    RetrievalMode,
    build_cache,
    cache_from_rows,
    class_averages,
    materialize_v,
    nearest_cluster,
    oracle_retrieve,
    read_cache,
    top_k,
    unnormalized_class_means,
    write_cache,
)
from synthetic_world import WorldConfig, make_world


@pytest.fixture
def tiny_db():
    return EmbeddingStore(np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]))


class TestTopK:
    def test_worked_example(self, tiny_db):
        result = top_k(tiny_db, [0.0, 1.0], 2)
        assert [i for i, _ in result] == [1, 2]
        np.testing.assert_allclose([s for _, s in result], [1.0, 0.8], atol=1e-15)

    def test_whole_database(self, tiny_db):
        result = top_k(tiny_db, [0.0, 1.0], 3)
        assert [i for i, _ in result] == [1, 2, 0]

    def test_duplicates_keep_index_order(self):
        db = EmbeddingStore(np.array([[0.0, 1.0], [0.6, 0.8], [0.6, 0.8]]))
        assert [i for i, _ in top_k(db, [0.6, 0.8], 2)] == [1, 2]

    def test_budget_exceeds_database(self, tiny_db):
        with pytest.raises(BudgetExceedsDatabase):
            top_k(tiny_db, [1.0, 0.0], 4)

    def test_query_dimension(self, tiny_db):
        with pytest.raises(DimensionMismatch):
            top_k(tiny_db, [1.0, 0.0, 0.0], 1)

    def test_matches_brute_force(self, rng):
        for trial in range(50):
            n = int(rng.integers(1, 65))
            db = EmbeddingStore(random_unit_rows(rng, n, 4))
            q = random_unit_rows(rng, 1, 4)[0]
            k = int(rng.integers(1, n + 1))
            result = top_k(db, q, k)
            sims = [s for _, s in result]
            assert all(a >= b for a, b in zip(sims, sims[1:]))
            scores = np.clip(db.matrix() @ q, -1.0, 1.0)
            expected = sorted(range(n), key=lambda i: (-scores[i], i))[:k]
            assert [i for i, _ in result] == expected


class TestBuildCache:
    def test_exact_text_match(self, rng):
        rows = random_unit_rows(rng, 10, 5)
        db = EmbeddingStore(rows)
        text = ClassAverages.from_rows(rows[[3, 7]])
        cache = build_cache(db, QuerySet.text(text), 1)
        np.testing.assert_array_equal(cache.columns, rows[[3, 7]].T)

    def test_single_seed_i2i_equals_t2i(self, rng):
        db = EmbeddingStore(random_unit_rows(rng, 40, 6))
        queries = random_unit_rows(rng, 3, 6)
        t2i = build_cache(db, QuerySet.text(ClassAverages.from_rows(queries)), 4)
        i2i = build_cache(db, QuerySet.seeds([q[None, :] for q in queries]), 4)
        np.testing.assert_array_equal(t2i.columns, i2i.columns)

    def test_brute_force_two_classes(self, rng):
        rows = random_unit_rows(rng, 6, 3)
        db = EmbeddingStore(rows)
        seeds = [random_unit_rows(rng, 2, 3), random_unit_rows(rng, 1, 3)]
        cache = build_cache(db, QuerySet.seeds(seeds), 2)
        for c, block in enumerate(seeds, start=1):
            best = max(itertools.combinations(range(6), 2),
                       key=lambda pair: sorted((np.max(block @ rows[i]) for i in pair), reverse=True))
            scores = {i: float(np.max(block @ rows[i])) for i in best}
            expected = sorted(best, key=lambda i: (-scores[i], i))
            np.testing.assert_array_equal(cache.class_block(c), rows[expected].T)

    def test_i2i_prototype_seeds_stay_in_cluster(self, small_world):
        seeds = [small_world.prototypes.columns[:, c][None, :] for c in range(small_world.classes)]
        cache = build_cache(small_world.database, QuerySet.seeds(seeds), 16)
        for c in range(1, small_world.classes + 1):
            for column in cache.class_block(c).T:
                assert nearest_cluster(small_world, column) == c - 1

    def test_budget_exceeds_database(self, tiny_db):
        with pytest.raises(BudgetExceedsDatabase):
            build_cache(tiny_db, QuerySet.seeds([np.array([[1.0, 0.0]])]), 5)

    def test_empty_query_class(self):
        with pytest.raises(EmptyQueryClass):
            QuerySet.seeds([np.array([[1.0, 0.0]]), np.zeros((0, 2))])

    def test_t2i_takes_one_query(self):
        with pytest.raises(ValueError):
            QuerySet(RetrievalMode.T2I, (np.array([[1.0, 0.0], [0.0, 1.0]]),))


class TestCache:
    def test_column_count(self):
        with pytest.raises(DimensionMismatch):
            Cache(np.eye(3)[:, :2], classes=2, shots=2)

    def test_unit_columns(self):
        with pytest.raises(NormViolation):
            Cache(np.array([[2.0], [0.0]]), classes=1, shots=1)

    def test_finetuned_only_finite(self):
        cache = Cache(np.array([[2.0], [0.0]]), classes=1, shots=1, finetuned=True)
        assert cache.finetuned
        with pytest.raises(NormViolation):
            Cache(np.array([[np.nan], [0.0]]), classes=1, shots=1, finetuned=True)

    def test_omega_positive(self):
        with pytest.raises(ValueError):
            Cache(np.eye(2), classes=2, shots=1, omega=0.0)

    def test_class_of_column(self):
        cache = Cache(np.tile(np.eye(2)[:, :1], 6), classes=3, shots=2)
        np.testing.assert_array_equal(cache.class_of_column(), [1, 1, 2, 2, 3, 3])

    def test_write_read(self, tmp_path, rng):
        cache = cache_from_rows([random_unit_rows(rng, 3, 5) for _ in range(2)], omega=2.5)
        path = tmp_path / "cache.raeb"
        write_cache(path, cache)
        back = read_cache(path)
        assert (back.classes, back.shots, back.omega) == (2, 3, 2.5)
        np.testing.assert_allclose(back.columns, cache.columns, atol=1e-7)

    def test_finetuned_cache_not_stored(self, tmp_path):
        cache = Cache(np.array([[2.0], [0.0]]), classes=1, shots=1, finetuned=True)
        with pytest.raises(NormViolation):
            write_cache(tmp_path / "c.raeb", cache)


class TestClassAverages:
    def test_single_shot_is_identity(self, rng):
        cache = cache_from_rows([random_unit_rows(rng, 1, 4) for _ in range(3)])
        np.testing.assert_array_equal(class_averages(cache).columns, cache.columns)

    def test_two_orthogonal_columns(self):
        cache = Cache(np.eye(2), classes=1, shots=2)
        np.testing.assert_allclose(class_averages(cache).columns[:, 0], [0.70710678, 0.70710678], atol=1e-8)

    def test_equal_columns(self, rng):
        v = random_unit_rows(rng, 1, 5)
        cache = cache_from_rows([np.repeat(v, 4, axis=0)])
        np.testing.assert_allclose(class_averages(cache).columns[:, 0], v[0], atol=1e-12)

    def test_antipodal_cancellation(self):
        cache = Cache(np.array([[1.0, -1.0], [0.0, 0.0]]), classes=1, shots=2)
        with pytest.raises(ZeroVector):
            class_averages(cache)

    def test_value_matrix(self):
        expected = np.array([
            [1, 1, 0, 0, 0, 0],
            [0, 0, 1, 1, 0, 0],
            [0, 0, 0, 0, 1, 1],
        ])
        np.testing.assert_array_equal(materialize_v(3, 2), expected)

    def test_value_matrix_structure(self):
        v = materialize_v(4, 3)
        np.testing.assert_array_equal(v.sum(axis=0), np.ones(12))
        np.testing.assert_array_equal(v.sum(axis=1), np.full(4, 3))

    def test_value_matrix_reproduces_means(self, rng):
        cache = cache_from_rows([random_unit_rows(rng, 3, 6) for _ in range(4)])
        means = unnormalized_class_means(cache)
        averages = class_averages(cache).columns
        np.testing.assert_allclose(means / np.linalg.norm(means, axis=0), averages, atol=1e-12)
        np.testing.assert_allclose(means[:, 1], cache.class_block(2).mean(axis=1), atol=1e-12)


class TestOracleRetrieve:
    def test_samples_inside_cap(self, small_world):
        cluster = small_world.clusters[2]
        draws = oracle_retrieve(small_world, cluster.center, 50, 3)
        assert draws.shape == (50, small_world.dim)
        for row in draws:
            assert chordal_distance(row, cluster.center) <= cluster.kappa + 1e-9

    def test_zero_kappa_single_draw(self):
        world = make_world(WorldConfig(classes=3, dim=6, kappa=0.0, nu_target=0.9, db_per_cluster=4))
        center = world.clusters[1].center
        np.testing.assert_array_equal(oracle_retrieve(world, center, 1, 0)[0], center)

    def test_concentrates_near_closest_cluster(self, small_world):
        a, b = small_world.clusters[0].center, small_world.clusters[1].center
        query = 0.8 * a + 0.2 * b
        query /= np.linalg.norm(query)
        assert nearest_cluster(small_world, query) == 0
        draws = oracle_retrieve(small_world, query, 200, 5)
        assert float((draws @ a).mean()) > float((draws @ b).mean())

    def test_same_seed_same_draws(self, small_world):
        center = small_world.clusters[0].center
        np.testing.assert_array_equal(oracle_retrieve(small_world, center, 5, 9),
                                      oracle_retrieve(small_world, center, 5, 9))
