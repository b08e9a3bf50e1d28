from collections import deque

import numpy as np
import pytest

from lacl.errors import InvalidClassError, InvalidConfigError, NormalizationError
from lacl.queue import LesionQueue

from conftest import random_unit


class TestCreate:
    def test_full_scale_sizing(self):
        q = LesionQueue.create(5, 65536, 4, init_mode="empty")
        assert q.capacity == 13107

    def test_single_class(self):
        q = LesionQueue.create(1, 8, 3, init_mode="empty")
        assert q.num_classes == 1 and q.capacity == 8

    def test_random_unit_fill(self):
        q = LesionQueue.create(4, 4096, 8, seed=3)
        assert q.lengths.tolist() == [1024] * 4
        for keys in q.snapshot_all():
            assert np.max(np.abs(np.linalg.norm(keys, axis=1) - 1.0)) <= 1e-6

    def test_seeded(self):
        a = LesionQueue.create(3, 30, 4, seed=7).flat()[1]
        b = LesionQueue.create(3, 30, 4, seed=7).flat()[1]
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("args", [(0, 8, 3), (3, 8, 0), (5, 4, 3)])
    def test_invalid(self, args):
        with pytest.raises(InvalidConfigError):
            LesionQueue.create(*args, init_mode="empty")

    def test_unknown_init(self):
        with pytest.raises(InvalidConfigError):
            LesionQueue.create(2, 4, 2, init_mode="zeros")


class TestEnqueue:
    def test_fifo_eviction(self):
        q = LesionQueue(2, 2, 2)
        a, b, c = np.eye(2)[0], np.eye(2)[1], -np.eye(2)[0]
        q.enqueue(0, [a, b, c])
        assert np.array_equal(q.class_keys(0), np.stack([b, c]))
        assert len(q.class_keys(1)) == 0

    def test_empty_is_noop(self):
        q = LesionQueue.create(2, 4, 3, seed=1)
        before = q.state_arrays()
        q.enqueue(1, np.empty((0, 3)))
        q.enqueue(1, [])
        for x, y in zip(before, q.state_arrays()):
            assert np.array_equal(x, y)

    def test_errors(self):
        q = LesionQueue(2, 3, 2)
        with pytest.raises(InvalidClassError):
            q.enqueue(2, [[1.0, 0.0]])
        with pytest.raises(NormalizationError):
            q.enqueue(0, [[1.0, 1.0]])

    def test_matches_reference_fifo(self, rng):
        K, M, d = 4, 5, 3
        q = LesionQueue(K, M, d)
        ref = [deque(maxlen=M) for _ in range(K)]
        for _ in range(10_000):
            y = int(rng.integers(K))
            keys = random_unit(rng, int(rng.integers(0, 8)), d)
            q.enqueue(y, keys)
            ref[y].extend(keys)
            assert len(q.class_keys(y)) == len(ref[y]) <= M
        for y in range(K):
            assert np.array_equal(q.class_keys(y), np.array(ref[y]).reshape(-1, d))


class TestNegatives:
    def test_excludes_own_class(self, rng):
        q = LesionQueue(2, 3, 2)
        q.enqueue(0, random_unit(rng, 3, 2))
        q.enqueue(1, random_unit(rng, 3, 2))
        tags, keys = q.negatives_for(0)
        assert tags.tolist() == [1, 1, 1]
        assert np.array_equal(keys, q.class_keys(1))

    def test_single_class_has_none(self):
        q = LesionQueue.create(1, 4, 2, seed=0)
        assert len(q.negatives_for(0)[1]) == 0

    def test_out_of_range(self):
        with pytest.raises(InvalidClassError):
            LesionQueue(2, 2, 2).negatives_for(5)

    def test_union_oracle(self, rng):
        K, M, d = 4, 6, 3
        q = LesionQueue(K, M, d)
        for _ in range(60):
            q.enqueue(int(rng.integers(K)), random_unit(rng, int(rng.integers(1, 4)), d))
        snap = q.snapshot_all()
        for y in range(K):
            tags, keys = q.negatives_for(y)
            assert y not in tags
            expected = [tuple(k) for c in range(K) if c != y for k in snap[c]]
            assert sorted(map(tuple, keys)) == sorted(expected)
            # snapshot identity: negatives plus own buffer recover everything
            assert len(keys) + len(snap[y]) == q.total

    def test_full_count(self):
        q = LesionQueue.create(5, 50, 3, seed=2)
        for y in range(5):
            assert len(q.negatives_for(y)[1]) == 4 * 10


class TestSnapshot:
    def test_empty(self):
        assert [len(s) for s in LesionQueue(3, 2, 2).snapshot_all()] == [0, 0, 0]

    def test_one_key(self):
        q = LesionQueue(3, 2, 2)
        q.enqueue(2, [[0.0, 1.0]])
        assert [len(s) for s in q.snapshot_all()] == [0, 0, 1]

    def test_is_a_copy(self):
        q = LesionQueue.create(2, 4, 2, seed=0)
        snap = q.snapshot_all()
        snap[0][:] = 0
        assert np.allclose(np.linalg.norm(q.class_keys(0), axis=1), 1.0)
