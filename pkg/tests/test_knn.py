#!/usr/bin/env python3
"""
Unit tests for blocked exact nearest-neighbour search
"""

import os
import shutil
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

from src.core import descriptor_bytes
from src.errors import BudgetInfeasibleError, InvalidInputError
from src.fileio import read_descriptors, write_descriptors
from src.knn import DescriptorStore, benchmark, naive_search, plan_blocks, plan_search, search
from tests import random_unit_rows

MIB = 1024 * 1024


def assert_same_neighbours(test, result, reference):
    np.testing.assert_array_equal(result.ids, reference.ids)
    np.testing.assert_allclose(result.scores, reference.scores, rtol=0, atol=1e-12)


class TestPlanBlocks(unittest.TestCase):

    def test_one_mebibyte(self):
        """1 MiB of 128-dim float32 rows is 2048 rows"""
        self.assertEqual(plan_blocks(10 ** 6, 128, 4, MIB), 2048)

    def test_capped_by_count(self):
        self.assertEqual(plan_blocks(100, 128, 4, MIB), 100)

    def test_one_row_budget(self):
        self.assertEqual(plan_blocks(100, 128, 4, 512), 1)

    def test_infeasible_budget(self):
        with self.assertRaises(BudgetInfeasibleError) as ctx:
            plan_blocks(100, 128, 4, 511)
        self.assertEqual(ctx.exception.minimum_bytes, 512)

    def test_large_store_arithmetic(self):
        """2.8M 49152-dim float32 rows are within 2% of 560 GB"""
        rows = plan_blocks(2_800_000, 49152, 4, 10 ** 12)
        self.assertEqual(rows, 2_800_000)
        total = rows * 49152 * 4
        self.assertEqual(total, descriptor_bytes(2_800_000, 49152))
        self.assertLessEqual(abs(total - 560e9) / 560e9, 0.02)

    def test_search_plan_within_budget(self):
        plan = plan_search(10_000, 128, 100, 10, 2 * MIB)
        self.assertGreaterEqual(plan.block_rows, 1)
        self.assertLessEqual(plan.peak_bound(), 2 * MIB)

    def test_search_plan_infeasible(self):
        with self.assertRaises(BudgetInfeasibleError):
            plan_search(10_000, 128, 100, 10, 64 * 1024)


class TestSearch(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_basis_vectors(self):
        store = DescriptorStore(np.eye(4))
        result = search(store, np.eye(4)[[2]], 1, MIB)
        self.assertEqual(result.neighbors(0), [(2, 1.0)])

    def test_k_larger_than_store(self):
        store = DescriptorStore(np.eye(4), ids=[10, 11, 12, 13])
        result = search(store, np.eye(4)[[0]], 10, MIB)
        self.assertEqual(result.k, 4)
        self.assertEqual(sorted(result.ids[0].tolist()), [10, 11, 12, 13])
        self.assertEqual(result.ids[0, 0], 10)

    def test_ties_break_by_id(self):
        """Equal scores order by ascending id, also across blocks"""
        store = DescriptorStore(np.eye(3)[[0, 0, 1, 0]], ids=[5, 3, 9, 4], block_rows=1)
        result = search(store, np.eye(3)[[0]], 3, MIB)
        self.assertEqual(result.ids[0].tolist(), [3, 4, 5])

    def test_scores_non_increasing(self):
        store = DescriptorStore(random_unit_rows(self.rng, 500, 16))
        result = search(store, random_unit_rows(self.rng, 20, 16), 25, MIB)
        self.assertTrue(np.all(np.diff(result.scores, axis=1) <= 0))

    def test_blocked_matches_naive(self):
        """10k x 128 store in 257-row blocks against the single-pass scan"""
        store = DescriptorStore(random_unit_rows(self.rng, 10_000, 128), block_rows=257)
        queries = random_unit_rows(self.rng, 100, 128)
        result = search(store, queries, 10, 256 * MIB)
        self.assertEqual(result.block_rows, 257)
        assert_same_neighbours(self, result, naive_search(store, queries, 10))

    def test_peak_within_budget(self):
        store = DescriptorStore(random_unit_rows(self.rng, 10_000, 128))
        queries = random_unit_rows(self.rng, 100, 128)
        budget = 2 * MIB
        result = search(store, queries, 10, budget)
        self.assertLess(result.block_rows, 10_000)
        self.assertGreater(result.peak_bytes, 0)
        self.assertLessEqual(result.peak_bytes, budget)
        assert_same_neighbours(self, result, naive_search(store, queries, 10))

    def test_smaller_blocks_lower_peak(self):
        """Halving the block keeps results and lowers the peak"""
        matrix = random_unit_rows(self.rng, 4000, 64)
        queries = random_unit_rows(self.rng, 30, 64)
        large = search(DescriptorStore(matrix, block_rows=512), queries, 5, 64 * MIB)
        small = search(DescriptorStore(matrix, block_rows=256), queries, 5, 64 * MIB)
        np.testing.assert_array_equal(large.ids, small.ids)
        np.testing.assert_allclose(large.scores, small.scores, rtol=0, atol=1e-12)
        self.assertLess(small.peak_bytes, large.peak_bytes)

    def test_threads_match_single(self):
        store = DescriptorStore(random_unit_rows(self.rng, 3000, 32))
        queries = random_unit_rows(self.rng, 50, 32)
        budget = 4 * MIB
        single = search(store, queries, 7, budget)
        threaded = search(store, queries, 7, budget, threads=4)
        np.testing.assert_array_equal(single.ids, threaded.ids)
        self.assertLessEqual(threaded.peak_bytes, budget)

    def test_budget_too_small(self):
        store = DescriptorStore(random_unit_rows(self.rng, 100, 128))
        with self.assertRaises(BudgetInfeasibleError):
            search(store, random_unit_rows(self.rng, 10, 128), 5, 1024)

    def test_invalid_arguments(self):
        store = DescriptorStore(np.eye(4))
        with self.assertRaises(InvalidInputError):
            search(store, np.eye(4), 0, MIB)
        with self.assertRaises(InvalidInputError):
            search(store, np.eye(3), 1, MIB)
        with self.assertRaises(InvalidInputError):
            DescriptorStore(np.ones((2, 4)))

    def test_empty_queries(self):
        result = search(DescriptorStore(np.eye(4)), np.empty((0, 4)), 2, MIB)
        self.assertEqual(len(result), 0)


class TestFileBackedStore(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.rng = np.random.default_rng(1)

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_matches_in_memory(self):
        matrix = random_unit_rows(self.rng, 2000, 48).astype(np.float32)
        path = os.path.join(self.temp_dir, 'db.mdesc')
        write_descriptors(path, matrix)
        on_disk = DescriptorStore(path=path, block_rows=300)
        self.assertTrue(on_disk.file_backed)
        self.assertEqual((on_disk.count, on_disk.dim), (2000, 48))
        queries = random_unit_rows(self.rng, 20, 48)
        in_memory = search(DescriptorStore(matrix), queries, 5, 16 * MIB)
        streamed = search(on_disk, queries, 5, 16 * MIB)
        np.testing.assert_array_equal(streamed.ids, in_memory.ids)
        np.testing.assert_allclose(streamed.scores, in_memory.scores, rtol=0, atol=1e-12)

    def test_row_selection_streams(self):
        """A selected file-backed subset reads only its rows, one block at a time"""
        matrix = random_unit_rows(self.rng, 1000, 16).astype(np.float32)
        path = os.path.join(self.temp_dir, 'db.mdesc')
        write_descriptors(path, matrix)
        rows = [r for r in range(1000) if r % 7 != 0]
        ids = [10_000 + r for r in rows]
        subset = DescriptorStore(path=path).select(rows, ids)
        self.assertTrue(subset.file_backed)
        self.assertEqual(subset.count, len(rows))
        np.testing.assert_array_equal(subset.read(5, 9), matrix[rows[5:9]])

        reads = []

        def recording(path, start=0, stop=None, header=None):
            reads.append(stop - start)
            return read_descriptors(path, start, stop, header)

        queries = random_unit_rows(self.rng, 4, 16)
        with patch('src.knn.read_descriptors', side_effect=recording):
            streamed = search(subset, queries, 3, 64 * 1024)
        self.assertLessEqual(max(reads), streamed.block_rows)
        reference = naive_search(DescriptorStore(matrix[rows], ids=ids), queries, 3)
        np.testing.assert_array_equal(streamed.ids, reference.ids)

    def test_nested_selection(self):
        matrix = random_unit_rows(self.rng, 50, 8).astype(np.float32)
        path = os.path.join(self.temp_dir, 'db.mdesc')
        write_descriptors(path, matrix)
        inner = DescriptorStore(path=path).select(range(10, 50)).select([0, 1, 5])
        np.testing.assert_array_equal(inner.to_array(), matrix[[10, 11, 15]])
        in_memory = DescriptorStore(matrix).select([3, 4])
        np.testing.assert_array_equal(in_memory.to_array(), matrix[[3, 4]])

    def test_selection_must_increase(self):
        store = DescriptorStore(np.eye(4))
        with self.assertRaises(InvalidInputError):
            store.select([2, 1])
        with self.assertRaises(InvalidInputError):
            store.select([0, 4])

    def test_benchmark_report(self):
        matrix = random_unit_rows(self.rng, 1000, 16)
        report = benchmark(DescriptorStore(matrix), random_unit_rows(self.rng, 10, 16), 3, 4 * MIB)
        self.assertEqual(report.queries, 10)
        self.assertGreater(report.queries_per_second, 0)
        self.assertLessEqual(report.peak_bytes, 4 * MIB)


if __name__ == '__main__':
    unittest.main()
