#!/usr/bin/env python3
"""
Memory-bounded exact nearest-neighbour search

Scores are inner products of unit-norm descriptors computed in float64
from float32 storage. The database is scanned block by block; each query
keeps a running top-k that is merged with every block under the total
order (score descending, id ascending). Every transient array is
registered with a BufferAccountant so the peak can be checked against the
budget.
"""

import time
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import Descriptor
from .errors import BudgetInfeasibleError, InvalidInputError
from .fileio import read_descriptor_header, read_descriptors
from .memory import BufferAccountant

logger = logging.getLogger(__name__)

F32 = 4
F64 = 8
I64 = 8
UNIT_NORM_TOLERANCE = 1e-4


class DescriptorStore:
    """Database descriptors, held in memory or streamed from a descriptor file"""

    def __init__(self, matrix: Optional[np.ndarray] = None, path: Union[str, Path, None] = None,
                 ids: Optional[Sequence[int]] = None, block_rows: Optional[int] = None,
                 validate: bool = True, rows: Optional[Sequence[int]] = None):
        if (matrix is None) == (path is None):
            raise InvalidInputError("DescriptorStore needs exactly one of matrix or path")
        if block_rows is not None and block_rows < 1:
            raise InvalidInputError(f"block_rows must be >= 1, got {block_rows}")
        self.path = Path(path) if path is not None else None
        self._header = None
        self._rows = None
        if matrix is not None:
            matrix = np.ascontiguousarray(matrix, dtype=np.float32)
            if matrix.ndim != 2:
                raise InvalidInputError(f"Store matrix must be 2-D, got shape {matrix.shape}")
            if rows is not None:
                matrix = matrix[self._check_rows(rows, len(matrix))]
            if validate and len(matrix):
                norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
                if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE):
                    raise InvalidInputError("Store descriptors must be unit-norm")
            self._matrix = matrix
            self.count, self.dim = matrix.shape
        else:
            self._matrix = None
            self._header = read_descriptor_header(self.path)
            self.count, self.dim = self._header.count, self._header.dim
            if rows is not None:
                self._rows = self._check_rows(rows, self.count)
                self.count = len(self._rows)
        self.ids = np.arange(self.count, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if self.ids.shape != (self.count,):
            raise InvalidInputError(f"Expected {self.count} ids, got {self.ids.shape[0]}")
        if len(np.unique(self.ids)) != self.count:
            raise InvalidInputError("Store ids must be unique")
        self.block_rows = block_rows

    @staticmethod
    def _check_rows(rows: Sequence[int], total: int) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        if len(rows) and (rows[0] < 0 or rows[-1] >= total or np.any(np.diff(rows) <= 0)):
            raise InvalidInputError(f"Row selection must be strictly increasing within [0, {total})")
        return rows

    def select(self, rows: Sequence[int], ids: Optional[Sequence[int]] = None) -> 'DescriptorStore':
        """Row subset; a file-backed store stays file-backed and reads only the chosen rows"""
        if self._matrix is not None:
            return DescriptorStore(self._matrix, ids=ids, block_rows=self.block_rows, validate=False, rows=rows)
        physical = self._check_rows(rows, self.count)
        if self._rows is not None:
            physical = self._rows[physical]
        return DescriptorStore(path=self.path, ids=ids, block_rows=self.block_rows, rows=physical)

    @classmethod
    def from_descriptors(cls, descriptors: Sequence[Descriptor], ids: Optional[Sequence[int]] = None,
                         block_rows: Optional[int] = None) -> 'DescriptorStore':
        matrix = np.stack([d.values for d in descriptors]) if descriptors else np.empty((0, 0))
        return cls(matrix, ids=ids, block_rows=block_rows)

    @property
    def file_backed(self) -> bool:
        return self._matrix is None

    def read(self, start: int, stop: int) -> np.ndarray:
        if self._matrix is not None:
            return self._matrix[start:stop]
        if self._rows is None:
            return read_descriptors(self.path, start, stop, self._header)
        wanted = self._rows[start:stop]
        if not len(wanted):
            return np.empty((0, self.dim), dtype=np.float32)
        # one read per run of consecutive file rows
        runs = np.split(wanted, np.flatnonzero(np.diff(wanted) != 1) + 1)
        return np.concatenate([read_descriptors(self.path, int(run[0]), int(run[-1]) + 1, self._header)
                               for run in runs])

    def iter_blocks(self, block_rows: int) -> Iterator[Tuple[int, np.ndarray]]:
        for start in range(0, self.count, block_rows):
            yield start, self.read(start, min(start + block_rows, self.count))

    def to_array(self) -> np.ndarray:
        """Whole matrix; only for oracles and small stores"""
        return np.array(self.read(0, self.count), dtype=np.float32)

    def __len__(self) -> int:
        return self.count


@dataclass
class SearchResult:
    """Per-query top-k ids and scores, scores non-increasing along each row"""
    ids: np.ndarray
    scores: np.ndarray
    peak_bytes: int = 0
    block_rows: int = 0

    @property
    def k(self) -> int:
        return int(self.ids.shape[1])

    def neighbors(self, query: int) -> List[Tuple[int, float]]:
        return [(int(i), float(s)) for i, s in zip(self.ids[query], self.scores[query])]

    def __len__(self) -> int:
        return int(self.ids.shape[0])


@dataclass
class SearchPlan:
    block_rows: int
    fixed_bytes: int
    row_bytes: int

    def peak_bound(self) -> int:
        return self.fixed_bytes + self.block_rows * self.row_bytes


def plan_blocks(count: int, dim: int, bytes_per_scalar: int, memory_budget: int) -> int:
    """Largest row count whose raw payload fits the budget"""
    if min(count, dim, bytes_per_scalar) < 1 or memory_budget < 0:
        raise InvalidInputError("count, dim and bytes_per_scalar must be positive")
    row = dim * bytes_per_scalar
    if memory_budget < row:
        raise BudgetInfeasibleError(f"Budget of {memory_budget} bytes cannot hold one {dim}-dim row", row)
    return int(min(count, memory_budget // row))


def plan_search(count: int, dim: int, queries: int, k: int, memory_budget: int,
                block_rows: Optional[int] = None) -> SearchPlan:
    """Block size for one search worker.

    Fixed: float64 queries, the running top-k and the previous top-k inside
    a merge. Per database row: the float32 block, its float64 copy, one
    score per query and four merge arrays per candidate.
    """
    k = min(k, max(count, 1))
    fixed = queries * dim * F64 + queries * k * (F64 + I64) * 4
    row = dim * (F32 + F64) + queries * (F64 + 4 * I64)
    available = memory_budget - fixed
    if available < row:
        raise BudgetInfeasibleError(
            f"Budget of {memory_budget} bytes cannot hold {queries} queries plus one block row",
            fixed + row)
    rows = min(available // row, max(count, 1))
    if block_rows is not None:
        rows = min(rows, block_rows)
    return SearchPlan(int(rows), int(fixed), int(row))


def _as_query_matrix(queries, dim: int) -> np.ndarray:
    if isinstance(queries, np.ndarray):
        matrix = queries
    else:
        matrix = np.stack([q.values if isinstance(q, Descriptor) else np.asarray(q) for q in queries]) \
            if len(queries) else np.empty((0, dim))
    if matrix.ndim != 2 or matrix.shape[1] != dim:
        raise InvalidInputError(f"Query dimension {matrix.shape[-1]} does not match store dimension {dim}")
    return matrix


def _search_chunk(store: DescriptorStore, queries: np.ndarray, k: int, block_rows: int,
                  accountant: BufferAccountant) -> Tuple[np.ndarray, np.ndarray]:
    count = len(queries)
    width = min(k, store.count)
    with accountant.scope() as scope:
        query64 = scope.track(np.array(queries, dtype=np.float64))
        scope.reserve(count * width * (F64 + I64))
        best_scores = np.empty((count, 0), dtype=np.float64)
        best_ids = np.empty((count, 0), dtype=np.int64)
        for start, block in store.iter_blocks(block_rows):
            with accountant.scope() as step:
                step.track(block)
                block64 = step.track(block.astype(np.float64))
                scores = step.track(query64 @ block64.T)
                ids = np.broadcast_to(store.ids[start:start + len(block)], scores.shape)
                candidate_scores = step.track(np.concatenate([best_scores, scores], axis=1))
                candidate_ids = step.track(np.concatenate([best_ids, ids], axis=1))
                keys = step.track(-candidate_scores)
                order = step.track(np.lexsort((candidate_ids, keys), axis=-1))[:, :width]
                best_scores = step.track(np.take_along_axis(candidate_scores, order, axis=1))
                best_ids = step.track(np.take_along_axis(candidate_ids, order, axis=1))
            logger.debug(f"Merged block at row {start} ({len(block)} rows)")
        return best_ids, best_scores


def search(store: DescriptorStore, queries, k: int, memory_budget: int, threads: int = 1,
           accountant: Optional[BufferAccountant] = None) -> SearchResult:
    """Exact top-k by inner product within memory_budget bytes of transient buffers"""
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    if threads < 1:
        raise InvalidInputError(f"threads must be >= 1, got {threads}")
    matrix = _as_query_matrix(queries, store.dim)
    accountant = accountant or BufferAccountant('knn')
    accountant.reset_peak()
    baseline = accountant.current_bytes

    width = min(k, store.count)
    if store.count == 0 or len(matrix) == 0:
        return SearchResult(np.empty((len(matrix), width), dtype=np.int64),
                            np.empty((len(matrix), width), dtype=np.float64), 0, 0)

    chunks = [c for c in np.array_split(np.arange(len(matrix)), min(threads, len(matrix))) if len(c)]
    worker_budget = memory_budget // len(chunks)
    plans = [plan_search(store.count, store.dim, len(c), k, worker_budget, store.block_rows) for c in chunks]

    if len(chunks) == 1:
        parts = [_search_chunk(store, matrix, k, plans[0].block_rows, accountant)]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as executor:
            futures = [executor.submit(_search_chunk, store, matrix[c], k, plan.block_rows, accountant)
                       for c, plan in zip(chunks, plans)]
            parts = [f.result() for f in futures]

    result = SearchResult(
        ids=np.concatenate([p[0] for p in parts]),
        scores=np.concatenate([p[1] for p in parts]),
        peak_bytes=accountant.report().peak_bytes - baseline,
        block_rows=min(p.block_rows for p in plans),
    )
    logger.info(f"Searched {len(matrix)} queries over {store.count} rows: "
                f"block_rows={result.block_rows}, peak={result.peak_bytes} bytes")
    return result


def naive_search(store: DescriptorStore, queries, k: int) -> SearchResult:
    """Single-pass reference: full score matrix, full sort"""
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    matrix = np.asarray(_as_query_matrix(queries, store.dim), dtype=np.float64)
    database = store.to_array().astype(np.float64)
    scores = matrix @ database.T
    ids = np.broadcast_to(store.ids, scores.shape)
    order = np.lexsort((ids, -scores), axis=-1)[:, :min(k, store.count)]
    return SearchResult(np.take_along_axis(ids, order, axis=1).copy(),
                        np.take_along_axis(scores, order, axis=1))


@dataclass
class BenchReport:
    queries: int
    k: int
    elapsed: float
    queries_per_second: float
    peak_bytes: int
    block_rows: int
    memory_budget: int


def benchmark(store: DescriptorStore, queries, k: int, memory_budget: int, threads: int = 1) -> BenchReport:
    """Timed search with the instrumented peak"""
    start_time = time.time()
    result = search(store, queries, k, memory_budget, threads)
    elapsed = time.time() - start_time
    count = len(result)
    return BenchReport(count, k, elapsed, count / elapsed if elapsed > 0 else float('inf'),
                       result.peak_bytes, result.block_rows, memory_budget)
