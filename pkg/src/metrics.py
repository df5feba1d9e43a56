#!/usr/bin/env python3
"""
Evaluation protocols

VPR: Recall@K, a query is correct when any of its top-K results lies
within the positive threshold (25 m) of the query position.

Landmark retrieval: revisited mAP with Easy / Medium / Hard assembly of
positive and junk sets, plus mean precision at k.
"""

import io
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .core import VPR_POSITIVE_THRESHOLD_M, PlanarPose
from .errors import InvalidInputError, NotFoundError, UndefinedMetricError
from .fileio import atomic_write

logger = logging.getLogger(__name__)

DEFAULT_RECALL_KS = (1, 10)
DEFAULT_PRECISION_KS = (1, 5, 10)
RESULT_COLUMNS = ('method', 'dataset', 'metric', 'k_or_split', 'value')

SPLITS = {'E': 'easy', 'M': 'medium', 'H': 'hard'}


def _rankings(results) -> List[List[int]]:
    """Ranked id lists from a SearchResult or any nested sequence"""
    ids = getattr(results, 'ids', results)
    return [[int(i) for i in row] for row in ids]


# --------------------------------------------------------------------- VPR

@dataclass
class VprGroundTruth:
    """Query poses and database poses; positives lie within positive_threshold meters"""
    query_poses: Sequence[PlanarPose]
    database_poses: Mapping[int, PlanarPose]
    positive_threshold: float = VPR_POSITIVE_THRESHOLD_M

    def __post_init__(self):
        if not self.positive_threshold > 0:
            raise InvalidInputError(f"positive_threshold must be positive, got {self.positive_threshold}")
        self.database_ids = np.array(sorted(self.database_poses), dtype=np.int64)
        self._column = {int(i): c for c, i in enumerate(self.database_ids)}
        self._database_xy = np.array([self.database_poses[i].position for i in self.database_ids]).reshape(-1, 2)
        self._query_xy = np.array([p.position for p in self.query_poses]).reshape(-1, 2)

    def within(self) -> np.ndarray:
        """Boolean query x database matrix of positives"""
        delta = self._query_xy[:, None, :] - self._database_xy[None, :, :]
        return np.hypot(delta[..., 0], delta[..., 1]) <= self.positive_threshold

    def column(self, image_id: int) -> int:
        try:
            return self._column[int(image_id)]
        except KeyError:
            raise NotFoundError(f"Retrieved id {image_id} is not in the database") from None

    def __len__(self) -> int:
        return len(self.query_poses)


@dataclass
class RecallReport:
    recalls: Dict[int, float]
    evaluated: int
    without_positive: int

    def __getitem__(self, k: int) -> float:
        return self.recalls[k]


def recall_at_k(results, gt: VprGroundTruth, ks: Sequence[int] = DEFAULT_RECALL_KS) -> RecallReport:
    """Fraction of queries with a positive among their top-k, for each k"""
    rankings = _rankings(results)
    if len(rankings) != len(gt):
        raise InvalidInputError(f"Results cover {len(rankings)} queries, ground truth has {len(gt)}")
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise InvalidInputError(f"ks must be positive integers, got {ks}")
    retrieved = min((len(r) for r in rankings), default=0)
    if ks[-1] > retrieved:
        raise InvalidInputError(f"max k {ks[-1]} exceeds the {retrieved} retrieved results")

    within = gt.within()
    has_positive = within.any(axis=1)
    hits = np.array([[within[q, gt.column(i)] for i in row[:ks[-1]]] for q, row in enumerate(rankings)],
                    dtype=bool).reshape(len(rankings), ks[-1])
    evaluated = int(has_positive.sum())
    without = len(rankings) - evaluated
    if without:
        logger.warning(f"{without} queries have no positive within {gt.positive_threshold} m and are excluded")
    if evaluated == 0:
        raise UndefinedMetricError("No query has a positive in the database")

    first_hit = np.where(hits.any(axis=1), hits.argmax(axis=1), ks[-1])
    recalls = {k: float(np.mean(first_hit[has_positive] < k)) for k in ks}
    return RecallReport(recalls, evaluated, without)


# ---------------------------------------------------------------- landmarks

@dataclass(frozen=True)
class LandmarkQuery:
    easy: FrozenSet[int] = frozenset()
    hard: FrozenSet[int] = frozenset()
    junk: FrozenSet[int] = frozenset()

    def __post_init__(self):
        for name in ('easy', 'hard', 'junk'):
            object.__setattr__(self, name, frozenset(int(i) for i in getattr(self, name)))
        if (self.easy & self.hard) or (self.easy & self.junk) or (self.hard & self.junk):
            raise InvalidInputError("easy, hard and junk sets must be pairwise disjoint")


@dataclass
class LandmarkGroundTruth:
    queries: List[LandmarkQuery] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.queries)


def split_sets(query: LandmarkQuery, split: str) -> Tuple[FrozenSet[int], FrozenSet[int]]:
    """(positives, junk) for one query under split E, M or H"""
    split = _split_key(split)
    if split == 'E':
        return query.easy, query.junk | query.hard
    if split == 'M':
        return query.easy | query.hard, query.junk
    return query.hard, query.junk | query.easy


def _split_key(split: str) -> str:
    key = str(split).upper()[:1]
    if key not in SPLITS:
        raise InvalidInputError(f"Unknown split {split!r}, expected one of E, M, H")
    return key


def _filtered(ranking: Sequence[int], junk: Iterable[int]) -> List[int]:
    ranking = [int(i) for i in ranking]
    if len(set(ranking)) != len(ranking):
        raise InvalidInputError("Ranking contains duplicate ids")
    junk = set(junk)
    return [i for i in ranking if i not in junk]


def average_precision_revisited(ranking: Sequence[int], positives: Iterable[int],
                                junk: Iterable[int] = ()) -> float:
    """Non-interpolated AP after junk removal; unretrieved positives count as zero"""
    positives = set(int(i) for i in positives)
    if not positives:
        return 0.0
    total = 0.0
    found = 0
    for rank, image_id in enumerate(_filtered(ranking, junk), start=1):
        if image_id in positives:
            found += 1
            total += found / rank
    return total / len(positives)


def precision_at_k_revisited(ranking: Sequence[int], positives: Iterable[int],
                             junk: Iterable[int], k: int) -> float:
    """Share of positives among the first k junk-filtered results"""
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    positives = set(int(i) for i in positives)
    top = _filtered(ranking, junk)[:k]
    return sum(1 for i in top if i in positives) / k


@dataclass
class MapReport:
    split: str
    mean_ap: float
    aps: List[Optional[float]]
    evaluated: int
    precision_at: Dict[int, float] = field(default_factory=dict)


def map_evaluate(results, gt: LandmarkGroundTruth, split: str,
                 ks: Sequence[int] = DEFAULT_PRECISION_KS) -> MapReport:
    """Mean AP over queries whose split positive set is non-empty"""
    key = _split_key(split)
    rankings = _rankings(results)
    if len(rankings) != len(gt):
        raise InvalidInputError(f"Results cover {len(rankings)} queries, ground truth has {len(gt)}")

    aps: List[Optional[float]] = []
    precisions: Dict[int, List[float]] = {int(k): [] for k in ks}
    for ranking, query in zip(rankings, gt.queries):
        positives, junk = split_sets(query, key)
        if not positives:
            aps.append(None)
            continue
        aps.append(average_precision_revisited(ranking, positives, junk))
        for k in precisions:
            precisions[k].append(precision_at_k_revisited(ranking, positives, junk, k))

    scored = [ap for ap in aps if ap is not None]
    if not scored:
        raise UndefinedMetricError(f"No query has positives in split {key}")
    mean_ap = 0.0
    for ap in scored:
        mean_ap += ap
    mean_ap /= len(scored)
    return MapReport(key, mean_ap, aps, len(scored),
                     {k: float(np.mean(values)) for k, values in precisions.items()})


# ------------------------------------------------------------------ results

@dataclass(frozen=True)
class ResultRow:
    method: str
    dataset: str
    metric: str
    k_or_split: Union[int, str]
    value: float


def recall_rows(report: RecallReport, method: str, dataset: str) -> List[ResultRow]:
    return [ResultRow(method, dataset, 'recall', k, value) for k, value in sorted(report.recalls.items())]


def map_rows(report: MapReport, method: str, dataset: str) -> List[ResultRow]:
    rows = [ResultRow(method, dataset, 'map', report.split, report.mean_ap)]
    rows.extend(ResultRow(method, dataset, f'mp@{k}', report.split, value)
                for k, value in sorted(report.precision_at.items()))
    return rows


def write_results_csv(rows: Iterable[ResultRow], path: Union[str, Path]) -> Path:
    """One metric per row: method, dataset, metric, k_or_split, value"""
    path = Path(path)
    text = io.StringIO(newline='')
    writer = csv.writer(text)
    writer.writerow(RESULT_COLUMNS)
    for row in rows:
        writer.writerow([row.method, row.dataset, row.metric, row.k_or_split, repr(float(row.value))])
    atomic_write(path, text.getvalue().encode('utf-8'))
    logger.info(f"Results written to {path}")
    return path
