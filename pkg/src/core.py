#!/usr/bin/env python3
"""
Core domain types and geometry primitives

Shared by every other module: planar poses, descriptors, image records,
the quadruplet / sub-batch / iteration structure, and the sparse
covisibility map.
"""

import math
import logging
from dataclasses import dataclass, InitVar
from enum import Enum
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CompositionError, DegenerateDescriptorError, InvalidInputError

logger = logging.getLogger(__name__)

PLACES_PER_SUB_BATCH = 32
IMAGES_PER_QUADRUPLET = 4
SUB_BATCHES_PER_ITERATION = 6
VPR_POSITIVE_THRESHOLD_M = 25.0
NORM_TOLERANCE = 1e-6


class DatasetKind(str, Enum):
    """The five training data sources"""
    SFXL = 'sfxl'
    GSV = 'gsv'
    MSLS = 'msls'
    MEGASCENES = 'megascenes'
    SCANNET = 'scannet'


class BatchSource(str, Enum):
    """Sub-batch tags; SF-XL contributes a frontal and a lateral sub-batch"""
    SFXL_FRONTAL = 'sfxl_frontal'
    SFXL_LATERAL = 'sfxl_lateral'
    GSV = 'gsv'
    MSLS = 'msls'
    MEGASCENES = 'megascenes'
    SCANNET = 'scannet'

    @property
    def dataset(self) -> DatasetKind:
        if self in (BatchSource.SFXL_FRONTAL, BatchSource.SFXL_LATERAL):
            return DatasetKind.SFXL
        return DatasetKind(self.value)


# Canonical order of the six sub-batches within an iteration
ITERATION_SOURCES: Tuple[BatchSource, ...] = (
    BatchSource.SFXL_FRONTAL,
    BatchSource.SFXL_LATERAL,
    BatchSource.GSV,
    BatchSource.MSLS,
    BatchSource.MEGASCENES,
    BatchSource.SCANNET,
)


def _require_finite(*values: float) -> None:
    for value in values:
        if not math.isfinite(value):
            raise InvalidInputError(f"Non-finite value: {value}")


@dataclass(frozen=True)
class PlanarPose:
    """Metric 2D position (east, north) plus compass heading in degrees"""
    east: float
    north: float
    heading: float = 0.0

    def __post_init__(self):
        _require_finite(self.east, self.north, self.heading)
        object.__setattr__(self, 'east', float(self.east))
        object.__setattr__(self, 'north', float(self.north))
        heading = float(self.heading) % 360.0
        # -1e-17 % 360 rounds to 360.0
        if heading >= 360.0:
            heading = 0.0
        object.__setattr__(self, 'heading', heading)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.east, self.north], dtype=np.float64)


def planar_distance(a: PlanarPose, b: PlanarPose) -> float:
    """Euclidean distance on (east, north) in meters"""
    _require_finite(a.east, a.north, b.east, b.north)
    return math.hypot(a.east - b.east, a.north - b.north)


def angular_difference(h1: float, h2: float) -> float:
    """Minimal absolute circular difference between two headings, in [0, 180]"""
    _require_finite(h1, h2)
    diff = abs(h1 - h2) % 360.0
    return min(diff, 360.0 - diff)


def bearing(origin: PlanarPose, target: Sequence[float]) -> float:
    """Compass bearing (0 = north, 90 = east) from a pose to a planar point"""
    de = float(target[0]) - origin.east
    dn = float(target[1]) - origin.north
    return math.degrees(math.atan2(de, dn)) % 360.0


def heading_of(vector: Sequence[float]) -> float:
    """Compass heading of an (east, north) direction vector"""
    return math.degrees(math.atan2(float(vector[0]), float(vector[1]))) % 360.0


def direction_of(heading: float) -> np.ndarray:
    """Unit (east, north) vector for a compass heading"""
    rad = math.radians(heading)
    return np.array([math.sin(rad), math.cos(rad)], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Descriptor:
    """L2-normalized real vector"""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise InvalidInputError(f"Descriptor must be a non-empty vector, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("Descriptor has non-finite entries")
        norm = float(np.linalg.norm(values))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise InvalidInputError(f"Descriptor norm {norm:.8f} is not 1")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def from_raw(cls, raw: Sequence[float]) -> 'Descriptor':
        """Normalize an arbitrary nonzero vector"""
        return cls(normalize_rows(np.asarray(raw, dtype=np.float64)[None, :])[0])

    def cosine(self, other: 'Descriptor') -> float:
        return float(np.dot(self.values, other.values))


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Return a row-wise L2-normalized float64 copy"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(matrix)):
        raise InvalidInputError("Cannot normalize non-finite values")
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateDescriptorError("Zero-norm vector cannot be normalized")
    return matrix / norms


def project_and_normalize(raw: Sequence[float], projection: np.ndarray) -> Descriptor:
    """Linear projection D_in -> D_out followed by L2 normalization"""
    raw = np.asarray(raw, dtype=np.float64)
    projection = np.asarray(projection, dtype=np.float64)
    if raw.ndim != 1 or projection.ndim != 2 or projection.shape[0] != raw.shape[0]:
        raise InvalidInputError(
            f"Projection of shape {projection.shape} does not accept input of shape {raw.shape}")
    projected = raw @ projection
    norm = float(np.linalg.norm(projected))
    if not math.isfinite(norm):
        raise InvalidInputError("Projection produced non-finite values")
    if norm == 0.0:
        raise DegenerateDescriptorError("Projected descriptor has zero norm")
    return Descriptor(projected / norm)


def salad_dim_check(clusters: int, channels: int, global_token: int) -> int:
    """Pre-projection dimension of a cluster-aggregated descriptor"""
    return clusters * channels + global_token


def descriptor_bytes(count: int, dim: int, bytes_per_scalar: int = 4) -> int:
    """Raw payload size of a descriptor matrix"""
    return count * dim * bytes_per_scalar


@dataclass(frozen=True)
class ImageRecord:
    """One posed image of any source dataset"""
    id: int
    pose: PlanarPose
    source: DatasetKind
    class_id: Optional[int] = None
    scene_id: Optional[int] = None

    def to_dict(self) -> Dict:
        return {
            'id': self.id,
            'east': self.pose.east,
            'north': self.pose.north,
            'heading': self.pose.heading,
            'class_id': self.class_id,
            'scene_id': self.scene_id,
            'source': self.source.value,
        }


@dataclass(frozen=True)
class Quadruplet:
    """Four distinct images of one class"""
    image_ids: Tuple[int, ...]
    class_id: int

    def __post_init__(self):
        ids = tuple(int(i) for i in self.image_ids)
        if len(ids) != IMAGES_PER_QUADRUPLET:
            raise InvalidInputError(f"Quadruplet needs {IMAGES_PER_QUADRUPLET} ids, got {len(ids)}")
        if len(set(ids)) != IMAGES_PER_QUADRUPLET:
            raise InvalidInputError(f"Quadruplet ids are not distinct: {ids}")
        object.__setattr__(self, 'image_ids', ids)
        object.__setattr__(self, 'class_id', int(self.class_id))


@dataclass(frozen=True)
class SubBatch:
    """32 quadruplets drawn from one source"""
    quadruplets: Tuple[Quadruplet, ...]
    source: BatchSource
    strict: InitVar[bool] = True

    def __post_init__(self, strict: bool):
        object.__setattr__(self, 'quadruplets', tuple(self.quadruplets))
        object.__setattr__(self, 'source', BatchSource(self.source))
        if strict:
            self.validate()

    def validate(self) -> None:
        if len(self.quadruplets) != PLACES_PER_SUB_BATCH:
            raise InvalidInputError(
                f"Sub-batch needs {PLACES_PER_SUB_BATCH} quadruplets, got {len(self.quadruplets)}")
        ids = self.image_ids
        if len(set(ids)) != len(ids):
            raise InvalidInputError("Sub-batch image ids are not distinct")
        if len({q.class_id for q in self.quadruplets}) != len(self.quadruplets):
            raise InvalidInputError("Sub-batch class ids are not distinct")

    @property
    def image_ids(self) -> List[int]:
        return [i for q in self.quadruplets for i in q.image_ids]

    @property
    def labels(self) -> np.ndarray:
        return np.repeat([q.class_id for q in self.quadruplets], IMAGES_PER_QUADRUPLET)

    def to_dict(self) -> Dict:
        return {
            'source': self.source.value,
            'quadruplets': [{'class_id': q.class_id, 'image_ids': list(q.image_ids)}
                            for q in self.quadruplets],
        }


@dataclass(frozen=True)
class TrainingIteration:
    """The sub-batches consumed by one optimizer step"""
    sub_batches: Tuple[SubBatch, ...]
    strict: InitVar[bool] = True

    def __post_init__(self, strict: bool):
        object.__setattr__(self, 'sub_batches', tuple(self.sub_batches))
        if strict:
            check_composition([b.source for b in self.sub_batches], ITERATION_SOURCES)

    @property
    def sources(self) -> List[BatchSource]:
        return [b.source for b in self.sub_batches]

    @property
    def image_count(self) -> int:
        return sum(len(b.image_ids) for b in self.sub_batches)

    def __iter__(self) -> Iterator[SubBatch]:
        return iter(self.sub_batches)

    def __len__(self) -> int:
        return len(self.sub_batches)


def check_composition(actual: Sequence[BatchSource], expected: Sequence[BatchSource]) -> None:
    """Raise CompositionError unless the two source multisets agree"""
    actual_sorted = sorted(BatchSource(s).value for s in actual)
    expected_sorted = sorted(BatchSource(s).value for s in expected)
    if actual_sorted != expected_sorted:
        raise CompositionError(
            f"Iteration sources {actual_sorted} do not match required {expected_sorted}")


class Covisibility:
    """Sparse symmetric map (id, id) -> overlap fraction in [0, 1]"""

    def __init__(self, pairs: Iterable[Tuple[int, int, float]] = ()):
        self._neighbors: Dict[int, Dict[int, float]] = {}
        for a, b, fraction in pairs:
            self.add(a, b, fraction)

    def add(self, a: int, b: int, fraction: float) -> None:
        a, b, fraction = int(a), int(b), float(fraction)
        if not 0.0 <= fraction <= 1.0:
            raise InvalidInputError(f"Overlap fraction {fraction} outside [0, 1] for pair ({a}, {b})")
        if a == b:
            if fraction != 1.0:
                raise InvalidInputError(f"Self-overlap of {a} must be 1, got {fraction}")
            return
        existing = self._neighbors.get(a, {}).get(b)
        if existing is not None and existing != fraction:
            raise InvalidInputError(
                f"Conflicting overlap for pair ({a}, {b}): {existing} vs {fraction}")
        self._neighbors.setdefault(a, {})[b] = fraction
        self._neighbors.setdefault(b, {})[a] = fraction

    def overlap(self, a: int, b: int) -> float:
        if a == b:
            return 1.0
        return self._neighbors.get(a, {}).get(b, 0.0)

    def neighbors(self, a: int) -> Dict[int, float]:
        return self._neighbors.get(a, {})

    def pairs(self) -> List[Tuple[int, int, float]]:
        """Unordered pairs with a < b, sorted"""
        return sorted((a, b, f) for a, row in self._neighbors.items()
                      for b, f in row.items() if a < b)

    def __len__(self) -> int:
        return sum(len(row) for row in self._neighbors.values()) // 2

    def __eq__(self, other) -> bool:
        if not isinstance(other, Covisibility):
            return NotImplemented
        return self.pairs() == other.pairs()

    def __repr__(self) -> str:
        return f"Covisibility({len(self)} pairs)"
