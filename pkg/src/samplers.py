#!/usr/bin/env python3
"""
Dataset-specific sub-batch samplers

Five procedures, one per training source:
    EigenPlaces cells (frontal and lateral sub-batches)
    GSV-style ready-made classes
    clique-mined hard negatives (MSLS)
    covisibility-constrained quadruplets (MegaScenes)
    pose-proximity quadruplets (ScanNet)

Every sampler returns SubBatches of 32 classes x 4 images and is a pure
function of (input data, rng).
"""

import math
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .core import (
    IMAGES_PER_QUADRUPLET,
    ITERATION_SOURCES,
    PLACES_PER_SUB_BATCH,
    BatchSource,
    Covisibility,
    Descriptor,
    ImageRecord,
    PlanarPose,
    Quadruplet,
    SubBatch,
    TrainingIteration,
    angular_difference,
    bearing,
    check_composition,
    planar_distance,
)
from .errors import (
    InfeasibleSceneError,
    InsufficientClassesError,
    InsufficientMembersError,
    InvalidInputError,
)

logger = logging.getLogger(__name__)

FRONTAL = 'frontal'
LATERAL = 'lateral'


@dataclass
class SamplerConfig:
    """Sampler defaults; EigenPlaces and clique-mining values are declared, not measured"""
    cell_size: float = 15.0
    focal_distance: float = 10.0
    facing_tolerance: float = 45.0
    max_retries: int = 64
    similarity_floor: float = 0.3
    geo_floor: float = 100.0
    clique_size: int = 8
    min_clique_size: Optional[int] = None
    clique_refresh: int = 2000
    min_overlap: float = 0.01
    scan_max_distance: float = 10.0
    scan_max_angle: float = 30.0


# ---------------------------------------------------------------- EigenPlaces

Cell = Tuple[int, int]


@dataclass
class CellPartition:
    """Square cells over the plane; each cell is one class"""
    cell_size: float
    cells: Dict[Cell, List[int]]
    directions: Dict[Cell, np.ndarray]
    centroids: Dict[Cell, np.ndarray]
    focal_points: Dict[Cell, Dict[str, Tuple[np.ndarray, np.ndarray]]]
    poses: Dict[int, PlanarPose]
    degenerate: Set[Cell] = field(default_factory=set)

    def __post_init__(self):
        self.class_ids = {cell: index for index, cell in enumerate(sorted(self.cells))}

    @property
    def unusable(self) -> Set[Cell]:
        """Cells too small to provide a quadruplet"""
        return {c for c, ids in self.cells.items() if len(ids) < IMAGES_PER_QUADRUPLET}

    def usable_cells(self) -> List[Cell]:
        return [c for c in sorted(self.cells) if len(self.cells[c]) >= IMAGES_PER_QUADRUPLET]


def cell_of(pose: PlanarPose, cell_size: float) -> Cell:
    return (math.floor(pose.east / cell_size), math.floor(pose.north / cell_size))


def principal_direction(positions: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Dominant eigenvector of the 2x2 position covariance, sign-canonical.

    Returns (direction, degenerate). Degenerate inputs get due east.
    """
    if len(positions) < 2:
        return np.array([1.0, 0.0]), True
    centered = positions - positions.mean(axis=0)
    covariance = centered.T @ centered / len(positions)
    if not np.any(covariance):
        return np.array([1.0, 0.0]), True
    values, vectors = np.linalg.eigh(covariance)
    direction = vectors[:, int(np.argmax(values))]
    # canonical sign: compass heading in [0, 180)
    if direction[0] < 0 or (direction[0] == 0 and direction[1] < 0):
        direction = -direction
    return direction / np.linalg.norm(direction), False


def partition_eigenplaces(images: Sequence[ImageRecord], cell_size: float = 15.0,
                          focal_distance: float = 10.0) -> CellPartition:
    """Group images into square cells and derive per-cell focal points"""
    if not images:
        raise InvalidInputError("partition_eigenplaces needs at least one image")
    if cell_size <= 0:
        raise InvalidInputError(f"cell_size must be positive, got {cell_size}")

    cells: Dict[Cell, List[int]] = {}
    poses: Dict[int, PlanarPose] = {}
    for record in images:
        cells.setdefault(cell_of(record.pose, cell_size), []).append(record.id)
        poses[record.id] = record.pose

    reach = cell_size / 2.0 + focal_distance
    directions, centroids, focal_points, degenerate = {}, {}, {}, set()
    for cell, ids in cells.items():
        positions = np.array([poses[i].position for i in ids])
        centroid = positions.mean(axis=0)
        direction, flagged = principal_direction(positions)
        if flagged:
            degenerate.add(cell)
            logger.debug(f"Degenerate cell {cell} with {len(ids)} images")
        perpendicular = np.array([direction[1], -direction[0]])
        directions[cell] = direction
        centroids[cell] = centroid
        focal_points[cell] = {
            FRONTAL: (centroid + reach * direction, centroid - reach * direction),
            LATERAL: (centroid + reach * perpendicular, centroid - reach * perpendicular),
        }
    return CellPartition(cell_size, cells, directions, centroids, focal_points, poses, degenerate)


def facing_members(partition: CellPartition, cell: Cell, facing: str,
                   tolerance: float = 45.0) -> List[int]:
    """Members looking at the cell's focal point for `facing`, best side first"""
    if facing not in (FRONTAL, LATERAL):
        raise InvalidInputError(f"facing must be '{FRONTAL}' or '{LATERAL}', got {facing!r}")
    best: List[int] = []
    for focal in partition.focal_points[cell][facing]:
        qualifying = [
            i for i in partition.cells[cell]
            if angular_difference(partition.poses[i].heading, bearing(partition.poses[i], focal)) <= tolerance
        ]
        if len(qualifying) > len(best):
            best = qualifying
    return best


def select_facing_quadruplet(partition: CellPartition, cell: Cell, facing: str,
                             rng: np.random.Generator, tolerance: float = 45.0) -> Quadruplet:
    """Four members of a cell all facing the requested focal point"""
    qualifying = facing_members(partition, cell, facing, tolerance)
    if len(qualifying) < IMAGES_PER_QUADRUPLET:
        raise InsufficientMembersError(
            f"Cell {cell} has {len(qualifying)} {facing}-facing images, needs {IMAGES_PER_QUADRUPLET}")
    chosen = rng.choice(qualifying, IMAGES_PER_QUADRUPLET, replace=False)
    return Quadruplet(tuple(int(i) for i in chosen), partition.class_ids[cell])


def sample_eigenplaces_batch(partition: CellPartition, facing: str, rng: np.random.Generator,
                             tolerance: float = 45.0, max_retries: int = 64) -> SubBatch:
    """32 pairwise non-adjacent cells, one facing-consistent quadruplet each

    Views in cells that do not touch are at least cell_size apart.
    """
    candidates = partition.usable_cells()
    if len(candidates) < PLACES_PER_SUB_BATCH:
        raise InsufficientClassesError(
            f"Only {len(candidates)} usable cells, need {PLACES_PER_SUB_BATCH}")
    quadruplets: List[Quadruplet] = []
    chosen: Set[Cell] = set()
    failures = 0
    for index in rng.permutation(len(candidates)):
        cell = candidates[index]
        if any((cell[0] + dx, cell[1] + dy) in chosen for dx in (-1, 0, 1) for dy in (-1, 0, 1)):
            continue
        try:
            quadruplets.append(select_facing_quadruplet(partition, cell, facing, rng, tolerance))
        except InsufficientMembersError as e:
            failures += 1
            logger.debug(f"Resampling: {e}")
            if failures > max_retries:
                raise InsufficientMembersError(
                    f"Gave up after {failures} cells without {facing}-facing quadruplets") from e
            continue
        chosen.add(cell)
        if len(quadruplets) == PLACES_PER_SUB_BATCH:
            source = BatchSource.SFXL_FRONTAL if facing == FRONTAL else BatchSource.SFXL_LATERAL
            return SubBatch(tuple(quadruplets), source)
    raise InsufficientMembersError(
        f"Only {len(quadruplets)} cells provide {facing}-facing quadruplets, need {PLACES_PER_SUB_BATCH}")


# ------------------------------------------------------------- class batches

def _quadruplets_for_classes(class_list: Sequence[int], classes: Mapping[int, Sequence[int]],
                             rng: np.random.Generator) -> Tuple[Quadruplet, ...]:
    quadruplets = []
    for class_id in class_list:
        members = sorted(set(classes[class_id]))
        chosen = rng.choice(members, IMAGES_PER_QUADRUPLET, replace=False)
        quadruplets.append(Quadruplet(tuple(int(i) for i in chosen), int(class_id)))
    return tuple(quadruplets)


def eligible_classes(classes: Mapping[int, Sequence[int]]) -> List[int]:
    return sorted(c for c, ids in classes.items() if len(set(ids)) >= IMAGES_PER_QUADRUPLET)


def sample_gsv_batch(classes: Mapping[int, Sequence[int]], rng: np.random.Generator) -> SubBatch:
    """32 classes and 4 images each, uniformly without replacement"""
    eligible = eligible_classes(classes)
    if len(eligible) < PLACES_PER_SUB_BATCH:
        raise InsufficientClassesError(
            f"Only {len(eligible)} classes with >= {IMAGES_PER_QUADRUPLET} images, need {PLACES_PER_SUB_BATCH}")
    chosen = rng.choice(eligible, PLACES_PER_SUB_BATCH, replace=False)
    return SubBatch(_quadruplets_for_classes(chosen, classes, rng), BatchSource.GSV)


def class_centroids(classes: Mapping[int, Sequence[int]],
                    poses: Mapping[int, PlanarPose]) -> Dict[int, PlanarPose]:
    """Mean position of each class (heading 0)"""
    centroids = {}
    for class_id, ids in classes.items():
        east = float(np.mean([poses[i].east for i in ids]))
        north = float(np.mean([poses[i].north for i in ids]))
        centroids[class_id] = PlanarPose(east, north, 0.0)
    return centroids


def class_separation_violations(centroids: Mapping[int, PlanarPose],
                                min_distance: float = 100.0) -> List[Tuple[int, int, float]]:
    """Class pairs whose centroids are closer than min_distance"""
    keys = sorted(centroids)
    if len(keys) < 2:
        return []
    xy = np.array([centroids[k].position for k in keys])
    dist = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    rows, cols = np.nonzero(np.triu(dist < min_distance, k=1))
    return [(keys[r], keys[c], float(dist[r, c])) for r, c in zip(rows, cols)]


# ------------------------------------------------------------ clique mining

@dataclass
class CliqueBatchPlan:
    """Disjoint cliques of mutually similar but distant classes"""
    cliques: List[Tuple[int, ...]]
    similarity_floor: float
    geo_floor: float

    @property
    def classes(self) -> List[int]:
        return [c for clique in self.cliques for c in clique]

    def __len__(self) -> int:
        return len(self.cliques)


def hard_negative_graph(descriptors: Mapping[int, Descriptor], positions: Mapping[int, PlanarPose],
                        similarity_floor: float, geo_floor: float) -> Tuple[List[int], np.ndarray, np.ndarray]:
    """Node ids, adjacency (similar AND distant) and similarity matrix"""
    nodes = sorted(descriptors)
    if set(nodes) != set(positions):
        raise InvalidInputError("descriptors and positions must cover the same ids")
    if not nodes:
        return nodes, np.zeros((0, 0), dtype=bool), np.zeros((0, 0))
    matrix = np.stack([np.asarray(getattr(descriptors[n], 'values', descriptors[n]), dtype=np.float64)
                       for n in nodes])
    similarity = matrix @ matrix.T
    xy = np.array([positions[n].position for n in nodes])
    dist = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    adjacency = (similarity >= similarity_floor) & (dist >= geo_floor)
    np.fill_diagonal(adjacency, False)
    return nodes, adjacency, similarity


def mine_cliques(descriptors: Mapping[int, Descriptor], positions: Mapping[int, PlanarPose],
                 similarity_floor: float, geo_floor: float, clique_size: int,
                 min_clique_size: Optional[int] = None) -> CliqueBatchPlan:
    """Greedy disjoint cliques in the hard-negative graph.

    Seeds are visited by descending degree (ties by id); each clique grows
    with the seed's most similar free neighbours that stay adjacent to every
    member, up to clique_size. Cliques below min_clique_size (clique_size
    unless given) are dropped.
    """
    if clique_size < 2:
        raise InvalidInputError(f"clique_size must be >= 2, got {clique_size}")
    if min_clique_size is None:
        min_clique_size = clique_size
    if not 2 <= min_clique_size <= clique_size:
        raise InvalidInputError(f"min_clique_size must lie in [2, {clique_size}], got {min_clique_size}")
    nodes, adjacency, similarity = hard_negative_graph(descriptors, positions, similarity_floor, geo_floor)
    degree = adjacency.sum(axis=1)
    order = sorted(range(len(nodes)), key=lambda i: (-int(degree[i]), nodes[i]))
    assigned = np.zeros(len(nodes), dtype=bool)
    cliques: List[Tuple[int, ...]] = []

    for seed in order:
        if assigned[seed]:
            continue
        members = [seed]
        candidates = sorted(np.flatnonzero(adjacency[seed] & ~assigned),
                            key=lambda j: (-similarity[seed, j], nodes[j]))
        for j in candidates:
            if len(members) == clique_size:
                break
            if j != seed and all(adjacency[j, m] for m in members):
                members.append(int(j))
        if len(members) >= min_clique_size:
            assigned[members] = True
            cliques.append(tuple(nodes[m] for m in members))

    logger.debug(f"Mined {len(cliques)} cliques over {len(nodes)} classes")
    return CliqueBatchPlan(cliques, similarity_floor, geo_floor)


def sample_clique_batch(plan: CliqueBatchPlan, classes: Mapping[int, Sequence[int]],
                        rng: np.random.Generator) -> SubBatch:
    """Whole cliques first, then random padding up to 32 classes"""
    eligible = eligible_classes(classes)
    if len(eligible) < PLACES_PER_SUB_BATCH:
        raise InsufficientClassesError(
            f"Only {len(eligible)} classes with >= {IMAGES_PER_QUADRUPLET} images, need {PLACES_PER_SUB_BATCH}")
    eligible_set = set(eligible)
    selected: List[int] = []
    taken: Set[int] = set()
    for index in rng.permutation(len(plan.cliques)) if plan.cliques else []:
        members = [c for c in plan.cliques[index] if c in eligible_set and c not in taken]
        if len(members) < len(plan.cliques[index]):
            logger.debug(f"Skipping {len(plan.cliques[index]) - len(members)} ineligible clique classes")
        if len(selected) + len(members) > PLACES_PER_SUB_BATCH:
            continue
        selected.extend(members)
        taken.update(members)
        if len(selected) == PLACES_PER_SUB_BATCH:
            break
    if len(selected) < PLACES_PER_SUB_BATCH:
        remaining = [c for c in eligible if c not in taken]
        padding = rng.choice(remaining, PLACES_PER_SUB_BATCH - len(selected), replace=False)
        selected.extend(int(c) for c in padding)
    return SubBatch(_quadruplets_for_classes(selected, classes, rng), BatchSource.MSLS)


# ---------------------------------------------------------- overlap criteria

class PoseOverlap:
    """Visual overlap as strict proximity: < max_distance meters and < max_angle degrees"""

    def __init__(self, poses: Mapping[int, PlanarPose], max_distance: float = 10.0,
                 max_angle: float = 30.0):
        self.poses = poses
        self.max_distance = max_distance
        self.max_angle = max_angle

    def overlaps(self, a: int, b: int) -> bool:
        pa, pb = self.poses[a], self.poses[b]
        return (planar_distance(pa, pb) < self.max_distance
                and angular_difference(pa.heading, pb.heading) < self.max_angle)

    def matrix(self, ids_a: Sequence[int], ids_b: Sequence[int]) -> np.ndarray:
        a = np.array([(self.poses[i].east, self.poses[i].north, self.poses[i].heading) for i in ids_a])
        b = np.array([(self.poses[i].east, self.poses[i].north, self.poses[i].heading) for i in ids_b])
        if len(a) == 0 or len(b) == 0:
            return np.zeros((len(a), len(b)), dtype=bool)
        dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
        dh = np.abs(a[:, None, 2] - b[None, :, 2]) % 360.0
        dh = np.minimum(dh, 360.0 - dh)
        return (dist < self.max_distance) & (dh < self.max_angle)


class CovisibilityOverlap:
    """Visual overlap as shared reconstruction points: overlap >= min_overlap"""

    def __init__(self, covisibility: Covisibility, min_overlap: float = 0.01):
        self.covisibility = covisibility
        self.min_overlap = min_overlap

    def overlaps(self, a: int, b: int) -> bool:
        return self.covisibility.overlap(a, b) >= self.min_overlap

    def matrix(self, ids_a: Sequence[int], ids_b: Sequence[int]) -> np.ndarray:
        result = np.zeros((len(ids_a), len(ids_b)), dtype=bool)
        columns: Dict[int, List[int]] = {}
        for col, image_id in enumerate(ids_b):
            columns.setdefault(image_id, []).append(col)
        for row, image_id in enumerate(ids_a):
            result[row, columns.get(image_id, [])] = True
            for other, fraction in self.covisibility.neighbors(image_id).items():
                if fraction >= self.min_overlap and other in columns:
                    result[row, columns[other]] = True
        return result


@dataclass(frozen=True)
class Violation:
    """Two images from different quadruplets that overlap"""
    quadruplet_a: int
    quadruplet_b: int
    image_a: int
    image_b: int


def check_cross_quadruplet_disjointness(batch: SubBatch, criterion) -> List[Violation]:
    """All image pairs spanning two quadruplets that meet the overlap criterion"""
    ids = batch.image_ids
    owner = np.repeat(np.arange(len(batch.quadruplets)), IMAGES_PER_QUADRUPLET)
    overlap = criterion.matrix(ids, ids)
    spanning = np.triu(owner[:, None] != owner[None, :], k=1)
    rows, cols = np.nonzero(overlap & spanning)
    return [Violation(int(owner[r]), int(owner[c]), ids[r], ids[c]) for r, c in zip(rows, cols)]


# ------------------------------------------------------ scene quadruplets

def _random_four_clique(compatible: np.ndarray, rng: np.random.Generator) -> Optional[List[int]]:
    """Exhaustive backtracking search in random order for 4 mutually compatible indices"""
    order = [int(i) for i in rng.permutation(len(compatible))]

    def extend(chosen: List[int], candidates: List[int]) -> Optional[List[int]]:
        if len(chosen) == IMAGES_PER_QUADRUPLET:
            return chosen
        for position, index in enumerate(candidates):
            rest = [j for j in candidates[position + 1:] if compatible[index, j]]
            if len(chosen) + 1 + len(rest) >= IMAGES_PER_QUADRUPLET:
                found = extend(chosen + [index], rest)
                if found:
                    return found
        return None

    return extend([], order)


def _scene_quadruplet(scene: Iterable[int], criterion, rng: np.random.Generator,
                      class_id: int) -> Quadruplet:
    ids = sorted(set(int(i) for i in scene))
    if not ids:
        raise InvalidInputError("Scene is empty")
    compatible = criterion.matrix(ids, ids)
    found = _random_four_clique(compatible, rng) if len(ids) >= IMAGES_PER_QUADRUPLET else None
    if found is None:
        raise InfeasibleSceneError(f"No mutually overlapping quadruplet among {len(ids)} images")
    return Quadruplet(tuple(ids[i] for i in found), class_id)


def sample_covis_quadruplet(covisibility: Covisibility, scene: Iterable[int], rng: np.random.Generator,
                            min_overlap: float = 0.01, class_id: int = 0) -> Quadruplet:
    """Four images of a reconstruction with all six pairwise overlaps >= min_overlap"""
    return _scene_quadruplet(scene, CovisibilityOverlap(covisibility, min_overlap), rng, class_id)


def sample_scan_quadruplet(poses: Mapping[int, PlanarPose], scene: Iterable[int], rng: np.random.Generator,
                           max_distance: float = 10.0, max_angle: float = 30.0,
                           class_id: int = 0) -> Quadruplet:
    """Four views of a scan, all pairs < max_distance meters and < max_angle degrees apart"""
    return _scene_quadruplet(scene, PoseOverlap(poses, max_distance, max_angle), rng, class_id)


def _scene_batch(scenes: Mapping[int, Sequence[int]], criterion, rng: np.random.Generator,
                 source: BatchSource) -> SubBatch:
    """One quadruplet per scene, rejecting scenes that would overlap earlier quadruplets"""
    scene_ids = sorted(scenes)
    quadruplets: List[Quadruplet] = []
    chosen_ids: List[int] = []
    for index in rng.permutation(len(scene_ids)):
        scene_id = scene_ids[index]
        try:
            quadruplet = _scene_quadruplet(scenes[scene_id], criterion, rng, scene_id)
        except InfeasibleSceneError as e:
            logger.warning(f"Skipping scene {scene_id}: {e}")
            continue
        if chosen_ids and criterion.matrix(list(quadruplet.image_ids), chosen_ids).any():
            logger.debug(f"Skipping scene {scene_id}: overlaps an earlier quadruplet")
            continue
        quadruplets.append(quadruplet)
        chosen_ids.extend(quadruplet.image_ids)
        if len(quadruplets) == PLACES_PER_SUB_BATCH:
            return SubBatch(tuple(quadruplets), source)
    raise InsufficientClassesError(
        f"Only {len(quadruplets)} feasible disjoint scenes, need {PLACES_PER_SUB_BATCH}")


def sample_covis_batch(covisibility: Covisibility, scenes: Mapping[int, Sequence[int]],
                       rng: np.random.Generator, min_overlap: float = 0.01) -> SubBatch:
    return _scene_batch(scenes, CovisibilityOverlap(covisibility, min_overlap), rng, BatchSource.MEGASCENES)


def sample_scan_batch(poses: Mapping[int, PlanarPose], scenes: Mapping[int, Sequence[int]],
                      rng: np.random.Generator, max_distance: float = 10.0,
                      max_angle: float = 30.0) -> SubBatch:
    return _scene_batch(scenes, PoseOverlap(poses, max_distance, max_angle), rng, BatchSource.SCANNET)


# ---------------------------------------------------------------- iteration

def assemble_iteration(sfxl_frontal: SubBatch, sfxl_lateral: SubBatch, gsv: SubBatch,
                       msls: SubBatch, megascenes: SubBatch, scannet: SubBatch) -> TrainingIteration:
    """Six sub-batches: two from SF-XL, one from each other source"""
    return TrainingIteration((sfxl_frontal, sfxl_lateral, gsv, msls, megascenes, scannet))


def assemble_partial_iteration(sub_batches: Sequence[SubBatch],
                               sources: Sequence[BatchSource]) -> TrainingIteration:
    """Iteration over an ablation subset of sources"""
    check_composition([b.source for b in sub_batches], sources)
    return TrainingIteration(tuple(sub_batches), strict=False)


# ------------------------------------------------------------ sampler objects

class SubBatchSampler:
    """Binds one sampling procedure to its data"""
    source: BatchSource

    def sample(self, rng: np.random.Generator) -> SubBatch:
        raise NotImplementedError

    def overlap_criterion(self):
        return None


class EigenPlacesSampler(SubBatchSampler):

    def __init__(self, world, facing: str, config: Optional[SamplerConfig] = None):
        self.config = config or SamplerConfig()
        self.facing = facing
        self.source = BatchSource.SFXL_FRONTAL if facing == FRONTAL else BatchSource.SFXL_LATERAL
        self.partition = partition_eigenplaces(world.images, self.config.cell_size, self.config.focal_distance)
        self._poses = world.poses

    def sample(self, rng: np.random.Generator) -> SubBatch:
        return sample_eigenplaces_batch(self.partition, self.facing, rng,
                                        self.config.facing_tolerance, self.config.max_retries)

    def overlap_criterion(self):
        return PoseOverlap(self._poses, self.config.scan_max_distance, self.config.scan_max_angle)


class GsvSampler(SubBatchSampler):
    source = BatchSource.GSV

    def __init__(self, world, config: Optional[SamplerConfig] = None):
        self.config = config or SamplerConfig()
        self.classes = world.classes()

    def sample(self, rng: np.random.Generator) -> SubBatch:
        return sample_gsv_batch(self.classes, rng)


class CliqueSampler(SubBatchSampler):
    """Clique-mined batches; the plan is rebuilt from fresh descriptors by refresh()"""
    source = BatchSource.MSLS

    def __init__(self, world, config: Optional[SamplerConfig] = None):
        self.config = config or SamplerConfig()
        self.classes = world.classes()
        self.centroids = class_centroids(self.classes, world.poses)
        self.plan = CliqueBatchPlan([], self.config.similarity_floor, self.config.geo_floor)
        self._lock = threading.Lock()

    def refresh(self, class_descriptors: Mapping[int, Descriptor]) -> CliqueBatchPlan:
        plan = mine_cliques(class_descriptors, {c: self.centroids[c] for c in class_descriptors},
                            self.config.similarity_floor, self.config.geo_floor,
                            self.config.clique_size, self.config.min_clique_size)
        with self._lock:
            self.plan = plan
        logger.debug(f"Clique plan refreshed: {len(plan)} cliques, {len(plan.classes)} classes")
        return plan

    def sample(self, rng: np.random.Generator) -> SubBatch:
        with self._lock:
            plan = self.plan
        return sample_clique_batch(plan, self.classes, rng)


class CovisibilitySampler(SubBatchSampler):
    source = BatchSource.MEGASCENES

    def __init__(self, world, config: Optional[SamplerConfig] = None):
        self.config = config or SamplerConfig()
        self.covisibility = world.covisibility
        self.scenes = world.scenes

    def sample(self, rng: np.random.Generator) -> SubBatch:
        return sample_covis_batch(self.covisibility, self.scenes, rng, self.config.min_overlap)

    def overlap_criterion(self):
        return CovisibilityOverlap(self.covisibility, self.config.min_overlap)


class ScanSampler(SubBatchSampler):
    source = BatchSource.SCANNET

    def __init__(self, world, config: Optional[SamplerConfig] = None):
        self.config = config or SamplerConfig()
        self.poses = world.poses
        self.scenes = world.scenes

    def sample(self, rng: np.random.Generator) -> SubBatch:
        return sample_scan_batch(self.poses, self.scenes, rng,
                                 self.config.scan_max_distance, self.config.scan_max_angle)

    def overlap_criterion(self):
        return PoseOverlap(self.poses, self.config.scan_max_distance, self.config.scan_max_angle)


def build_samplers(world, config: Optional[SamplerConfig] = None,
                   sources: Sequence[BatchSource] = ITERATION_SOURCES) -> Dict[BatchSource, SubBatchSampler]:
    """One sampler per requested source, in canonical order"""
    config = config or SamplerConfig()
    factories: Dict[BatchSource, Callable[[], SubBatchSampler]] = {
        BatchSource.SFXL_FRONTAL: lambda: EigenPlacesSampler(world, FRONTAL, config),
        BatchSource.SFXL_LATERAL: lambda: EigenPlacesSampler(world, LATERAL, config),
        BatchSource.GSV: lambda: GsvSampler(world, config),
        BatchSource.MSLS: lambda: CliqueSampler(world, config),
        BatchSource.MEGASCENES: lambda: CovisibilitySampler(world, config),
        BatchSource.SCANNET: lambda: ScanSampler(world, config),
    }
    wanted = {BatchSource(s) for s in sources}
    return {s: factories[s]() for s in ITERATION_SOURCES if s in wanted}
