#!/usr/bin/env python3
"""
Deterministic synthetic world generator

Stands in for the real training datasets: places laid out on a metric
plane, posed cameras per place, a covisibility graph, and a smooth
descriptor process with seeded noise. Every sampler, the trainer and the
metrics are tested against worlds produced here.
"""

import math
import logging
from dataclasses import dataclass, field, asdict
from functools import cached_property
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import (
    PLACES_PER_SUB_BATCH,
    IMAGES_PER_QUADRUPLET,
    Covisibility,
    DatasetKind,
    Descriptor,
    ImageRecord,
    PlanarPose,
    direction_of,
    normalize_rows,
)
from .errors import InvalidInputError, NotFoundError, WorldGenerationError

logger = logging.getLogger(__name__)


@dataclass
class WorldConfig:
    """Parameters of a synthetic world"""
    n_places: int = 64
    images_per_place: int = 8
    area_side: float = 2000.0
    noise_sigma: float = 0.3
    embed_dim: int = 64
    seed: int = 0
    separation: float = 100.0
    cell_size: float = 15.0
    street_half_length: float = 3.5
    along_jitter: float = 0.5
    lateral_jitter: float = 0.5
    heading_jitter: float = 10.0
    covis_distance: float = 30.0
    covis_angle: float = 60.0
    length_scale: float = 20.0
    heading_scale: float = 1.0
    descriptor_seed: Optional[int] = None
    noise_seed: Optional[int] = None
    source: str = DatasetKind.GSV.value

    def __post_init__(self):
        if self.images_per_place < IMAGES_PER_QUADRUPLET:
            raise InvalidInputError(
                f"images_per_place must be >= {IMAGES_PER_QUADRUPLET}, got {self.images_per_place}")
        if self.n_places < PLACES_PER_SUB_BATCH:
            raise InvalidInputError(
                f"n_places must be >= {PLACES_PER_SUB_BATCH}, got {self.n_places}")
        if self.noise_sigma < 0:
            raise InvalidInputError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if self.embed_dim < 1 or self.area_side <= 0 or self.cell_size <= 0:
            raise InvalidInputError("embed_dim, area_side and cell_size must be positive")
        DatasetKind(self.source)

    @property
    def resolved_descriptor_seed(self) -> int:
        return self.seed + 1 if self.descriptor_seed is None else self.descriptor_seed

    @property
    def resolved_noise_seed(self) -> int:
        return self.seed + 2 if self.noise_seed is None else self.noise_seed

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class World:
    """Ground-truth universe: posed images, covisibility and scenes"""
    config: WorldConfig
    images: Tuple[ImageRecord, ...]
    covisibility: Covisibility
    scenes: Dict[int, Tuple[int, ...]]
    descriptor_seed: int
    place_centers: Dict[int, PlanarPose] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.images = tuple(self.images)
        self._index = {}
        for position, record in enumerate(self.images):
            if record.id in self._index:
                raise InvalidInputError(f"Duplicate image id {record.id}")
            self._index[record.id] = position

    def record(self, image_id: int) -> ImageRecord:
        try:
            return self.images[self._index[int(image_id)]]
        except KeyError:
            raise NotFoundError(f"Unknown image id {image_id}") from None

    def __contains__(self, image_id: int) -> bool:
        return int(image_id) in self._index

    @property
    def ids(self) -> List[int]:
        return [r.id for r in self.images]

    @property
    def poses(self) -> Dict[int, PlanarPose]:
        return {r.id: r.pose for r in self.images}

    def classes(self) -> Dict[int, List[int]]:
        """class_id -> member ids (ascending)"""
        groups: Dict[int, List[int]] = {}
        for r in self.images:
            if r.class_id is not None:
                groups.setdefault(r.class_id, []).append(r.id)
        return {c: sorted(ids) for c, ids in sorted(groups.items())}

    def queries_and_database(self) -> Tuple[List[int], List[int]]:
        """First image of every place is a query; the rest form the database"""
        queries, database = [], []
        for _, ids in self.classes().items():
            queries.append(ids[0])
            database.extend(ids[1:])
        return queries, database

    @cached_property
    def _basis(self) -> Tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.descriptor_seed)
        weights = rng.normal(0.0, 1.0, size=(self.config.embed_dim, 4))
        phases = rng.uniform(0.0, 2.0 * math.pi, size=self.config.embed_dim)
        return weights, phases


def generate_world(config: WorldConfig) -> World:
    """Lay out places, cameras and covisibility deterministically from config.seed"""
    rng = np.random.default_rng(config.seed)
    centers = _place_centers(config, rng)

    images: List[ImageRecord] = []
    scenes: Dict[int, Tuple[int, ...]] = {}
    place_centers: Dict[int, PlanarPose] = {}
    source = DatasetKind(config.source)
    k = config.images_per_place
    n_frontal = math.ceil(k / 2)

    for place, center in enumerate(centers):
        street = float(rng.uniform(0.0, 180.0))
        along = np.linspace(-config.street_half_length, config.street_half_length, k)
        along = along + rng.uniform(-config.along_jitter, config.along_jitter, k)
        across = rng.uniform(-config.lateral_jitter, config.lateral_jitter, k)
        along -= along.mean()
        across -= across.mean()
        order = rng.permutation(k)
        jitter = rng.uniform(-config.heading_jitter, config.heading_jitter, k)

        street_dir = direction_of(street)
        across_dir = direction_of(street + 90.0)
        ids = []
        for j in range(k):
            position = center + along[j] * street_dir + across[j] * across_dir
            lateral = 90.0 if order[j] >= n_frontal else 0.0
            pose = PlanarPose(position[0], position[1], street + lateral + jitter[j])
            image_id = place * k + j
            images.append(ImageRecord(image_id, pose, source, class_id=place, scene_id=place))
            ids.append(image_id)
        scenes[place] = tuple(ids)
        place_centers[place] = PlanarPose(center[0], center[1], street)

    covisibility = _covisibility(images, centers, config)
    logger.info(f"Generated world: {len(centers)} places, {len(images)} images, "
                f"{len(covisibility)} covisible pairs")
    return World(config, tuple(images), covisibility, scenes,
                 config.resolved_descriptor_seed, place_centers)


def _place_centers(config: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    """Greedy placement on the centres of a cell grid, candidates in shuffled order"""
    per_side = int(config.area_side // config.cell_size)
    candidates = per_side * per_side
    accepted = np.empty((config.n_places, 2), dtype=np.float64)
    count = 0
    for flat in rng.permutation(candidates):
        point = (np.array([flat % per_side, flat // per_side], dtype=np.float64) + 0.5) * config.cell_size
        if count and np.min(np.hypot(*(accepted[:count] - point).T)) < config.separation:
            continue
        accepted[count] = point
        count += 1
        if count == config.n_places:
            return accepted
    raise WorldGenerationError(
        f"Cannot place {config.n_places} places with separation >= {config.separation} m "
        f"in a {config.area_side} m square (placed {count})")


def _covisibility(images: List[ImageRecord], centers: np.ndarray, config: WorldConfig) -> Covisibility:
    """Distance kernel times heading-alignment kernel, zero beyond the cutoffs"""
    k = config.images_per_place
    east = np.array([r.pose.east for r in images])
    north = np.array([r.pose.north for r in images])
    heading = np.array([r.pose.heading for r in images])
    radius = config.street_half_length + 2 * config.along_jitter + 2 * config.lateral_jitter
    reach = config.covis_distance + 2 * radius

    covisibility = Covisibility()
    for place in range(len(centers)):
        near = np.flatnonzero(np.hypot(*(centers - centers[place]).T) < reach)
        near = near[near >= place]
        mine = np.arange(place * k, (place + 1) * k)
        others = np.concatenate([np.arange(p * k, (p + 1) * k) for p in near])
        dist = np.hypot(east[mine, None] - east[None, others], north[mine, None] - north[None, others])
        dh = np.abs(heading[mine, None] - heading[None, others]) % 360.0
        dh = np.minimum(dh, 360.0 - dh)
        value = (np.clip(1.0 - dist / config.covis_distance, 0.0, None)
                 * np.clip(1.0 - dh / config.covis_angle, 0.0, None))
        for a, b in zip(*np.nonzero(value > 0.0)):
            ia, ib = int(mine[a]), int(others[b])
            if ia < ib:
                covisibility.add(images[ia].id, images[ib].id, float(value[a, b]))
    return covisibility


def true_descriptors(world: World, ids: Optional[List[int]] = None) -> np.ndarray:
    """Ground-truth unit descriptors, one row per id"""
    ids = world.ids if ids is None else list(ids)
    config = world.config
    records = [world.record(i) for i in ids]
    if not records:
        return np.empty((0, config.embed_dim), dtype=np.float64)
    headings = np.radians([r.pose.heading for r in records])
    features = np.column_stack([
        [r.pose.east / config.length_scale for r in records],
        [r.pose.north / config.length_scale for r in records],
        config.heading_scale * np.cos(headings),
        config.heading_scale * np.sin(headings),
    ])
    weights, phases = world._basis
    signal = normalize_rows(math.sqrt(2.0 / config.embed_dim) * np.cos(features @ weights.T + phases))
    if config.noise_sigma > 0:
        scale = config.noise_sigma / math.sqrt(config.embed_dim)
        noise = np.stack([
            np.random.default_rng([config.resolved_noise_seed, r.id]).normal(0.0, scale, config.embed_dim)
            for r in records
        ])
        signal = signal + noise
    return normalize_rows(signal)


def true_descriptor(world: World, image_id: int) -> Descriptor:
    """Ground-truth descriptor of one image"""
    return Descriptor(true_descriptors(world, [image_id])[0])


if __name__ == "__main__":
    world = generate_world(WorldConfig())
    print(f"{len(world.images)} images, {len(world.covisibility)} covisible pairs")
