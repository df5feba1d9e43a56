"""
Test suite for the multiloc package.

This module contains unit tests, oracle tests and acceptance runs
for the multiloc package.

Test Structure:
    test_core.py: poses, descriptors, batch structure, covisibility
    test_memory.py: transient buffer accounting
    test_worldgen.py: synthetic world generation
    test_samplers.py: the five sub-batch samplers and overlap checks
    test_msloss.py: mining, loss and gradients
    test_trainer.py: accumulation, AdamW, training loop, checkpoints
    test_knn.py: blocked exact search and block planning
    test_metrics.py: Recall@K and revisited mAP
    test_fileio.py: descriptor, metadata and covisibility files
    test_config.py: YAML config and manifests
    test_cli.py: command-line surface
    test_acceptance.py: end-to-end acceptance properties
"""

import sys
import os
from functools import lru_cache

import numpy as np

# Add the repository root to Python path so `src` imports resolve
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.core import DatasetKind, ImageRecord, PlanarPose, Quadruplet, SubBatch, normalize_rows
from src.worldgen import WorldConfig, generate_world

__version__ = "1.0.0"
__test__ = True  # Mark this as a test package


@lru_cache(maxsize=None)
def small_world(seed=0, n_places=40, images_per_place=8, noise_sigma=0.3):
    """
    Cached synthetic world for tests that only read it.

    Args:
        seed: layout seed
        n_places: number of places (>= 32)
        images_per_place: cameras per place
        noise_sigma: descriptor noise scale

    Returns:
        World instance
    """
    return generate_world(WorldConfig(n_places=n_places, images_per_place=images_per_place,
                                      area_side=1500.0, noise_sigma=noise_sigma, seed=seed))


def random_unit_rows(rng, count, dim):
    """count x dim float64 matrix of unit rows"""
    return normalize_rows(rng.normal(size=(count, dim)))


def grid_records(n_classes, per_class=4, spacing=200.0, source=DatasetKind.GSV, first_id=0):
    """Records laid out one class per grid point, spacing meters apart"""
    records = []
    side = int(np.ceil(np.sqrt(n_classes)))
    image_id = first_id
    for c in range(n_classes):
        east, north = (c % side) * spacing, (c // side) * spacing
        for j in range(per_class):
            records.append(ImageRecord(image_id, PlanarPose(east + j, north, 0.0), source, class_id=c))
            image_id += 1
    return records


def make_sub_batch(source, first_class=0, first_id=0):
    """Well-formed SubBatch with consecutive ids and classes"""
    quadruplets = tuple(
        Quadruplet(tuple(range(first_id + 4 * q, first_id + 4 * q + 4)), first_class + q)
        for q in range(32)
    )
    return SubBatch(quadruplets, source)
