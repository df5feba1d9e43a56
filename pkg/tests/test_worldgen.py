#!/usr/bin/env python3
"""
Unit tests for the synthetic world generator
"""

import unittest

import numpy as np

from src.core import Covisibility, DatasetKind, ImageRecord, PlanarPose, angular_difference, planar_distance
from src.errors import InvalidInputError, NotFoundError, WorldGenerationError
from src.samplers import cell_of, class_centroids
from src.worldgen import World, WorldConfig, generate_world, true_descriptor, true_descriptors
from tests import small_world


class TestGenerateWorld(unittest.TestCase):

    def setUp(self):
        self.world = small_world()

    def test_smallest_legal_world(self):
        """32 places of 4 images is 128 images"""
        world = generate_world(WorldConfig(n_places=32, images_per_place=4))
        self.assertEqual(len(world.images), 128)
        self.assertEqual(len(world.classes()), 32)

    def test_config_invariants(self):
        with self.assertRaises(InvalidInputError):
            WorldConfig(images_per_place=3)
        with self.assertRaises(InvalidInputError):
            WorldConfig(n_places=31)
        with self.assertRaises(InvalidInputError):
            WorldConfig(noise_sigma=-0.1)

    def test_deterministic(self):
        """Same config and seed reproduce images, covisibility and descriptors"""
        config = WorldConfig(n_places=32, seed=11)
        a, b = generate_world(config), generate_world(config)
        self.assertEqual(a.images, b.images)
        self.assertEqual(a.covisibility, b.covisibility)
        np.testing.assert_array_equal(true_descriptors(a), true_descriptors(b))

    def test_different_seed_differs(self):
        a = generate_world(WorldConfig(n_places=32, seed=1))
        b = generate_world(WorldConfig(n_places=32, seed=2))
        self.assertNotEqual(a.images, b.images)

    def test_place_separation(self):
        """Class centroids are at least the configured separation apart"""
        centroids = class_centroids(self.world.classes(), self.world.poses)
        keys = sorted(centroids)
        closest = min(planar_distance(centroids[a], centroids[b])
                      for i, a in enumerate(keys) for b in keys[i + 1:])
        self.assertGreaterEqual(closest, self.world.config.separation)

    def test_place_fits_one_cell(self):
        """Every camera of a place lands in the place's grid cell"""
        size = self.world.config.cell_size
        for place, ids in self.world.classes().items():
            cells = {cell_of(self.world.record(i).pose, size) for i in ids}
            self.assertEqual(len(cells), 1, f"place {place}")
            center = self.world.place_centers[place]
            for i in ids:
                self.assertLess(planar_distance(self.world.record(i).pose, center), size / 2)

    def test_frontal_and_lateral_cameras(self):
        """Half the cameras look along the street, half across it"""
        for place, ids in self.world.classes().items():
            street = self.world.place_centers[place].heading
            along = [i for i in ids
                     if angular_difference(self.world.record(i).pose.heading, street) <= 10.0 + 1e-9]
            self.assertEqual(len(along), 4, f"place {place}")

    def test_infeasible_packing(self):
        """Over-dense config fails and names the separation"""
        with self.assertRaises(WorldGenerationError) as ctx:
            generate_world(WorldConfig(n_places=200, area_side=500.0))
        self.assertIn('separation', str(ctx.exception))


class TestCovisibility(unittest.TestCase):

    def setUp(self):
        self.world = small_world()

    def test_overlap_implies_proximity(self):
        """Pairs with overlap >= 0.01 are closer than the distance cutoff"""
        cutoff = self.world.config.covis_distance
        pairs = self.world.covisibility.pairs()
        self.assertGreater(len(pairs), 0)
        for a, b, fraction in pairs:
            self.assertGreater(fraction, 0.0)
            self.assertLessEqual(fraction, 1.0)
            if fraction >= 0.01:
                self.assertLess(planar_distance(self.world.record(a).pose, self.world.record(b).pose), cutoff)
            self.assertEqual(self.world.covisibility.overlap(b, a), fraction)

    def test_no_cross_place_overlap(self):
        """Places 100 m apart share no covisibility"""
        for a, b, _ in self.world.covisibility.pairs():
            self.assertEqual(self.world.record(a).class_id, self.world.record(b).class_id)

    def test_self_overlap(self):
        self.assertEqual(self.world.covisibility.overlap(5, 5), 1.0)


class TestTrueDescriptors(unittest.TestCase):

    def setUp(self):
        self.world = small_world()

    def test_unit_norm(self):
        d = true_descriptor(self.world, 3)
        self.assertAlmostEqual(d.cosine(d), 1.0, delta=1e-12)
        norms = np.linalg.norm(true_descriptors(self.world), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_unknown_id(self):
        with self.assertRaises(NotFoundError):
            true_descriptor(self.world, 10 ** 9)

    def test_same_pose_without_noise(self):
        """noise_sigma=0 makes the descriptor a pure function of pose"""
        config = WorldConfig(n_places=32, noise_sigma=0.0)
        pose = PlanarPose(12.0, 34.0, 56.0)
        images = (ImageRecord(1, pose, DatasetKind.GSV, class_id=0),
                  ImageRecord(2, pose, DatasetKind.GSV, class_id=0))
        world = World(config, images, Covisibility(), {0: (1, 2)}, config.resolved_descriptor_seed)
        np.testing.assert_array_equal(true_descriptor(world, 1).values, true_descriptor(world, 2).values)

    def test_within_place_more_similar(self):
        """Mean within-place cosine beats mean cross-place cosine on a 32-place world"""
        world = generate_world(WorldConfig(n_places=32, seed=5))
        matrix = true_descriptors(world)
        labels = np.array([r.class_id for r in world.images])
        similarity = matrix @ matrix.T
        same = labels[:, None] == labels[None, :]
        off_diagonal = ~np.eye(len(labels), dtype=bool)
        within = similarity[same & off_diagonal].mean()
        across = similarity[~same].mean()
        self.assertGreater(within, across)

    def test_noise_seed_keeps_geometry(self):
        """Changing only the noise seed keeps poses and changes descriptors"""
        a = generate_world(WorldConfig(n_places=32, seed=3))
        b = generate_world(WorldConfig(n_places=32, seed=3, noise_seed=99))
        self.assertEqual(a.images, b.images)
        self.assertFalse(np.array_equal(true_descriptors(a), true_descriptors(b)))


if __name__ == '__main__':
    unittest.main()
