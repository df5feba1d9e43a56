#!/usr/bin/env python3
"""
Tests for the command-line interface
"""

import contextlib
import csv
import io
import json
import os
import shutil
import tempfile
import unittest
from unittest.mock import Mock, patch

import numpy as np

from src.__main__ import build_parser, landmark_ground_truth, main
from src.config import RunManifest
from src.core import DatasetKind, ImageRecord, PlanarPose
from src.errors import EXIT_CODE_FAMILIES, ConfigError, InvalidInputError, NotFoundError, TrainingDivergenceError
from src.fileio import load_world, read_descriptors, write_descriptors, write_metadata
from src.trainer import TrainConfig, initial_table, load_checkpoint
from tests import grid_records, random_unit_rows

SMALL_WORLD = ['--set', 'world.n_places=40', '--set', 'world.area_side=1500']


def run(argv):
    """main() with stdout and stderr captured"""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


def read_csv(path):
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.reader(f))


class CliTestCase(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def path(self, *parts):
        return os.path.join(self.temp_dir, *parts)

    def gen_world(self, name='world', extra=SMALL_WORLD):
        code, _, err = run(extra + ['gen-world', '--out', self.path(name)])
        self.assertEqual(code, 0, err)
        return self.path(name)


class TestParser(unittest.TestCase):

    def test_subcommands(self):
        parser = build_parser()
        args = parser.parse_args(['--threads', '2', 'bench-knn', '--descriptors', 'd.bin', '--out', 'b'])
        self.assertEqual((args.command, args.threads, args.k, args.num_queries), ('bench-knn', 2, 10, 100))
        args = parser.parse_args(['--set', 'train.seed=1', 'train', '--world', 'w', '--out', 'o'])
        self.assertEqual(args.set, ['train.seed=1'])

    def test_command_required(self):
        with self.assertRaises(SystemExit):
            with contextlib.redirect_stderr(io.StringIO()):
                build_parser().parse_args([])

    def test_help_lists_exit_codes(self):
        text = build_parser().format_help()
        self.assertIn('2   invalid command line', text)
        for family in EXIT_CODE_FAMILIES:
            self.assertIn(f"{family.exit_code:<3} {family.__name__}", text)


class TestRunCommand(CliTestCase):

    def test_package_error_exit_code(self):
        """A diverging run exits 6 and names the iteration"""
        failing = Mock(side_effect=TrainingDivergenceError("non-finite gradient", 17))
        with patch.dict('src.__main__.COMMANDS', {'train': failing}):
            code, _, err = run(['train', '--world', 'w', '--out', self.path('run')])
        self.assertEqual(code, 6)
        self.assertIn('iteration 17', err)
        failing.assert_called_once()

    def test_unexpected_error_exit_code(self):
        with patch.dict('src.__main__.COMMANDS', {'bench-knn': Mock(side_effect=RuntimeError("boom"))}):
            code, _, err = run(['bench-knn', '--descriptors', 'd.bin', '--out', self.path('bench')])
        self.assertEqual(code, 1)
        self.assertIn('boom', err)

    def test_families_exit_distinctly(self):
        """Every error family has its own code, clear of 0, 1 and argparse's 2"""
        codes = [family.exit_code for family in EXIT_CODE_FAMILIES]
        self.assertEqual(len(set(codes)), len(codes))
        self.assertFalse({0, 1, 2} & set(codes))
        seen = {}
        for error in (InvalidInputError("bad"), ConfigError("bad"), NotFoundError("missing")):
            with patch.dict('src.__main__.COMMANDS', {'bench-knn': Mock(side_effect=error)}):
                code, _, _ = run(['bench-knn', '--descriptors', 'd.bin', '--out', self.path('bench')])
            seen[type(error).__name__] = code
        self.assertEqual(seen, {'InvalidInputError': 9, 'ConfigError': 10, 'NotFoundError': 11})
        with self.assertRaises(SystemExit) as ctx:
            with contextlib.redirect_stderr(io.StringIO()):
                main(['bench-knn'])
        self.assertEqual(ctx.exception.code, 2)


class TestGenWorld(CliTestCase):

    def test_minimal_world(self):
        """32 places of 4 images is a 128-image world on disk"""
        directory = self.gen_world(extra=['--set', 'world.n_places=32', '--set', 'world.images_per_place=4'])
        with open(os.path.join(directory, 'metadata.jsonl'), encoding='utf-8') as f:
            self.assertEqual(len(f.read().splitlines()), 129)
        manifest = RunManifest.read(os.path.join(directory, 'manifest.json'))
        self.assertEqual(manifest.subcommand, 'gen-world')
        self.assertEqual(manifest.config['world']['n_places'], 32)

    def test_same_seed_same_bytes(self):
        first, second = self.gen_world('a'), self.gen_world('b')
        for name in ('world.yaml', 'metadata.jsonl', 'covisibility.txt', 'descriptors.bin'):
            with open(os.path.join(first, name), 'rb') as f1, open(os.path.join(second, name), 'rb') as f2:
                self.assertEqual(f1.read(), f2.read(), name)

    def test_infeasible_packing(self):
        code, _, err = run(['--set', 'world.n_places=200', '--set', 'world.area_side=500',
                            'gen-world', '--out', self.path('dense')])
        self.assertEqual(code, 3)
        self.assertIn('separation', err)

    def test_bad_override(self):
        code, _, _ = run(['--set', 'world.n_places=8', 'gen-world', '--out', self.path('w')])
        self.assertEqual(code, 10)


class TestTrainAndSample(CliTestCase):

    def test_history_schema(self):
        """One row per iteration: total plus six per-source losses"""
        world = self.gen_world()
        code, _, err = run(['--set', 'train.iterations=3', '--set', 'train.eval_every=0',
                            'train', '--world', world, '--out', self.path('run')])
        self.assertEqual(code, 0, err)
        rows = read_csv(self.path('run', 'history.csv'))
        self.assertEqual(len(rows), 4)
        self.assertEqual(len(rows[0]), 8)
        self.assertEqual(rows[0][:2], ['iteration', 'total'])
        self.assertTrue(os.path.exists(self.path('run', 'checkpoint.npz')))
        self.assertTrue(os.path.exists(self.path('run', 'manifest.json')))

    def test_rerun_is_identical(self):
        world = self.gen_world()
        argv = ['--set', 'train.iterations=2', '--set', 'train.eval_every=0', 'train', '--world', world]
        self.assertEqual(run(argv + ['--out', self.path('one')])[0], 0)
        self.assertEqual(run(argv + ['--out', self.path('two')])[0], 0)
        self.assertEqual(read_csv(self.path('one', 'history.csv')), read_csv(self.path('two', 'history.csv')))

    def test_zero_learning_rate_checkpoint(self):
        world = self.gen_world()
        code, _, err = run(['--set', 'train.iterations=2', '--set', 'train.learning_rate=0',
                            'train', '--world', world, '--out', self.path('run')])
        self.assertEqual(code, 0, err)
        table = load_checkpoint(self.path('run', 'checkpoint.npz'))
        manifest = RunManifest.read(self.path('run', 'manifest.json'))
        expected = initial_table(load_world(world), TrainConfig(seed=manifest.seed))
        np.testing.assert_array_equal(table.ids, expected.ids)
        np.testing.assert_array_equal(table.params, expected.params)

    def test_sample_batches(self):
        world = self.gen_world()
        out = self.path('batches.jsonl')
        code, _, err = run(['sample-batches', '--world', world, '--source', 'gsv', 'scannet',
                            '--count', '2', '--out', out])
        self.assertEqual(code, 0, err)
        with open(out, encoding='utf-8') as f:
            entries = [json.loads(line) for line in f]
        self.assertEqual([e['source'] for e in entries], ['gsv', 'scannet', 'gsv', 'scannet'])
        for entry in entries:
            self.assertEqual(len(entry['quadruplets']), 32)
        manifest = RunManifest.read(self.path('manifest.json'))
        self.assertEqual(manifest.subcommand, 'sample-batches')
        self.assertEqual((manifest.seed, manifest.outputs['batches']), (0, out))

    def test_missing_world(self):
        code, _, _ = run(['train', '--world', self.path('absent'), '--out', self.path('run')])
        self.assertNotEqual(code, 0)


class TestEval(CliTestCase):

    def write_twins(self):
        """Two queries with a co-located database twin each, plus a far distractor"""
        source = DatasetKind.MSLS
        queries = [ImageRecord(0, PlanarPose(0, 0), source), ImageRecord(1, PlanarPose(100, 0), source)]
        database = [ImageRecord(10, PlanarPose(0, 0), source), ImageRecord(11, PlanarPose(100, 0), source),
                    ImageRecord(12, PlanarPose(500, 500), source)]
        write_metadata(self.path('q.jsonl'), queries)
        write_metadata(self.path('db.jsonl'), database)
        write_descriptors(self.path('q.bin'), np.eye(3, dtype=np.float32)[:2])
        write_descriptors(self.path('db.bin'), np.eye(3, dtype=np.float32))

    def test_co_located_twins(self):
        self.write_twins()
        code, _, err = run(['eval', '--descriptors', self.path('db.bin'), '--metadata', self.path('db.jsonl'),
                            '--query-descriptors', self.path('q.bin'), '--query-metadata', self.path('q.jsonl'),
                            '--k', '1', '--out', self.path('results.csv')])
        self.assertEqual(code, 0, err)
        rows = read_csv(self.path('results.csv'))
        self.assertEqual(rows[1], ['multiloc', 'synthetic', 'recall', '1', '1.0'])
        manifest = RunManifest.read(self.path('manifest.json'))
        self.assertEqual(manifest.subcommand, 'eval')
        self.assertEqual(manifest.outputs['results'], self.path('results.csv'))

    def test_query_flags_go_together(self):
        self.write_twins()
        code, _, _ = run(['eval', '--descriptors', self.path('db.bin'), '--metadata', self.path('db.jsonl'),
                          '--query-descriptors', self.path('q.bin'), '--out', self.path('results.csv')])
        self.assertEqual(code, 9)

    def test_blocked_matches_unlimited(self):
        """A tight budget writes the same CSV as a generous one"""
        world = self.gen_world()
        base = ['eval', '--descriptors', os.path.join(world, 'descriptors.bin'),
                '--metadata', os.path.join(world, 'metadata.jsonl')]
        self.assertEqual(run(base + ['--memory-budget', '100000', '--out', self.path('tight.csv')])[0], 0)
        self.assertEqual(run(base + ['--memory-budget', str(1 << 30), '--out', self.path('wide.csv')])[0], 0)
        tight = read_csv(self.path('tight.csv'))
        self.assertEqual(tight, read_csv(self.path('wide.csv')))
        self.assertEqual([r[3] for r in tight[1:]], ['1', '10'])

    def test_database_stays_streamed(self):
        """Every descriptor read stays under the memory budget, however large the file"""
        records = grid_records(500, per_class=8, source=DatasetKind.MSLS)
        matrix = random_unit_rows(np.random.default_rng(0), 4000, 64).astype(np.float32)
        write_metadata(self.path('db.jsonl'), records)
        write_descriptors(self.path('db.bin'), matrix)
        budget = 900_000
        self.assertGreater(matrix.nbytes, budget)

        largest = []

        def recording(path, start=0, stop=None, header=None):
            rows = read_descriptors(path, start, stop, header)
            largest.append(rows.nbytes)
            return rows

        with patch('src.knn.read_descriptors', side_effect=recording):
            code, _, err = run(['eval', '--descriptors', self.path('db.bin'),
                                '--metadata', self.path('db.jsonl'),
                                '--memory-budget', str(budget), '--out', self.path('results.csv')])
        self.assertEqual(code, 0, err)
        self.assertTrue(largest)
        self.assertLess(max(largest), budget)

    def test_landmark_splits(self):
        world = self.gen_world()
        code, _, err = run(['eval', '--protocol', 'landmark',
                            '--descriptors', os.path.join(world, 'descriptors.bin'),
                            '--metadata', os.path.join(world, 'metadata.jsonl'),
                            '--out', self.path('landmark.csv')])
        self.assertEqual(code, 0, err)
        rows = read_csv(self.path('landmark.csv'))[1:]
        self.assertEqual(sorted({r[3] for r in rows}), ['E', 'H', 'M'])
        self.assertEqual(len(rows), 12)
        for row in rows:
            self.assertTrue(0.0 <= float(row[4]) <= 1.0)

    def test_budget_infeasible(self):
        world = self.gen_world()
        code, _, _ = run(['eval', '--descriptors', os.path.join(world, 'descriptors.bin'),
                          '--metadata', os.path.join(world, 'metadata.jsonl'),
                          '--memory-budget', '64', '--out', self.path('r.csv')])
        self.assertEqual(code, 7)

    def test_landmark_ground_truth_split(self):
        source = DatasetKind.GSV
        query = ImageRecord(0, PlanarPose(0, 0, 0), source, class_id=1)
        database = [ImageRecord(1, PlanarPose(1, 0, 30), source, class_id=1),
                    ImageRecord(2, PlanarPose(1, 0, 90), source, class_id=1),
                    ImageRecord(3, PlanarPose(1, 0, 0), source, class_id=2)]
        gt = landmark_ground_truth([query], database, 45.0)
        self.assertEqual(gt.queries[0].easy, {1})
        self.assertEqual(gt.queries[0].hard, {2})


class TestBenchKnn(CliTestCase):

    def setUp(self):
        super().setUp()
        rng = np.random.default_rng(0)
        matrix = rng.normal(size=(2000, 32))
        matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)
        write_descriptors(self.path('db.bin'), matrix)

    def test_report(self):
        code, _, err = run(['bench-knn', '--descriptors', self.path('db.bin'), '--num-queries', '20',
                            '--k', '5', '--memory-budget', str(1 << 20), '--out', self.path('bench')])
        self.assertEqual(code, 0, err)
        with open(self.path('bench', 'bench.json'), encoding='utf-8') as f:
            report = json.load(f)
        self.assertEqual(report['queries'], 20)
        self.assertLessEqual(report['peak_bytes'], 1 << 20)
        manifest = RunManifest.read(self.path('bench', 'manifest.json'))
        self.assertEqual(manifest.subcommand, 'bench-knn')
        self.assertEqual(manifest.inputs['descriptors'], self.path('db.bin'))

    def test_halving_block_lowers_peak(self):
        peaks = []
        for block_rows in (400, 200):
            out = self.path(f'bench{block_rows}')
            code, _, err = run(['bench-knn', '--descriptors', self.path('db.bin'), '--num-queries', '20',
                                '--block-rows', str(block_rows), '--out', out])
            self.assertEqual(code, 0, err)
            with open(os.path.join(out, 'bench.json'), encoding='utf-8') as f:
                peaks.append(json.load(f)['peak_bytes'])
        self.assertLess(peaks[1], peaks[0])

    def test_budget_below_one_row(self):
        code, _, _ = run(['bench-knn', '--descriptors', self.path('db.bin'), '--memory-budget', '16',
                          '--out', self.path('bench')])
        self.assertEqual(code, 7)


if __name__ == '__main__':
    unittest.main()
