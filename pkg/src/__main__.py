#!/usr/bin/env python3
"""
Command-line interface for multiloc
"""

import sys
import json
import time
import argparse
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import get_version, setup_logging
from .config import (
    RunManifest,
    apply_overrides,
    eval_config,
    load_config,
    snapshot,
    train_config,
    world_config,
)
from .core import ITERATION_SOURCES, BatchSource, ImageRecord, angular_difference
from .errors import InvalidInputError, MultilocError, exit_code_help
from .fileio import (
    atomic_write,
    load_world,
    read_descriptor_header,
    read_descriptors,
    read_metadata,
    save_world,
)
from .knn import DescriptorStore, benchmark, search
from .metrics import (
    LandmarkGroundTruth,
    LandmarkQuery,
    VprGroundTruth,
    map_evaluate,
    map_rows,
    recall_at_k,
    recall_rows,
    write_results_csv,
)
from .samplers import build_samplers
from .trainer import save_checkpoint, train, write_history_csv
from .worldgen import generate_world

logger = logging.getLogger(__name__)


@dataclass
class CommandResult:
    """Outcome of one subcommand"""
    success: bool
    exit_code: int = 0
    error: Optional[str] = None
    outputs: Dict[str, str] = field(default_factory=dict)
    elapsed: float = 0.0


def _config(args) -> Dict:
    return apply_overrides(load_config(args.config), args.set)


def _manifest(args, config: Dict, seed, inputs: Dict, outputs: Dict) -> RunManifest:
    return RunManifest(args.command, config, seed, {k: str(v) for k, v in inputs.items()},
                       {k: str(v) for k, v in outputs.items()}, get_version())


def cmd_gen_world(args) -> Dict[str, str]:
    """Generate a synthetic world and write it to --out"""
    config = _config(args)
    world = generate_world(world_config(config))
    out = Path(args.out)
    outputs = {k: str(v) for k, v in save_world(world, out).items()}
    _manifest(args, snapshot(config), world.config.seed, {}, outputs).write(out)
    print(f"World: {len(world.images)} images, {len(world.covisibility)} covisible pairs -> {out}")
    return outputs


def cmd_train(args) -> Dict[str, str]:
    """Train an embedding table on a saved world"""
    config = _config(args)
    if args.threads:
        config.setdefault('train', {})['threads'] = args.threads
    settings = train_config(config)
    world = load_world(args.world)
    result = train(world, settings)

    out = Path(args.out)
    outputs = {
        'checkpoint': save_checkpoint(result.table, settings, out / 'checkpoint.npz'),
        'history': write_history_csv(result.history, out / 'history.csv'),
        'evaluations': out / 'evaluations.csv',
    }
    lines = ['iteration,recall_at_1'] + [f"{i},{recall!r}" for i, recall in result.history.evaluations]
    atomic_write(outputs['evaluations'], ('\n'.join(lines) + '\n').encode('utf-8'))
    _manifest(args, snapshot(config), settings.seed, {'world': args.world}, outputs).write(out)
    first, last = result.history.evaluations[0][1], result.history.evaluations[-1][1]
    print(f"Trained {settings.iterations} iterations in {result.elapsed:.1f}s: "
          f"recall@1 {first:.4f} -> {last:.4f}")
    return {k: str(v) for k, v in outputs.items()}


def _load_split(descriptors: str, metadata: str) -> Tuple[DescriptorStore, List[ImageRecord]]:
    records = read_metadata(metadata)
    header = read_descriptor_header(descriptors)
    if header.count != len(records):
        raise InvalidInputError(f"{descriptors} holds {header.count} rows but {metadata} lists {len(records)} images")
    return DescriptorStore(path=descriptors, ids=[r.id for r in records]), records


def _queries_from_classes(store: DescriptorStore, records: List[ImageRecord]):
    """First image of every class is a query; the remaining rows form the database"""
    seen, query_rows, database_rows = set(), [], []
    for row, record in enumerate(records):
        if record.class_id is not None and record.class_id not in seen:
            seen.add(record.class_id)
            query_rows.append(row)
        else:
            database_rows.append(row)
    query_records = [records[r] for r in query_rows]
    database_records = [records[r] for r in database_rows]
    queries = store.select(query_rows, [r.id for r in query_records]).to_array()
    database = store.select(database_rows, [r.id for r in database_records])
    return queries, query_records, database, database_records


def landmark_ground_truth(queries: List[ImageRecord], database: List[ImageRecord],
                          easy_angle: float) -> LandmarkGroundTruth:
    """Same-class images are positives: easy within easy_angle of the query heading, hard otherwise"""
    gt = LandmarkGroundTruth()
    for query in queries:
        same = [r for r in database if r.class_id is not None and r.class_id == query.class_id]
        easy = {r.id for r in same if angular_difference(r.pose.heading, query.pose.heading) <= easy_angle}
        hard = {r.id for r in same} - easy
        gt.queries.append(LandmarkQuery(frozenset(easy), frozenset(hard)))
    return gt


def cmd_eval(args) -> Dict[str, str]:
    """Retrieval evaluation: VPR recall@K or revisited landmark mAP"""
    config = _config(args)
    settings = eval_config(config)
    protocol = args.protocol or settings.protocol
    ks = args.k or list(settings.ks)
    threshold = args.threshold_m if args.threshold_m is not None else settings.threshold_m
    budget = args.memory_budget or settings.memory_budget

    store, records = _load_split(args.descriptors, args.metadata)
    if args.query_descriptors:
        query_store, query_records = _load_split(args.query_descriptors, args.query_metadata)
        queries, database, database_records = query_store.to_array(), store, records
    else:
        queries, query_records, database, database_records = _queries_from_classes(store, records)

    if protocol == 'vpr':
        result = search(database, queries, max(ks), budget, threads=args.threads or 1)
        gt = VprGroundTruth([r.pose for r in query_records],
                            {r.id: r.pose for r in database_records}, threshold)
        report = recall_at_k(result, gt, ks)
        rows = recall_rows(report, settings.method, settings.dataset)
        print(', '.join(f"R@{k}={v:.4f}" for k, v in sorted(report.recalls.items()))
              + f" ({report.evaluated} queries, {report.without_positive} without positives)")
    else:
        result = search(database, queries, database.count, budget, threads=args.threads or 1)
        gt = landmark_ground_truth(query_records, database_records, settings.easy_angle)
        rows = []
        for split in (args.split or list(settings.splits)):
            report = map_evaluate(result, gt, split)
            rows.extend(map_rows(report, settings.method, settings.dataset))
            print(f"mAP[{report.split}] = {report.mean_ap:.4f} ({report.evaluated} queries)")

    out = Path(args.out)
    write_results_csv(rows, out)
    outputs = {'results': str(out)}
    inputs = {'descriptors': args.descriptors, 'metadata': args.metadata}
    _manifest(args, snapshot(config), None, inputs, outputs).write(out.parent)
    return outputs


def cmd_bench_knn(args) -> Dict[str, str]:
    """Time an exact search and report the instrumented peak"""
    config = _config(args)
    settings = eval_config(config)
    budget = args.memory_budget or settings.memory_budget
    store = DescriptorStore(path=args.descriptors, block_rows=args.block_rows)
    if args.queries:
        queries = read_descriptors(args.queries)
    else:
        queries = store.read(0, min(args.num_queries, store.count))
    report = benchmark(store, queries, args.k, budget, threads=args.threads or 1)
    print(json.dumps(asdict(report), indent=2))
    out = Path(args.out)
    outputs = {'report': str(out / 'bench.json')}
    atomic_write(outputs['report'], (json.dumps(asdict(report), indent=2) + '\n').encode('utf-8'))
    _manifest(args, snapshot(config), None, {'descriptors': args.descriptors}, outputs).write(out)
    return outputs


def cmd_sample_batches(args) -> Dict[str, str]:
    """Dump sampled sub-batches as JSON lines of id lists"""
    config = _config(args)
    settings = train_config(config)
    world = load_world(args.world)
    sources = [BatchSource(s) for s in args.source] if args.source else list(ITERATION_SOURCES)
    samplers = build_samplers(world, settings.samplers, sources)
    rng = np.random.default_rng(args.seed)
    lines = []
    for index in range(args.count):
        for source, sampler in samplers.items():
            entry = sampler.sample(rng).to_dict()
            entry['index'] = index
            lines.append(json.dumps(entry))
    out = Path(args.out)
    atomic_write(out, ('\n'.join(lines) + '\n').encode('utf-8'))
    outputs = {'batches': str(out)}
    _manifest(args, snapshot(config), args.seed, {'world': args.world}, outputs).write(out.parent)
    print(f"{len(lines)} sub-batches -> {out}")
    return outputs


COMMANDS: Dict[str, Callable] = {
    'gen-world': cmd_gen_world,
    'train': cmd_train,
    'eval': cmd_eval,
    'bench-knn': cmd_bench_knn,
    'sample-batches': cmd_sample_batches,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="multiloc - multi-source retrieval training and evaluation on synthetic worlds",
        epilog=exit_code_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument('--version', action='version', version=f'multiloc {get_version()}')
    parser.add_argument('--verbose', action='store_true', help='Verbose output')
    parser.add_argument('--config', help='YAML config file')
    parser.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='Override a config value (repeatable)')
    parser.add_argument('--threads', type=int, default=None, help='Cap on worker threads')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-world', help='Generate a synthetic world')
    p.add_argument('--out', required=True, help='Output directory')

    p = sub.add_parser('train', help='Train an embedding table')
    p.add_argument('--world', required=True, help='World directory from gen-world')
    p.add_argument('--out', required=True, help='Output directory')

    p = sub.add_parser('eval', help='Evaluate descriptors')
    p.add_argument('--descriptors', required=True, help='Database descriptor file')
    p.add_argument('--metadata', required=True, help='Database metadata file')
    p.add_argument('--query-descriptors', help='Query descriptor file (default: first image per class)')
    p.add_argument('--query-metadata', help='Query metadata file')
    p.add_argument('--protocol', choices=['vpr', 'landmark'])
    p.add_argument('--k', type=int, nargs='+')
    p.add_argument('--threshold-m', type=float, default=None)
    p.add_argument('--split', choices=['E', 'M', 'H'], nargs='+')
    p.add_argument('--memory-budget', type=int)
    p.add_argument('--out', required=True, help='Results CSV path')

    p = sub.add_parser('bench-knn', help='Benchmark exact kNN under a memory budget')
    p.add_argument('--descriptors', required=True)
    p.add_argument('--queries', help='Query descriptor file (default: first rows of the store)')
    p.add_argument('--num-queries', type=int, default=100)
    p.add_argument('--k', type=int, default=10)
    p.add_argument('--memory-budget', type=int)
    p.add_argument('--block-rows', type=int)
    p.add_argument('--out', required=True, help='Directory for bench.json and the manifest')

    p = sub.add_parser('sample-batches', help='Dump sampled sub-batches')
    p.add_argument('--world', required=True)
    p.add_argument('--source', choices=[s.value for s in ITERATION_SOURCES], nargs='+')
    p.add_argument('--count', type=int, default=1)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True, help='JSON lines output path')
    return parser


def run_command(args) -> CommandResult:
    """Execute a parsed command, mapping package errors to exit codes"""
    start_time = time.time()
    try:
        if args.command == 'eval' and bool(args.query_descriptors) != bool(args.query_metadata):
            raise InvalidInputError("--query-descriptors and --query-metadata go together")
        outputs = COMMANDS[args.command](args)
        return CommandResult(True, 0, None, outputs, time.time() - start_time)
    except MultilocError as e:
        logger.error(f"{args.command} failed: {e}")
        return CommandResult(False, e.exit_code, str(e), {}, time.time() - start_time)
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly")
        return CommandResult(False, 1, str(e), {}, time.time() - start_time)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    result = run_command(args)
    if not result.success:
        print(f"Error: {result.error}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
