#!/usr/bin/env python3
"""
Embedding-table trainer

A free, unit-norm vector per image stands in for the image encoder. Each
iteration draws one sub-batch per source, computes one multi-similarity
loss per sub-batch and a single AdamW step on the summed gradient. In
per-sub-batch mode gradients are computed one sub-batch at a time and
accumulated, so only one sub-batch's buffers are alive at once.
"""

import io
import csv
import json
import time
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .core import ITERATION_SOURCES, BatchSource, Descriptor, SubBatch, TrainingIteration, normalize_rows
from .errors import (
    FormatError,
    InvalidInputError,
    NotFoundError,
    SamplerError,
    TrainingDivergenceError,
)
from .fileio import atomic_write, read_checkpoint, write_checkpoint
from .knn import DescriptorStore, search
from .memory import BufferAccountant
from .metrics import RecallReport, VprGroundTruth, recall_at_k
from .msloss import MsParams, mine_pairs, ms_loss, pairwise_similarity, similarity_gradient
from .samplers import (
    CliqueSampler,
    SamplerConfig,
    assemble_iteration,
    assemble_partial_iteration,
    build_samplers,
)
from .worldgen import true_descriptors

logger = logging.getLogger(__name__)

FUSED = 'fused'
PER_SUB_BATCH = 'per_sub_batch'
ACCUMULATION_MODES = (FUSED, PER_SUB_BATCH)
UNIT_NORM_SLACK = 1e-12
EVAL_MEMORY_BUDGET = 64 * 1024 * 1024


@dataclass
class TrainConfig:
    """Optimization settings; desk-scale defaults"""
    iterations: int = 500
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    ms_params: MsParams = field(default_factory=MsParams)
    seed: int = 0
    accumulation_mode: str = PER_SUB_BATCH
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    frozen_batches: bool = False
    sources: Tuple[BatchSource, ...] = ITERATION_SOURCES
    samplers: SamplerConfig = field(default_factory=SamplerConfig)
    eval_every: int = 50
    log_every: int = 50
    init: str = 'random'
    threads: int = 1
    progress: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidInputError(f"iterations must be >= 1, got {self.iterations}")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise InvalidInputError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise InvalidInputError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.accumulation_mode not in ACCUMULATION_MODES:
            raise InvalidInputError(f"accumulation_mode must be one of {ACCUMULATION_MODES}")
        if self.init not in ('random', 'world'):
            raise InvalidInputError(f"init must be 'random' or 'world', got {self.init!r}")
        if isinstance(self.ms_params, dict):
            self.ms_params = MsParams.from_dict(self.ms_params)
        if isinstance(self.samplers, dict):
            self.samplers = SamplerConfig(**self.samplers)
        self.sources = tuple(BatchSource(s) for s in self.sources)
        if not self.sources or len(set(self.sources)) != len(self.sources):
            raise InvalidInputError("sources must be a non-empty set of batch sources")

    def to_dict(self) -> Dict:
        values = asdict(self)
        values['ms_params'] = self.ms_params.to_dict()
        values['sources'] = [s.value for s in self.sources]
        return values

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form"""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode('utf-8')).hexdigest()


class EmbeddingTable:
    """Learnable unit vectors keyed by image id, with AdamW moments"""

    def __init__(self, ids: Sequence[int], params: np.ndarray, first_moment: Optional[np.ndarray] = None,
                 second_moment: Optional[np.ndarray] = None, step: int = 0):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.params = np.array(params, dtype=np.float64)
        if self.params.ndim != 2 or self.params.shape[0] != len(self.ids):
            raise InvalidInputError(f"Parameters of shape {self.params.shape} do not match {len(self.ids)} ids")
        if not np.all(np.isfinite(self.params)):
            raise InvalidInputError("Embedding table has non-finite entries")
        self.first_moment = np.zeros_like(self.params) if first_moment is None else np.array(first_moment, dtype=np.float64)
        self.second_moment = np.zeros_like(self.params) if second_moment is None else np.array(second_moment, dtype=np.float64)
        if self.first_moment.shape != self.params.shape or self.second_moment.shape != self.params.shape:
            raise InvalidInputError("Optimizer state shape does not match parameters")
        self.step = int(step)
        self._row = {int(i): r for r, i in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise InvalidInputError("Embedding table ids must be unique")

    @classmethod
    def random(cls, ids: Sequence[int], dim: int, rng: np.random.Generator) -> 'EmbeddingTable':
        return cls(ids, normalize_rows(rng.normal(size=(len(ids), dim))))

    @property
    def dim(self) -> int:
        return int(self.params.shape[1])

    def rows(self, ids: Sequence[int]) -> np.ndarray:
        try:
            return np.array([self._row[int(i)] for i in ids], dtype=np.int64)
        except KeyError as e:
            raise NotFoundError(f"Image id {e.args[0]} is not in the embedding table") from None

    def gather(self, ids: Sequence[int]) -> np.ndarray:
        return self.params[self.rows(ids)]

    def descriptor(self, image_id: int) -> Descriptor:
        return Descriptor(self.gather([image_id])[0])

    def copy(self) -> 'EmbeddingTable':
        return EmbeddingTable(self.ids, self.params, self.first_moment, self.second_moment, self.step)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class AccumulationResult:
    """Summed gradient over the table plus per-sub-batch losses and transient peak"""
    gradient: np.ndarray
    per_sub_batch: List[float]
    peak_bytes: int
    mode: str

    @property
    def total(self) -> float:
        total = 0.0
        for value in self.per_sub_batch:
            total += value
        return total


def _sub_batch_backward(sub_batch: SubBatch, table: EmbeddingTable, params: MsParams,
                        scope) -> Tuple[float, np.ndarray, np.ndarray]:
    rows = table.rows(sub_batch.image_ids)
    embeddings = scope.track(table.params[rows])
    similarity = scope.track(pairwise_similarity(embeddings))
    pairs = mine_pairs(similarity, sub_batch.labels, params)
    scope.track(pairs.positive)
    scope.track(pairs.negative)
    loss = ms_loss(similarity, pairs, params)
    grad_s = scope.track(similarity_gradient(similarity, pairs, params))
    symmetric = scope.track(grad_s + grad_s.T)
    grad = scope.track(symmetric @ embeddings)
    return loss, rows, grad


def accumulate_gradients(iteration: TrainingIteration, table: EmbeddingTable, params: MsParams,
                         mode: str = PER_SUB_BATCH, accountant: Optional[BufferAccountant] = None,
                         threads: int = 1) -> AccumulationResult:
    """Gradient of the summed sub-batch losses, reduced in sub-batch order.

    per_sub_batch releases each sub-batch's buffers before the next one;
    fused keeps all of them alive and may compute them concurrently.
    """
    if mode not in ACCUMULATION_MODES:
        raise InvalidInputError(f"Unknown accumulation mode {mode!r}")
    accountant = accountant or BufferAccountant('gradients')
    accountant.reset_peak()
    baseline = accountant.current_bytes
    gradient = np.zeros_like(table.params)
    losses: List[float] = []

    if mode == PER_SUB_BATCH:
        for sub_batch in iteration:
            with accountant.scope() as scope:
                loss, rows, grad = _sub_batch_backward(sub_batch, table, params, scope)
                np.add.at(gradient, rows, grad)
            losses.append(loss)
    else:
        with accountant.scope() as scope:
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as executor:
                    futures = [executor.submit(_sub_batch_backward, b, table, params, scope) for b in iteration]
                    outputs = [f.result() for f in futures]
            else:
                outputs = [_sub_batch_backward(b, table, params, scope) for b in iteration]
            for loss, rows, grad in outputs:
                np.add.at(gradient, rows, grad)
                losses.append(loss)

    return AccumulationResult(gradient, losses, accountant.report().peak_bytes - baseline, mode)


def optimizer_step(table: EmbeddingTable, gradient: np.ndarray, config: TrainConfig,
                   iteration: Optional[int] = None) -> EmbeddingTable:
    """AdamW with bias correction and decoupled weight decay; clears `gradient` afterwards"""
    index = table.step + 1 if iteration is None else iteration
    if gradient.shape != table.params.shape:
        raise InvalidInputError(f"Gradient shape {gradient.shape} does not match {table.params.shape}")
    if not np.all(np.isfinite(gradient)):
        raise TrainingDivergenceError("non-finite gradient", index)

    table.step += 1
    b1, b2 = config.beta1, config.beta2
    table.first_moment = b1 * table.first_moment + (1.0 - b1) * gradient
    table.second_moment = b2 * table.second_moment + (1.0 - b2) * gradient * gradient
    m_hat = table.first_moment / (1.0 - b1 ** table.step)
    v_hat = table.second_moment / (1.0 - b2 ** table.step)
    updated = table.params * (1.0 - config.learning_rate * config.weight_decay)
    updated -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)
    if not np.all(np.isfinite(updated)):
        raise TrainingDivergenceError("non-finite parameters after step", index)
    table.params = updated
    gradient[...] = 0.0
    return table


def project_to_sphere(table: EmbeddingTable, iteration: Optional[int] = None) -> EmbeddingTable:
    """Renormalize rows that drifted off the unit sphere"""
    norms = np.linalg.norm(table.params, axis=1)
    if np.any(norms == 0.0):
        raise TrainingDivergenceError("zero-norm embedding", table.step if iteration is None else iteration)
    drifted = np.abs(norms - 1.0) > UNIT_NORM_SLACK
    if drifted.any():
        table.params[drifted] /= norms[drifted, None]
    return table


def class_descriptors(table: EmbeddingTable, classes: Mapping[int, Sequence[int]]) -> Dict[int, Descriptor]:
    """Normalized mean embedding of each class"""
    return {c: Descriptor.from_raw(table.gather(ids).mean(axis=0)) for c, ids in classes.items()}


def evaluate_recall(table: EmbeddingTable, world, ks: Sequence[int] = (1,),
                    memory_budget: int = EVAL_MEMORY_BUDGET) -> RecallReport:
    """Recall@k of held-out queries against the remaining images of every place"""
    queries, database = world.queries_and_database()
    poses = world.poses
    store = DescriptorStore(table.gather(database), ids=database)
    result = search(store, table.gather(queries), max(ks), memory_budget)
    gt = VprGroundTruth([poses[q] for q in queries], {d: poses[d] for d in database})
    return recall_at_k(result, gt, ks)


@dataclass
class IterationRecord:
    iteration: int
    total: float
    per_source: Dict[str, float]


@dataclass
class TrainingHistory:
    sources: List[str]
    records: List[IterationRecord] = field(default_factory=list)
    evaluations: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def totals(self) -> List[float]:
        return [r.total for r in self.records]

    @property
    def recall_at_1(self) -> List[float]:
        return [value for _, value in self.evaluations]


@dataclass
class TrainResult:
    table: EmbeddingTable
    initial_table: EmbeddingTable
    history: TrainingHistory
    peak_bytes: int
    elapsed: float


def initial_table(world, config: TrainConfig) -> EmbeddingTable:
    if config.init == 'world':
        return EmbeddingTable(world.ids, true_descriptors(world))
    rng = np.random.default_rng([config.seed, 0])
    return EmbeddingTable.random(world.ids, world.config.embed_dim, rng)


def train(world, config: TrainConfig, accountant: Optional[BufferAccountant] = None) -> TrainResult:
    """Run config.iterations optimizer steps on the world; deterministic given config.seed"""
    start_time = time.time()
    accountant = accountant or BufferAccountant('train')
    table = initial_table(world, config)
    initial = table.copy()
    samplers = build_samplers(world, config.samplers, config.sources)
    history = TrainingHistory([s.value for s in samplers])
    full = set(samplers) == set(ITERATION_SOURCES)
    peak = 0

    history.evaluations.append((0, evaluate_recall(table, world)[1]))
    logger.info(f"Iteration 0: recall@1 {history.evaluations[-1][1]:.4f}")

    refresh = max(1, config.samplers.clique_refresh)
    progress = tqdm(range(1, config.iterations + 1), desc='train', disable=not config.progress)
    for iteration in progress:
        for sampler in samplers.values():
            if isinstance(sampler, CliqueSampler) and (iteration - 1) % refresh == 0:
                sampler.refresh(class_descriptors(table, sampler.classes))

        rng = np.random.default_rng([config.seed, 1, 0 if config.frozen_batches else iteration])
        try:
            batches = {source: sampler.sample(rng) for source, sampler in samplers.items()}
        except SamplerError as e:
            raise type(e)(f"iteration {iteration}: {e}") from e
        if full:
            step_batches = assemble_iteration(*(batches[s] for s in ITERATION_SOURCES))
        else:
            step_batches = assemble_partial_iteration(list(batches.values()), list(samplers))

        result = accumulate_gradients(step_batches, table, config.ms_params,
                                      config.accumulation_mode, accountant, config.threads)
        peak = max(peak, result.peak_bytes)
        optimizer_step(table, result.gradient, config, iteration)
        project_to_sphere(table, iteration)

        per_source = {b.source.value: loss for b, loss in zip(step_batches, result.per_sub_batch)}
        history.records.append(IterationRecord(iteration, result.total, per_source))
        progress.set_postfix(loss=f"{result.total:.4f}")

        if config.log_every and iteration % config.log_every == 0:
            logger.info(f"Iteration {iteration}: loss {result.total:.6f}")
        if (config.eval_every and iteration % config.eval_every == 0) or iteration == config.iterations:
            recall = evaluate_recall(table, world)[1]
            history.evaluations.append((iteration, recall))
            logger.info(f"Iteration {iteration}: recall@1 {recall:.4f}")

    return TrainResult(table, initial, history, peak, time.time() - start_time)


def save_checkpoint(table: EmbeddingTable, config: TrainConfig, path: Union[str, Path]) -> Path:
    write_checkpoint(path, table.ids, table.params, table.first_moment, table.second_moment,
                     table.step, config.config_hash())
    logger.info(f"Checkpoint written to {path}")
    return Path(path)


def load_checkpoint(path: Union[str, Path], config: Optional[TrainConfig] = None) -> EmbeddingTable:
    """Restore a table; with a config, its hash must match the checkpoint's"""
    state = read_checkpoint(path)
    if config is not None and state['config_hash'] != config.config_hash():
        raise FormatError(f"{path}: checkpoint was written under a different training config")
    return EmbeddingTable(state['ids'], state['params'], state['first_moment'],
                          state['second_moment'], state['step'])


def write_history_csv(history: TrainingHistory, path: Union[str, Path]) -> Path:
    """iteration, total, then one column per source in canonical order"""
    path = Path(path)
    columns = [s.value for s in ITERATION_SOURCES]
    text = io.StringIO(newline='')
    writer = csv.writer(text)
    writer.writerow(['iteration', 'total'] + columns)
    for record in history.records:
        writer.writerow([record.iteration, repr(record.total)]
                        + [repr(record.per_source[c]) if c in record.per_source else '' for c in columns])
    atomic_write(path, text.getvalue().encode('utf-8'))
    return path
