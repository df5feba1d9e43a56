"""
multiloc - Multi-source retrieval training and evaluation on synthetic worlds

This package trains one global descriptor space from several place and
scene datasets at once: dataset-specific batch samplers, a multi-similarity
loss accumulated per sub-batch, and memory-bounded exact retrieval with the
VPR recall and revisited-landmark mAP protocols.

Modules:
    core: poses, descriptors, quadruplets, sub-batches, covisibility
    worldgen: deterministic synthetic worlds
    samplers: the five sub-batch sampling procedures
    msloss: multi-similarity loss, mining and gradients
    trainer: embedding table, gradient accumulation, AdamW
    knn: blocked exact nearest-neighbour search
    metrics: Recall@K and revisited mAP
    fileio: descriptor, metadata, covisibility and checkpoint files
    config: YAML config, overrides and run manifests
"""

import logging

__version__ = "1.0.0"
__license__ = "MIT"

__all__ = [
    'BatchSource',
    'DatasetKind',
    'Descriptor',
    'PlanarPose',
    'SubBatch',
    'TrainingIteration',
    'World',
    'WorldConfig',
    'generate_world',
    'SamplerConfig',
    'MsParams',
    'TrainConfig',
    'EmbeddingTable',
    'train',
    'DescriptorStore',
    'search',
    'create_sampler',
    'setup_logging',
]

# Version tuple for comparison
version_info = (1, 0, 0)

from .core import BatchSource, DatasetKind, Descriptor, PlanarPose, SubBatch, TrainingIteration
from .knn import DescriptorStore, search
from .msloss import MsParams
from .samplers import SamplerConfig, build_samplers
from .trainer import EmbeddingTable, TrainConfig, train
from .worldgen import World, WorldConfig, generate_world


def create_sampler(source, world, **kwargs):
    """
    Create a sub-batch sampler for one training source.

    Args:
        source: a BatchSource or its value, e.g. 'gsv' or 'sfxl_lateral'
        world: the World to sample from
        **kwargs: SamplerConfig fields

    Returns:
        Sampler instance exposing sample(rng)
    """
    source = BatchSource(source)
    return build_samplers(world, SamplerConfig(**kwargs), [source])[source]


def get_version():
    """Return package version as string"""
    return __version__


def get_version_info():
    """Return package version as tuple"""
    return version_info


def setup_logging(verbose: bool = False) -> None:
    """Configure the root handler; WARNING by default, DEBUG when verbose"""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True,
    )


logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())
