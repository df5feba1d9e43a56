#!/usr/bin/env python3
"""
File formats: descriptors, metadata, covisibility, checkpoints

Descriptor files are a fixed 32-byte little-endian header followed by a
row-major float32 payload, readable in row ranges so the kNN engine can
stream them. Metadata is JSON lines behind a versioned header record and
covisibility is a versioned whitespace-separated text file. Byte layouts
are documented in docs/FORMATS.md.
"""

import io
import os
import json
import struct
import logging
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .core import Covisibility, DatasetKind, Descriptor, ImageRecord, PlanarPose
from .errors import (
    CorruptionError,
    FormatError,
    IngestionError,
    InvalidInputError,
)
from .samplers import class_centroids, class_separation_violations
from .worldgen import World, WorldConfig, true_descriptors

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DESCRIPTOR_MAGIC = b'MLOCDESC'
DESCRIPTOR_VERSION = 1
SCALAR_F32 = 0
HEADER = struct.Struct('<8sIQII4x')
HEADER_SIZE = HEADER.size
PAYLOAD_DTYPE = np.dtype('<f4')

METADATA_FORMAT = 'mloc-metadata'
METADATA_VERSION = 1
COVISIBILITY_HEADER = '# mloc-covisibility v1'
CHECKPOINT_VERSION = 1
GSV_MIN_SEPARATION_M = 100.0

WORLD_FILES = {
    'config': 'world.yaml',
    'metadata': 'metadata.jsonl',
    'covisibility': 'covisibility.txt',
    'descriptors': 'descriptors.bin',
}


def atomic_write(path: PathLike, data: bytes) -> None:
    """Write to a sibling temp file, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ------------------------------------------------------------- descriptors

@dataclass(frozen=True)
class DescriptorFileHeader:
    count: int
    dim: int
    version: int = DESCRIPTOR_VERSION
    scalar: int = SCALAR_F32

    @property
    def row_bytes(self) -> int:
        return self.dim * PAYLOAD_DTYPE.itemsize

    @property
    def payload_bytes(self) -> int:
        return self.count * self.row_bytes

    def pack(self) -> bytes:
        return HEADER.pack(DESCRIPTOR_MAGIC, self.version, self.count, self.dim, self.scalar)

    @classmethod
    def unpack(cls, raw: bytes) -> 'DescriptorFileHeader':
        if len(raw) < HEADER_SIZE:
            raise CorruptionError(
                f"Header truncated: expected {HEADER_SIZE} bytes, found {len(raw)}",
                HEADER_SIZE, len(raw), offset=len(raw))
        magic, version, count, dim, scalar = HEADER.unpack(raw[:HEADER_SIZE])
        if magic != DESCRIPTOR_MAGIC:
            raise FormatError(f"Bad magic {magic!r}, expected {DESCRIPTOR_MAGIC!r}")
        if version != DESCRIPTOR_VERSION:
            raise FormatError(f"Unsupported descriptor file version {version}")
        if scalar != SCALAR_F32:
            raise FormatError(f"Unsupported scalar type {scalar}")
        return cls(count, dim, version, scalar)


def _as_matrix(descriptors) -> np.ndarray:
    if isinstance(descriptors, np.ndarray):
        matrix = descriptors
    else:
        rows = [d.values if isinstance(d, Descriptor) else np.asarray(d) for d in descriptors]
        if len({len(r) for r in rows}) > 1:
            raise InvalidInputError("Descriptors have mixed dimensions")
        matrix = np.stack(rows) if rows else np.empty((0, 0))
    if matrix.ndim != 2:
        raise InvalidInputError(f"Descriptors must form a matrix, got shape {matrix.shape}")
    return matrix


def write_descriptors(path: PathLike, descriptors) -> DescriptorFileHeader:
    """Write a count x dim matrix (or a list of Descriptors) as float32"""
    matrix = _as_matrix(descriptors)
    header = DescriptorFileHeader(int(matrix.shape[0]), int(matrix.shape[1]))
    payload = np.ascontiguousarray(matrix, dtype=PAYLOAD_DTYPE).tobytes()
    atomic_write(path, header.pack() + payload)
    logger.info(f"Wrote {header.count} x {header.dim} descriptors to {path}")
    return header


def read_descriptor_header(path: PathLike) -> DescriptorFileHeader:
    """Parse the header and check the file size against it"""
    with open(path, 'rb') as f:
        header = DescriptorFileHeader.unpack(f.read(HEADER_SIZE))
    expected = HEADER_SIZE + header.payload_bytes
    actual = os.path.getsize(path)
    if actual != expected:
        complete_rows = (actual - HEADER_SIZE) // header.row_bytes if header.row_bytes else 0
        offset = HEADER_SIZE + min(complete_rows, header.count) * header.row_bytes
        kind = 'truncated' if actual < expected else 'has trailing bytes'
        raise CorruptionError(
            f"{path} {kind} at byte offset {offset}: expected {expected} bytes, found {actual}",
            expected, actual, offset)
    return header


def read_descriptors(path: PathLike, start: int = 0, stop: Optional[int] = None,
                     header: Optional[DescriptorFileHeader] = None) -> np.ndarray:
    """Rows [start, stop) as a float32 array; only that range is read"""
    header = header or read_descriptor_header(path)
    stop = header.count if stop is None else stop
    if not 0 <= start <= stop <= header.count:
        raise InvalidInputError(f"Row range [{start}, {stop}) outside [0, {header.count})")
    rows = stop - start
    with open(path, 'rb') as f:
        f.seek(HEADER_SIZE + start * header.row_bytes)
        raw = f.read(rows * header.row_bytes)
    if len(raw) != rows * header.row_bytes:
        raise CorruptionError(
            f"Short read at byte offset {HEADER_SIZE + start * header.row_bytes}",
            rows * header.row_bytes, len(raw), HEADER_SIZE + start * header.row_bytes)
    return np.frombuffer(raw, dtype=PAYLOAD_DTYPE).reshape(rows, header.dim).astype(np.float32, copy=False)


def iter_descriptor_blocks(path: PathLike, block_rows: int) -> Iterator[Tuple[int, np.ndarray]]:
    """Yield (first_row, block) with at most block_rows rows in memory"""
    if block_rows < 1:
        raise InvalidInputError(f"block_rows must be >= 1, got {block_rows}")
    header = read_descriptor_header(path)
    for start in range(0, header.count, block_rows):
        yield start, read_descriptors(path, start, min(start + block_rows, header.count), header)


# ---------------------------------------------------------------- metadata

REQUIRED_FIELDS = ('id', 'east', 'north', 'heading', 'source')


def write_metadata(path: PathLike, records: Sequence[ImageRecord]) -> None:
    lines = [json.dumps({'format': METADATA_FORMAT, 'version': METADATA_VERSION})]
    lines.extend(json.dumps(r.to_dict()) for r in records)
    atomic_write(path, ('\n'.join(lines) + '\n').encode('utf-8'))


def _parse_record(entry: dict) -> ImageRecord:
    missing = [name for name in REQUIRED_FIELDS if name not in entry]
    if missing:
        raise KeyError(', '.join(missing))
    optional = lambda name: None if entry.get(name) is None else int(entry[name])
    return ImageRecord(
        id=int(entry['id']),
        pose=PlanarPose(float(entry['east']), float(entry['north']), float(entry['heading'])),
        source=DatasetKind(entry['source']),
        class_id=optional('class_id'),
        scene_id=optional('scene_id'),
    )


def read_metadata(path: PathLike, min_class_separation: float = GSV_MIN_SEPARATION_M) -> List[ImageRecord]:
    """Validated image records in file order"""
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().splitlines()

    numbered = [(n, line) for n, line in enumerate(lines, start=1) if line.strip()]
    if not numbered:
        raise FormatError(f"{path}: empty metadata file")
    try:
        header = json.loads(numbered[0][1])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: unreadable header record: {e}") from e
    if not isinstance(header, dict) or header.get('format') != METADATA_FORMAT:
        raise FormatError(f"{path}: missing '{METADATA_FORMAT}' header record")
    if header.get('version') != METADATA_VERSION:
        raise FormatError(f"{path}: unsupported metadata version {header.get('version')}")

    records: List[ImageRecord] = []
    problems: List[Tuple[int, str]] = []
    seen: Dict[int, int] = {}
    line_of: Dict[int, int] = {}
    for number, line in numbered[1:]:
        try:
            record = _parse_record(json.loads(line))
        except json.JSONDecodeError as e:
            problems.append((number, f"invalid JSON: {e.msg}"))
            continue
        except KeyError as e:
            problems.append((number, f"missing required field {e.args[0]}"))
            continue
        except (TypeError, ValueError) as e:
            problems.append((number, f"invalid value: {e}"))
            continue
        if record.id in seen:
            problems.append((number, f"duplicate id {record.id} (first on line {seen[record.id]})"))
            continue
        seen[record.id] = number
        line_of[record.id] = number
        records.append(record)

    gsv = [r for r in records if r.source == DatasetKind.GSV and r.class_id is not None]
    if gsv:
        classes: Dict[int, List[int]] = {}
        for r in gsv:
            classes.setdefault(r.class_id, []).append(r.id)
        centroids = class_centroids(classes, {r.id: r.pose for r in gsv})
        for a, b, distance in class_separation_violations(centroids, min_class_separation):
            problems.append((line_of[classes[b][0]],
                             f"GSV classes {a} and {b} are {distance:.2f} m apart "
                             f"(minimum {min_class_separation:g} m)"))

    if problems:
        problems.sort()
        raise IngestionError(f"{path}: {len(problems)} invalid metadata record(s)", problems)
    logger.debug(f"Read {len(records)} records from {path}")
    return records


# ------------------------------------------------------------ covisibility

def write_covisibility(path: PathLike, covisibility: Covisibility) -> None:
    lines = [COVISIBILITY_HEADER]
    lines.extend(f"{a} {b} {fraction!r}" for a, b, fraction in covisibility.pairs())
    atomic_write(path, ('\n'.join(lines) + '\n').encode('utf-8'))


def read_covisibility(path: PathLike) -> Covisibility:
    """Symmetrized overlap map; conflicting or out-of-range lines are rejected"""
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != COVISIBILITY_HEADER:
        raise FormatError(f"{path}: missing '{COVISIBILITY_HEADER}' header")

    covisibility = Covisibility()
    problems: List[Tuple[int, str]] = []
    for number, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 3:
            problems.append((number, f"expected 3 fields, found {len(fields)}"))
            continue
        try:
            a, b, fraction = int(fields[0]), int(fields[1]), float(fields[2])
        except ValueError as e:
            problems.append((number, f"invalid value: {e}"))
            continue
        if not 0.0 <= fraction <= 1.0:
            problems.append((number, f"overlap {fraction} out of range [0, 1]"))
            continue
        try:
            covisibility.add(a, b, fraction)
        except InvalidInputError as e:
            problems.append((number, str(e)))
    if problems:
        raise IngestionError(f"{path}: {len(problems)} invalid covisibility line(s)", problems)
    return covisibility


# -------------------------------------------------------------- checkpoints

CHECKPOINT_KEYS = ('ids', 'params', 'first_moment', 'second_moment', 'step', 'config_hash')


def write_checkpoint(path: PathLike, ids: np.ndarray, params: np.ndarray, first_moment: np.ndarray,
                     second_moment: np.ndarray, step: int, config_hash: str) -> None:
    """Uncompressed npz archive at exactly `path`, replaced atomically"""
    buffer = io.BytesIO()
    np.savez(buffer, ids=np.asarray(ids, dtype=np.int64), params=params,
             first_moment=first_moment, second_moment=second_moment,
             step=np.int64(step), config_hash=np.str_(config_hash),
             version=np.int64(CHECKPOINT_VERSION))
    atomic_write(path, buffer.getvalue())


def read_checkpoint(path: PathLike) -> Dict[str, object]:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise FormatError(f"{path}: not a checkpoint archive ({e})") from e
    with archive:
        missing = [k for k in CHECKPOINT_KEYS if k not in archive.files]
        if missing:
            raise FormatError(f"{path}: checkpoint lacks {', '.join(missing)}")
        if 'version' in archive.files and int(archive['version']) != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {int(archive['version'])}")
        return {
            'ids': archive['ids'],
            'params': archive['params'],
            'first_moment': archive['first_moment'],
            'second_moment': archive['second_moment'],
            'step': int(archive['step']),
            'config_hash': str(archive['config_hash']),
        }


# ------------------------------------------------------------------ worlds

def save_world(world, directory: PathLike) -> Dict[str, Path]:
    """Config, metadata, covisibility and ground-truth descriptors of a world"""
    directory = Path(directory)
    paths = {key: directory / name for key, name in WORLD_FILES.items()}
    atomic_write(paths['config'],
                 yaml.safe_dump(world.config.to_dict(), sort_keys=True).encode('utf-8'))
    write_metadata(paths['metadata'], world.images)
    write_covisibility(paths['covisibility'], world.covisibility)
    write_descriptors(paths['descriptors'], true_descriptors(world))
    logger.info(f"Saved world with {len(world.images)} images to {directory}")
    return paths


def load_world(directory: PathLike):
    """Rebuild a World from save_world output"""
    directory = Path(directory)
    config_path = directory / WORLD_FILES['config']
    with open(config_path, 'r', encoding='utf-8') as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict):
        raise FormatError(f"{config_path}: expected a mapping")
    config = WorldConfig(**raw)
    records = read_metadata(directory / WORLD_FILES['metadata'], config.separation)
    covisibility = read_covisibility(directory / WORLD_FILES['covisibility'])
    scenes: Dict[int, List[int]] = {}
    for r in records:
        if r.scene_id is not None:
            scenes.setdefault(r.scene_id, []).append(r.id)
    return World(config, tuple(records), covisibility,
                 {s: tuple(ids) for s, ids in scenes.items()}, config.resolved_descriptor_seed)
