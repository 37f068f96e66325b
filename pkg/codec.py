#!/usr/bin/env python
"""
Archive assembly: MRC inputs -> trained network + occupancy -> .cemz, and back

Archive layout (little-endian):
    magic "CEMZ" | version u32 | section count u32
    section table: per section offset u64 | length u64 | CRC32 u32
    sections: [0] checkpoint blob (INRC)
              [1] metadata (UTF-8 JSON, sorted keys)
              [2 + i] occupancy blob of file i

See FORMAT.md for the field-level description.
"""

import io
import json
import logging
import os
import struct
import tempfile
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from config import APP_SETTINGS, PREPROCESS_CONFIG, TRAIN_DEFAULTS, atomic_write_bytes
from errors import (CodecError, CorruptArchive, CorruptCheckpoint, CorruptStream,
                    CryoInrError, EmptySelection, UnknownFile)
from inr_core import ModelState, init_latents, init_params, parse_checkpoint, serialize_checkpoint
from mrc_io import MrcHeader, VoxelGrid, read_mrc, with_statistics
from preprocess import (NormalizationMeta, build_chunk_store, compress_occupancy,
                        decompress_occupancy, normalize_indices, threshold_and_map)
from trainer import TrainConfig, train

logger = logging.getLogger(__name__)

ARCHIVE_MAGIC = b'CEMZ'
ARCHIVE_VERSION = 1
ARCHIVE_HEADER = struct.Struct('<4sII')
SECTION_ENTRY = struct.Struct('<QQI')
FILL_VALUE = PREPROCESS_CONFIG['fill_value']


@dataclass
class FileRecord:
    name: str
    file_id: int
    dims: tuple
    cell: tuple
    origin: tuple
    normalization: NormalizationMeta
    occupancy: bytes
    original_size: int
    point_count: int = 0

    def to_dict(self):
        return {
            'name': self.name,
            'file_id': self.file_id,
            'dims': list(self.dims),
            'cell': list(self.cell),
            'origin': list(self.origin),
            'normalization': self.normalization.to_dict(),
            'original_size': self.original_size,
            'point_count': self.point_count,
        }

    @classmethod
    def from_dict(cls, data, occupancy):
        return cls(name=str(data['name']), file_id=int(data['file_id']),
                   dims=tuple(int(v) for v in data['dims']),
                   cell=tuple(float(v) for v in data['cell']),
                   origin=tuple(float(v) for v in data['origin']),
                   normalization=NormalizationMeta.from_dict(data['normalization']),
                   occupancy=bytes(occupancy),
                   original_size=int(data['original_size']),
                   point_count=int(data.get('point_count', 0)))


@dataclass
class Archive:
    checkpoint: bytes
    records: list
    version: int = ARCHIVE_VERSION
    chunk_size: int = TRAIN_DEFAULTS['chunk_size']
    _state: ModelState = field(default=None, repr=False, compare=False)
    _inference: ModelState = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        names = [r.name for r in self.records]
        if len(set(names)) != len(names):
            raise CodecError(f"duplicate file names in archive: {names}")

    @property
    def names(self):
        return [r.name for r in self.records]

    @property
    def state(self):
        if self._state is None:
            try:
                self._state = parse_checkpoint(self.checkpoint)
            except CorruptCheckpoint as e:
                raise CorruptArchive(f"checkpoint section: {e}") from e
            ids = sorted(self._state.latents.file_ids)
            if ids != sorted(r.file_id for r in self.records):
                raise CorruptArchive(f"latent table ids {ids} do not match the file records")
        return self._state

    @property
    def inference_state(self):
        """Float64 copy of the network used for reconstruction."""
        if self._inference is None:
            state = self.state
            self._inference = ModelState(state.params.astype(np.float64), state.latents,
                                         state.num_frequencies, state.leaky_slope, state.normalization)
        return self._inference

    def record(self, name):
        for r in self.records:
            if r.name == name:
                return r
        raise UnknownFile(name, self.names)

    @property
    def original_bytes(self):
        return int(sum(r.original_size for r in self.records))


# ---------------------------------------------------------------------------
# Byte layout
# ---------------------------------------------------------------------------

def _metadata_bytes(archive):
    meta = {
        'chunk_size': archive.chunk_size,
        'files': [r.to_dict() for r in archive.records],
    }
    return json.dumps(meta, sort_keys=True, separators=(',', ':')).encode('utf-8')


def serialize_archive(archive):
    sections = [archive.checkpoint, _metadata_bytes(archive)] + [r.occupancy for r in archive.records]
    offset = ARCHIVE_HEADER.size + SECTION_ENTRY.size * len(sections)
    table = []
    for blob in sections:
        table.append(SECTION_ENTRY.pack(offset, len(blob), zlib.crc32(blob)))
        offset += len(blob)
    head = ARCHIVE_HEADER.pack(ARCHIVE_MAGIC, archive.version, len(sections))
    return head + b''.join(table) + b''.join(bytes(s) for s in sections)


def parse_archive(blob):
    """Validate magic, version and every section checksum, then decode."""
    blob = bytes(blob)
    if len(blob) < ARCHIVE_HEADER.size:
        raise CorruptArchive("archive shorter than its header")
    magic, version, n_sections = ARCHIVE_HEADER.unpack_from(blob)
    if magic != ARCHIVE_MAGIC:
        raise CorruptArchive(f"bad archive magic {magic!r}")
    if version != ARCHIVE_VERSION:
        raise CorruptArchive(f"unsupported archive version {version}")
    if n_sections < 2:
        raise CorruptArchive(f"archive lists {n_sections} sections, needs at least 2")
    table_end = ARCHIVE_HEADER.size + SECTION_ENTRY.size * n_sections
    if len(blob) < table_end:
        raise CorruptArchive("section table truncated")

    sections = []
    for k in range(n_sections):
        offset, length, crc = SECTION_ENTRY.unpack_from(blob, ARCHIVE_HEADER.size + k * SECTION_ENTRY.size)
        if offset < table_end or offset + length > len(blob):
            raise CorruptArchive(f"section {k} lies outside the archive")
        data = blob[offset:offset + length]
        if zlib.crc32(data) != crc:
            raise CorruptArchive(f"section {k} checksum mismatch")
        sections.append(data)

    try:
        meta = json.loads(sections[1].decode('utf-8'))
        files = meta['files']
        if len(files) != n_sections - 2:
            raise CorruptArchive(f"{len(files)} file records but {n_sections - 2} occupancy sections")
        records = [FileRecord.from_dict(entry, occ) for entry, occ in zip(files, sections[2:])]
        archive = Archive(checkpoint=sections[0], records=records, version=version,
                          chunk_size=int(meta.get('chunk_size', TRAIN_DEFAULTS['chunk_size'])))
    except (ValueError, KeyError, TypeError, CodecError) as e:
        if isinstance(e, CorruptArchive):
            raise
        raise CorruptArchive(f"metadata section: {e}") from e
    archive.state  # validates the checkpoint and the id/record pairing
    return archive


def save_archive(path, archive):
    return atomic_write_bytes(path, serialize_archive(archive))


def load_archive(path):
    return parse_archive(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def _annotate(name, error):
    error.args = (f"{name}: {error.args[0] if error.args else error}",) + tuple(error.args[1:])
    return error


def compress(inputs, config=None, threshold=None, workdir=None, log_path=None, checkpoint_path=None):
    """
    Compress named MRC byte streams into one Archive.

    inputs: iterable of (name, bytes). One shared network is trained for all
    files; each file gets its own latent, occupancy blob and metadata record.
    Returns (Archive, TrainLog or None). The log is None when no file had any
    voxel above threshold and training was skipped.
    """
    config = config or TrainConfig()
    inputs = list(inputs)
    if not inputs:
        raise CodecError("compress needs at least one input")
    names = [name for name, _ in inputs]
    if len(set(names)) != len(names):
        raise CodecError(f"duplicate input names: {names}")

    with tempfile.TemporaryDirectory(dir=workdir, prefix='cryoinr-') as tmp:
        records, stores = [], []
        for file_id, (name, data) in enumerate(inputs):
            try:
                grid = read_mrc(io.BytesIO(data))
                with warnings.catch_warnings():
                    warnings.simplefilter('ignore', EmptySelection)
                    occ, meta = threshold_and_map(grid, threshold)
                if meta.density_scale is not None:
                    stores.append(build_chunk_store(grid, occ, meta, Path(tmp) / f"{file_id}.chnk",
                                                    chunk_size=config.chunk_size, file_id=file_id))
                else:
                    logger.warning(f"{name}: nothing above threshold; stored as occupancy only")
            except CryoInrError as e:
                raise _annotate(name, e)
            records.append(FileRecord(
                name=name, file_id=file_id, dims=grid.dims, cell=grid.header.cell,
                origin=grid.header.origin, normalization=meta,
                occupancy=compress_occupancy(occ), original_size=len(data),
                point_count=occ.popcount))
            logger.info(f"{name}: {grid.dims} grid, {occ.popcount} occupied voxels")

        file_ids = [r.file_id for r in records]
        params = init_params(config.architecture, seed=config.seed)
        latents = init_latents(file_ids, seed=config.seed, latent_dim=config.latent_dim,
                               trainable=config.train_latents)
        state = ModelState(params, latents, config.num_frequencies, config.leaky_slope)
        log = None
        if stores:
            state, log = train(stores, config, state=state,
                               checkpoint_path=checkpoint_path, log_path=log_path)

    state.normalization = {r.file_id: r.normalization for r in records}
    archive = Archive(checkpoint=serialize_checkpoint(state), records=records,
                      chunk_size=config.chunk_size, _state=state)
    logger.info(f"Archive: {len(records)} file(s), checkpoint {len(archive.checkpoint)} bytes")
    return archive, log


def density_bounds(meta):
    """Range of the normalised densities of a file: (threshold / scale, 1]."""
    return meta.threshold / meta.density_scale, 1.0


def decompress(archive, name, chunk_size=None):
    """Rebuild the VoxelGrid of one archived file (mode 2, fill 0.0 below threshold)."""
    record = archive.record(name)
    chunk_size = int(chunk_size or archive.chunk_size)
    try:
        occ = decompress_occupancy(record.occupancy)
    except CorruptStream as e:
        raise CorruptArchive(f"{name}: {e}") from e
    if occ.dims != record.dims:
        raise CorruptArchive(f"{name}: occupancy dims {occ.dims} != recorded dims {record.dims}")

    data = np.full(occ.n_voxels, FILL_VALUE, dtype=np.float32)
    indices = occ.occupied_indices()
    scale = record.normalization.density_scale
    if indices.size:
        if scale is None:
            raise CorruptArchive(f"{name}: occupied voxels but no density scale")
        state = archive.inference_state
        low, high = density_bounds(record.normalization)
        tiny = np.float32(np.finfo(np.float32).smallest_subnormal)
        for start in range(0, indices.size, chunk_size):
            part = indices[start:start + chunk_size]
            coords = normalize_indices(part, occ.dims)
            predicted = np.clip(state.predict(record.file_id, coords, batch_size=chunk_size), low, high)
            values = (predicted * scale).astype(np.float32)
            # occupied voxels must stay distinguishable from the fill
            values[values == FILL_VALUE] = tiny
            data[part] = values

    nx, ny, nz = record.dims
    header = MrcHeader(nx=nx, ny=ny, nz=nz, cell=record.cell, origin=record.origin,
                       labels=[f"cryoinr reconstruction of {name}"[:80]])
    return VoxelGrid(with_statistics(header, data), data)


def decompress_all(archive, names=None, chunk_size=None):
    """Yield (name, VoxelGrid) for the selected (default: all) files."""
    names = archive.names if names is None else list(names)
    for name in names:
        archive.record(name)
    for name in names:
        yield name, decompress(archive, name, chunk_size)


@dataclass
class RatioReport:
    archive_bytes: int
    original_bytes: int
    aggregate: float
    per_file: dict     # name -> amortized ratio

    def rows(self):
        rows = [{'file': name, 'ratio': ratio, 'kind': 'amortized'} for name, ratio in self.per_file.items()]
        rows.append({'file': '(all)', 'ratio': self.aggregate, 'kind': 'aggregate'})
        return rows


def compression_ratio(archive, archive_bytes=None):
    """
    Aggregate ratio = sum of original sizes / archive size. Per file, the bytes
    shared by all files (header, checkpoint, metadata) are split equally and
    added to the file's own occupancy blob.
    """
    archive_bytes = len(serialize_archive(archive)) if archive_bytes is None else int(archive_bytes)
    n_files = len(archive.records)
    shared = archive_bytes - sum(len(r.occupancy) for r in archive.records)
    per_file = {r.name: r.original_size / (len(r.occupancy) + shared / n_files)
                for r in archive.records}
    return RatioReport(archive_bytes=archive_bytes, original_bytes=archive.original_bytes,
                       aggregate=archive.original_bytes / archive_bytes, per_file=per_file)


def archive_path_for(path):
    """Default archive path next to an input file."""
    return Path(path).with_suffix(APP_SETTINGS['archive_suffix'])


def safe_file_name(name):
    """Archived name as one path component; names that could escape the output directory are rejected."""
    base = os.path.basename(str(name).replace('\\', '/'))
    if base != name or base in ('', '.', '..') or os.path.isabs(name):
        raise CorruptArchive(f"unsafe file name in archive: {name!r}")
    return base
