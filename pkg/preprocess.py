#!/usr/bin/env python
"""
Thresholding, occupancy maps and the chunked training-point store

Pipeline per input map:
    1. threshold_and_map   - strict d > threshold mask, packed LSB-first
    2. build_chunk_store   - occupied voxels in raster order, coordinates in
                             [0, 1]^3 and densities divided by the max kept
                             density, written chunk by chunk to disk
    3. compress_occupancy  - dims + DEFLATE stream of the packed bits

Chunk store file layout (all little-endian):
    magic "CHNK" | version u32 | file_id u32 | chunk_size u64 | chunk count u64
    per chunk: record count u64 | records of 4 x f32 (x, y, z, d)
"""

import logging
import os
import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from config import PREPROCESS_CONFIG, TRAIN_DEFAULTS, ensure_directory_exists
from errors import CorruptStream, EmptySelection, PreprocessError
from mrc_io import raster_to_index

logger = logging.getLogger(__name__)

STORE_MAGIC = b'CHNK'
STORE_VERSION = 1
STORE_HEADER = struct.Struct('<4sIIQQ')
CHUNK_HEADER = struct.Struct('<Q')
RECORD_DTYPE = np.dtype('<f4')
RECORD_WIDTH = 4

OCC_HEADER = struct.Struct('<3I')

COORDINATE_CONVENTION = 'index/(n-1), degenerate axis -> 0'


@dataclass(eq=False)
class OccupancyMap:
    """One bit per voxel, x-fastest raster order, LSB-first within each byte."""
    nx: int
    ny: int
    nz: int
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=np.uint8).reshape(-1)
        expected = (self.n_voxels + 7) // 8
        if self.bits.size != expected:
            raise PreprocessError(f"bitmap holds {self.bits.size} bytes, dims need {expected}")

    @classmethod
    def from_mask(cls, mask, dims):
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        return cls(*dims, bits=np.packbits(mask, bitorder='little'))

    @property
    def dims(self):
        return (self.nx, self.ny, self.nz)

    @property
    def n_voxels(self):
        return self.nx * self.ny * self.nz

    def to_mask(self):
        return np.unpackbits(self.bits, count=self.n_voxels, bitorder='little').astype(bool)

    @property
    def popcount(self):
        return int(np.count_nonzero(self.to_mask()))

    def occupied_indices(self):
        """Raster indices of set bits, ascending."""
        return np.flatnonzero(self.to_mask())

    def __eq__(self, other):
        if not isinstance(other, OccupancyMap):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.to_mask(), other.to_mask())


@dataclass
class NormalizationMeta:
    threshold: float
    density_scale: float = None   # None when nothing passed the threshold
    coordinate_convention: str = COORDINATE_CONVENTION

    def to_dict(self):
        return {
            'threshold': self.threshold,
            'density_scale': self.density_scale,
            'coordinate_convention': self.coordinate_convention,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(threshold=float(data['threshold']),
                   density_scale=None if data.get('density_scale') is None else float(data['density_scale']),
                   coordinate_convention=data.get('coordinate_convention', COORDINATE_CONVENTION))


def threshold_and_map(grid, threshold=None):
    """
    Mark voxels with density strictly above threshold.

    Returns (OccupancyMap, NormalizationMeta). When nothing passes, an
    EmptySelection warning is issued and density_scale is None.
    """
    threshold = PREPROCESS_CONFIG['threshold'] if threshold is None else float(threshold)
    if not np.isfinite(threshold):
        raise PreprocessError(f"threshold must be finite, got {threshold}")

    mask = grid.data > threshold
    occ = OccupancyMap.from_mask(mask, grid.dims)
    kept = int(np.count_nonzero(mask))
    if kept == 0:
        warnings.warn(EmptySelection(
            f"no voxel above threshold {threshold:g}; file stored as occupancy only"))
        logger.warning(f"EmptySelection: 0 of {grid.data.size} voxels above {threshold:g}")
        return occ, NormalizationMeta(threshold=threshold, density_scale=None)

    kept_values = grid.data[mask]
    scale = float(kept_values.max())
    if scale <= 0:
        # only reachable with a negative threshold
        scale = float(np.abs(kept_values).max()) or 1.0
        logger.warning(f"No positive density above threshold {threshold:g}; scaling by max |d| = {scale:g}")
    logger.info(f"Threshold {threshold:g}: kept {kept} of {grid.data.size} voxels "
                f"({100.0 * kept / grid.data.size:.1f}%), density scale {scale:g}")
    return occ, NormalizationMeta(threshold=threshold, density_scale=scale)


def normalize_coordinates(index, dims):
    """(ix, iy, iz) -> (x, y, z) with a = ia / (na - 1); a = 0 on a degenerate axis."""
    return tuple(0.0 if n == 1 else i / (n - 1) for i, n in zip(index, dims))


def normalize_indices(raster_indices, dims, dtype=np.float32):
    """Vectorised form: raster indices (N,) -> normalised coordinates (N, 3)."""
    i = np.asarray(raster_indices, dtype=np.int64)
    ijk = raster_to_index(i, dims)
    coords = np.empty((i.size, 3), dtype=np.float64)
    for axis, (ia, n) in enumerate(zip(ijk, dims)):
        coords[:, axis] = 0.0 if n == 1 else ia / (n - 1)
    return coords.astype(dtype)


class PointChunkStore:
    """
    On-disk chunked store of (x, y, z, d) records for one file.

    Only the header and chunk offsets are held in memory; read_chunk seeks to
    one chunk and loads just its records.
    """

    def __init__(self, path, file_id, chunk_size, chunk_counts, chunk_offsets):
        self.path = str(path)
        self.file_id = int(file_id)
        self.chunk_size = int(chunk_size)
        self.chunk_counts = list(chunk_counts)
        self.chunk_offsets = list(chunk_offsets)

    @classmethod
    def open(cls, path):
        """Open an existing store, scanning the chunk headers."""
        counts, offsets = [], []
        with open(path, 'rb') as f:
            head = f.read(STORE_HEADER.size)
            if len(head) < STORE_HEADER.size:
                raise CorruptStream(f"{path}: truncated chunk store header")
            magic, version, file_id, chunk_size, n_chunks = STORE_HEADER.unpack(head)
            if magic != STORE_MAGIC:
                raise CorruptStream(f"{path}: bad chunk store magic {magic!r}")
            if version != STORE_VERSION:
                raise CorruptStream(f"{path}: unsupported chunk store version {version}")
            pos = STORE_HEADER.size
            for _ in range(n_chunks):
                f.seek(pos)
                raw = f.read(CHUNK_HEADER.size)
                if len(raw) < CHUNK_HEADER.size:
                    raise CorruptStream(f"{path}: truncated chunk header")
                (count,) = CHUNK_HEADER.unpack(raw)
                counts.append(count)
                offsets.append(pos + CHUNK_HEADER.size)
                pos += CHUNK_HEADER.size + count * RECORD_WIDTH * RECORD_DTYPE.itemsize
        return cls(path, file_id, chunk_size, counts, offsets)

    @property
    def n_chunks(self):
        return len(self.chunk_counts)

    def __len__(self):
        return int(sum(self.chunk_counts))

    def chunk_start(self, k):
        """Index of the first record of chunk k within the file's point order."""
        return int(sum(self.chunk_counts[:k]))

    def read_chunk(self, k):
        """Return (coords (n, 3) float32, densities (n,) float32) for chunk k."""
        count = self.chunk_counts[k]
        with open(self.path, 'rb') as f:
            f.seek(self.chunk_offsets[k])
            records = np.fromfile(f, dtype=RECORD_DTYPE, count=count * RECORD_WIDTH)
        if records.size != count * RECORD_WIDTH:
            raise CorruptStream(f"{self.path}: chunk {k} truncated")
        records = records.reshape(count, RECORD_WIDTH).astype(np.float32)
        return records[:, :3], records[:, 3]

    def __repr__(self):
        return (f"PointChunkStore(path={self.path!r}, file_id={self.file_id}, "
                f"points={len(self)}, chunks={self.n_chunks})")


def build_chunk_store(grid, occ, meta, path, chunk_size=None, file_id=0):
    """
    Write the occupied voxels of grid to a chunk store at path.

    Records follow the raster order of set bits; densities are divided by
    meta.density_scale. The file is written under a temporary name and moved
    into place when complete.
    """
    chunk_size = int(chunk_size or TRAIN_DEFAULTS['chunk_size'])
    if chunk_size < 1:
        raise PreprocessError(f"chunk_size must be positive, got {chunk_size}")
    if occ.dims != grid.dims:
        raise PreprocessError(f"occupancy dims {occ.dims} do not match grid dims {grid.dims}")

    indices = occ.occupied_indices()
    n_points = indices.size
    n_chunks = -(-n_points // chunk_size)
    if n_points and not meta.density_scale:
        raise PreprocessError("density_scale missing for a non-empty selection")

    path = Path(path)
    ensure_directory_exists(path.parent)
    tmp_path = path.with_name(path.name + '.tmp')
    try:
        with open(tmp_path, 'wb') as f:
            f.write(STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, int(file_id), chunk_size, n_chunks))
            for k in range(n_chunks):
                part = indices[k * chunk_size:(k + 1) * chunk_size]
                records = np.empty((part.size, RECORD_WIDTH), dtype=RECORD_DTYPE)
                records[:, :3] = normalize_indices(part, grid.dims)
                records[:, 3] = grid.data[part] / np.float32(meta.density_scale)
                f.write(CHUNK_HEADER.pack(part.size))
                f.write(records.tobytes())
        os.replace(tmp_path, path)
    except BaseException:
        if tmp_path.exists():
            tmp_path.unlink()
        raise

    logger.info(f"Chunk store {path.name}: {n_points} points in {n_chunks} chunk(s) of <= {chunk_size}")
    return PointChunkStore.open(path)


def compress_occupancy(occ, level=-1):
    """nx, ny, nz as u32 LE followed by a DEFLATE (zlib) stream of the packed bits."""
    return OCC_HEADER.pack(*occ.dims) + zlib.compress(occ.bits.tobytes(), level)


def decompress_occupancy(blob):
    """Inverse of compress_occupancy; raises CorruptStream on any inconsistency."""
    blob = bytes(blob)
    if len(blob) < OCC_HEADER.size:
        raise CorruptStream("occupancy blob shorter than its header")
    nx, ny, nz = OCC_HEADER.unpack_from(blob)
    try:
        raw = zlib.decompress(blob[OCC_HEADER.size:])
    except zlib.error as e:
        raise CorruptStream(f"occupancy stream: {e}") from e
    expected = (nx * ny * nz + 7) // 8
    if len(raw) != expected:
        raise CorruptStream(f"occupancy stream holds {len(raw)} bytes, dims need {expected}")
    return OccupancyMap(nx, ny, nz, np.frombuffer(raw, dtype=np.uint8).copy())
