#!/usr/bin/env python
"""
MRC2014 reader/writer for Cryo-EM density maps

The 1024-byte header is decoded through a numpy structured dtype; voxel data
follows at offset 1024 + nsymbt in x-fastest raster order. Integer modes 0/1
are promoted to float32 on read; everything is written as little-endian
mode 2.

USAGE:
    python mrc_io.py map.mrc        # print header summary
"""

import io
import logging
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from config import atomic_write_bytes
from errors import BadMagic, MrcError, TruncatedFile, UnsupportedMode

logger = logging.getLogger(__name__)

HEADER_SIZE = 1024
MAP_MAGIC = b'MAP '
STAMP_LITTLE = b'\x44\x44\x00\x00'
STAMP_BIG = b'\x11\x11\x00\x00'
MRC_VERSION = 20140

# mode -> element type (byte order applied at read time)
MRC_MODES = {
    0: 'i1',
    1: 'i2',
    2: 'f4',
}

# 56 words + 10 x 80 label bytes
HEADER_FIELDS = [
    ('dims', 'i4', (3,)),
    ('mode', 'i4'),
    ('start', 'i4', (3,)),
    ('sampling', 'i4', (3,)),
    ('cell', 'f4', (3,)),
    ('angles', 'f4', (3,)),
    ('axes', 'i4', (3,)),
    ('dmin', 'f4'),
    ('dmax', 'f4'),
    ('dmean', 'f4'),
    ('ispg', 'i4'),
    ('nsymbt', 'i4'),
    ('extra1', 'V8'),
    ('exttyp', 'S4'),
    ('nversion', 'i4'),
    ('extra2', 'V84'),
    ('origin', 'f4', (3,)),
    ('map', 'S4'),
    ('machst', 'u1', (4,)),
    ('rms', 'f4'),
    ('nlabl', 'i4'),
    ('labels', 'S80', (10,)),
]


def header_dtype(byteorder='<'):
    """Structured dtype of the 1024-byte header in the given byte order."""
    fields = []
    for entry in HEADER_FIELDS:
        name, code = entry[0], entry[1]
        if code[0] in 'if':
            code = byteorder + code
        fields.append((name, code) + tuple(entry[2:]))
    dtype = np.dtype(fields)
    assert dtype.itemsize == HEADER_SIZE
    return dtype


def _f32(value):
    return float(np.float32(value))


@dataclass
class MrcHeader:
    """Decoded MRC header. Float fields are held at float32 precision."""
    nx: int
    ny: int
    nz: int
    mode: int = 2
    cell: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    dmin: float = 0.0
    dmax: float = -1.0
    dmean: float = -2.0
    map_magic: bytes = MAP_MAGIC
    machine_stamp: bytes = STAMP_LITTLE
    nsymbt: int = 0
    start: tuple = (0, 0, 0)
    angles: tuple = (90.0, 90.0, 90.0)
    axes: tuple = (1, 2, 3)
    ispg: int = 1
    rms: float = -1.0
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.nx, self.ny, self.nz = int(self.nx), int(self.ny), int(self.nz)
        self.cell = tuple(_f32(v) for v in self.cell)
        self.origin = tuple(_f32(v) for v in self.origin)
        self.angles = tuple(_f32(v) for v in self.angles)
        self.start = tuple(int(v) for v in self.start)
        self.axes = tuple(int(v) for v in self.axes)
        self.dmin, self.dmax, self.dmean, self.rms = (
            _f32(self.dmin), _f32(self.dmax), _f32(self.dmean), _f32(self.rms))
        self.labels = [str(label) for label in self.labels][:10]

    @property
    def dims(self):
        return (self.nx, self.ny, self.nz)

    @property
    def n_voxels(self):
        return self.nx * self.ny * self.nz

    @property
    def voxel_size(self):
        return tuple(c / n for c, n in zip(self.cell, self.dims))


@dataclass(eq=False)
class VoxelGrid:
    """Dense density field; data is flat float32 in x-fastest raster order."""
    header: MrcHeader
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        if self.data.size != self.header.n_voxels:
            raise ValueError(
                f"data length {self.data.size} != nx*ny*nz = {self.header.n_voxels}")

    @classmethod
    def from_array(cls, volume, voxel_size=1.0, origin=(0.0, 0.0, 0.0), labels=()):
        """Build a grid from a (nz, ny, nx) array; statistics are computed from the data."""
        volume = np.asarray(volume, dtype=np.float32)
        if volume.ndim != 3:
            raise ValueError(f"expected a 3-D (nz, ny, nx) array, got shape {volume.shape}")
        nz, ny, nx = volume.shape
        header = MrcHeader(nx=nx, ny=ny, nz=nz,
                           cell=(nx * voxel_size, ny * voxel_size, nz * voxel_size),
                           origin=origin, labels=list(labels))
        grid = cls(header, volume.reshape(-1))
        grid.header = with_statistics(grid.header, grid.data)
        return grid

    @property
    def dims(self):
        return self.header.dims

    @property
    def volume(self):
        """(nz, ny, nx) view of the data."""
        return self.data.reshape(self.header.nz, self.header.ny, self.header.nx)

    def value_at(self, x, y, z):
        nx, ny, _ = self.dims
        return float(self.data[x + nx * (y + ny * z)])

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (self.header == other.header
                and self.data.shape == other.data.shape
                and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32)))


def raster_to_index(i, dims):
    """Linear raster index -> (x, y, z); works on scalars and arrays."""
    nx, ny, _ = dims
    return i % nx, (i // nx) % ny, i // (nx * ny)


def with_statistics(header, data):
    """Return a copy of header with dmin/dmax/dmean/rms recomputed from data."""
    data = np.asarray(data, dtype=np.float32)
    if data.size == 0:
        return replace(header)
    as64 = data.astype(np.float64)
    return replace(header,
                   dmin=float(data.min()), dmax=float(data.max()),
                   dmean=float(as64.mean()), rms=float(as64.std()))


def _detect_byteorder(raw):
    stamp = bytes(raw[212:216])
    if stamp[:2] in (b'\x44\x44', b'\x44\x41'):
        return '<'
    if stamp[:2] == b'\x11\x11':
        return '>'
    # Unknown stamp: pick the order that yields a plausible mode
    for order in ('<', '>'):
        mode = int(np.frombuffer(raw, dtype=order + 'i4', count=1, offset=12)[0])
        if mode in MRC_MODES:
            logger.warning(f"Unrecognised machine stamp {stamp!r}; assuming byte order '{order}'")
            return order
    return '<'


def _as_buffer(stream):
    if isinstance(stream, (bytes, bytearray, memoryview)):
        return bytes(stream)
    return stream.read()


def read_mrc(stream, strict_magic=True):
    """
    Parse an MRC2014 byte stream (bytes or binary file object) into a VoxelGrid.

    Raises TruncatedFile, UnsupportedMode, and BadMagic (only when strict_magic
    is set; otherwise the missing magic is logged as a warning).
    """
    raw = _as_buffer(stream)
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"stream holds {len(raw)} bytes, header needs {HEADER_SIZE}")

    order = _detect_byteorder(raw)
    rec = np.frombuffer(raw, dtype=header_dtype(order), count=1)[0]

    mode = int(rec['mode'])
    if mode not in MRC_MODES:
        raise UnsupportedMode(f"MRC mode {mode} is not supported (expected 0, 1 or 2)")

    magic = bytes(rec['map'])
    if magic != MAP_MAGIC:
        message = f"magic bytes {magic!r} at offset 208, expected {MAP_MAGIC!r}"
        if strict_magic:
            raise BadMagic(message)
        logger.warning(f"BadMagic: {message}; continuing")

    nx, ny, nz = (int(v) for v in rec['dims'])
    if min(nx, ny, nz) < 1:
        raise MrcError(f"invalid dimensions {nx}x{ny}x{nz}")
    axes = tuple(int(v) for v in rec['axes'])
    if axes != (1, 2, 3):
        logger.warning(f"Axis order {axes} ignored; data read as x-fastest raster")

    nsymbt = max(int(rec['nsymbt']), 0)
    elem = np.dtype(order + MRC_MODES[mode])
    count = nx * ny * nz
    offset = HEADER_SIZE + nsymbt
    needed = offset + count * elem.itemsize
    if len(raw) < needed:
        raise TruncatedFile(f"stream holds {len(raw)} bytes, header promises {needed}")

    data = np.frombuffer(raw, dtype=elem, count=count, offset=offset).astype(np.float32)

    nlabl = max(0, min(int(rec['nlabl']), 10))
    labels = [bytes(label).decode('ascii', errors='replace').rstrip(' \x00')
              for label in rec['labels'][:nlabl]]

    header = MrcHeader(
        nx=nx, ny=ny, nz=nz, mode=mode,
        cell=tuple(rec['cell']), origin=tuple(rec['origin']),
        dmin=rec['dmin'], dmax=rec['dmax'], dmean=rec['dmean'],
        map_magic=magic, machine_stamp=bytes(rec['machst']), nsymbt=nsymbt,
        start=tuple(rec['start']), angles=tuple(rec['angles']), axes=axes,
        ispg=int(rec['ispg']), rms=rec['rms'], labels=labels,
    )
    if mode != 2:
        logger.info(f"Promoted mode {mode} data to float32")
    return VoxelGrid(header, data)


def write_mrc(grid):
    """Serialise a grid as little-endian mode-2 MRC; statistics are recomputed."""
    h = grid.header
    data = np.ascontiguousarray(grid.data, dtype='<f4')

    rec = np.zeros(1, dtype=header_dtype('<'))
    rec['dims'] = h.dims
    rec['mode'] = 2
    rec['start'] = h.start
    rec['sampling'] = h.dims
    rec['cell'] = h.cell
    rec['angles'] = h.angles
    rec['axes'] = (1, 2, 3)
    if data.size:
        as64 = data.astype(np.float64)
        rec['dmin'], rec['dmax'] = data.min(), data.max()
        rec['dmean'], rec['rms'] = as64.mean(), as64.std()
    rec['ispg'] = h.ispg
    rec['nsymbt'] = 0
    rec['nversion'] = MRC_VERSION
    rec['origin'] = h.origin
    rec['map'] = MAP_MAGIC
    rec['machst'] = np.frombuffer(STAMP_LITTLE, dtype=np.uint8)
    labels = h.labels[:10]
    rec['nlabl'] = len(labels)
    for k, label in enumerate(labels):
        rec['labels'][0, k] = label.encode('ascii', errors='replace')[:80].ljust(80)

    buf = io.BytesIO()
    buf.write(rec.tobytes())
    buf.write(data.tobytes())
    return buf.getvalue()


def load_mrc(path, strict_magic=True):
    """Read an MRC file from disk."""
    with open(path, 'rb') as f:
        return read_mrc(f, strict_magic=strict_magic)


def save_mrc(path, grid):
    """Write an MRC file atomically (temp file + rename)."""
    return atomic_write_bytes(path, write_mrc(grid))


def describe(grid):
    """Summary dictionary used by the info command."""
    h = grid.header
    data = grid.data
    return {
        'dims': h.dims,
        'mode': h.mode,
        'cell': h.cell,
        'origin': h.origin,
        'voxel_size': h.voxel_size,
        'dmin': float(data.min()),
        'dmax': float(data.max()),
        'dmean': float(data.astype(np.float64).mean()),
        'negative_fraction': float(np.count_nonzero(data < 0)) / data.size,
        'size_bytes': HEADER_SIZE + h.nsymbt + data.size * 4,
    }


if __name__ == '__main__':
    if len(sys.argv) != 2:
        print(f"Usage: python {sys.argv[0]} map.mrc")
        sys.exit(1)
    for key, value in describe(load_mrc(sys.argv[1], strict_magic=False)).items():
        print(f"  {key}: {value}")
