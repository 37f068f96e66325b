#!/usr/bin/env python
"""
Implicit neural representation: coordinate encoding, per-file latent
identifiers and a residual MLP with hand-derived gradients.

Input vector per point:
    [x, y, z] ++ gamma(x) ++ gamma(y) ++ gamma(z) ++ latent
with gamma(p) = (sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)).
L = 10 and a 64-D latent give the 127-D input of the default chain.

Architecture chains are written as dash-separated tokens, e.g.
"127-2048-Re-Re-1024-Re-512-Re-256-1": the first number is the input width,
each later number is an affine layer to that width (Leaky ReLU on every one
except the last), and "Re" (optionally numbered, "Re1") is a residual block
LReLU(x + A2(LReLU(A1(x)))) at the current width.

Checkpoint blob layout (little-endian):
    "INRC" | version u32 | num_frequencies u32 | latent_dim u32 | flags u32 |
    leaky_slope f64 | input width u32 | token count u32 | tokens u32 (width, 0 = residual block) |
    parameters f32 in layer order (weights row-major (out, in), then bias) |
    file count u32 | per file: file_id u32 + latent_dim x f32
"""

import copy
import logging
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from config import ENCODING_CONFIG
from errors import CorruptCheckpoint, DimensionMismatch, DuplicateFileId, ModelError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'INRC'
CHECKPOINT_VERSION = 1
RESIDUAL_TOKEN = 0
_RES_RE = re.compile(r'^re\d*$', re.IGNORECASE)


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------

def positional_encode(p, num_frequencies=None):
    """gamma(p): interleaved sin/cos at 2^0 pi .. 2^(L-1) pi. Shape p.shape + (2L,)."""
    num_frequencies = num_frequencies or ENCODING_CONFIG['num_frequencies']
    p = np.asarray(p, dtype=np.float64)
    freqs = np.ldexp(np.pi, np.arange(num_frequencies))
    angles = p[..., None] * freqs
    out = np.empty(p.shape + (2 * num_frequencies,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def encoded_width(num_frequencies=None, latent_dim=None):
    num_frequencies = num_frequencies or ENCODING_CONFIG['num_frequencies']
    latent_dim = ENCODING_CONFIG['latent_dim'] if latent_dim is None else latent_dim
    return 3 + 6 * num_frequencies + latent_dim


def encode_coordinates(coords, num_frequencies=None, dtype=np.float32):
    """(N, 3) coordinates -> (N, 3 + 6L): raw coordinates first, then gamma per axis."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DimensionMismatch(f"coordinates must have shape (N, 3), got {coords.shape}")
    gamma = positional_encode(coords, num_frequencies)       # (N, 3, 2L)
    return np.concatenate([coords, gamma.reshape(coords.shape[0], -1)], axis=1).astype(dtype)


def encode_batch(coords, latent, num_frequencies=None, latent_dim=None, dtype=np.float32):
    """Encoded coordinates with a latent appended to every row; latent is (D,) or (N, D)."""
    latent_dim = ENCODING_CONFIG['latent_dim'] if latent_dim is None else latent_dim
    latent = np.asarray(latent)
    if latent.shape[-1] != latent_dim:
        raise DimensionMismatch(f"latent has width {latent.shape[-1]}, expected {latent_dim}")
    enc = encode_coordinates(coords, num_frequencies, dtype=dtype)
    lat = np.broadcast_to(latent.astype(dtype), (enc.shape[0], latent_dim))
    return np.concatenate([enc, lat], axis=1)


def encode_point(coords, latent, num_frequencies=None, latent_dim=None, dtype=np.float64):
    """Single point: [x, y, z, gamma(x), gamma(y), gamma(z), latent]."""
    coords = np.asarray(coords, dtype=np.float64).reshape(1, -1)
    if coords.shape[1] != 3:
        raise DimensionMismatch(f"expected 3 coordinates, got {coords.shape[1]}")
    return encode_batch(coords, latent, num_frequencies, latent_dim, dtype=dtype)[0]


# ---------------------------------------------------------------------------
# Architecture and parameters
# ---------------------------------------------------------------------------

def parse_architecture(chain):
    """
    Parse a width chain into (input_dim, tokens); tokens hold widths, with
    RESIDUAL_TOKEN marking a residual block at the current width.
    """
    parts = [part.strip() for part in str(chain).split('-') if part.strip()]
    if len(parts) < 2:
        raise DimensionMismatch(f"architecture {chain!r} needs an input and an output width")
    try:
        input_dim = int(parts[0])
    except ValueError:
        raise DimensionMismatch(f"architecture {chain!r} must start with the input width") from None
    tokens = []
    for part in parts[1:]:
        if _RES_RE.match(part):
            tokens.append(RESIDUAL_TOKEN)
        else:
            try:
                width = int(part)
            except ValueError:
                raise DimensionMismatch(f"bad architecture token {part!r} in {chain!r}") from None
            if width < 1:
                raise DimensionMismatch(f"layer width must be positive in {chain!r}")
            tokens.append(width)
    if input_dim < 1 or tokens[-1] == RESIDUAL_TOKEN:
        raise DimensionMismatch(f"architecture {chain!r} must end with an affine output layer")
    if tokens[-1] != 1:
        raise DimensionMismatch(f"architecture {chain!r} must end in a width-1 density output")
    return input_dim, tokens


def format_architecture(input_dim, tokens):
    return '-'.join([str(input_dim)] + ['Re' if t == RESIDUAL_TOKEN else str(t) for t in tokens])


def layer_shapes(chain):
    """List of ('affine', fan_in, fan_out) / ('res', width) in forward order."""
    input_dim, tokens = parse_architecture(chain)
    shapes, width = [], input_dim
    for token in tokens:
        if token == RESIDUAL_TOKEN:
            shapes.append(('res', width))
        else:
            shapes.append(('affine', width, token))
            width = token
    return shapes


def count_parameters(chain):
    total = 0
    for shape in layer_shapes(chain):
        if shape[0] == 'res':
            total += 2 * (shape[1] * shape[1] + shape[1])
        else:
            total += shape[1] * shape[2] + shape[2]
    return total


@dataclass
class Affine:
    weight: np.ndarray          # (out, in)
    bias: np.ndarray            # (out,)
    activation: bool = True


@dataclass
class ResBlock:
    first: Affine
    second: Affine


@dataclass
class MlpParams:
    input_dim: int
    tokens: list
    layers: list

    @property
    def chain(self):
        return format_architecture(self.input_dim, self.tokens)

    @property
    def dtype(self):
        return self.arrays()[0].dtype

    def arrays(self):
        """Parameter arrays in layer order: weight then bias, A1 before A2 in residual blocks."""
        out = []
        for layer in self.layers:
            affines = (layer.first, layer.second) if isinstance(layer, ResBlock) else (layer,)
            for affine in affines:
                out.extend([affine.weight, affine.bias])
        return out

    @property
    def n_parameters(self):
        return int(sum(a.size for a in self.arrays()))

    def astype(self, dtype):
        clone = copy.deepcopy(self)
        for layer in clone.layers:
            affines = (layer.first, layer.second) if isinstance(layer, ResBlock) else (layer,)
            for affine in affines:
                affine.weight = affine.weight.astype(dtype)
                affine.bias = affine.bias.astype(dtype)
        return clone

    def copy(self):
        return copy.deepcopy(self)

    def load_arrays(self, arrays):
        """Overwrite parameters in place from a list matching arrays()."""
        current = self.arrays()
        if len(arrays) != len(current):
            raise DimensionMismatch(f"expected {len(current)} arrays, got {len(arrays)}")
        for dst, src in zip(current, arrays):
            if dst.shape != np.shape(src):
                raise DimensionMismatch(f"parameter shape {np.shape(src)} != {dst.shape}")
            dst[...] = src


def _build_layers(input_dim, tokens, make_affine):
    layers, width = [], input_dim
    last = len(tokens) - 1
    for k, token in enumerate(tokens):
        if token == RESIDUAL_TOKEN:
            layers.append(ResBlock(make_affine(width, width, True), make_affine(width, width, True)))
        else:
            layers.append(make_affine(width, token, k != last))
            width = token
    return layers


def init_params(chain, seed=0, dtype=np.float32):
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases; deterministic per seed."""
    input_dim, tokens = parse_architecture(chain)
    rng = np.random.default_rng(seed)

    def make_affine(fan_in, fan_out, activation):
        bound = np.sqrt(6.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
        return Affine(weight, np.zeros(fan_out, dtype=dtype), activation)

    params = MlpParams(input_dim, tokens, _build_layers(input_dim, tokens, make_affine))
    logger.debug(f"Initialised {params.chain}: {params.n_parameters} parameters (seed {seed})")
    return params


def zeros_params(chain, dtype=np.float32):
    input_dim, tokens = parse_architecture(chain)

    def make_affine(fan_in, fan_out, activation):
        return Affine(np.zeros((fan_out, fan_in), dtype=dtype), np.zeros(fan_out, dtype=dtype), activation)

    return MlpParams(input_dim, tokens, _build_layers(input_dim, tokens, make_affine))


# ---------------------------------------------------------------------------
# Latent identifiers
# ---------------------------------------------------------------------------

@dataclass
class LatentTable:
    file_ids: list
    vectors: np.ndarray          # (n_files, latent_dim)
    trainable: bool = True

    @property
    def latent_dim(self):
        return int(self.vectors.shape[1])

    def index_of(self, file_id):
        try:
            return self.file_ids.index(int(file_id))
        except ValueError:
            raise ModelError(f"file id {file_id} has no latent") from None

    def get(self, file_id):
        """Row view of the latent for file_id (writes go through)."""
        return self.vectors[self.index_of(file_id)]

    def copy(self):
        return LatentTable(list(self.file_ids), self.vectors.copy(), self.trainable)


def init_latents(file_ids, seed=0, latent_dim=None, trainable=True, dtype=np.float32):
    """One i.i.d. uniform [-1, 1] vector per file id; deterministic per seed."""
    latent_dim = ENCODING_CONFIG['latent_dim'] if latent_dim is None else latent_dim
    file_ids = [int(f) for f in file_ids]
    if not file_ids:
        raise ModelError("init_latents needs at least one file id")
    seen = set()
    for file_id in file_ids:
        if file_id in seen:
            raise DuplicateFileId(f"file id {file_id} registered twice")
        seen.add(file_id)
    rng = np.random.default_rng([int(seed), 1])
    vectors = rng.uniform(-1.0, 1.0, size=(len(file_ids), latent_dim)).astype(dtype)
    return LatentTable(file_ids, vectors, trainable)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def leaky_relu(z, slope=None):
    slope = ENCODING_CONFIG['leaky_slope'] if slope is None else slope
    return np.where(z >= 0, z, z * z.dtype.type(slope))


def leaky_relu_grad(z, slope=None):
    # defined as 1 at exactly 0
    slope = ENCODING_CONFIG['leaky_slope'] if slope is None else slope
    return np.where(z >= 0, z.dtype.type(1), z.dtype.type(slope))


def _check_batch(params, batch):
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != params.input_dim:
        raise DimensionMismatch(
            f"batch shape {batch.shape} does not match network input width {params.input_dim}")
    return batch


def forward(params, batch, slope=None, return_cache=False):
    """Predicted density per row of batch (shape (N,)); optionally the activations cache."""
    x = _check_batch(params, batch)
    cache = []
    for layer in params.layers:
        if isinstance(layer, ResBlock):
            h = x @ layer.first.weight.T + layer.first.bias
            a = leaky_relu(h, slope)
            s = x + (a @ layer.second.weight.T + layer.second.bias)
            cache.append((x, h, a, s))
            x = leaky_relu(s, slope)
        else:
            z = x @ layer.weight.T + layer.bias
            cache.append((x, z))
            x = leaky_relu(z, slope) if layer.activation else z
    y = x[:, 0]
    return (y, cache) if return_cache else y


def backward(params, batch, upstream, cache=None, slope=None, latent_dim=None):
    """
    Gradients of a scalar loss given d loss / d output (upstream, shape (N,)).

    Returns (param_grads, input_grads): param_grads aligned with
    params.arrays(); input_grads is (N, input_dim), or only its trailing
    latent_dim columns when latent_dim is given.
    """
    x = _check_batch(params, batch)
    upstream = np.asarray(upstream, dtype=x.dtype).reshape(-1, 1)
    if upstream.shape[0] != x.shape[0]:
        raise DimensionMismatch(f"{upstream.shape[0]} upstream gradients for {x.shape[0]} inputs")
    if cache is None:
        _, cache = forward(params, x, slope=slope, return_cache=True)

    g = upstream
    grads_per_layer = []
    for layer, saved in zip(reversed(params.layers), reversed(cache)):
        if isinstance(layer, ResBlock):
            x_in, h, a, s = saved
            gs = g * leaky_relu_grad(s, slope)
            d_w2 = gs.T @ a
            d_b2 = gs.sum(axis=0)
            gh = (gs @ layer.second.weight) * leaky_relu_grad(h, slope)
            d_w1 = gh.T @ x_in
            d_b1 = gh.sum(axis=0)
            g = gs + gh @ layer.first.weight
            grads_per_layer.append([d_w1, d_b1, d_w2, d_b2])
        else:
            x_in, z = saved
            if layer.activation:
                g = g * leaky_relu_grad(z, slope)
            grads_per_layer.append([g.T @ x_in, g.sum(axis=0)])
            g = g @ layer.weight

    param_grads = [grad for layer_grads in reversed(grads_per_layer) for grad in layer_grads]
    if latent_dim is not None:
        return param_grads, g[:, g.shape[1] - latent_dim:]
    return param_grads, g


# ---------------------------------------------------------------------------
# Model state
# ---------------------------------------------------------------------------

@dataclass
class ModelState:
    """Everything needed to evaluate the representation for any registered file."""
    params: MlpParams
    latents: LatentTable
    num_frequencies: int = field(default_factory=lambda: ENCODING_CONFIG['num_frequencies'])
    leaky_slope: float = field(default_factory=lambda: ENCODING_CONFIG['leaky_slope'])
    normalization: dict = field(default_factory=dict)   # file_id -> NormalizationMeta

    def __post_init__(self):
        expected = encoded_width(self.num_frequencies, self.latents.latent_dim)
        if self.params.input_dim != expected:
            raise DimensionMismatch(
                f"network input width {self.params.input_dim} != encoded width {expected} "
                f"({self.num_frequencies} frequencies, {self.latents.latent_dim}-D latent)")

    def encode(self, file_id, coords):
        return encode_batch(coords, self.latents.get(file_id), self.num_frequencies,
                            self.latents.latent_dim, dtype=self.params.dtype)

    def predict(self, file_id, coords, batch_size=1_000_000, latent=None):
        """Normalised density predictions for (N, 3) coordinates of one file."""
        coords = np.asarray(coords)
        latent = self.latents.get(file_id) if latent is None else latent
        out = np.empty(coords.shape[0], dtype=self.params.dtype)
        for start in range(0, coords.shape[0], batch_size):
            part = coords[start:start + batch_size]
            enc = encode_batch(part, latent, self.num_frequencies, self.latents.latent_dim,
                               dtype=self.params.dtype)
            out[start:start + part.shape[0]] = forward(self.params, enc, slope=self.leaky_slope)
        return out

    def copy(self):
        return ModelState(self.params.copy(), self.latents.copy(), self.num_frequencies,
                          self.leaky_slope, dict(self.normalization))


# ---------------------------------------------------------------------------
# Checkpoint blob
# ---------------------------------------------------------------------------

_CKPT_HEAD = struct.Struct('<4sIIIId')


def serialize_checkpoint(state):
    """Pack network, latents and encoding settings into the INRC blob (float32 LE)."""
    params, latents = state.params, state.latents
    parts = [
        _CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, state.num_frequencies,
                        latents.latent_dim, 1 if latents.trainable else 0, state.leaky_slope),
        struct.pack('<II', params.input_dim, len(params.tokens)),
        struct.pack(f'<{len(params.tokens)}I', *params.tokens),
    ]
    for array in params.arrays():
        parts.append(np.ascontiguousarray(array, dtype='<f4').tobytes())
    parts.append(struct.pack('<I', len(latents.file_ids)))
    for file_id, vector in zip(latents.file_ids, latents.vectors):
        parts.append(struct.pack('<I', file_id))
        parts.append(np.ascontiguousarray(vector, dtype='<f4').tobytes())
    return b''.join(parts)


def parse_checkpoint(blob):
    """Inverse of serialize_checkpoint; raises CorruptCheckpoint on malformed input."""
    blob = bytes(blob)
    view = memoryview(blob)
    try:
        magic, version, num_frequencies, latent_dim, flags, slope = _CKPT_HEAD.unpack_from(blob, 0)
        if magic != CHECKPOINT_MAGIC:
            raise CorruptCheckpoint(f"bad checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
        pos = _CKPT_HEAD.size
        input_dim, n_tokens = struct.unpack_from('<II', blob, pos)
        pos += 8
        tokens = list(struct.unpack_from(f'<{n_tokens}I', blob, pos))
        pos += 4 * n_tokens
        params = zeros_params(format_architecture(input_dim, tokens))
        arrays = []
        for array in params.arrays():
            n = array.size
            if pos + 4 * n > len(blob):
                raise CorruptCheckpoint("checkpoint parameter payload truncated")
            arrays.append(np.frombuffer(view[pos:pos + 4 * n], dtype='<f4').reshape(array.shape))
            pos += 4 * n
        params.load_arrays(arrays)
        (n_files,) = struct.unpack_from('<I', blob, pos)
        pos += 4
        file_ids, vectors = [], np.zeros((n_files, latent_dim), dtype=np.float32)
        for k in range(n_files):
            (file_id,) = struct.unpack_from('<I', blob, pos)
            pos += 4
            if pos + 4 * latent_dim > len(blob):
                raise CorruptCheckpoint("checkpoint latent table truncated")
            vectors[k] = np.frombuffer(view[pos:pos + 4 * latent_dim], dtype='<f4')
            pos += 4 * latent_dim
            file_ids.append(file_id)
    except struct.error as e:
        raise CorruptCheckpoint(f"checkpoint truncated: {e}") from e
    except DimensionMismatch as e:
        raise CorruptCheckpoint(f"checkpoint architecture invalid: {e}") from e
    if pos != len(blob):
        raise CorruptCheckpoint(f"{len(blob) - pos} trailing bytes after checkpoint")
    if len(set(file_ids)) != len(file_ids):
        raise CorruptCheckpoint("duplicate file id in checkpoint latent table")
    latents = LatentTable(file_ids, vectors, bool(flags & 1))
    try:
        return ModelState(params, latents, num_frequencies, float(slope))
    except DimensionMismatch as e:
        raise CorruptCheckpoint(str(e)) from e
