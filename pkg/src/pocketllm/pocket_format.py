"""Compressed-model artifacts and their bit-exact binary serialization.

File layout (all little-endian):

    magic            4s   "PKLM"
    version          u16  (currently 1)
    scope            u8   0 = per_layer, 1 = per_block
    layer_count      u32
    per layer:
        name_len     u16, then name_len bytes of UTF-8
        role         u8   (index into tensor_store.ROLES)
        block_index  u32
        d_in, d_out  u32, u32
        d, K         u32, u32
        m, h         u16, u16   (decoder depth / hidden width)
        flags        u16  bit0 shared codec, bit1 no bias,
                          bits2-3 norm mode (0 rln, 1 ln, 2 none),
                          bit4 identity activation
        [unshared]   codebook: K*d half-precision values
        indices      ceil(N * ceil(log2 K) / 8) bytes, N = d_in*d_out/d
        [unshared]   n_dec u32, then n_dec float32 decoder parameters
                     (layer-major, weight, bias, gain, norm bias)

A layer flagged "shared codec" reuses the codebook and decoder of the
most recent unshared layer in the same block. Fixed headers are excluded
from all ratio arithmetic and reported separately as overhead bytes.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .tensor_store import ROLES

MAGIC = b"PKLM"
VERSION = 1
SCOPES = ("per_layer", "per_block")

_NORM_CODES = {"rln": 0, "ln": 1, "none": 2}
_NORM_NAMES = {v: k for k, v in _NORM_CODES.items()}

_FLAG_SHARED = 1 << 0
_FLAG_NO_BIAS = 1 << 1
_FLAG_NORM_SHIFT = 2
_FLAG_NORM_MASK = 0b11 << _FLAG_NORM_SHIFT
_FLAG_IDENTITY_ACT = 1 << 4


class PocketFormatError(Exception):
    """Base class for malformed compressed files."""


class MagicError(PocketFormatError):
    """File does not start with the expected magic bytes."""


class VersionError(PocketFormatError):
    """Unsupported format version."""


class TruncatedError(PocketFormatError):
    """Buffer shorter (or longer) than the headers require."""


class CorruptIndexError(PocketFormatError):
    """Decoded codeword index is out of range."""


# ---------------------------------------------------------------------------
# half-precision codec
# ---------------------------------------------------------------------------

def fp16_encode(x):
    """IEEE-754 binary16 encoding with round-to-nearest-even.

    Overflow saturates to the signed infinity; every NaN maps to the
    canonical quiet NaN 0x7E00. Returns uint16 with the input's shape
    (python scalar in, numpy scalar out).
    """
    arr = np.asarray(x, dtype=np.float32)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    bits = arr.view(np.uint32)
    sign = ((bits >> np.uint32(16)) & np.uint32(0x8000)).astype(np.uint16)
    absbits = bits & np.uint32(0x7FFFFFFF)
    exp = (absbits >> np.uint32(23)).astype(np.int64)
    sig = ((absbits & np.uint32(0x007FFFFF)) | np.uint32(0x00800000)).astype(np.uint64)

    eh = exp - 112  # target binary16 exponent before rounding
    shift = np.where(eh >= 1, 13, np.minimum(14 - eh, 25)).astype(np.uint64)
    half = np.uint64(1) << (shift - np.uint64(1))
    rem = sig & ((np.uint64(1) << shift) - np.uint64(1))
    r = sig >> shift
    round_up = (rem > half) | ((rem == half) & ((r & np.uint64(1)) == np.uint64(1)))
    r = (r + round_up.astype(np.uint64)).astype(np.int64)

    out = np.where(eh >= 1, (eh << 10) + r - 1024, r)
    out = np.where(out >= 0x7C00, 0x7C00, out)  # overflow after rounding
    out = np.where(exp == 0, 0, out)  # float32 zeros/subnormals underflow
    out = np.where(exp == 255, 0x7C00, out)  # infinities
    half_bits = (sign | out.astype(np.uint16)).astype(np.uint16)
    half_bits = np.where(absbits > 0x7F800000, np.uint16(0x7E00), half_bits)
    return half_bits[0] if scalar else half_bits


def fp16_decode(h):
    """Exact widening of binary16 bit patterns to float32."""
    arr = np.asarray(h, dtype=np.uint16)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    sign32 = (arr.astype(np.uint32) & np.uint32(0x8000)) << np.uint32(16)
    exp5 = ((arr >> np.uint16(10)) & np.uint16(0x1F)).astype(np.uint32)
    mant = (arr & np.uint16(0x03FF)).astype(np.uint32)

    normal = sign32 | ((exp5 + np.uint32(112)) << np.uint32(23)) | (mant << np.uint32(13))

    # subnormal: value = mant * 2^-24, renormalized into a float32 pattern
    lead = np.zeros(arr.shape, dtype=np.uint32)
    for b in range(10):
        lead = np.where((mant >> np.uint32(b)) > 0, np.uint32(b), lead)
    sub_exp = (lead + np.uint32(103)) << np.uint32(23)
    sub_mant = (mant << (np.uint32(23) - lead)) & np.uint32(0x007FFFFF)
    subnormal = sign32 | sub_exp | sub_mant

    out = np.where((exp5 >= 1) & (exp5 <= 30), normal, np.uint32(0))
    out = np.where((exp5 == 0) & (mant > 0), subnormal, out)
    out = np.where((exp5 == 0) & (mant == 0), sign32, out)
    out = np.where((exp5 == 31) & (mant == 0), sign32 | np.uint32(0x7F800000), out)
    out = np.where((exp5 == 31) & (mant > 0), np.uint32(0x7FC00000), out)
    vals = out.view(np.float32)
    return vals[0] if scalar else vals


# ---------------------------------------------------------------------------
# index packing
# ---------------------------------------------------------------------------

def index_bit_width(k):
    """Bits per stored index: ceil(log2 k)."""
    if k < 2:
        raise ValueError(f"codebook size must be >= 2 to pack indices, got {k}")
    return int(k - 1).bit_length()


def packed_size(n, k):
    """Bytes occupied by n packed indices."""
    return (n * index_bit_width(k) + 7) // 8


def pack_indices(indices, k):
    """Pack indices into a little-endian bitstream, ceil(log2 k) bits each.

    Index j occupies stream bits [j*b, (j+1)*b); the final partial byte
    is zero-padded.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"indices must be 1-D, got shape {idx.shape}")
    b = index_bit_width(k)
    if idx.size == 0:
        return b""
    if idx.min() < 0 or idx.max() >= k:
        raise ValueError(f"index out of range for codebook size {k}")
    shifts = np.arange(b, dtype=np.int64)
    bits = ((idx[:, None] >> shifts[None, :]) & 1).astype(np.uint8).ravel()
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_indices(buf, n, k):
    """Exact inverse of pack_indices; validates length and index range."""
    b = index_bit_width(k)
    expected = packed_size(n, k)
    if len(buf) != expected:
        raise TruncatedError(
            f"index payload is {len(buf)} bytes, expected {expected} for {n} indices"
        )
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[: n * b]
    shifts = np.arange(b, dtype=np.int64)
    vals = (bits.reshape(n, b).astype(np.int64) << shifts[None, :]).sum(axis=1)
    if vals.max() >= k:
        raise CorruptIndexError(f"decoded index {vals.max()} >= codebook size {k}")
    return vals


# ---------------------------------------------------------------------------
# ratio arithmetic
# ---------------------------------------------------------------------------

def compression_ratio_params(n, d, k, n_fd):
    """Parameter-count ratio: n*d original values over k*d + n + n_fd stored."""
    if min(n, d, k) < 1 or n_fd < 0:
        raise ValueError("n, d, k must be positive and n_fd non-negative")
    return float(Fraction(n * d, k * d + n + n_fd))


def compression_ratio_bits(n, d, k, n_fd):
    """Bit-level ratio: fp32 originals over fp16 codebook + packed indices + fp32 decoder."""
    if min(n, d, k) < 1 or n_fd < 0:
        raise ValueError("n, d, k must be positive and n_fd non-negative")
    b = index_bit_width(k)
    if k & (k - 1):
        warnings.warn(
            f"codebook size {k} is not a power of two; using ceil(log2 k) = {b} index bits",
            stacklevel=2,
        )
    return float(Fraction(32 * n * d, 16 * k * d + b * n + 32 * n_fd))


@dataclass
class AvgBits:
    """Average stored bits per original weight, with the index-only part."""

    total: float
    index_only: float


def avg_bits(layers):
    """Average bits per quantized weight over (n, d, k, n_fd) layer tuples."""
    layers = list(layers)
    if not layers:
        raise ValueError("avg_bits needs at least one layer")
    stored = 0
    index_bits = 0
    weights = 0
    for n, d, k, n_fd in layers:
        b = index_bit_width(k)
        stored += 16 * k * d + b * n + 32 * n_fd
        index_bits += b * n
        weights += n * d
    return AvgBits(total=stored / weights, index_only=index_bits / weights)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

@dataclass
class CompressedLayer:
    """The storable result for one weight matrix: codebook + indices + decoder."""

    name: str
    role: str
    block_index: int
    d_in: int
    d_out: int
    d: int
    k: int
    codebook_fp16: np.ndarray  # (k, d) uint16
    indices: np.ndarray  # (N,) int64
    decoder_layers: int
    decoder_hidden: int
    decoder_bias: bool
    decoder_norm: str
    decoder_activation: str
    decoder_params: np.ndarray  # flat float32, canonical order
    shared_with: str | None = None

    @property
    def L(self):
        return self.d_out // self.d

    @property
    def n_subvectors(self):
        return self.d_in * self.L

    @property
    def n_decoder_params(self):
        return int(self.decoder_params.size)

    def validate(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.d_out % self.d != 0:
            raise ValueError(f"d={self.d} does not divide d_out={self.d_out}")
        if self.codebook_fp16.shape != (self.k, self.d):
            raise ValueError("codebook shape does not match (k, d)")
        if self.indices.shape != (self.n_subvectors,):
            raise ValueError(
                f"index count {self.indices.shape} != d_in*L = {self.n_subvectors}"
            )
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.k):
            raise ValueError("index out of codebook range")
        return self


@dataclass
class CompressedModel:
    """Ordered compressed layers plus transient training bookkeeping."""

    scope: str
    layers: list[CompressedLayer] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)  # not serialized
    reports: dict = field(default_factory=dict)  # not serialized

    def layer(self, name):
        for cl in self.layers:
            if cl.name == name:
                return cl
        raise KeyError(f"no compressed layer named {name!r}")


def _layer_flags(cl):
    flags = 0
    if cl.shared_with is not None:
        flags |= _FLAG_SHARED
    if not cl.decoder_bias:
        flags |= _FLAG_NO_BIAS
    flags |= _NORM_CODES[cl.decoder_norm] << _FLAG_NORM_SHIFT
    if cl.decoder_activation == "identity":
        flags |= _FLAG_IDENTITY_ACT
    return flags


def write_pocket_file(model):
    """Serialize a CompressedModel to bytes."""
    if model.scope not in SCOPES:
        raise ValueError(f"unknown scope {model.scope!r}")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HBI", VERSION, SCOPES.index(model.scope), len(model.layers))
    for cl in model.layers:
        cl.validate()
        name_bytes = cl.name.encode("utf-8")
        out += struct.pack("<H", len(name_bytes))
        out += name_bytes
        out += struct.pack(
            "<BIIIIIHHH",
            ROLES.index(cl.role),
            cl.block_index,
            cl.d_in,
            cl.d_out,
            cl.d,
            cl.k,
            cl.decoder_layers,
            cl.decoder_hidden,
            _layer_flags(cl),
        )
        if cl.shared_with is None:
            out += np.ascontiguousarray(cl.codebook_fp16, dtype="<u2").tobytes()
        out += pack_indices(cl.indices, cl.k)
        if cl.shared_with is None:
            params = np.ascontiguousarray(cl.decoder_params, dtype="<f4")
            out += struct.pack("<I", params.size)
            out += params.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file ends inside {what} ({n} bytes needed at {self.pos})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_pocket_file(data):
    """Parse bytes produced by write_pocket_file, validating as it goes."""
    r = _Reader(bytes(data))
    if r.take(4, "magic") != MAGIC:
        raise MagicError("not a pocketllm compressed file (bad magic)")
    (version, scope_code, n_layers) = r.unpack("<HBI", "file header")
    if version != VERSION:
        raise VersionError(f"unsupported format version {version}")
    if scope_code >= len(SCOPES):
        raise PocketFormatError(f"unknown scope code {scope_code}")
    model = CompressedModel(scope=SCOPES[scope_code])
    owners = {}  # block_index -> most recent unshared layer
    for _ in range(n_layers):
        (name_len,) = r.unpack("<H", "layer name length")
        name = r.take(name_len, "layer name").decode("utf-8")
        (role_code, block, d_in, d_out, d, k, m, h, flags) = r.unpack(
            "<BIIIIIHHH", f"header of layer {name!r}"
        )
        if role_code >= len(ROLES):
            raise PocketFormatError(f"layer {name!r}: unknown role code {role_code}")
        if d < 1 or d_out % d != 0:
            raise PocketFormatError(f"layer {name!r}: d={d} does not divide d_out={d_out}")
        if k < 2:
            raise PocketFormatError(f"layer {name!r}: codebook size {k} < 2")
        norm_code = (flags & _FLAG_NORM_MASK) >> _FLAG_NORM_SHIFT
        if norm_code not in _NORM_NAMES:
            raise PocketFormatError(f"layer {name!r}: unknown norm code {norm_code}")
        shared = bool(flags & _FLAG_SHARED)
        n = d_in * (d_out // d)
        if shared:
            owner = owners.get(block)
            if owner is None:
                raise PocketFormatError(
                    f"layer {name!r} shares a codec but block {block} has no owner yet"
                )
            if (owner.d, owner.k, owner.decoder_layers, owner.decoder_hidden) != (d, k, m, h):
                raise PocketFormatError(
                    f"layer {name!r}: shared codec does not match owner {owner.name!r}"
                )
            codebook = owner.codebook_fp16
            dec_params = owner.decoder_params
        else:
            raw = r.take(2 * k * d, f"codebook of layer {name!r}")
            codebook = np.frombuffer(raw, dtype="<u2").reshape(k, d).copy()
        idx_buf = r.take(packed_size(n, k), f"indices of layer {name!r}")
        indices = unpack_indices(idx_buf, n, k)
        if not shared:
            (n_dec,) = r.unpack("<I", f"decoder size of layer {name!r}")
            raw = r.take(4 * n_dec, f"decoder of layer {name!r}")
            dec_params = np.frombuffer(raw, dtype="<f4").copy()
        cl = CompressedLayer(
            name=name,
            role=ROLES[role_code],
            block_index=block,
            d_in=d_in,
            d_out=d_out,
            d=d,
            k=k,
            codebook_fp16=codebook,
            indices=indices,
            decoder_layers=m,
            decoder_hidden=h,
            decoder_bias=not (flags & _FLAG_NO_BIAS),
            decoder_norm=_NORM_NAMES[norm_code],
            decoder_activation="identity" if (flags & _FLAG_IDENTITY_ACT) else "gelu",
            decoder_params=dec_params,
            shared_with=owners[block].name if shared else None,
        ).validate()
        if not shared:
            owners[block] = cl
        model.layers.append(cl)
    if r.pos != len(r.data):
        raise TruncatedError(f"{len(r.data) - r.pos} trailing bytes after last layer")
    return model


def save_pocket_file(model, path):
    Path(path).write_bytes(write_pocket_file(model))


def load_pocket_file(path):
    return read_pocket_file(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------

@dataclass
class LayerStats:
    name: str
    n: int
    d: int
    k: int
    n_fd: int  # 0 for layers that reuse another layer's codec
    codebook_bits: int
    index_bits: int
    decoder_bits: int
    payload_bits: int
    ratio_params: float
    ratio_bits: float


@dataclass
class ModelStats:
    layers: list[LayerStats]
    total_weight_params: int
    total_payload_bits: int
    avg_bits: float
    avg_bits_index_only: float
    ratio_params: float
    ratio_bits: float
    overhead_bytes: int
    file_bytes: int


def model_stats(model, count_norm_params=True):
    """Per-layer and aggregate size accounting for a CompressedModel.

    Payload bits are the physical codebook/index/decoder bytes; fixed
    headers are reported as overhead. count_norm_params=False drops the
    decoder's normalization affine parameters from the n_fd used in the
    ratio formulas (they are still stored and still counted in payload
    bits).
    """
    from .nets import MetaNetConfig  # local import to keep module load light

    stats = []
    total_nd = 0
    total_payload = 0
    den_params = 0
    den_bits = 0
    for cl in model.layers:
        owner = cl.shared_with is None
        n = cl.n_subvectors
        if count_norm_params or cl.decoder_norm == "none":
            n_fd = cl.n_decoder_params
        else:
            cfg = MetaNetConfig(
                width=cl.d,
                layers=cl.decoder_layers,
                hidden=cl.decoder_hidden,
                bias=cl.decoder_bias,
                norm=cl.decoder_norm,
            )
            n_fd = cfg.linear_param_count()
        cb_bits = 16 * cl.k * cl.d if owner else 0
        idx_bits = 8 * packed_size(n, cl.k)
        dec_bits = 32 * cl.n_decoder_params if owner else 0
        payload = cb_bits + idx_bits + dec_bits
        eff_nfd = n_fd if owner else 0
        stats.append(
            LayerStats(
                name=cl.name,
                n=n,
                d=cl.d,
                k=cl.k,
                n_fd=eff_nfd,
                codebook_bits=cb_bits,
                index_bits=idx_bits,
                decoder_bits=dec_bits,
                payload_bits=payload,
                ratio_params=float(
                    Fraction(n * cl.d, (cl.k * cl.d if owner else 0) + n + eff_nfd)
                ),
                ratio_bits=float(
                    Fraction(
                        32 * n * cl.d,
                        (16 * cl.k * cl.d if owner else 0)
                        + index_bit_width(cl.k) * n
                        + 32 * eff_nfd,
                    )
                ),
            )
        )
        total_nd += n * cl.d
        total_payload += payload
        den_params += (cl.k * cl.d if owner else 0) + n + eff_nfd
        den_bits += (
            (16 * cl.k * cl.d if owner else 0)
            + index_bit_width(cl.k) * n
            + 32 * (cl.n_decoder_params if owner else 0)
        )
    if not model.layers:
        raise ValueError("model has no layers")
    file_bytes = len(write_pocket_file(model))
    return ModelStats(
        layers=stats,
        total_weight_params=total_nd,
        total_payload_bits=total_payload,
        avg_bits=total_payload / total_nd,
        avg_bits_index_only=sum(index_bit_width(s.k) * s.n for s in stats) / total_nd,
        ratio_params=float(Fraction(total_nd, den_params)),
        ratio_bits=float(Fraction(32 * total_nd, den_bits)),
        overhead_bytes=file_bytes - total_payload // 8,
        file_bytes=file_bytes,
    )
