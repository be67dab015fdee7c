"""Bit-packed sign tensors and exact XNOR/popcount dot products.

A value in {-1.0, +1.0} is stored as a single bit: 1 encodes +1, 0 encodes
-1 (bit b decodes to 2*b - 1). Bits live in 64-bit words, LSB-first, so
logical position i of a row maps to bit (i % 64) of word (i // 64). Rows
are padded up to a word boundary with zero bits, which every kernel masks
out, and the dot product of two rows is recovered without multiplication:

    sum_i a_i * b_i  =  row_len - 2 * popcount(a XOR b)

Zero padding from convolution has no +-1 encoding, so it is handled with an
explicit validity mask instead of a fill value:

    sum_{i: m_i=1} a_i * b_i  =  ones(m) - 2 * popcount((a XOR b) AND m)

which makes the packed kernels agree bit-for-bit with float arithmetic on
zero-padded inputs.

All values here are immutable; operations are pure functions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError

WORD_BITS = 64
_WORD_BYTES = 8
_ALL_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)

# Cap on the uint64 scratch buffer used by the batched kernels (in words).
# Keeps the XOR/popcount broadcast from allocating huge temporaries.
_GEMM_CHUNK_WORDS = 1 << 22


def words_per_row(row_len: int) -> int:
    return (row_len + WORD_BITS - 1) // WORD_BITS


def tail_mask(row_len: int) -> np.uint64:
    """Mask selecting the valid bits of the final word of a row."""
    if row_len == 0:
        return np.uint64(0)
    rem = row_len % WORD_BITS
    if rem == 0:
        return _ALL_ONES
    return np.uint64((1 << rem) - 1)


def _pack_bit_array(bits: np.ndarray) -> np.ndarray:
    """Pack a (..., n) array of 0/1 values into (..., words) uint64, LSB-first."""
    bits = np.ascontiguousarray(bits, dtype=np.uint8)
    n = bits.shape[-1]
    nw = words_per_row(n)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    nbytes = nw * _WORD_BYTES
    if packed.shape[-1] < nbytes:
        pad = np.zeros(bits.shape[:-1] + (nbytes - packed.shape[-1],), dtype=np.uint8)
        packed = np.concatenate([packed, pad], axis=-1)
    words = np.ascontiguousarray(packed).view("<u8").reshape(bits.shape[:-1] + (nw,))
    return words.astype(np.uint64, copy=False)


def _unpack_bit_array(words: np.ndarray, row_len: int) -> np.ndarray:
    """Inverse of _pack_bit_array; returns a (..., row_len) uint8 0/1 array."""
    lead = words.shape[:-1]
    raw = np.ascontiguousarray(words.astype("<u8")).view(np.uint8)
    raw = raw.reshape(lead + (words.shape[-1] * _WORD_BYTES,))
    bits = np.unpackbits(raw, axis=-1, bitorder="little", count=row_len)
    return bits


@dataclass(frozen=True)
class BitTensor:
    """Rows of packed sign bits.

    shape is the logical shape; its last axis is the packed one (row_len
    bits per row). words has the same leading axes and a trailing axis of
    64-bit words. Bits past row_len in the final word are always zero.
    """

    shape: tuple[int, ...]
    words: np.ndarray
    row_len: int

    def __post_init__(self):
        if self.words.dtype != np.uint64:
            raise TypeError("words must be uint64")
        expect = self.shape[:-1] + (words_per_row(self.row_len),)
        if self.words.shape != expect:
            raise DimensionError(
                f"words shape {self.words.shape} does not match rows {expect}"
            )
        if self.row_len > 0 and self.words.size:
            if np.any(self.words[..., -1] & ~tail_mask(self.row_len)):
                raise ValueError("padding bits past row_len must be zero")
        self.words.setflags(write=False)

    @property
    def num_rows(self) -> int:
        return int(np.prod(self.shape[:-1], dtype=np.int64)) if len(self.shape) > 1 else 1

    @property
    def tail_mask(self) -> np.uint64:
        return tail_mask(self.row_len)

    def flat_rows(self) -> np.ndarray:
        """words reshaped to (num_rows, words_per_row)."""
        return self.words.reshape(self.num_rows, words_per_row(self.row_len))

    def reshaped(self, shape: tuple[int, ...]) -> "BitTensor":
        """Reinterpret the leading axes; the packed axis length must match."""
        if shape[-1] != self.row_len:
            raise DimensionError("cannot reshape across the packed axis")
        if int(np.prod(shape[:-1], dtype=np.int64)) != self.num_rows:
            raise DimensionError("row count mismatch in reshape")
        return BitTensor(shape, self.words.reshape(shape[:-1] + self.words.shape[-1:]), self.row_len)


@dataclass(frozen=True)
class ValidMask:
    """Validity bits aligned with a BitTensor row layout.

    ones_count caches the popcount per row so masked dot products do not
    recount it.
    """

    words: np.ndarray
    row_len: int
    ones_count: np.ndarray

    def __post_init__(self):
        if self.words.dtype != np.uint64:
            raise TypeError("mask words must be uint64")
        self.words.setflags(write=False)
        self.ones_count.setflags(write=False)


def make_mask(valid: np.ndarray) -> ValidMask:
    """Build a ValidMask from a (..., n) boolean/0-1 array."""
    valid = np.asarray(valid)
    words = _pack_bit_array(valid != 0)
    ones = np.bitwise_count(words).sum(axis=-1, dtype=np.int64)
    return ValidMask(words=words, row_len=valid.shape[-1], ones_count=ones)


def full_mask(shape_rows: tuple[int, ...], row_len: int) -> ValidMask:
    return make_mask(np.ones(shape_rows + (row_len,), dtype=np.uint8))


def pack_signs(values) -> BitTensor:
    """Pack an array of exact +-1.0 values into sign bits.

    Raises ValueError if any element is not exactly +1 or -1.
    """
    v = np.asarray(values)
    if v.ndim == 0:
        raise DimensionError("pack_signs expects at least one axis")
    good = (v == 1) | (v == -1)
    if not good.all():
        bad = v[~good].ravel()
        raise ValueError(f"pack_signs requires values in {{+1, -1}}, got e.g. {bad[0]!r}")
    bits = v > 0
    return BitTensor(shape=v.shape, words=_pack_bit_array(bits), row_len=v.shape[-1])


def pack_sign_bits(bits: np.ndarray) -> BitTensor:
    """Pack an already-thresholded 0/1 array (1 encodes +1)."""
    bits = np.asarray(bits)
    return BitTensor(shape=bits.shape, words=_pack_bit_array(bits != 0), row_len=bits.shape[-1])


def unpack_signs(b: BitTensor, dtype=np.float32) -> np.ndarray:
    """Decode back to a +-1.0 array; exact inverse of pack_signs."""
    bits = _unpack_bit_array(b.words, b.row_len)
    return (bits.astype(dtype) * 2 - 1).reshape(b.shape)


def _check_compatible(a: BitTensor, b: BitTensor):
    if a.row_len != b.row_len:
        raise DimensionError(f"row length mismatch: {a.row_len} vs {b.row_len}")


def popcount_words(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words).sum(axis=-1, dtype=np.int64)


def xnor_dot(a: BitTensor, b: BitTensor):
    """sum_i a_i * b_i over the +-1 decoding, as exact integers.

    Row axes broadcast; a pair of single rows yields a plain int.
    """
    _check_compatible(a, b)
    mismatches = popcount_words(a.words ^ b.words)
    out = a.row_len - 2 * mismatches
    if out.ndim == 0:
        return int(out)
    return out


def masked_xnor_dot(a: BitTensor, b: BitTensor, m: ValidMask):
    """Masked dot product: positions with m=0 contribute exactly zero."""
    _check_compatible(a, b)
    if m.row_len != a.row_len:
        raise DimensionError(f"mask length mismatch: {m.row_len} vs {a.row_len}")
    mismatches = popcount_words((a.words ^ b.words) & m.words)
    out = m.ones_count - 2 * mismatches
    if out.ndim == 0:
        return int(out)
    return out


def xnor_gemm(a: BitTensor, b: BitTensor, mask: ValidMask | None = None) -> np.ndarray:
    """All-pairs dot products between the rows of a and the rows of b.

    a supplies R rows, b supplies C rows; the result is an (R, C) int32
    matrix. With a mask (one row per a-row) padding positions drop out,
    matching zero padding in the float domain. This is the inner loop of
    the packed convolution, so work is chunked to bound temporaries.
    """
    _check_compatible(a, b)
    aw = a.flat_rows()
    bw = b.flat_rows()
    nr, nw = aw.shape
    nc = bw.shape[0]
    out = np.empty((nr, nc), dtype=np.int32)
    chunk = max(1, _GEMM_CHUNK_WORDS // max(1, nc * nw))
    for lo in range(0, nr, chunk):
        hi = min(nr, lo + chunk)
        x = aw[lo:hi, None, :] ^ bw[None, :, :]
        if mask is not None:
            x &= mask.words.reshape(nr, nw)[lo:hi, None, :]
            ones = mask.ones_count.reshape(nr)[lo:hi, None]
        else:
            ones = a.row_len
        mism = np.bitwise_count(x).sum(axis=-1, dtype=np.int32)
        out[lo:hi] = ones - 2 * mism
    return out


def serialize_bits(b: BitTensor) -> bytes:
    """row_len and word count as u64 little-endian, then the words."""
    flat = b.flat_rows()
    head = struct.pack("<QQ", b.row_len, flat.size)
    return head + flat.astype("<u8").tobytes()


def deserialize_bits(buf: bytes, offset: int = 0) -> tuple[BitTensor, int]:
    """Parse one serialized BitTensor; returns (flat-row tensor, next offset)."""
    if len(buf) < offset + 16:
        raise FormatError("truncated bit tensor header", offset=offset)
    row_len, word_count = struct.unpack_from("<QQ", buf, offset)
    offset += 16
    nbytes = word_count * _WORD_BYTES
    if len(buf) < offset + nbytes:
        raise FormatError(
            f"truncated bit words: expected {nbytes} bytes, have {len(buf) - offset}",
            offset=offset,
        )
    words = np.frombuffer(buf, dtype="<u8", count=word_count, offset=offset).astype(np.uint64)
    offset += nbytes
    wpr = words_per_row(row_len)
    if wpr == 0:
        rows = 0 if word_count == 0 else None
        if rows is None:
            raise FormatError("zero row_len with nonzero words", offset=offset)
        shape = (0, 0)
        words = words.reshape(0, 0)
    else:
        if word_count % wpr != 0:
            raise FormatError(
                f"word count {word_count} not a multiple of words per row {wpr}",
                offset=offset,
            )
        rows = word_count // wpr
        shape = (rows, row_len)
        words = words.reshape(rows, wpr)
    return BitTensor(shape=shape, words=words, row_len=row_len), offset
