"""Lossless serialization: arithmetic coding, fixed-length index packing and
the container format.

The coder is a 32-bit low/high arithmetic coder with underflow counting
(carry-less).  Symbol probabilities are supplied as integer cumulative tables
with a fixed total of ``2**16``; tables may change per symbol (adaptive
coding), as long as encoder and decoder derive identical tables from the
already-coded prefix.

Container layout (all integers little-endian)::

    offset  size  field
    0       4     magic "DLF1"
    4       1     version (currently 1)
    5       1     lambda_index (rate-point id of the producing model)
    6       4     orig_w  (pixels, before padding)
    10      4     orig_h
    14      4     semantic_len (bytes)
    18      4     detail_len   (bytes)
    22      ...   semantic payload, then detail payload

The full byte-level description with hex examples lives in docs/bitstream.md.
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

MAGIC = b"DLF1"
VERSION = 1
HEADER_LEN = 22
CDF_PRECISION_BITS = 16
CDF_TOTAL = 1 << CDF_PRECISION_BITS

_STATE_BITS = 32
_FULL = 1 << _STATE_BITS
_HALF = _FULL >> 1
_QUARTER = _HALF >> 1
_MASK = _FULL - 1

# cdf_provider(i, prefix) -> cumulative table for symbol i given symbols < i
CdfProvider = Callable[[int, Sequence[int]], Sequence[int]]


class BitstreamError(Exception):
    """Base class for all serialization errors."""


class FormatError(BitstreamError):
    """Container does not start with the expected magic."""


class VersionError(BitstreamError):
    """Container version is not supported."""


class LengthError(BitstreamError):
    """Container is truncated or its length fields are inconsistent."""


class SymbolError(BitstreamError):
    """Symbol outside the alphabet of its CDF table."""


class _BitWriter:
    __slots__ = ("buf", "acc", "nbits")

    def __init__(self):
        self.buf = bytearray()
        self.acc = 0
        self.nbits = 0

    def write(self, bit: int) -> None:
        self.acc = (self.acc << 1) | bit
        self.nbits += 1
        if self.nbits == 8:
            self.buf.append(self.acc)
            self.acc = 0
            self.nbits = 0

    def getvalue(self) -> bytes:
        if self.nbits:
            self.buf.append(self.acc << (8 - self.nbits))
            self.acc = 0
            self.nbits = 0
        return bytes(self.buf)


class _BitReader:
    __slots__ = ("data", "pos", "cur", "nbits")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.cur = 0
        self.nbits = 0

    def read(self) -> int:
        # Past the end of the payload the coder consumes phantom zeros; real
        # truncation is caught by the container length fields.
        if self.nbits == 0:
            if self.pos >= len(self.data):
                return 0
            self.cur = self.data[self.pos]
            self.pos += 1
            self.nbits = 8
        self.nbits -= 1
        return (self.cur >> self.nbits) & 1


def _check_table(cdf: Sequence[int], symbol: int) -> tuple[int, int, int]:
    total = int(cdf[-1])
    if symbol < 0 or symbol >= len(cdf) - 1:
        raise SymbolError(f"symbol {symbol} outside alphabet of size {len(cdf) - 1}")
    lo, hi = int(cdf[symbol]), int(cdf[symbol + 1])
    if lo >= hi:
        raise SymbolError(f"symbol {symbol} has zero width in its CDF table")
    return lo, hi, total


class RangeEncoder:
    """Stateful arithmetic encoder over integer cumulative tables."""

    def __init__(self):
        self.low = 0
        self.high = _MASK
        self.pending = 0
        self._bits = _BitWriter()
        self._finished = False

    def encode(self, symbol: int, cdf: Sequence[int]) -> None:
        lo, hi, total = _check_table(cdf, symbol)
        span = self.high - self.low + 1
        self.high = self.low + hi * span // total - 1
        self.low = self.low + lo * span // total
        while True:
            if self.high < _HALF:
                self._emit(0)
            elif self.low >= _HALF:
                self._emit(1)
                self.low -= _HALF
                self.high -= _HALF
            elif self.low >= _QUARTER and self.high < _HALF + _QUARTER:
                self.pending += 1
                self.low -= _QUARTER
                self.high -= _QUARTER
            else:
                break
            self.low = (self.low << 1) & _MASK
            self.high = ((self.high << 1) | 1) & _MASK

    def _emit(self, bit: int) -> None:
        self._bits.write(bit)
        while self.pending:
            self._bits.write(bit ^ 1)
            self.pending -= 1

    def finish(self) -> bytes:
        if self._finished:
            raise RuntimeError("finish() called twice")
        self._finished = True
        # One disambiguating bit from the quarter containing `low`.
        self.pending += 1
        self._emit(1 if self.low >= _QUARTER else 0)
        return self._bits.getvalue()


class RangeDecoder:
    """Stateful arithmetic decoder; mirror of :class:`RangeEncoder`."""

    def __init__(self, payload: bytes):
        self.low = 0
        self.high = _MASK
        self._bits = _BitReader(payload)
        self.code = 0
        for _ in range(_STATE_BITS):
            self.code = (self.code << 1) | self._bits.read()

    def decode(self, cdf: Sequence[int]) -> int:
        total = int(cdf[-1])
        span = self.high - self.low + 1
        value = ((self.code - self.low + 1) * total - 1) // span
        symbol = bisect_right(cdf, value) - 1
        lo, hi, _ = _check_table(cdf, symbol)
        self.high = self.low + hi * span // total - 1
        self.low = self.low + lo * span // total
        while True:
            if self.high < _HALF:
                pass
            elif self.low >= _HALF:
                self.low -= _HALF
                self.high -= _HALF
                self.code -= _HALF
            elif self.low >= _QUARTER and self.high < _HALF + _QUARTER:
                self.low -= _QUARTER
                self.high -= _QUARTER
                self.code -= _QUARTER
            else:
                break
            self.low = (self.low << 1) & _MASK
            self.high = ((self.high << 1) | 1) & _MASK
            self.code = ((self.code << 1) | self._bits.read()) & _MASK
        return symbol


def range_encode(symbols: Sequence[int], cdf_provider: CdfProvider) -> bytes:
    """Encode ``symbols`` where table i may depend on symbols < i."""
    enc = RangeEncoder()
    coded: list[int] = []
    for i, sym in enumerate(symbols):
        enc.encode(int(sym), cdf_provider(i, coded))
        coded.append(int(sym))
    return enc.finish()


def range_decode(payload: bytes, cdf_provider: CdfProvider, count: int) -> list[int]:
    """Exact inverse of :func:`range_encode` for the same provider."""
    if count == 0:
        return []
    dec = RangeDecoder(payload)
    out: list[int] = []
    for i in range(count):
        out.append(dec.decode(cdf_provider(i, out)))
    return out


# -- fixed-length index packing ------------------------------------------------

def bits_per_index(codebook_size: int) -> int:
    if codebook_size < 2:
        raise ValueError("codebook must have at least 2 entries")
    return max(1, int(np.ceil(np.log2(codebook_size))))


def pack_vq_indices(indices, codebook_size: int) -> bytes:
    """Pack indices at ceil(log2 K) bits each, big-endian bits, zero-padded."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        return b""
    if idx.min() < 0 or idx.max() >= codebook_size:
        raise ValueError(f"index outside [0, {codebook_size})")
    nbits = bits_per_index(codebook_size)
    shifts = np.arange(nbits - 1, -1, -1, dtype=np.int64)
    bits = ((idx[:, None] >> shifts[None, :]) & 1).astype(np.uint8).reshape(-1)
    return np.packbits(bits).tobytes()


def unpack_vq_indices(data: bytes, codebook_size: int, count: int) -> np.ndarray:
    """Exact inverse of :func:`pack_vq_indices`."""
    nbits = bits_per_index(codebook_size)
    expected = (count * nbits + 7) // 8
    if len(data) != expected:
        raise ValueError(f"packed index payload is {len(data)} bytes, expected {expected}")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[: count * nbits]
    bits = bits.reshape(count, nbits).astype(np.int64)
    weights = 1 << np.arange(nbits - 1, -1, -1, dtype=np.int64)
    idx = bits @ weights
    if idx.max(initial=0) >= codebook_size:
        raise ValueError("decoded index outside the codebook")
    return idx


# -- container ------------------------------------------------------------------

_HEADER = struct.Struct("<4sBBIIII")


@dataclass(frozen=True)
class Container:
    """Header fields plus the two payloads of one compressed image."""

    lambda_index: int
    orig_w: int
    orig_h: int
    semantic: bytes
    detail: bytes
    version: int = VERSION

    @property
    def num_bytes(self) -> int:
        return HEADER_LEN + len(self.semantic) + len(self.detail)


def write_container(c: Container) -> bytes:
    if not (0 <= c.lambda_index <= 255):
        raise ValueError("lambda_index must fit in one byte")
    header = _HEADER.pack(
        MAGIC, c.version, c.lambda_index, c.orig_w, c.orig_h, len(c.semantic), len(c.detail)
    )
    return header + c.semantic + c.detail


def read_container(data: bytes) -> Container:
    if len(data) < HEADER_LEN:
        if len(data) >= 4 and data[:4] != MAGIC:
            raise FormatError(f"bad magic {data[:4]!r}")
        raise LengthError(f"container is {len(data)} bytes, header needs {HEADER_LEN}")
    magic, version, lam, orig_w, orig_h, slen, dlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}")
    expected = HEADER_LEN + slen + dlen
    if len(data) != expected:
        raise LengthError(f"container is {len(data)} bytes, header declares {expected}")
    semantic = data[HEADER_LEN : HEADER_LEN + slen]
    detail = data[HEADER_LEN + slen : expected]
    return Container(
        lambda_index=lam,
        orig_w=orig_w,
        orig_h=orig_h,
        semantic=semantic,
        detail=detail,
        version=version,
    )
