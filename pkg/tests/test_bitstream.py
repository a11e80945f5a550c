import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlf import bitstream
from dlf.bitstream import (
    CDF_TOTAL,
    Container,
    FormatError,
    LengthError,
    SymbolError,
    VersionError,
    pack_vq_indices,
    range_decode,
    range_encode,
    read_container,
    unpack_vq_indices,
    write_container,
)


def uniform_cdf(alphabet: int) -> list[int]:
    width = CDF_TOTAL // alphabet
    cdf = [i * width for i in range(alphabet)] + [CDF_TOTAL]
    return cdf


def random_cdf(rng: np.random.Generator, alphabet: int) -> list[int]:
    w = rng.integers(1, 2000, size=alphabet).astype(np.int64)
    scaled = np.maximum(1, (w * (CDF_TOTAL - alphabet)) // w.sum())
    scaled[0] += CDF_TOTAL - scaled.sum()
    return [0] + np.cumsum(scaled).tolist()


def fixed_provider(cdf):
    return lambda i, prev: cdf


class TestRangeCoder:
    def test_empty_sequence_flush_only(self):
        payload = range_encode([], fixed_provider(uniform_cdf(4)))
        assert len(payload) <= 8
        assert range_decode(payload, fixed_provider(uniform_cdf(4)), 0) == []

    def test_uniform_256_rate(self):
        rng = np.random.default_rng(1)
        symbols = rng.integers(0, 256, size=1000).tolist()
        payload = range_encode(symbols, fixed_provider(uniform_cdf(256)))
        assert abs(len(payload) - 1000) <= 8
        assert range_decode(payload, fixed_provider(uniform_cdf(256)), 1000) == symbols

    def test_near_deterministic_rate(self):
        # One symbol holds all mass except 1 unit for each other symbol.
        alphabet = 256
        widths = [1] * alphabet
        widths[7] = CDF_TOTAL - (alphabet - 1)
        cdf = [0] + np.cumsum(widths).tolist()
        symbols = [7] * 1000
        payload = range_encode(symbols, fixed_provider(cdf))
        assert len(payload) <= 16
        assert range_decode(payload, fixed_provider(cdf), 1000) == symbols

    def test_bulk_round_trips(self):
        # >= 10^4 randomized symbols across many streams and table shapes.
        rng = np.random.default_rng(2)
        total = 0
        for _ in range(300):
            alphabet = int(rng.integers(2, 300))
            cdf = random_cdf(rng, alphabet)
            n = int(rng.integers(0, 80))
            symbols = rng.integers(0, alphabet, size=n).tolist()
            payload = range_encode(symbols, fixed_provider(cdf))
            assert range_decode(payload, fixed_provider(cdf), n) == symbols
            total += n
        assert total >= 10_000

    def test_adaptive_provider_round_trip(self):
        # Table for symbol i depends on the previously coded symbols.
        rng = np.random.default_rng(3)
        tables = [random_cdf(rng, 64) for _ in range(8)]

        def provider(i, prev):
            key = (sum(prev) + i) % len(tables)
            return tables[key]

        symbols = rng.integers(0, 64, size=500).tolist()
        payload = range_encode(symbols, provider)
        assert range_decode(payload, provider, 500) == symbols

    def test_symbol_outside_alphabet(self):
        with pytest.raises(SymbolError):
            range_encode([4], fixed_provider(uniform_cdf(4)))

    def test_payload_near_entropy(self):
        # measured bits - estimated bits in [0, 64 + 1%] over 100 random streams
        rng = np.random.default_rng(4)
        for _ in range(100):
            alphabet = int(rng.integers(2, 200))
            cdf = np.asarray(random_cdf(rng, alphabet))
            widths = np.diff(cdf)
            p = widths / CDF_TOTAL
            n = int(rng.integers(1, 400))
            symbols = rng.choice(alphabet, size=n, p=p / p.sum())
            est = float(-np.log2(p[symbols]).sum())
            payload = range_encode(symbols.tolist(), fixed_provider(cdf.tolist()))
            excess = len(payload) * 8 - est
            assert 0.0 <= excess <= 64 + 0.01 * est


class TestIndexPacking:
    def test_empty(self):
        assert pack_vq_indices([], 4096) == b""
        assert unpack_vq_indices(b"", 4096, 0).size == 0

    def test_bit_layout_example(self):
        assert pack_vq_indices([4095, 0], 4096) == bytes([0xFF, 0xF0, 0x00])

    def test_bit_layout_unpack_example(self):
        out = unpack_vq_indices(bytes([0x00, 0x10, 0x02]), 4096, 2)
        assert out.tolist() == [1, 2]

    def test_32_indices_are_48_bytes(self):
        assert len(pack_vq_indices(list(range(32)), 4096)) == 48

    def test_index_out_of_range(self):
        with pytest.raises(ValueError):
            pack_vq_indices([4096], 4096)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            unpack_vq_indices(b"\x00\x00", 4096, 2)

    def test_bulk_round_trip(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            k = int(rng.integers(2, 5000))
            n = int(rng.integers(0, 80))
            idx = rng.integers(0, k, size=n)
            packed = pack_vq_indices(idx, k)
            assert len(packed) == (n * bitstream.bits_per_index(k) + 7) // 8
            out = unpack_vq_indices(packed, k, n)
            np.testing.assert_array_equal(out, idx)

    @given(st.lists(st.integers(0, 4095), max_size=100))
    @settings(max_examples=200, deadline=None)
    def test_round_trip_property(self, idx):
        packed = pack_vq_indices(idx, 4096)
        np.testing.assert_array_equal(unpack_vq_indices(packed, 4096, len(idx)),
                                      np.asarray(idx, dtype=np.int64))


class TestContainer:
    def test_header_only_is_22_bytes(self):
        blob = write_container(Container(0, 256, 256, b"", b""))
        assert len(blob) == 22
        assert blob[:4] == b"DLF1"

    def test_round_trip(self):
        c = Container(lambda_index=3, orig_w=250, orig_h=123,
                      semantic=b"abc", detail=b"\x00\xff\x10")
        out = read_container(write_container(c))
        assert out == c

    def test_bad_magic(self):
        blob = bytearray(write_container(Container(0, 1, 1, b"", b"")))
        blob[:4] = b"XXXX"
        with pytest.raises(FormatError):
            read_container(bytes(blob))

    def test_bad_version(self):
        blob = bytearray(write_container(Container(0, 1, 1, b"", b"")))
        blob[4] = 99
        with pytest.raises(VersionError):
            read_container(bytes(blob))

    def test_truncated(self):
        blob = write_container(Container(0, 1, 1, b"abcdef", b"gh"))
        with pytest.raises(LengthError):
            read_container(blob[:-1])

    def test_trailing_garbage(self):
        blob = write_container(Container(0, 1, 1, b"", b""))
        with pytest.raises(LengthError):
            read_container(blob + b"\x00")

    def test_round_trip_random_payloads(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            c = Container(
                lambda_index=int(rng.integers(0, 256)),
                orig_w=int(rng.integers(1, 10_000)),
                orig_h=int(rng.integers(1, 10_000)),
                semantic=rng.bytes(int(rng.integers(0, 100))),
                detail=rng.bytes(int(rng.integers(0, 100))),
            )
            assert read_container(write_container(c)) == c

    def test_fuzz_never_crashes(self):
        # Any byte string parses or raises a typed bitstream error.
        rng = np.random.default_rng(7)
        valid = write_container(Container(1, 64, 64, b"123", b"4567"))
        for i in range(10_000):
            if i % 3 == 0:
                data = rng.bytes(int(rng.integers(0, 80)))
            else:
                blob = bytearray(valid)
                for _ in range(int(rng.integers(1, 6))):
                    blob[int(rng.integers(0, len(blob)))] = int(rng.integers(0, 256))
                if rng.random() < 0.5:
                    blob = blob[: int(rng.integers(0, len(blob) + 1))]
                data = bytes(blob)
            try:
                c = read_container(data)
                assert c.num_bytes == len(data)
            except bitstream.BitstreamError:
                pass

    @given(st.binary(max_size=60), st.binary(max_size=60),
           st.integers(0, 255), st.integers(1, 2**32 - 1), st.integers(1, 2**32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_round_trip_property(self, sem, det, lam, w, h):
        c = Container(lambda_index=lam, orig_w=w, orig_h=h, semantic=sem, detail=det)
        assert read_container(write_container(c)) == c
