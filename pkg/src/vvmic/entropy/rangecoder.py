"""32-bit renormalizing range coder with carry propagation.

Byte format: the LZMA-style coder state (33-bit ``low``, 32-bit ``range``,
renormalization when ``range < 2**24``) with two changes. The leading byte,
which is always zero, is not emitted, and the final flush writes only as
many bytes as are needed to pin a value inside the last interval. The
decoder treats up to three missing trailing bytes as zeros; needing more
than that means the stream was truncated.

Symbols are coded against :class:`~vvmic.entropy.cdf.CdfTable` objects.
A symbol outside the table's alphabet is coded as the escape symbol
followed by its value as a raw 16-bit literal (two's-complement offset by
``2**15``).
"""

from __future__ import annotations

from bisect import bisect_right
from typing import List, Sequence

from ..errors import DecodeError
from .cdf import CdfTable

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
RAW_BITS = 16
RAW_OFFSET = 1 << (RAW_BITS - 1)
MAX_PAD = 3


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()
        self._finished = False

    def _shift_low(self):
        low = self.low
        if (low & MASK32) < 0xFF000000 or low > MASK32:
            carry = low >> 32
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode_freq(self, cum: int, freq: int, total: int):
        r = self.range // total
        self.low += r * cum
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_raw(self, value: int):
        self.encode_freq(value, 1, 1 << RAW_BITS)

    def encode(self, symbol: int, table: CdfTable):
        idx = symbol - table.offset
        if 0 <= idx < table.escape:
            self.encode_freq(table.cdf[idx], table.cdf[idx + 1] - table.cdf[idx], table.total)
            return
        if not -RAW_OFFSET <= symbol < RAW_OFFSET:
            raise ValueError(f"symbol {symbol} exceeds the 16-bit escape range")
        e = table.escape
        self.encode_freq(table.cdf[e], table.cdf[e + 1] - table.cdf[e], table.total)
        self.encode_raw(symbol + RAW_OFFSET)

    def finish(self) -> bytes:
        if self._finished:
            return bytes(self._out)
        # Shortest value in [low, low + range) whose trailing bytes are zero.
        nbytes = 4
        for n in range(1, 5):
            mask = (1 << (32 - 8 * n)) - 1
            v = (self.low + mask) & ~mask
            if v < self.low + self.range:
                nbytes = n
                self.low = v
                break
        for _ in range(5):
            self._shift_low()
        out = self._out
        assert out[0] == 0
        del out[0]
        if nbytes < 4:
            del out[len(out) - (4 - nbytes) :]
        self._finished = True
        return bytes(out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = bytes(data)
        self._pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        pos = self._pos
        self._pos += 1
        if pos < len(self._data):
            return self._data[pos]
        if pos - len(self._data) >= MAX_PAD:
            raise DecodeError("range-coded stream is truncated")
        return 0

    def _normalize(self):
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next_byte()) & MASK32
            self.range <<= 8

    def decode_target(self, total: int) -> int:
        self._r = self.range // total
        v = self.code // self._r
        if v >= total:
            raise DecodeError("corrupt range-coded stream")
        return v

    def consume(self, cum: int, freq: int):
        self.code -= self._r * cum
        self.range = self._r * freq
        self._normalize()

    def decode_raw(self) -> int:
        v = self.decode_target(1 << RAW_BITS)
        self.consume(v, 1)
        return v

    def decode(self, table: CdfTable) -> int:
        cdf = table.cdf
        v = self.decode_target(table.total)
        idx = bisect_right(cdf, v) - 1
        self.consume(cdf[idx], cdf[idx + 1] - cdf[idx])
        if idx == table.escape:
            return self.decode_raw() - RAW_OFFSET
        return idx + table.offset

    def check_end(self):
        """Raise if the stream length disagrees with what was decoded."""
        pad = self._pos - len(self._data)
        if pad < 0:
            raise DecodeError(f"{-pad} unread trailing bytes in range-coded stream")
        if pad > MAX_PAD:
            raise DecodeError("range-coded stream is truncated")


def rc_encode(symbols: Sequence[int], tables: Sequence[CdfTable]) -> bytes:
    if len(symbols) != len(tables):
        raise ValueError("need exactly one table per symbol")
    enc = RangeEncoder()
    for s, t in zip(symbols, tables):
        enc.encode(int(s), t)
    return enc.finish()


def rc_decode(data: bytes, tables: Sequence[CdfTable]) -> List[int]:
    dec = RangeDecoder(data)
    out = [dec.decode(t) for t in tables]
    dec.check_end()
    return out
