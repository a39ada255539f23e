"""Bit-exact range coding of responses under a model's conditionals.

The coder keeps a 64-bit window ``[low, low + range)`` and renormalises one bit
at a time, so the output length tracks ``-log2 Q(z)`` at bit granularity.
Overflow of ``low`` past ``2**64`` is resolved by propagating a carry into the
bits already emitted.  Each conditional is quantized to integer frequencies
summing to ``2**32``; the last symbol in the table absorbs the rounding slack of
the range split, so no code space is wasted.

Redundancy: termination costs at most one bit (the interval is wider than
half the window when the loop ends), range truncation costs below ``2**-30``
bits per symbol and quantization costs at most ``2**-32 / (p ln 2)`` bits for
a symbol of probability ``p``.  ``redundancy_bound`` reports the documented
budget ``2 + n * 1e-6`` bits.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CorruptStream, InvalidPath, ModelMismatch, ZeroProbability
from .tree import ModelState, prefix_rank

PRECISION = 64
FREQ_BITS = 32
TOTAL_FREQ = 1 << FREQ_BITS
WINDOW = 1 << PRECISION
HALF = 1 << (PRECISION - 1)
MAGIC = b"TILTCODE"
FLUSH_BITS = 2
QUANT_BITS_PER_SYMBOL = 1e-6


@dataclass(frozen=True)
class CodedMessage:
    bits: tuple[int, ...]
    symbol_count: int
    model_id: bytes

    @property
    def bit_length(self) -> int:
        return len(self.bits)

    def to_bytes(self) -> bytes:
        padded = list(self.bits) + [0] * (-len(self.bits) % 8)
        payload = bytes(
            int("".join(map(str, padded[i : i + 8])), 2) for i in range(0, len(padded), 8)
        )
        return MAGIC + struct.pack(">I", self.symbol_count) + self.model_id + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CodedMessage":
        if len(blob) < 28 or blob[:8] != MAGIC:
            raise CorruptStream("missing TILTCODE header")
        (count,) = struct.unpack(">I", blob[8:12])
        model_id = blob[12:28]
        bits = tuple(int(b) for byte in blob[28:] for b in f"{byte:08b}")
        # trailing zero padding is harmless: the decoder reads zeros past the end
        return cls(bits, count, model_id)


def redundancy_bound(symbol_count: int) -> float:
    return FLUSH_BITS + symbol_count * QUANT_BITS_PER_SYMBOL


def quantize(probs: np.ndarray) -> list[int]:
    """Largest-remainder rounding to integer frequencies summing to ``2**32``.

    Every positive probability receives at least one count.
    """
    probs = np.asarray(probs, dtype=np.float64)
    probs = probs / probs.sum()
    scaled = probs * TOTAL_FREQ
    freqs = [int(math.floor(x)) for x in scaled]
    for i, p in enumerate(probs):
        if p > 0 and freqs[i] == 0:
            freqs[i] = 1
    deficit = TOTAL_FREQ - sum(freqs)
    remainders = scaled - np.floor(scaled)
    if deficit > 0:
        order = sorted(range(len(freqs)), key=lambda i: (-remainders[i], i))
        for j in range(deficit):
            freqs[order[j % len(order)]] += 1
    elif deficit < 0:
        order = sorted(range(len(freqs)), key=lambda i: (remainders[i], -freqs[i], i))
        j = 0
        while deficit < 0:
            i = order[j % len(order)]
            if freqs[i] > 1:
                freqs[i] -= 1
                deficit += 1
            j += 1
    return freqs


def _cumulative(freqs: list[int]) -> list[int]:
    cum = [0]
    for f in freqs:
        cum.append(cum[-1] + f)
    return cum


class _Tables:
    """Per-prefix quantized tables, built lazily."""

    def __init__(self, model: ModelState):
        self.model = model
        self._cache: dict[int, tuple[list[int], list[int]]] = {}

    def get(self, rank: int):
        if rank not in self._cache:
            freqs = quantize(self.model.cond[rank])
            self._cache[rank] = (freqs, _cumulative(freqs))
        return self._cache[rank]


def _symbols(response: Sequence[int], model: ModelState) -> list[tuple[int, int]]:
    """(prefix rank, symbol) pairs coded for a response; EOS is index ``k``."""
    k, d = model.shape
    if len(response) > d:
        raise InvalidPath(f"response of length {len(response)} exceeds depth {d}")
    for token in response:
        if not 0 <= int(token) < k:
            raise InvalidPath(f"token {token} outside vocabulary of size {k}")
    out = []
    for i, token in enumerate(response):
        out.append((prefix_rank(response[:i], k), int(token)))
    if len(response) < d:
        out.append((prefix_rank(response, k), k))
    return out


def symbol_count(response: Sequence[int], max_depth: int) -> int:
    return len(response) + (1 if len(response) < max_depth else 0)


def encode(response: Sequence[int], model: ModelState, tables: _Tables | None = None) -> CodedMessage:
    tables = tables or _Tables(model)
    symbols = _symbols(response, model)
    for rank, sym in symbols:
        if model.cond[rank, sym] <= 0:
            raise ZeroProbability(f"symbol {sym} has zero probability at prefix rank {rank}")
    bits: list[int] = []
    low, rng = 0, WINDOW

    def carry():
        i = len(bits) - 1
        while bits[i] == 1:
            bits[i] = 0
            i -= 1
        bits[i] = 1

    for rank, sym in symbols:
        freqs, cum = tables.get(rank)
        r = rng >> FREQ_BITS
        low += r * cum[sym]
        if sym == len(freqs) - 1:
            rng = rng - r * cum[sym]
        else:
            rng = r * freqs[sym]
        if low >= WINDOW:
            low -= WINDOW
            carry()
        while rng <= HALF:
            bits.append(low >> (PRECISION - 1))
            low = (low << 1) & (WINDOW - 1)
            rng <<= 1

    # shortest bit string whose zero-padded value lands in [low, low + rng)
    for extra in range(0, PRECISION + 1):
        step = 1 << (PRECISION - extra)
        value = -(-low // step) * step
        if value < low + rng:
            break
    if value >= WINDOW:
        carry()
        value -= WINDOW
    for j in range(extra):
        bits.append((value >> (PRECISION - 1 - j)) & 1)
    return CodedMessage(tuple(bits), len(symbols), model.model_id)


def decode(message: CodedMessage, model: ModelState) -> tuple[int, ...]:
    if message.model_id != model.model_id:
        raise ModelMismatch("message was encoded under a different model")
    k, d = model.shape
    tables = _Tables(model)
    bits = message.bits
    pos = 0

    def next_bit():
        nonlocal pos
        b = bits[pos] if pos < len(bits) else 0
        pos += 1
        return b

    offset = 0
    for _ in range(PRECISION):
        offset = (offset << 1) | next_bit()
    rng = WINDOW
    response: list[int] = []
    decoded = 0
    while True:
        if decoded >= message.symbol_count:
            raise CorruptStream("symbol budget exhausted before EOS or depth cut")
        rank = prefix_rank(response, k)
        freqs, cum = tables.get(rank)
        r = rng >> FREQ_BITS
        target = min(offset // r, TOTAL_FREQ - 1)
        sym = int(np.searchsorted(cum, target, side="right")) - 1
        offset -= r * cum[sym]
        if sym == len(freqs) - 1:
            rng = rng - r * cum[sym]
        else:
            rng = r * freqs[sym]
        if not 0 <= offset < rng:
            raise CorruptStream("code value left the coding interval")
        while rng <= HALF:
            offset = (offset << 1) | next_bit()
            rng <<= 1
        decoded += 1
        if sym == k:
            break
        response.append(sym)
        if len(response) == d:
            break
    if decoded != message.symbol_count:
        raise CorruptStream(
            f"decoded {decoded} symbols but the message declares {message.symbol_count}"
        )
    if pos - PRECISION > len(bits) + PRECISION:
        raise CorruptStream("stream exhausted")
    return tuple(response)


def code_length_bits(response: Sequence[int], model: ModelState) -> float:
    """Ideal code length ``-log2 Q(z)``."""
    total = 0.0
    for rank, sym in _symbols(response, model):
        total -= math.log2(model.cond[rank, sym])
    return total


def encode_all(responses, model: ModelState) -> list[CodedMessage]:
    tables = _Tables(model)
    return [encode(z, model, tables) for z in responses]


def write_message(message: CodedMessage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(message.to_bytes())


def read_message(path) -> CodedMessage:
    with open(path, "rb") as fh:
        return CodedMessage.from_bytes(fh.read())
