"""Counter-based random streams.

Every random draw in the package comes from a Philox bit generator keyed by
a 64-bit seed. Integer and sign draws are built from the raw 64-bit output
words (not from ``numpy.random.Generator`` methods) so the sequences depend
only on Philox itself and stay identical across numpy releases.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *path: int) -> int:
    """Hash a global seed and an index path into an independent 64-bit seed.

    ``derive_seed(seed, epoch, sample_index)`` is the per-sample sub-seed used
    during pre-training; because it is a pure function of its arguments, a
    sample gets the same sketch no matter which worker or order processes it.
    """
    words = [seed & _MASK64] + [p & _MASK64 for p in path]
    payload = struct.pack(f"<B{len(words)}Q", len(words), *words)
    digest = hashlib.blake2b(payload, digest_size=8, person=b"ropim-rng").digest()
    return int.from_bytes(digest, "little")


def philox(seed) -> np.random.Philox:
    """Return a Philox bit generator for ``seed``.

    An existing ``Philox``/``Generator`` is passed through (its stream is
    consumed by the caller), an int becomes the Philox key.
    """
    if isinstance(seed, np.random.Generator):
        seed = seed.bit_generator
    if isinstance(seed, np.random.BitGenerator):
        return seed
    if isinstance(seed, (int, np.integer)):
        return np.random.Philox(key=int(seed) & _MASK64)
    raise TypeError(f"unsupported seed type {type(seed).__name__}")


def generator(seed) -> np.random.Generator:
    return np.random.Generator(philox(seed))


def raw_words32(bitgen: np.random.BitGenerator, n: int) -> np.ndarray:
    """``n`` uniform 32-bit words, low half of each 64-bit output first."""
    raw = np.asarray(bitgen.random_raw((n + 1) // 2), dtype=np.uint64)
    words = np.empty(2 * raw.size, dtype=np.uint64)
    words[0::2] = raw & np.uint64(0xFFFFFFFF)
    words[1::2] = raw >> np.uint64(32)
    return words[:n]


def uniform_below(bitgen: np.random.BitGenerator, bound: int, size: int) -> np.ndarray:
    """Exactly uniform integers in ``[0, bound)`` via multiply-shift with rejection.

    Rejected slots are redrawn in index order, so the output is a deterministic
    function of the bit stream.
    """
    if not 1 <= bound <= 0xFFFFFFFF:
        raise ValueError(f"bound must be in [1, 2**32), got {bound}")
    out = np.empty(size, dtype=np.int64)
    threshold = np.uint64(((1 << 32) - bound) % bound)
    b = np.uint64(bound)
    pending = np.arange(size)
    while pending.size:
        m = raw_words32(bitgen, pending.size) * b
        ok = (m & np.uint64(0xFFFFFFFF)) >= threshold
        out[pending[ok]] = (m[ok] >> np.uint64(32)).astype(np.int64)
        pending = pending[~ok]
    return out


def random_signs(bitgen: np.random.BitGenerator, size: int) -> np.ndarray:
    """``size`` independent fair signs in {-1, +1}, one raw bit each."""
    raw = np.asarray(bitgen.random_raw((size + 63) // 64), dtype=np.uint64)
    bits = np.unpackbits(raw.view(np.uint8), bitorder="little")[:size]
    return (1 - 2 * bits.astype(np.int8)).astype(np.int8)


def random_permutation(bitgen: np.random.BitGenerator, n: int) -> np.ndarray:
    """Uniform permutation of ``range(n)`` by stable argsort of 64-bit keys."""
    keys = np.asarray(bitgen.random_raw(n), dtype=np.uint64)
    return np.argsort(keys, kind="stable")


def uniform01(bitgen: np.random.BitGenerator, size) -> np.ndarray:
    """Doubles in [0, 1) from the top 53 bits of each raw word."""
    n = int(np.prod(size))
    raw = np.asarray(bitgen.random_raw(n), dtype=np.uint64) >> np.uint64(11)
    return (raw.astype(np.float64) * (1.0 / (1 << 53))).reshape(size)
