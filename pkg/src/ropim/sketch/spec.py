"""Count-sketch specifications: drawing, dense form and binary serialization."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Union

import numpy as np

from ropim import rng
from ropim.errors import DomainError, FormatError

Ratio = Union[float, Fraction, int]

MAGIC = b"RSKT"
VERSION = 1


class Mode(enum.IntEnum):
    """How the retraction normalizes a bucket.

    PAPER_SCALED uses the constant K'/K for every bucket. EXACT_PROJECTOR
    divides by the bucket occupancy, which makes the round trip the
    orthogonal projector onto the row space of P.
    """

    PAPER_SCALED = 0
    EXACT_PROJECTOR = 1

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            key = value.strip().lower()
            aliases = {"paper": cls.PAPER_SCALED, "paper_scaled": cls.PAPER_SCALED,
                       "paperscaled": cls.PAPER_SCALED, "exact": cls.EXACT_PROJECTOR,
                       "exact_projector": cls.EXACT_PROJECTOR,
                       "exactprojector": cls.EXACT_PROJECTOR}
            if key in aliases:
                return aliases[key]
            raise ValueError(f"unknown sketch mode {value!r}")
        return cls(int(value))

    @property
    def flag(self) -> str:
        return "paper" if self is Mode.PAPER_SCALED else "exact"


def as_ratio(rho: Ratio) -> Fraction:
    """Exact rational form of a ratio. Strings like ``"1/7"`` or ``"0.143"`` are accepted."""
    if isinstance(rho, Fraction):
        return rho
    if isinstance(rho, str):
        return Fraction(rho.strip())
    if isinstance(rho, (int, np.integer)):
        return Fraction(int(rho))
    if isinstance(rho, (float, np.floating)):
        if not math.isfinite(rho):
            raise DomainError(f"rho must be finite, got {rho}")
        # Decimal literal the user typed (0.25), not its binary expansion.
        return Fraction(repr(float(rho)))
    raise TypeError(f"unsupported ratio type {type(rho).__name__}")


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def sketch_size(K: int, rho: Ratio) -> int:
    """Number of buckets K' = max(1, round(rho * K)), rounding halves up."""
    r = as_ratio(rho)
    if not (0 < r <= 1):
        raise DomainError(f"rho must lie in (0, 1], got {float(r)}")
    if K < 1:
        raise DomainError(f"K must be >= 1, got {K}")
    return max(1, round_half_up(r * K))


@dataclass(frozen=True, eq=False)
class SketchSpec:
    """A drawn count sketch (h, s).

    ``h`` holds 1-based bucket indices in ``[1, K_out]``; ``s`` holds signs.
    Both arrays are read-only. ``h0`` is the 0-based copy the kernels use.
    """

    h: np.ndarray
    s: np.ndarray
    K: int
    K_out: int
    rho: Fraction
    mode: Mode = Mode.PAPER_SCALED
    h0: np.ndarray = field(init=False, repr=False)
    counts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        h = np.array(self.h, dtype=np.int64).reshape(-1)
        s = np.array(self.s, dtype=np.int8).reshape(-1)
        if h.size != self.K or s.size != self.K:
            raise DomainError(f"h and s must have length K={self.K}, got {h.size}, {s.size}")
        if self.K_out < 1 or self.K_out > self.K:
            raise DomainError(f"K_out must lie in [1, K], got {self.K_out}")
        if h.size and (h.min() < 1 or h.max() > self.K_out):
            raise DomainError("bucket indices must lie in [1, K_out]")
        if not np.all((s == 1) | (s == -1)):
            raise DomainError("signs must be -1 or +1")
        h0 = (h - 1).astype(np.int32)
        counts = np.bincount(h0, minlength=self.K_out).astype(np.int64)
        for arr in (h, s, h0, counts):
            arr.setflags(write=False)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "h0", h0)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "rho", as_ratio(self.rho))
        object.__setattr__(self, "mode", Mode.parse(self.mode))

    @classmethod
    def from_arrays(cls, h, s, K_out: int, mode=Mode.PAPER_SCALED) -> "SketchSpec":
        """Build a spec from explicit 1-based ``h`` and signs ``s``."""
        h = np.asarray(h)
        return cls(h=h, s=s, K=int(h.size), K_out=int(K_out),
                   rho=Fraction(int(K_out), int(h.size)), mode=mode)

    def with_mode(self, mode) -> "SketchSpec":
        return SketchSpec(h=self.h, s=self.s, K=self.K, K_out=self.K_out,
                          rho=self.rho, mode=mode)

    @property
    def bucket_scale(self) -> np.ndarray:
        """Per-bucket factor applied by the retraction."""
        if self.mode is Mode.PAPER_SCALED:
            return np.full(self.K_out, self.K_out / self.K)
        c = self.counts.astype(np.float64)
        scale = np.zeros(self.K_out)
        np.divide(1.0, c, out=scale, where=c > 0)
        return scale

    def __eq__(self, other):
        if not isinstance(other, SketchSpec):
            return NotImplemented
        return (self.K == other.K and self.K_out == other.K_out and self.rho == other.rho
                and self.mode == other.mode and np.array_equal(self.h, other.h)
                and np.array_equal(self.s, other.s))

    def __hash__(self):
        return hash((self.K, self.K_out, self.mode, self.h.tobytes(), self.s.tobytes()))


def draw_sketch(K: int, rho: Ratio, seed, mode=Mode.PAPER_SCALED) -> SketchSpec:
    """Draw h uniformly over the buckets and s uniformly over {-1, +1}.

    ``seed`` is a 64-bit integer or a Philox stream; the result is a pure
    function of ``(K, rho, seed)``.
    """
    K_out = sketch_size(K, rho)
    bitgen = rng.philox(seed)
    h0 = rng.uniform_below(bitgen, K_out, K)
    s = rng.random_signs(bitgen, K)
    return SketchSpec(h=h0 + 1, s=s, K=K, K_out=K_out, rho=as_ratio(rho), mode=mode)


def draw_sketch_arrays(K: int, rho: Ratio, seed, count: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Draw ``count`` independent sketches from one stream as stacked arrays.

    Returns ``(H0, S, K_out)`` with 0-based ``H0`` of shape (count, K). Used by
    the Monte-Carlo checks, where building ``count`` spec objects is wasteful.
    """
    K_out = sketch_size(K, rho)
    bitgen = rng.philox(seed)
    H0 = rng.uniform_below(bitgen, K_out, K * count).reshape(count, K).astype(np.int32)
    S = rng.random_signs(bitgen, K * count).reshape(count, K)
    return H0, S, K_out


def as_dense(spec: SketchSpec) -> np.ndarray:
    """The K' x K matrix with ``P[h_j - 1, j] = s_j`` and zeros elsewhere."""
    P = np.zeros((spec.K_out, spec.K))
    P[spec.h0, np.arange(spec.K)] = spec.s
    return P


def signed_permutation(perm, signs, mode=Mode.PAPER_SCALED) -> SketchSpec:
    """Lossless spec with K' = K; ``perm`` gives each input's 0-based bucket."""
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(perm.size)):
        raise DomainError("perm must be a permutation of range(K)")
    return SketchSpec.from_arrays(perm + 1, signs, K_out=perm.size, mode=mode)


def simplest_ratio(value: float) -> Fraction:
    """Smallest-denominator fraction (searched over powers of two) that rounds to ``value``.

    The file stores rho as f64, so 1/7 comes back as 1/7 rather than its
    binary expansion.
    """
    exact = Fraction(value)
    bound = 1
    while bound < exact.denominator:
        cand = exact.limit_denominator(bound)
        if float(cand) == value:
            return cand
        bound *= 2
    return exact


def to_bytes(spec: SketchSpec) -> bytes:
    header = struct.pack("<4sIIIdB", MAGIC, VERSION, spec.K, spec.K_out,
                         float(spec.rho), int(spec.mode))
    return (header + spec.h.astype("<u4").tobytes() + spec.s.astype("i1").tobytes())


def from_bytes(data: bytes) -> SketchSpec:
    head = struct.calcsize("<4sIIIdB")
    if len(data) < head:
        raise FormatError(f"sketch blob too short ({len(data)} bytes)")
    magic, version, K, K_out, rho, mode = struct.unpack_from("<4sIIIdB", data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported sketch version {version}")
    if len(data) != head + 5 * K:
        raise FormatError(f"expected {head + 5 * K} bytes for K={K}, got {len(data)}")
    h = np.frombuffer(data, dtype="<u4", count=K, offset=head).astype(np.int64)
    s = np.frombuffer(data, dtype="i1", count=K, offset=head + 4 * K)
    try:
        return SketchSpec(h=h, s=s, K=K, K_out=K_out,
                          rho=simplest_ratio(rho), mode=Mode(mode))
    except (DomainError, ValueError) as exc:
        raise FormatError(f"invalid sketch payload: {exc}") from exc


def save(spec: SketchSpec, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(spec))


def load(path) -> SketchSpec:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
