"""Score-gated weight codec.

A 16-bit weight splits into two bytes: an 8-bit low part shaped like a
narrow float (sign, four low exponent bits, three high mantissa bits) and a
residual byte holding the four high exponent bits plus the four low mantissa
bits. Both bytes together reassemble the original value exactly. The low
part alone is a usable FP8 approximation once the high exponent bits are
reconstructed from a per-layer exponent window; weights whose exponent falls
outside the window are recorded in a small outlier table.

Experts whose routing score clears a threshold are fetched at full width;
the rest fetch only the low bytes, halving their memory traffic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError

EXP_WINDOW = 16  # exponents representable by the four low bits
EXP_MAX = 0xFF
SCORE_THRESHOLD = 0.45

_MAP_MAGIC = b"EXPM"
_MAP_VERSION = 1


def bf16_from_float(x) -> np.ndarray:
    """Round float32 values to their nearest 16-bit truncated-float pattern."""
    x = np.asarray(x, dtype=np.float32)
    u = x.view(np.uint32)
    # round to nearest even on the dropped half
    rounded = u + 0x7FFF + ((u >> 16) & 1)
    return (rounded >> 16).astype(np.uint16)


def float_from_bf16(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.uint16)
    return (u.astype(np.uint32) << 16).view(np.float32)


def split_fields(u: np.ndarray):
    """(sign, exponent, mantissa) fields of 16-bit patterns."""
    u = np.asarray(u, dtype=np.uint16)
    sign = (u >> 15) & 0x1
    exp = (u >> 7) & 0xFF
    mant = u & 0x7F
    return sign, exp, mant


def encode(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split 16-bit patterns into (low_byte, residual_byte) arrays."""
    sign, exp, mant = split_fields(u)
    low = ((sign << 7) | ((exp & 0xF) << 3) | (mant >> 4)).astype(np.uint8)
    residual = (((exp >> 4) << 4) | (mant & 0xF)).astype(np.uint8)
    return low, residual


def combine(low: np.ndarray, residual: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`encode`."""
    low = np.asarray(low, dtype=np.uint16)
    residual = np.asarray(residual, dtype=np.uint16)
    sign = (low >> 7) & 0x1
    exp = ((residual >> 4) << 4) | ((low >> 3) & 0xF)
    mant = ((low & 0x7) << 4) | (residual & 0xF)
    return ((sign << 15) | (exp << 7) | mant).astype(np.uint16)


@dataclass(frozen=True)
class RegularMap:
    """Reconstruction rule for the high exponent bits of one layer.

    With the window starting at `exp_min`, low bits at or above the pivot
    belong to the window's first high-nibble and lower ones to the next.
    """

    exp_min: int

    def __post_init__(self):
        if not 0 <= self.exp_min <= EXP_MAX - (EXP_WINDOW - 1):
            raise ConfigurationError("exponent window start out of range")

    @property
    def pivot(self) -> int:
        return self.exp_min & 0xF

    @property
    def high_geq(self) -> int:
        return self.exp_min >> 4

    @property
    def high_below(self) -> int:
        return (self.exp_min >> 4) + 1

    def contains(self, exp) -> np.ndarray:
        exp = np.asarray(exp)
        return (exp >= self.exp_min) & (exp < self.exp_min + EXP_WINDOW)

    def reconstruct_exp(self, exp_low) -> np.ndarray:
        exp_low = np.asarray(exp_low)
        high = np.where(exp_low < self.pivot, self.high_below, self.high_geq)
        return ((high << 4) | exp_low).astype(exp_low.dtype)


def window_coverage(exps: np.ndarray, exp_min: int) -> float:
    exps = np.asarray(exps)
    if exps.size == 0:
        raise ShapeError("cannot profile an empty exponent set")
    inside = (exps >= exp_min) & (exps < exp_min + EXP_WINDOW)
    return float(inside.mean())


def profile_exponents(exps: np.ndarray) -> tuple[int, float]:
    """Best 16-wide exponent window: max coverage, ties to the lowest start.

    All 241 candidate starts are scored with one histogram pass.
    """
    exps = np.asarray(exps)
    if exps.size == 0:
        raise ShapeError("cannot profile an empty exponent set")
    hist = np.bincount(exps.astype(np.int64).ravel(), minlength=256)
    windows = np.convolve(hist, np.ones(EXP_WINDOW, dtype=np.int64), mode="valid")
    exp_min = int(np.argmax(windows))  # argmax takes the first = smallest start
    return exp_min, float(windows[exp_min] / exps.size)


def build_map(values: np.ndarray) -> tuple[RegularMap, dict[int, int], float]:
    """Profile one layer's weights: window map, outlier table, coverage."""
    values = np.asarray(values, dtype=np.uint16).ravel()
    _, exp, _ = split_fields(values)
    exp_min, coverage = profile_exponents(exp)
    rmap = RegularMap(exp_min)
    outside = ~rmap.contains(exp)
    addrs = np.flatnonzero(outside)
    outliers = {int(a): int(exp[a] >> 4) for a in addrs}
    return rmap, outliers, coverage


def decode_low(low: np.ndarray, rmap: RegularMap, outliers: dict[int, int] | None = None) -> np.ndarray:
    """Reassemble 16-bit patterns from low bytes alone.

    High exponent bits come from the window rule, overridden per address by
    the outlier table. Low mantissa bits are gone, so they read back as zero.
    """
    low = np.asarray(low, dtype=np.uint16)
    sign = (low >> 7) & 0x1
    exp_low = (low >> 3) & 0xF
    mant_hi = low & 0x7
    exp = rmap.reconstruct_exp(exp_low).astype(np.uint16)
    if outliers:
        for addr, high in outliers.items():
            exp[addr] = (high << 4) | int(exp_low[addr])
    return ((sign << 15) | (exp << 7) | (mant_hi << 4)).astype(np.uint16)


def gate_precision(score: float, threshold: float = SCORE_THRESHOLD, shared: bool = False) -> str:
    """Fetch width for one expert given its highest normalized routing score."""
    if shared:
        return "bf16"
    return "fp8" if score < threshold else "bf16"


def write_map_file(path, layers: list[tuple[RegularMap, dict[int, int]]]) -> None:
    """Serialize per-layer window maps and outlier tables (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(_MAP_MAGIC)
        fh.write(struct.pack("<HI", _MAP_VERSION, len(layers)))
        for rmap, outliers in layers:
            fh.write(struct.pack(
                "<BBBBQ", rmap.exp_min, rmap.pivot, rmap.high_below,
                rmap.high_geq, len(outliers),
            ))
            for addr in sorted(outliers):
                fh.write(struct.pack("<QB", addr, outliers[addr]))


def read_map_file(path) -> list[tuple[RegularMap, dict[int, int]]]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAP_MAGIC:
            raise ConfigurationError("not an exponent map file")
        version, n_layers = struct.unpack("<HI", fh.read(6))
        if version != _MAP_VERSION:
            raise ConfigurationError(f"unsupported map file version {version}")
        layers = []
        for _ in range(n_layers):
            exp_min, pivot, high_below, high_geq, count = struct.unpack("<BBBBQ", fh.read(12))
            rmap = RegularMap(exp_min)
            if (pivot, high_below, high_geq) != (rmap.pivot, rmap.high_below, rmap.high_geq):
                raise ConfigurationError("corrupt map record: derived fields disagree")
            outliers = {}
            for _ in range(count):
                addr, high = struct.unpack("<QB", fh.read(9))
                outliers[addr] = high
            layers.append((rmap, outliers))
        return layers
