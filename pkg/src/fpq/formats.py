"""Sub-byte floating-point codecs.

Encode/decode and grid enumeration for EjMk micro-float formats (1 sign
bit, j exponent bits, k mantissa bits), following the OCP microscaling
encoding rule: normal values decode to (1 + M/2^k) * 2^(E-bias) and the
E == 0 field is subnormal, decoding to (M/2^k) * 2^(1-bias).  None of the
shipped formats reserve encodings for Inf or NaN, so every bit pattern
decodes to a finite real number.

The value grid is symmetric about zero and there are two zero encodings
(both sign values with E = M = 0); ``encode`` always emits the all-zeros
pattern so lookup tables never see the redundant code.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "FpFormat",
    "FpCode",
    "FORMATS",
    "E1M2",
    "E2M1",
    "E3M0",
    "E2M3",
    "E3M2",
    "E3M4",
    "E4M3",
    "get_format",
    "grid_values",
    "max_value",
    "decode",
    "decode_bits",
    "encode",
    "nearest_codes",
    "round_to_grid",
    "code_dtype",
]


@dataclass(frozen=True)
class FpFormat:
    """An EjMk micro-float format descriptor."""

    name: str
    exp_bits: int
    man_bits: int
    bias: int

    def __post_init__(self) -> None:
        if self.exp_bits < 0 or self.man_bits < 0:
            raise ValueError(f"field widths must be non-negative: {self}")
        if self.exp_bits + self.man_bits == 0:
            raise ValueError("format needs at least one magnitude bit")

    @property
    def width(self) -> int:
        """Total code width in bits (sign + exponent + mantissa)."""
        return 1 + self.exp_bits + self.man_bits

    @property
    def code_count(self) -> int:
        return 1 << self.width


@dataclass(frozen=True)
class FpCode:
    """One encoded value: a bit pattern tied to its format."""

    bits: int
    format: FpFormat

    def __post_init__(self) -> None:
        if not 0 <= self.bits < self.format.code_count:
            raise ValueError(
                f"code {self.bits:#x} out of range for {self.format.name}"
            )


# Biases: E2M3, E3M2, and E4M3 follow the OCP MX definitions; E2M1 bias=1
# reproduces the reference FP4 grid, and E1M2 bias=0 / E3M0 bias=3 are the
# unique biases whose decoded grids match it as well.  E3M4 (bias 3) is the
# product format of the mixed-grid hardware path: four mantissa bits cover
# every E1M2 x E2M1 significand product exactly, which E4M3 cannot.
E1M2 = FpFormat("E1M2", 1, 2, 0)
E2M1 = FpFormat("E2M1", 2, 1, 1)
E3M0 = FpFormat("E3M0", 3, 0, 3)
E2M3 = FpFormat("E2M3", 2, 3, 1)
E3M2 = FpFormat("E3M2", 3, 2, 3)
E3M4 = FpFormat("E3M4", 3, 4, 3)
E4M3 = FpFormat("E4M3", 4, 3, 7)

FORMATS: dict[str, FpFormat] = {
    f.name: f for f in (E1M2, E2M1, E3M0, E2M3, E3M2, E3M4, E4M3)
}


def get_format(name: str) -> FpFormat:
    """Look up a shipped format by name, e.g. ``"E2M1"``."""
    try:
        return FORMATS[name]
    except KeyError:
        raise ValueError(
            f"unknown format {name!r}; available: {sorted(FORMATS)}"
        ) from None


@lru_cache(maxsize=None)
def _magnitudes(fmt: FpFormat) -> np.ndarray:
    """Non-negative grid magnitudes, ascending.

    Index i equals the magnitude bits (E << k) | M of the code, so the
    position of a value in this table is also its code with sign 0.
    """
    k = fmt.man_bits
    idx = np.arange(1 << (fmt.exp_bits + k))
    exp = idx >> k
    mant = (idx & ((1 << k) - 1)) / (1 << k)
    vals = np.where(
        exp > 0,
        np.ldexp(1.0 + mant, exp - fmt.bias),
        np.ldexp(mant, 1 - fmt.bias),
    )
    vals.flags.writeable = False
    return vals


@lru_cache(maxsize=None)
def _decode_table(fmt: FpFormat) -> np.ndarray:
    """Decoded value for every bit pattern (negative zero decodes to +0)."""
    mags = _magnitudes(fmt)
    table = np.concatenate([mags, -mags])
    table[table == 0.0] = 0.0
    table.flags.writeable = False
    return table


def grid_values(fmt: FpFormat) -> np.ndarray:
    """All distinct decodable values, ascending (2**width - 1 of them)."""
    mags = _magnitudes(fmt)
    return np.concatenate([-mags[:0:-1], mags])


def max_value(fmt: FpFormat) -> float:
    """Largest representable magnitude of the format."""
    return float(_magnitudes(fmt)[-1])


def decode(code: FpCode) -> float:
    """Decode one code to its exact real value."""
    return float(_decode_table(code.format)[code.bits])


def decode_bits(fmt: FpFormat, bits):
    """Decode bit patterns (scalar or array) to values in ``fmt``."""
    table = _decode_table(fmt)
    arr = np.asarray(bits)
    if np.any(arr >= fmt.code_count) or np.any(arr < 0):
        raise ValueError(f"bit pattern out of range for {fmt.name}")
    out = table[arr]
    return float(out) if np.ndim(bits) == 0 else out


def encode(fmt: FpFormat, value: float) -> FpCode:
    """Encode a value that lies exactly on the grid of ``fmt``.

    Zero always encodes to the all-zeros pattern.  Off-grid values raise;
    callers that need rounding must go through ``round_to_grid`` first.
    """
    if not np.isfinite(value):
        raise ValueError(f"cannot encode non-finite value {value!r}")
    mags = _magnitudes(fmt)
    mag = abs(value)
    i = int(np.searchsorted(mags, mag))
    if i == len(mags) or mags[i] != mag:
        raise ValueError(f"{value!r} is not on the {fmt.name} grid")
    bits = i
    if value < 0 and i > 0:
        bits |= 1 << (fmt.exp_bits + fmt.man_bits)
    return FpCode(bits, fmt)


def _nearest_indices(fmt: FpFormat, mag: np.ndarray) -> np.ndarray:
    """Index of the nearest grid magnitude; exact ties pick the even index.

    Adjacent magnitudes have adjacent codes, so exactly one side of a tie
    has an even magnitude code (round-half-to-even in code space).
    Magnitudes beyond the grid maximum saturate to the last index.
    """
    mags = _magnitudes(fmt)
    m = np.minimum(mag, mags[-1])
    hi = np.minimum(np.searchsorted(mags, m), len(mags) - 1)
    lo = np.maximum(hi - 1, 0)
    d_lo = m - mags[lo]
    d_hi = mags[hi] - m
    idx = np.where(d_hi < d_lo, hi, lo)
    tie = d_hi == d_lo
    return np.where(tie, np.where(lo % 2 == 0, lo, hi), idx)


def round_to_grid(fmt: FpFormat, x):
    """Round scalars or arrays to the nearest grid value of ``fmt``.

    Saturates beyond +-max_value; exact ties resolve to the neighbor whose
    magnitude code is even, applied per magnitude so the result is odd
    symmetric in the input.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("round_to_grid requires finite input")
    mags = _magnitudes(fmt)
    idx = _nearest_indices(fmt, np.abs(arr))
    out = np.where((arr < 0) & (idx > 0), -mags[idx], mags[idx])
    return float(out) if np.ndim(x) == 0 else out


def code_dtype(fmt: FpFormat) -> type:
    """Narrowest unsigned dtype that holds a code of ``fmt``."""
    if fmt.width <= 8:
        return np.uint8
    if fmt.width <= 16:
        return np.uint16
    return np.uint32


def nearest_codes(fmt: FpFormat, x) -> np.ndarray:
    """Bit patterns of the nearest grid values (canonical zero).

    Same rounding as ``round_to_grid`` but returning codes directly; this
    is the hot path used by the quantizers.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("nearest_codes requires finite input")
    idx = _nearest_indices(fmt, np.abs(arr))
    sign = ((arr < 0) & (idx > 0)).astype(np.int64)
    codes = (sign << (fmt.exp_bits + fmt.man_bits)) | idx
    return codes.astype(code_dtype(fmt))
