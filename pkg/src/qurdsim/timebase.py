"""Fixed-point virtual time.

All simulation timestamps are integer counts of micro-units (1 time unit =
1_000_000 micro-units).  Integer arithmetic keeps clock-guard comparisons
exact and traces byte-stable across platforms; floats never enter the clock.
"""

from __future__ import annotations

from fractions import Fraction

MICRO = 1_000_000

Time = int  # micro-units


def units(value) -> Time:
    """Convert a duration given in time units into micro-units.

    Accepts int, Fraction, decimal strings ("1.5") and floats (converted
    through their shortest decimal repr, so 0.1 means one tenth exactly).
    The result must land on a whole micro-unit.
    """
    if isinstance(value, bool):
        raise TypeError("time value cannot be a bool")
    if isinstance(value, int):
        frac = Fraction(value)
    elif isinstance(value, Fraction):
        frac = value
    elif isinstance(value, float):
        frac = Fraction(repr(value))
    elif isinstance(value, str):
        frac = Fraction(value)
    else:
        raise TypeError(f"cannot interpret {value!r} as time units")
    micro = frac * MICRO
    if micro.denominator != 1:
        raise ValueError(f"{value!r} is finer than one micro-unit")
    return int(micro)


def fmt(t: Time) -> str:
    """Render micro-units as decimal time units without trailing zeros."""
    sign = "-" if t < 0 else ""
    t = abs(t)
    whole, frac = divmod(t, MICRO)
    if frac == 0:
        return f"{sign}{whole}"
    digits = f"{frac:06d}".rstrip("0")
    return f"{sign}{whole}.{digits}"


def parse(text: str) -> Time:
    """Inverse of :func:`fmt`; exact for any decimal with <= 6 places."""
    return units(text)
