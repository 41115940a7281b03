from __future__ import annotations

from decimal import ROUND_DOWN, ROUND_HALF_UP, Decimal

_MODES = {"half_up": ROUND_HALF_UP, "down": ROUND_DOWN}


def round_decimal(x: float, places: int = 1, mode: str = "half_up") -> Decimal:
    """Round the shortest decimal repr of ``x`` (not its binary value)."""
    q = Decimal(1).scaleb(-places)
    return Decimal(repr(float(x))).quantize(q, rounding=_MODES[mode])


def fmt_fixed(x: float, places: int = 1, mode: str = "half_up") -> str:
    return str(round_decimal(x, places, mode))


def fmt_pct(fraction: float, places: int = 1, mode: str = "half_up") -> str:
    """Format a ratio in [0, 1] as a percentage string, e.g. ``0.3565 -> '35.7'``."""
    pct = Decimal(repr(float(fraction))) * 100
    q = Decimal(1).scaleb(-places)
    return str(pct.quantize(q, rounding=_MODES[mode]))
