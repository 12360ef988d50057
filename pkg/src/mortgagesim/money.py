"""Money helpers. All balances are held as integer cents."""

from __future__ import annotations

import numpy as np

CENTS = 100


def to_cents(usd: float) -> int:
    return int(round(usd * CENTS))


def to_usd(cents) -> float:
    return float(cents) / CENTS


def mul_cents(cents, factor):
    """Multiply cent amounts by a real factor, rounding half away from zero."""
    x = np.asarray(cents, dtype=np.float64) * factor
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    out = out.astype(np.int64)
    return int(out) if out.ndim == 0 else out
