"""The economy agent: income shocks and the foreclosure-driven house price index."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .money import mul_cents

SHOCK_SET = tuple(round(-1.0 + 0.1 * i, 1) for i in range(21))
NEGATIVE_SHOCKS = tuple(s for s in SHOCK_SET if s <= 0)
DEFAULT_SHOCK_PROBABILITY = 1.0 / 12.0
DEFAULT_FORECLOSURE_IMPACT = 0.01
HPI_FLOOR = 1e-6


class ShockMode(str, enum.Enum):
    TRAINING = "training"
    SCRIPTED = "scripted"


@dataclass(frozen=True)
class ShockConfig:
    shock_set: tuple[float, ...] = SHOCK_SET
    per_step_probability: float = DEFAULT_SHOCK_PROBABILITY
    mode: ShockMode = ShockMode.TRAINING
    scripted: tuple[tuple[int, float], ...] = ()
    # fraction of borrowers hit by a scripted shock; 1.0 makes it systemic
    affected_fraction: float = 1.0

    def __post_init__(self):
        if any(not -1.0 <= s <= 1.0 for s in self.shock_set):
            raise ValidationError("shock_set", "every shock must lie in [-1, 1]")
        if not 0.0 <= self.per_step_probability <= 1.0:
            raise ValidationError("per_step_probability", "must lie in [0, 1]")
        times = [t for t, _ in self.scripted]
        if len(set(times)) != len(times):
            raise ValidationError("scripted", "shock times must be unique")
        if any(not -1.0 <= s <= 1.0 for _, s in self.scripted):
            raise ValidationError("scripted", "every shock must lie in [-1, 1]")
        if not 0.0 <= self.affected_fraction <= 1.0:
            raise ValidationError("affected_fraction", "must lie in [0, 1]")

    @classmethod
    def evaluation(cls, t_s: int, s: float, affected_fraction: float = 1.0) -> "ShockConfig":
        return cls(mode=ShockMode.SCRIPTED, scripted=((t_s, s),), affected_fraction=affected_fraction)


@dataclass(frozen=True)
class EconomyState:
    hpi_h: float = 1.0
    foreclosure_impact_delta: float = DEFAULT_FORECLOSURE_IMPACT
    foreclosures_last_step: int = 0
    hpi_floor: float = field(default=HPI_FLOOR, repr=False)


def sample_shock(config: ShockConfig, t: int, rng: np.random.Generator | None = None) -> float | None:
    """Shock size for one borrower at month ``t``, or ``None``."""
    if config.mode is ShockMode.SCRIPTED:
        for t_s, s in config.scripted:
            if t_s == t:
                return s
        return None
    if rng.random() < config.per_step_probability:
        return config.shock_set[int(rng.integers(len(config.shock_set)))]
    return None


def sample_shocks(config: ShockConfig, t: int, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Vectorised :func:`sample_shock` for ``n`` borrowers; NaN marks no shock.

    Training mode always consumes ``2n`` draws so the stream position does not
    depend on outcomes.
    """
    if config.mode is ShockMode.SCRIPTED:
        s = sample_shock(config, t)
        return np.full(n, np.nan if s is None else s)
    hit = rng.random(n) < config.per_step_probability
    idx = rng.integers(len(config.shock_set), size=n)
    return np.where(hit, np.asarray(config.shock_set)[idx], np.nan)


def apply_shock(income, s):
    """``I_t = I_{t-1} * (1 + s)`` in cents, never negative."""
    out = mul_cents(income, 1.0 + np.asarray(s, dtype=np.float64))
    return np.maximum(out, 0) if isinstance(out, np.ndarray) else max(out, 0)


def update_hpi(state: EconomyState, foreclosures: int) -> EconomyState:
    """``h_t = h_{t-1} * (1 - foreclosures * delta)``, floored to stay positive."""
    if foreclosures < 0:
        raise ValidationError("foreclosures", "must be non-negative")
    h = state.hpi_h * (1.0 - foreclosures * state.foreclosure_impact_delta)
    return replace(state, hpi_h=max(h, state.hpi_floor), foreclosures_last_step=foreclosures)


def update_hpi_array(h: np.ndarray, foreclosures: np.ndarray, delta: float, floor: float = HPI_FLOOR) -> np.ndarray:
    return np.maximum(h * (1.0 - foreclosures * delta), floor)
