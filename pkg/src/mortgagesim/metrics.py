"""Post-hoc evaluation metrics: delinquency, the min-max social index,
product cost, integration over the negative shock grid, Pareto frontiers."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .economy import NEGATIVE_SHOCKS
from .errors import ContractError, GridError, IntegrityError

LOW_INCOME = "low_income"
OTHER = "other"
SHOCK_STEP = 0.1


def delinquency_rate(outcome, groups: Mapping[str, np.ndarray] | None = None) -> tuple[float, dict[str, float]]:
    """Share of borrowers who ever missed a payment, overall and per group.

    ``groups`` maps a label to a boolean membership mask; by default the
    low-income / other split. Empty groups are dropped with a warning.
    """
    flag = np.asarray(outcome.delinquent_ever, dtype=bool)
    if groups is None:
        low = np.asarray(outcome.low_income, dtype=bool)
        groups = {LOW_INCOME: low, OTHER: ~low}
    r = float(flag.mean()) if flag.size else 0.0
    rates = {}
    for name, mask in groups.items():
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            warnings.warn(f"group {name!r} is empty; omitted from the social index", stacklevel=2)
            continue
        rates[name] = float(flag[mask].mean())
    return r, rates


def social_index(rates: Mapping[str, float]) -> float:
    """Worst group delinquency rate (lower is better)."""
    if not rates:
        raise ContractError("social index needs at least one group")
    return max(rates.values())


def borrower_cost(cover_drawn, premium_paid, fees_paid):
    """``C_n = chi(V) - P0 - sum of fees``; zero for anyone never enrolled."""
    return np.asarray(cover_drawn, dtype=np.int64) - np.asarray(premium_paid, dtype=np.int64) - np.asarray(fees_paid, dtype=np.int64)


def product_cost(outcome) -> tuple[np.ndarray, float]:
    """Per-borrower cost in cents and the mean over all borrowers.

    Checks the cover ledger first: drawn + remaining must equal the cover
    granted for enrolled borrowers, and nothing may move for the others.
    """
    enrolled = np.asarray(outcome.enrolled, dtype=bool)
    drawn = np.asarray(outcome.cover_drawn, dtype=np.int64)
    remaining = np.asarray(outcome.cover_remaining, dtype=np.int64)
    total = np.asarray(outcome.cover_total, dtype=np.int64)
    premium = np.asarray(outcome.premium_paid, dtype=np.int64)
    fees = np.asarray(outcome.fees_paid, dtype=np.int64)
    bad = enrolled & (drawn + remaining != total)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise IntegrityError(f"cover ledger broken for borrower {i}: drawn {drawn[i]} + remaining {remaining[i]} != {total[i]}")
    stray = ~enrolled & ((drawn != 0) | (premium != 0) | (fees != 0))
    if stray.any():
        i = int(np.flatnonzero(stray)[0])
        raise IntegrityError(f"borrower {i} never enrolled but has product cash flows")
    if (drawn < 0).any() or (remaining < 0).any():
        raise IntegrityError("negative cover amounts")
    cn = borrower_cost(drawn, premium, fees)
    return cn, float(cn.mean()) if cn.size else 0.0


def _grid_key(s: float) -> float:
    return round(float(s), 1)


def integrate_over_shocks(values: Mapping[float, float]) -> float:
    """Trapezoid rule over the negative shock grid ``-1.0, -0.9, ..., 0``."""
    keyed = {_grid_key(s): v for s, v in values.items()}
    ys = []
    for s in NEGATIVE_SHOCKS:
        if s not in keyed:
            raise GridError(f"missing shock {s} in the evaluation grid")
        ys.append(float(keyed[s]))
    return float(np.trapezoid(ys, dx=SHOCK_STEP))


@dataclass(frozen=True)
class MetricPoint:
    id: str
    coords: tuple[float, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not all(math.isfinite(c) for c in self.coords):
            raise ContractError(f"point {self.id!r} has non-finite coordinates {self.coords}")


def frontier_mask(coords: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """True for rows not dominated by any other row (all objectives minimised)."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    keep = np.ones(n, dtype=bool)
    for start in range(0, n, chunk):
        block = coords[start : start + chunk]
        le = (coords[None, :, :] <= block[:, None, :]).all(axis=2)
        lt = (coords[None, :, :] < block[:, None, :]).any(axis=2)
        keep[start : start + chunk] = ~(le & lt).any(axis=1)
    return keep


def pareto_frontier(points: Sequence[MetricPoint]) -> list[MetricPoint]:
    """Non-dominated subset, in input order. Equal points are all kept."""
    if not points:
        return []
    mask = frontier_mask(np.array([p.coords for p in points]))
    return [p for p, k in zip(points, mask) if k]


@dataclass
class ShockMetrics:
    shock: float
    r: float
    r_group: dict[str, float]
    omega: float
    C: float
    cn_mean: float
    cn_min: float
    cn_p50: float
    cn_max: float
    enrollment: float
    foreclosure: float
    n_borrowers: int


def shock_metrics(shock: float, outcome) -> ShockMetrics:
    r, rg = delinquency_rate(outcome)
    cn, C = product_cost(outcome)
    cn_usd = cn / 100.0
    return ShockMetrics(
        shock=_grid_key(shock),
        r=r,
        r_group=rg,
        omega=social_index(rg),
        C=C / 100.0,
        cn_mean=float(cn_usd.mean()),
        cn_min=float(cn_usd.min()),
        cn_p50=float(np.median(cn_usd)),
        cn_max=float(cn_usd.max()),
        enrollment=float(np.mean(outcome.enrolled)),
        foreclosure=float(np.mean(outcome.foreclosed)),
        n_borrowers=len(cn),
    )


@dataclass
class EvaluationResult:
    """Metrics per shock level plus their integrals over the negative grid.

    Costs are reported in USD.
    """

    product: dict
    per_shock: list[ShockMetrics]
    seeds: list[int]
    episodes: int

    def curve(self, name: str) -> dict[float, float]:
        if name in (LOW_INCOME, OTHER):
            return {m.shock: m.r_group.get(name, float("nan")) for m in self.per_shock}
        return {m.shock: getattr(m, name) for m in self.per_shock}

    @property
    def integrated(self) -> dict[str, float]:
        names = ("r", "omega", "C", LOW_INCOME, OTHER, "enrollment")
        return {k: integrate_over_shocks(self.curve(k)) for k in names}

    def rows(self) -> list[dict]:
        out = []
        for m in self.per_shock:
            out.append(
                {
                    **{k: self.product.get(k) for k in ("p0", "p", "v", "F")},
                    "shock": m.shock,
                    "r": m.r,
                    "r_low_income": m.r_group.get(LOW_INCOME, float("nan")),
                    "r_other": m.r_group.get(OTHER, float("nan")),
                    "omega": m.omega,
                    "C": m.C,
                    "cn_mean": m.cn_mean,
                    "cn_min": m.cn_min,
                    "cn_p50": m.cn_p50,
                    "cn_max": m.cn_max,
                    "enrollment": m.enrollment,
                    "foreclosure": m.foreclosure,
                    "n_borrowers": m.n_borrowers,
                }
            )
        return out

    def summary(self) -> dict:
        return {"product": self.product, "seeds": self.seeds, "episodes": self.episodes, "integrated": self.integrated}
