"""Parameterised mortgage assistance products and the per-borrower cover ledger.

A product is ``(P0, Pt, V, F)``: an upfront premium, a monthly fee, a total
cover amount and (optionally) a number of product forbearance months. All
absolute amounts are integer cents. Configs and result rows carry the scaled
form ``(p0, p, v, F)`` which is turned into cents per borrower through the
borrower's monthly payment ``m``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace

from .errors import ContractError, LedgerError, ValidationError
from .money import mul_cents

COVID_FORBEARANCE_MONTHS = (3, 6, 12)


@dataclass(frozen=True)
class Product:
    upfront_premium_P0: int = 0
    monthly_fee_Pt: int = 0
    total_cover_V: int = 0
    forbearance_months_F: int = 0

    def __post_init__(self):
        for name in ("upfront_premium_P0", "monthly_fee_Pt", "total_cover_V", "forbearance_months_F"):
            if getattr(self, name) < 0:
                raise ValidationError(name, "must be non-negative")

    @property
    def is_null(self) -> bool:
        return not (self.upfront_premium_P0 or self.monthly_fee_Pt or self.total_cover_V or self.forbearance_months_F)


NULL_PRODUCT = Product()


@dataclass(frozen=True)
class ScaledProductParams:
    """Product expressed relative to the monthly payment: the flat config record."""

    p0: float = 0.0
    p: float = 0.0
    v: float = 0.0
    F: int = 0

    def validate(self, horizon: int | None = None) -> "ScaledProductParams":
        for name in ("p0", "p"):
            x = getattr(self, name)
            if not (0.0 <= x <= 1.0) or not math.isfinite(x):
                raise ValidationError(name, f"must lie in [0, 1], got {x!r}")
        upper = math.inf if horizon is None else horizon
        if not (0.0 <= self.v <= upper) or math.isnan(self.v):
            raise ValidationError("v", f"must lie in [0, {upper}], got {self.v!r}")
        if self.F < 0:
            raise ValidationError("F", "must be non-negative")
        return self

    @property
    def is_null(self) -> bool:
        return self.p0 == 0 and self.p == 0 and self.v == 0 and self.F == 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScaledProductParams":
        return cls(float(d.get("p0", 0.0)), float(d.get("p", 0.0)), float(d.get("v", 0.0)), int(d.get("F", 0)))


def scale_product(params: ScaledProductParams, m: int, horizon: int | None = None) -> Product:
    """``P0 = p0*m``, ``Pt = p*m``, ``V = v*m`` (rounded to the cent)."""
    params.validate(horizon)
    if m <= 0:
        raise ValidationError("m", "monthly payment must be positive")
    return Product(mul_cents(m, params.p0), mul_cents(m, params.p), mul_cents(m, params.v), params.F)


class SpecialKind(str, enum.Enum):
    MRA = "mra"
    MATCHED_MRA = "matched_mra"
    COVID = "covid"
    NULL = "null"


def make_special(kind: SpecialKind | str, x: int = 0, F: int = 0) -> Product:
    """Known products as special cases. ``x`` is in cents, ``F`` in months."""
    kind = SpecialKind(kind)
    if kind in (SpecialKind.MRA, SpecialKind.MATCHED_MRA) and x < 0:
        raise ValidationError("x", "reserve amount must be non-negative")
    if kind is SpecialKind.MRA:
        return Product(0, 0, x, 0)
    if kind is SpecialKind.MATCHED_MRA:
        return Product(x, 0, 2 * x, 0)
    if kind is SpecialKind.COVID:
        if F not in COVID_FORBEARANCE_MONTHS:
            raise ValidationError("F", f"COVID forbearance must be one of {COVID_FORBEARANCE_MONTHS}, got {F!r}")
        return Product(0, 0, 0, F)
    return NULL_PRODUCT


@dataclass(frozen=True)
class CoverLedger:
    enrolled: bool = False
    enrollment_step: int | None = None  # i_n; None means never
    total_cover: int = 0
    cover_remaining: int = 0
    premium_paid: int = 0
    fees_paid: int = 0
    fees_unpaid: int = 0
    cover_drawn_by_step: dict[int, int] = field(default_factory=dict)

    @property
    def cover_drawn(self) -> int:
        return sum(self.cover_drawn_by_step.values())

    @property
    def fees_paid_total(self) -> int:
        return self.premium_paid + self.fees_paid

    def check(self) -> None:
        if self.cover_drawn + self.cover_remaining != self.total_cover or self.cover_remaining < 0:
            raise LedgerError(
                f"cover conservation broken: drawn {self.cover_drawn} + remaining "
                f"{self.cover_remaining} != V {self.total_cover}"
            )
        if self.enrollment_step is not None and any(t < self.enrollment_step for t in self.cover_drawn_by_step):
            raise LedgerError("cover drawn before enrollment")


def enroll(ledger: CoverLedger, product: Product, t: int) -> CoverLedger:
    """Opt in at month ``t``; the premium is recorded as paid. Irreversible."""
    if ledger.enrolled:
        raise ContractError("already enrolled")
    if product.is_null:
        raise ContractError("cannot enroll in the null product")
    return replace(
        ledger,
        enrolled=True,
        enrollment_step=t,
        total_cover=product.total_cover_V,
        cover_remaining=product.total_cover_V,
        premium_paid=product.upfront_premium_P0,
    )


def draw_cover(ledger: CoverLedger, shortfall: int, cap: int, t: int = 0) -> tuple[int, CoverLedger]:
    """Draw ``min(shortfall, cover_remaining, cap)`` for month ``t``."""
    if not ledger.enrolled:
        raise ContractError("draw_cover called on an unenrolled ledger")
    if shortfall < 0 or cap < 0:
        raise ContractError("shortfall and cap must be non-negative")
    draw = min(shortfall, ledger.cover_remaining, cap)
    if draw == 0:
        return 0, ledger
    by_step = dict(ledger.cover_drawn_by_step)
    by_step[t] = by_step.get(t, 0) + draw
    return draw, replace(ledger, cover_remaining=ledger.cover_remaining - draw, cover_drawn_by_step=by_step)


def record_fee(ledger: CoverLedger, owed: int, paid: int) -> CoverLedger:
    if not ledger.enrolled:
        raise ContractError("fees accrue only while enrolled")
    if not 0 <= paid <= owed:
        raise ContractError(f"fee paid {paid} outside [0, {owed}]")
    return replace(ledger, fees_paid=ledger.fees_paid + paid, fees_unpaid=ledger.fees_unpaid + owed - paid)


def monthly_housing_expense(product: Product, ledger: CoverLedger, m: int, cover_draw: int) -> int:
    """``E^h = m + Pt - chi_t`` for an enrolled borrower, ``m`` otherwise.

    ``ledger`` is the state before the draw was taken.
    """
    if not ledger.enrolled:
        if cover_draw:
            raise LedgerError("cover drawn while unenrolled")
        return m
    if cover_draw < 0 or cover_draw > ledger.cover_remaining:
        raise LedgerError(f"draw {cover_draw} exceeds cover remaining {ledger.cover_remaining}")
    if cover_draw > m + product.monthly_fee_Pt:
        raise LedgerError("draw exceeds the month's housing expense")
    return m + product.monthly_fee_Pt - cover_draw
