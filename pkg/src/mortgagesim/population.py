"""Borrower population sampling from a calibration file.

The calibration mirrors the conditional structure of the census sources:
an income-bin marginal, and per-bin discrete distributions for the monthly
mortgage payment, non-housing expenses and initial savings. A synthetic
default ships with the package (``data/synthetic_calibration.yaml``).

File schema (YAML)::

    schema: mortgage-calibration/1
    synthetic: true|false            # optional, informational
    ami: <area median income, USD/year>
    min_income: <income floor, USD/year>
    original_term_months: 360        # optional
    income_bins:
      - range: [low, high]           # annual income, USD/year
        probability: <p>
        mortgage_given_income: {values: [...], probabilities: [...]}   # USD/month
        expenses_given_income: {values: [...], probabilities: [...]}   # USD/month
        assets_given_income:   {values: [...], probabilities: [...]}   # USD

Income is drawn uniformly within the selected bin and floored at
``min_income``. All sampled money is returned as integer cents.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import ValidationError
from .money import to_cents

SCHEMA = "mortgage-calibration/1"
PROB_TOL = 1e-9
MAX_TERM_MONTHS = 360

DISTRIBUTION_KEYS = ("mortgage_given_income", "expenses_given_income", "assets_given_income")


class Group(str, enum.Enum):
    LOW_INCOME = "low_income"
    OTHER = "other"


@dataclass(frozen=True)
class Distribution:
    """Discrete empirical distribution over non-negative values."""

    values: tuple[float, ...]
    probabilities: tuple[float, ...]

    def sample(self, rng: np.random.Generator) -> float:
        u = rng.random()
        idx = int(np.searchsorted(np.cumsum(self.probabilities), u, side="right"))
        return self.values[min(idx, len(self.values) - 1)]


@dataclass(frozen=True)
class IncomeBin:
    low: float
    high: float
    probability: float
    mortgage: Distribution
    expenses: Distribution
    assets: Distribution


@dataclass(frozen=True)
class PopulationCalibration:
    income_bins: tuple[IncomeBin, ...]
    ami: float
    min_income: float
    original_term_months: int = MAX_TERM_MONTHS
    synthetic: bool = False
    digest: str = ""

    @property
    def bin_probabilities(self) -> np.ndarray:
        return np.array([b.probability for b in self.income_bins])


@dataclass(frozen=True)
class BorrowerProfile:
    """Static draw for one household. Money fields are integer cents."""

    income0: int  # per month
    monthly_payment_m: int  # per month
    nonhousing_expenses0: int  # per month
    savings0: int
    term_remaining: int  # months
    total_loan: int
    paid_to_date: int
    liquidity_preference_gamma: float
    group: Group
    income_bin: int


def default_calibration_path() -> Path:
    return Path(str(resources.files("mortgagesim") / "data" / "synthetic_calibration.yaml"))


def _parse_distribution(raw, field: str) -> Distribution:
    if not isinstance(raw, dict) or "values" not in raw or "probabilities" not in raw:
        raise ValidationError(field, "expected a mapping with 'values' and 'probabilities'")
    try:
        values = tuple(float(v) for v in raw["values"])
        probs = tuple(float(p) for p in raw["probabilities"])
    except (TypeError, ValueError) as exc:
        raise ValidationError(field, f"non-numeric entry ({exc})") from None
    if not values or len(values) != len(probs):
        raise ValidationError(field, "values and probabilities must be non-empty and equal length")
    if any(v < 0 or not np.isfinite(v) for v in values):
        raise ValidationError(field, "values must be finite and non-negative")
    if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > PROB_TOL:
        raise ValidationError(field, f"probabilities must be non-negative and sum to 1 (got {sum(probs)!r})")
    return Distribution(values, probs)


def parse_calibration(data: dict, digest: str = "") -> PopulationCalibration:
    """Validate an already-parsed calibration mapping."""
    if not isinstance(data, dict):
        raise ValidationError("<root>", "calibration must be a mapping")
    if data.get("schema", SCHEMA) != SCHEMA:
        raise ValidationError("schema", f"unsupported schema {data.get('schema')!r}, expected {SCHEMA!r}")
    for key in ("ami", "min_income", "income_bins"):
        if key not in data:
            raise ValidationError(key, "missing required field")
    ami, min_income = float(data["ami"]), float(data["min_income"])
    if not ami > 0:
        raise ValidationError("ami", "must be positive")
    if min_income < 0:
        raise ValidationError("min_income", "must be non-negative")
    term = int(data.get("original_term_months", MAX_TERM_MONTHS))
    if not 1 <= term <= MAX_TERM_MONTHS:
        raise ValidationError("original_term_months", f"must lie in [1, {MAX_TERM_MONTHS}]")

    raw_bins = data["income_bins"]
    if not isinstance(raw_bins, list) or not raw_bins:
        raise ValidationError("income_bins", "must be a non-empty list")
    bins = []
    for i, rb in enumerate(raw_bins):
        name = f"income_bins[{i}]"
        if not isinstance(rb, dict):
            raise ValidationError(name, "bin must be a mapping")
        for key in ("range", "probability", *DISTRIBUTION_KEYS):
            if key not in rb:
                raise ValidationError(f"{name}.{key}", "missing required field")
        lo, hi = (float(x) for x in rb["range"])
        if lo < 0 or hi < lo:
            raise ValidationError(f"{name}.range", "need 0 <= low <= high")
        p = float(rb["probability"])
        if p < 0:
            raise ValidationError(f"{name}.probability", "must be non-negative")
        dists = [_parse_distribution(rb[k], f"{name}.{k}") for k in DISTRIBUTION_KEYS]
        bins.append(IncomeBin(lo, hi, p, *dists))
    total = sum(b.probability for b in bins)
    if abs(total - 1.0) > PROB_TOL:
        raise ValidationError("income_bins", f"bin probabilities sum to {total!r}, expected 1")
    return PopulationCalibration(
        income_bins=tuple(bins),
        ami=ami,
        min_income=min_income,
        original_term_months=term,
        synthetic=bool(data.get("synthetic", False)),
        digest=digest,
    )


def load_calibration(path: str | Path | None = None) -> PopulationCalibration:
    """Load and validate a calibration file; ``None`` loads the bundled default."""
    path = Path(path) if path is not None else default_calibration_path()
    if not path.is_file():
        raise ValidationError("calibration", f"file not found: {path}")
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(str(path), f"parse error: {exc}") from None
    return parse_calibration(data, digest=hashlib.sha256(text.encode()).hexdigest())


def assign_group(profile: BorrowerProfile | int, calibration: PopulationCalibration) -> Group:
    """Low income iff annual t=0 income is strictly below 80% of AMI.

    ``profile`` may be a profile or a monthly income in cents. Compared in
    cents so the boundary is exact.
    """
    income0 = profile.income0 if isinstance(profile, BorrowerProfile) else int(profile)
    # annual < 0.8 * ami  <=>  5 * annual < 4 * ami, in integer cents
    return Group.LOW_INCOME if 5 * income0 * 12 < 4 * to_cents(calibration.ami) else Group.OTHER


def sample_borrower(
    calibration: PopulationCalibration,
    rng: np.random.Generator,
    gamma: float | None = None,
) -> BorrowerProfile:
    """Draw one household. ``gamma=None`` draws the liquidity preference on [0, 1]."""
    b = int(rng.choice(len(calibration.income_bins), p=calibration.bin_probabilities))
    ib = calibration.income_bins[b]
    annual = max(rng.uniform(ib.low, ib.high) if ib.high > ib.low else ib.low, calibration.min_income)
    income0 = max(to_cents(annual / 12), -(-to_cents(calibration.min_income) // 12))
    m = to_cents(ib.mortgage.sample(rng))
    expenses = to_cents(ib.expenses.sample(rng))
    savings = to_cents(ib.assets.sample(rng))
    n = calibration.original_term_months
    term_remaining = int(rng.integers(1, n + 1))
    g = float(rng.uniform(0.0, 1.0)) if gamma is None else float(gamma)
    total_loan = m * n
    paid = m * (n - term_remaining)
    profile = BorrowerProfile(
        income0=income0,
        monthly_payment_m=m,
        nonhousing_expenses0=expenses,
        savings0=savings,
        term_remaining=term_remaining,
        total_loan=total_loan,
        paid_to_date=paid,
        liquidity_preference_gamma=g,
        group=Group.OTHER,
        income_bin=b,
    )
    return replace(profile, group=assign_group(profile, calibration))


def sample_population(
    calibration: PopulationCalibration,
    n: int,
    rng: np.random.Generator,
    gamma: float | None = None,
) -> list[BorrowerProfile]:
    return [sample_borrower(calibration, rng, gamma) for _ in range(n)]
