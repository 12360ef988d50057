"""Borrower decision process for a single household.

This is the readable, per-borrower statement of the monthly dynamics. The
vectorised engine in :mod:`mortgagesim.env` implements the same rules on
arrays and is checked against this module by replay.

A month runs as: income shock (applied by the caller), payment decision,
cash flows and amortisation, relief decision when a payment was missed,
house price update (by the caller), savings update, reward.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError
from .population import BorrowerProfile, Group
from .products import (
    NULL_PRODUCT,
    CoverLedger,
    Product,
    draw_cover,
    enroll,
    record_fee,
)
from .servicing import (
    LoanAccount,
    ReliefKind,
    ServicingConfig,
    Status,
    amortize_step,
    apply_relief,
    next_relief_offer,
    scheduled_payment,
    start_forbearance,
)


class PaymentAction(enum.IntEnum):
    SKIP = 0
    PAY = 1
    PAY_AND_ENROLL = 2


class ReliefAction(enum.IntEnum):
    ACCEPT = 3
    REJECT = 4


class Phase(enum.IntEnum):
    PAYMENT = 0
    RELIEF = 1


N_ACTIONS = 5
N_STATUS = len(Status)
N_OFFERS = len(ReliefKind)

# observation layout
OBS_GAMMA = 0
OBS_LIQUIDITY = 1
OBS_EQUITY = 2
OBS_HPI = 3
OBS_BUFFER = 4
OBS_PRODUCT = slice(5, 9)  # p0, p, v/T, F/12
OBS_ENROLLED = 9
OBS_STATUS = slice(10, 10 + N_STATUS)
OBS_MISSED = 17
OBS_TERM = 18
OBS_PHASE = 19
OBS_OFFER = slice(20, 20 + N_OFFERS)
OBS_COVER = 24
OBS_MARGIN = 25
OBS_DIM = 26
OBS_VERSION = "obs/1"

MAX_F_NORMALISER = 12.0
MISSED_NORMALISER = 12.0


@dataclass(frozen=True)
class MDPConfig:
    horizon: int = 120
    buffer_clip: float = 10.0
    servicing: ServicingConfig = field(default_factory=ServicingConfig)


@dataclass(frozen=True)
class BorrowerState:
    income_I: int
    nonhousing_expenses: int
    savings_A: int
    account: LoanAccount
    gamma_pref: float
    group: Group
    product: Product = NULL_PRODUCT
    ledger: CoverLedger = field(default_factory=CoverLedger)
    month_Eh: int = 0  # realised housing expense m + Pt - chi (+ P0 in the enrolment month)
    delinquent_ever: bool = False
    product_forbearance_used: bool = False

    @classmethod
    def from_profile(cls, profile: BorrowerProfile, product: Product = NULL_PRODUCT, gamma: float | None = None):
        return cls(
            income_I=profile.income0,
            nonhousing_expenses=profile.nonhousing_expenses0,
            savings_A=profile.savings0,
            account=LoanAccount.open(profile.monthly_payment_m, profile.total_loan, profile.paid_to_date),
            gamma_pref=profile.liquidity_preference_gamma if gamma is None else gamma,
            group=profile.group,
            product=product,
        )

    @property
    def m(self) -> int:
        return self.account.monthly_payment_m

    @property
    def fee_due(self) -> int:
        if self.ledger.enrolled and not self.account.is_terminal:
            return self.product.monthly_fee_Pt
        return 0

    @property
    def housing_expense_Eh(self) -> int:
        """Prospective housing expense for the coming month."""
        return scheduled_payment(self.account)[0] + self.fee_due

    @property
    def buffer_B(self) -> float:
        eh = self.housing_expense_Eh
        return self.savings_A / eh if eh > 0 else float("inf")


def liquidity(expense: float, income: float) -> float:
    """``1 - min(E/I, 1)``; zero income gives zero liquidity."""
    if income <= 0:
        return 0.0
    return 1.0 - min(expense / income, 1.0)


def utility(state: BorrowerState, h: float) -> float:
    """Monthly utility: ``gamma * Liquidity + (1 - gamma) * h * Equity``.

    Liquidity uses the month's realised housing expense, so a skipped payment
    still counts as an expense; cover drawn reduces it.
    """
    g = state.gamma_pref
    return g * liquidity(state.month_Eh, state.income_I) + (1.0 - g) * h * state.account.equity


def legal_actions(state: BorrowerState, phase: Phase) -> tuple[int, ...]:
    if phase is Phase.PAYMENT:
        if state.account.is_terminal:
            return (PaymentAction.PAY,)
        acts = [PaymentAction.SKIP, PaymentAction.PAY]
        if not state.ledger.enrolled and not state.product.is_null:
            acts.append(PaymentAction.PAY_AND_ENROLL)
        return tuple(acts)
    if not state.account.offer_pending:
        raise ContractError("relief decision requested without a pending offer")
    if next_relief_offer(state.account).kind is ReliefKind.FORECLOSURE:
        return (ReliefAction.ACCEPT,)
    return (ReliefAction.ACCEPT, ReliefAction.REJECT)


def product_features(product: Product, m: int, horizon: int) -> np.ndarray:
    if m <= 0:
        return np.zeros(4)
    f = np.array(
        [
            product.upfront_premium_P0 / m,
            product.monthly_fee_Pt / m,
            product.total_cover_V / m / horizon,
            product.forbearance_months_F / MAX_F_NORMALISER,
        ]
    )
    return np.clip(f, 0.0, 1.0)


def observe(state: BorrowerState, h: float, config: MDPConfig = MDPConfig(), phase: Phase = Phase.PAYMENT) -> np.ndarray:
    acct = state.account
    m = state.m
    due = state.housing_expense_Eh
    obs = np.zeros(OBS_DIM)
    obs[OBS_GAMMA] = state.gamma_pref
    obs[OBS_LIQUIDITY] = liquidity(due, state.income_I)
    obs[OBS_EQUITY] = acct.equity
    obs[OBS_HPI] = h
    obs[OBS_BUFFER] = min(state.savings_A / due, config.buffer_clip) if due > 0 else config.buffer_clip
    obs[OBS_PRODUCT] = product_features(state.product, m, config.horizon)
    obs[OBS_ENROLLED] = float(state.ledger.enrolled)
    obs[OBS_STATUS.start + int(acct.status)] = 1.0
    obs[OBS_MISSED] = min(acct.missed_balance / m / MISSED_NORMALISER, 1.0) if m > 0 else 0.0
    obs[OBS_TERM] = min(acct.term_remaining / 360.0, 1.0)
    obs[OBS_PHASE] = float(phase)
    if phase is Phase.RELIEF:
        obs[OBS_OFFER.start + int(next_relief_offer(acct, config.servicing).kind)] = 1.0
    if state.ledger.enrolled and m > 0:
        obs[OBS_COVER] = min(state.ledger.cover_remaining / (m * config.horizon), 1.0)
    margin = state.income_I - state.nonhousing_expenses - due
    obs[OBS_MARGIN] = float(np.clip(margin / max(due, 1), -1.0, 1.0))
    return obs


@dataclass(frozen=True)
class PaymentRecord:
    scheduled: int
    mortgage_paid: int
    missed: bool
    fee_due: int
    fee_paid: int
    premium: int
    cover_draw: int
    own_outlay: int
    consumption_shortfall: int
    enrolled_now: bool


def payment_step(state: BorrowerState, action: int, t: int, config: MDPConfig = MDPConfig()) -> tuple[BorrowerState, PaymentRecord]:
    """Cash flows and amortisation for the payment decision of month ``t``."""
    action = PaymentAction(action)
    if action not in legal_actions(state, Phase.PAYMENT):
        raise ContractError(f"illegal payment action {action.name}")
    acct, ledger = state.account, state.ledger
    cash = state.savings_A + state.income_I - state.nonhousing_expenses
    funds = max(cash, 0)
    shortfall_consumption = max(-cash, 0)

    if acct.is_terminal:
        rec = PaymentRecord(0, 0, False, 0, 0, 0, 0, 0, shortfall_consumption, False)
        return replace(state, savings_A=funds, month_Eh=0), rec

    premium = 0
    enrolled_now = False
    if action is PaymentAction.PAY_AND_ENROLL and funds >= state.product.upfront_premium_P0:
        ledger = enroll(ledger, state.product, t)
        premium = state.product.upfront_premium_P0
        funds -= premium
        enrolled_now = True
    fee_due = state.product.monthly_fee_Pt if ledger.enrolled else 0
    scheduled, _ = scheduled_payment(acct)
    pays = action is not PaymentAction.SKIP
    forbearance_used = state.product_forbearance_used

    due = scheduled + fee_due if pays else fee_due
    own = min(due, funds)
    short = due - own
    if (
        pays
        and short > 0
        and scheduled > 0
        and ledger.enrolled
        and state.product.forbearance_months_F > 0
        and not forbearance_used
    ):
        acct = start_forbearance(acct, state.product.forbearance_months_F)
        forbearance_used = True
        scheduled = 0
        due = fee_due
        own = min(due, funds)
        short = due - own
    draw = 0
    if pays and ledger.enrolled and short > 0:
        draw, ledger = draw_cover(ledger, short, state.m + state.product.monthly_fee_Pt, t)
    available = own + draw
    fee_paid = min(fee_due, available)
    if ledger.enrolled and fee_due:
        ledger = record_fee(ledger, fee_due, fee_paid)
    paid = available - fee_paid
    acct = amortize_step(acct, paid)
    missed = paid < scheduled
    new_state = replace(
        state,
        account=acct,
        ledger=ledger,
        savings_A=funds - own,
        month_Eh=scheduled + fee_due - draw + premium,
        delinquent_ever=state.delinquent_ever or missed,
        product_forbearance_used=forbearance_used,
    )
    rec = PaymentRecord(scheduled, paid, missed, fee_due, fee_paid, premium, draw, own + premium, shortfall_consumption, enrolled_now)
    return new_state, rec


def relief_step(state: BorrowerState, action: int, config: MDPConfig = MDPConfig()) -> tuple[BorrowerState, bool]:
    """Answer the pending relief offer. Returns the new state and whether it foreclosed."""
    action = ReliefAction(action)
    if action not in legal_actions(state, Phase.RELIEF):
        raise ContractError(f"illegal relief action {action.name}")
    offer = next_relief_offer(state.account, config.servicing)
    acct = apply_relief(state.account, offer, action is ReliefAction.ACCEPT, config.servicing)
    return replace(state, account=acct), acct.status is Status.FORECLOSED
