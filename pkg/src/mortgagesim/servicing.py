"""Loan accounting and the servicer relief hierarchy.

Loans amortise without interest: ``total_loan = m * original_term``. A month's
scheduled amount has a *regular* part (the base payment, capped by the
principal not already in arrears) and an *extra* part (arrears repaid under a
repayment plan, or arrears collected once only arrears remain). Paying less
than the scheduled amount is a missed payment.

Relief hierarchy, offered after a missed payment in order::

    0 repayment plan      arrears spread over ``plan_months`` extra payments
    1 forbearance         payments paused for ``forbearance_months``
    2 loan modification   payment permanently reduced by ``modification_reduction``
    3 foreclosure         account terminated (not refusable)

The rung advances each time an offer is answered, accepted or not, so a
borrower who misses again after accepted relief gets the next option.
Forbearance and modification defer outstanding arrears to the end of the
term; term remaining is derived from the outstanding principal.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

from .errors import ContractError
from .money import mul_cents


class Status(enum.IntEnum):
    CURRENT = 0
    DELINQUENT = 1
    REPAYMENT_PLAN = 2
    FORBEARANCE = 3
    MODIFIED = 4
    FORECLOSED = 5
    PAID_OFF = 6


TERMINAL = (Status.FORECLOSED, Status.PAID_OFF)


class ReliefKind(enum.IntEnum):
    REPAYMENT_PLAN = 0
    FORBEARANCE = 1
    LOAN_MODIFICATION = 2
    FORECLOSURE = 3


@dataclass(frozen=True)
class ServicingConfig:
    plan_months: int = 6
    forbearance_months: int = 3
    modification_reduction: float = 0.20


@dataclass(frozen=True)
class ReliefOffer:
    kind: ReliefKind
    months: int = 0
    reduction: float = 0.0


@dataclass(frozen=True)
class ForeclosureEvent:
    total_paid: int
    total_loan: int


@dataclass(frozen=True)
class LoanAccount:
    monthly_payment_m: int
    total_loan: int
    total_paid: int = 0
    missed_balance: int = 0
    status: Status = Status.CURRENT
    relief_rung: int = 0
    modified_payment: int | None = None
    months_left: int = 0  # repayment plan or forbearance months remaining
    offer_pending: bool = False

    @classmethod
    def open(cls, m: int, total_loan: int, paid_to_date: int = 0) -> "LoanAccount":
        acct = cls(monthly_payment_m=m, total_loan=total_loan, total_paid=paid_to_date)
        return replace(acct, status=Status.PAID_OFF) if paid_to_date >= total_loan else acct

    @property
    def outstanding(self) -> int:
        return self.total_loan - self.total_paid

    @property
    def base_payment(self) -> int:
        return self.modified_payment if self.modified_payment is not None else self.monthly_payment_m

    @property
    def term_remaining(self) -> int:
        return math.ceil(self.outstanding / self.base_payment) if self.base_payment > 0 else 0

    @property
    def is_terminal(self) -> bool:
        return self.status in TERMINAL

    @property
    def equity(self) -> float:
        if self.status is Status.FORECLOSED or self.total_loan <= 0:
            return 0.0
        return self.total_paid / self.total_loan


def scheduled_payment(account: LoanAccount) -> tuple[int, int]:
    """Return ``(scheduled, regular)`` for the coming month."""
    if account.is_terminal or account.status is Status.FORBEARANCE:
        return 0, 0
    base = account.base_payment
    missed = account.missed_balance
    regular = min(base, account.outstanding - missed)
    if account.status is Status.REPAYMENT_PLAN:
        extra = -(-missed // account.months_left)
    elif regular == 0:
        extra = min(base, missed)
    else:
        extra = 0
    return regular + extra, regular


def _resting_status(account: LoanAccount) -> Status:
    return Status.MODIFIED if account.modified_payment is not None else Status.CURRENT


def amortize_step(account: LoanAccount, paid: int) -> LoanAccount:
    """Apply one month's mortgage payment."""
    if account.is_terminal:
        raise ContractError(f"payment on terminal account ({account.status.name})")
    scheduled, regular = scheduled_payment(account)
    if not 0 <= paid <= scheduled:
        raise ContractError(f"payment {paid} outside [0, {scheduled}]")
    missed_now = paid < scheduled
    acct = replace(
        account,
        total_paid=account.total_paid + paid,
        missed_balance=account.missed_balance + regular - paid,
    )
    if acct.total_paid == acct.total_loan:
        return replace(acct, status=Status.PAID_OFF, months_left=0, offer_pending=False)

    status = acct.status
    if status is Status.FORBEARANCE:
        left = acct.months_left - 1
        return replace(acct, months_left=left, status=status if left > 0 else _resting_status(acct))
    if missed_now:
        return replace(acct, status=Status.DELINQUENT, months_left=0, offer_pending=True)
    if status is Status.REPAYMENT_PLAN:
        left = acct.months_left - 1
        return replace(acct, months_left=left, status=status if left > 0 else _resting_status(acct))
    if status is Status.DELINQUENT and acct.missed_balance == 0:
        return replace(acct, status=_resting_status(acct))
    return acct


def start_forbearance(account: LoanAccount, months: int) -> LoanAccount:
    """Pause payments for ``months`` starting with the coming month; arrears are deferred."""
    if account.is_terminal:
        raise ContractError("forbearance on terminal account")
    if months <= 0:
        raise ContractError("forbearance needs a positive number of months")
    return replace(account, status=Status.FORBEARANCE, months_left=months, missed_balance=0)


def next_relief_offer(account: LoanAccount, config: ServicingConfig = ServicingConfig()) -> ReliefOffer:
    if account.status is not Status.DELINQUENT:
        raise ContractError(f"relief offered only to delinquent accounts, status is {account.status.name}")
    kind = ReliefKind(min(account.relief_rung, ReliefKind.FORECLOSURE))
    if kind is ReliefKind.REPAYMENT_PLAN:
        return ReliefOffer(kind, months=config.plan_months)
    if kind is ReliefKind.FORBEARANCE:
        return ReliefOffer(kind, months=config.forbearance_months)
    if kind is ReliefKind.LOAN_MODIFICATION:
        return ReliefOffer(kind, reduction=config.modification_reduction)
    return ReliefOffer(kind)


def apply_relief(
    account: LoanAccount,
    offer: ReliefOffer,
    accepted: bool,
    config: ServicingConfig = ServicingConfig(),
) -> LoanAccount:
    if offer != next_relief_offer(account, config):
        raise ContractError(f"offer {offer} does not match the account's hierarchy position")
    if offer.kind is ReliefKind.FORECLOSURE:
        return foreclose(account)[0]
    acct = replace(account, relief_rung=account.relief_rung + 1, offer_pending=False)
    if not accepted:
        return acct
    if offer.kind is ReliefKind.REPAYMENT_PLAN:
        return replace(acct, status=Status.REPAYMENT_PLAN, months_left=offer.months)
    if offer.kind is ReliefKind.FORBEARANCE:
        return start_forbearance(acct, offer.months)
    reduced = mul_cents(acct.monthly_payment_m, 1.0 - offer.reduction)
    return replace(acct, status=Status.MODIFIED, modified_payment=reduced, missed_balance=0)


def foreclose(account: LoanAccount) -> tuple[LoanAccount, ForeclosureEvent]:
    if account.status is Status.FORECLOSED:
        raise ContractError("account already foreclosed")
    if account.status is Status.PAID_OFF:
        raise ContractError("cannot foreclose a paid-off account")
    acct = replace(
        account,
        status=Status.FORECLOSED,
        relief_rung=max(account.relief_rung, ReliefKind.FORECLOSURE + 1),
        months_left=0,
        offer_pending=False,
    )
    return acct, ForeclosureEvent(account.total_paid, account.total_loan)
