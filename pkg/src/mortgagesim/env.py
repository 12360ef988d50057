"""Vectorised mortgage world.

``MortgageEnv`` steps many independent environments at once. Each environment
has its own borrowers, product, shock schedule and house price index; agents
from all environments are laid out along one axis. The monthly rules are the
same as :mod:`mortgagesim.mdp` (replay-tested against it).

A month is driven in two calls::

    env.begin_month()                       # income shocks
    obs, mask = env.payment_observation()
    env.step_payment(actions)
    obs, mask, active = env.relief_observation()
    rewards = env.step_relief(actions)      # HPI update, rewards, t += 1
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import mdp
from .economy import ShockConfig, ShockMode, apply_shock, sample_shocks, update_hpi_array, DEFAULT_FORECLOSURE_IMPACT, HPI_FLOOR
from .errors import ContractError
from .mdp import N_ACTIONS, OBS_DIM, PaymentAction, ReliefAction
from .money import mul_cents
from .population import BorrowerProfile, Group
from .products import Product, ScaledProductParams, scale_product
from .servicing import ReliefKind, ServicingConfig, Status

TRACE_SCHEMA = "trace/1"

CURRENT, DELINQUENT, PLAN, FORBEARANCE, MODIFIED, FORECLOSED, PAID_OFF = (int(s) for s in Status)


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 120
    foreclosure_impact: float = DEFAULT_FORECLOSURE_IMPACT
    hpi_floor: float = HPI_FLOOR
    buffer_clip: float = 10.0
    servicing: ServicingConfig = field(default_factory=ServicingConfig)

    def mdp_config(self) -> mdp.MDPConfig:
        return mdp.MDPConfig(horizon=self.horizon, buffer_clip=self.buffer_clip, servicing=self.servicing)


ProductLike = Product | ScaledProductParams


def _ceil_div(a, b):
    return -(-a // b)


class MortgageEnv:
    """Many borrowers across ``n_envs`` environments, stepped in lock-step."""

    def __init__(
        self,
        populations: Sequence[Sequence[BorrowerProfile]],
        products: Sequence[ProductLike],
        shocks: ShockConfig | Sequence[ShockConfig],
        config: EnvConfig = EnvConfig(),
        rng: np.random.Generator | None = None,
        gamma: float | None = None,
        use_products: bool = True,
        record_trace: bool = False,
    ):
        if len(populations) != len(products):
            raise ContractError("need one product per environment")
        self.config = config
        self.n_envs = len(populations)
        self.shocks = [shocks] * self.n_envs if isinstance(shocks, ShockConfig) else list(shocks)
        if len(self.shocks) != self.n_envs:
            raise ContractError("need one shock config per environment")
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.use_products = use_products
        self.record_trace = record_trace

        profiles = [p for pop in populations for p in pop]
        self.env_idx = np.concatenate([np.full(len(pop), e, dtype=np.int64) for e, pop in enumerate(populations)])
        n = self.n = len(profiles)
        i64 = lambda xs: np.array(xs, dtype=np.int64)
        self.income = i64([p.income0 for p in profiles])
        self.expenses = i64([p.nonhousing_expenses0 for p in profiles])
        self.savings = i64([p.savings0 for p in profiles])
        self.m = i64([p.monthly_payment_m for p in profiles])
        self.total_loan = i64([p.total_loan for p in profiles])
        self.total_paid = i64([p.paid_to_date for p in profiles])
        self.gamma = np.array([p.liquidity_preference_gamma if gamma is None else gamma for p in profiles])
        self.low_income = np.array([p.group is Group.LOW_INCOME for p in profiles])

        self.missed = np.zeros(n, dtype=np.int64)
        self.status = np.where(self.total_paid >= self.total_loan, PAID_OFF, CURRENT).astype(np.int64)
        self.rung = np.zeros(n, dtype=np.int64)
        self.has_mod = np.zeros(n, dtype=bool)
        self.mod_pay = np.zeros(n, dtype=np.int64)
        self.months_left = np.zeros(n, dtype=np.int64)
        self.offer_pending = np.zeros(n, dtype=bool)

        self.P0 = np.zeros(n, dtype=np.int64)
        self.Pt = np.zeros(n, dtype=np.int64)
        self.V = np.zeros(n, dtype=np.int64)
        self.F = np.zeros(n, dtype=np.int64)
        if use_products:
            for e, prod in enumerate(products):
                for i in np.flatnonzero(self.env_idx == e):
                    pr = prod if isinstance(prod, Product) else scale_product(prod, int(self.m[i]), config.horizon)
                    self.P0[i], self.Pt[i], self.V[i], self.F[i] = (
                        pr.upfront_premium_P0, pr.monthly_fee_Pt, pr.total_cover_V, pr.forbearance_months_F
                    )
        self.has_product = (self.P0 > 0) | (self.Pt > 0) | (self.V > 0) | (self.F > 0)
        m_safe = np.maximum(self.m, 1)
        self.product_features = np.clip(
            np.stack([self.P0 / m_safe, self.Pt / m_safe, self.V / m_safe / config.horizon, self.F / mdp.MAX_F_NORMALISER], 1),
            0.0,
            1.0,
        )
        self.products = list(products)

        self.enrolled = np.zeros(n, dtype=bool)
        self.enroll_step = np.full(n, -1, dtype=np.int64)
        self.cover_total = np.zeros(n, dtype=np.int64)
        self.cover_remaining = np.zeros(n, dtype=np.int64)
        self.cover_drawn = np.zeros(n, dtype=np.int64)
        self.premium_paid = np.zeros(n, dtype=np.int64)
        self.fees_paid = np.zeros(n, dtype=np.int64)
        self.fees_unpaid = np.zeros(n, dtype=np.int64)
        self.forbearance_used = np.zeros(n, dtype=bool)
        self.delinquent_ever = np.zeros(n, dtype=bool)
        self.month_Eh = np.zeros(n, dtype=np.int64)

        self.h = np.ones(self.n_envs)
        self.t = 0
        self.foreclosures_by_month: list[np.ndarray] = []

        # scripted shocks may hit a subset; the subset is fixed at construction
        self.shock_hit = np.ones(n, dtype=bool)
        for e, sc in enumerate(self.shocks):
            if sc.mode is ShockMode.SCRIPTED and sc.affected_fraction < 1.0:
                idx = np.flatnonzero(self.env_idx == e)
                self.shock_hit[idx] = self.rng.random(len(idx)) < sc.affected_fraction

        self._month: dict[str, np.ndarray] = {}
        self.trace_rows: list[dict[str, np.ndarray]] = []

    # -- derived quantities -------------------------------------------------

    @property
    def terminal(self) -> np.ndarray:
        return self.status >= FORECLOSED

    @property
    def done(self) -> bool:
        return self.t >= self.config.horizon or bool(self.terminal.all())

    def base_payment(self) -> np.ndarray:
        return np.where(self.has_mod, self.mod_pay, self.m)

    def scheduled(self) -> tuple[np.ndarray, np.ndarray]:
        base = self.base_payment()
        outstanding = self.total_loan - self.total_paid
        regular = np.minimum(base, outstanding - self.missed)
        extra = np.where(
            self.status == PLAN,
            _ceil_div(self.missed, np.maximum(self.months_left, 1)),
            np.where(regular == 0, np.minimum(base, self.missed), 0),
        )
        paused = self.terminal | (self.status == FORBEARANCE)
        regular = np.where(paused, 0, regular)
        return np.where(paused, 0, regular + extra), regular

    def fee_due(self) -> np.ndarray:
        return np.where(self.enrolled & ~self.terminal, self.Pt, 0)

    def equity(self) -> np.ndarray:
        return np.where(self.status == FORECLOSED, 0.0, self.total_paid / np.maximum(self.total_loan, 1))

    def term_remaining(self) -> np.ndarray:
        base = np.maximum(self.base_payment(), 1)
        return _ceil_div(self.total_loan - self.total_paid, base)

    # -- month --------------------------------------------------------------

    def begin_month(self) -> np.ndarray:
        """Sample and apply this month's income shocks; returns shock sizes (NaN = none)."""
        s = np.full(self.n, np.nan)
        for e, sc in enumerate(self.shocks):
            idx = np.flatnonzero(self.env_idx == e)
            s[idx] = sample_shocks(sc, self.t, len(idx), self.rng)
        s = np.where(self.shock_hit, s, np.nan)
        hit = ~np.isnan(s)
        if hit.any():
            self.income[hit] = apply_shock(self.income[hit], s[hit])
        self._month = {"t": np.full(self.n, self.t), "shock": s, "income": self.income.copy()}
        return s

    def _observe(self, phase: int) -> np.ndarray:
        sched, _ = self.scheduled()
        due = sched + self.fee_due()
        obs = np.zeros((self.n, OBS_DIM), dtype=np.float64)
        inc = self.income
        obs[:, mdp.OBS_GAMMA] = self.gamma
        obs[:, mdp.OBS_LIQUIDITY] = np.where(inc > 0, 1.0 - np.minimum(due / np.maximum(inc, 1), 1.0), 0.0)
        obs[:, mdp.OBS_EQUITY] = self.equity()
        obs[:, mdp.OBS_HPI] = self.h[self.env_idx]
        clip = self.config.buffer_clip
        obs[:, mdp.OBS_BUFFER] = np.where(due > 0, np.minimum(self.savings / np.maximum(due, 1), clip), clip)
        obs[:, mdp.OBS_PRODUCT] = self.product_features
        obs[:, mdp.OBS_ENROLLED] = self.enrolled
        obs[np.arange(self.n), mdp.OBS_STATUS.start + self.status] = 1.0
        m = np.maximum(self.m, 1)
        obs[:, mdp.OBS_MISSED] = np.minimum(self.missed / m / mdp.MISSED_NORMALISER, 1.0)
        obs[:, mdp.OBS_TERM] = np.minimum(self.term_remaining() / 360.0, 1.0)
        obs[:, mdp.OBS_PHASE] = phase
        if phase == mdp.Phase.RELIEF:
            rows = np.flatnonzero(self.offer_pending)
            obs[rows, mdp.OBS_OFFER.start + np.minimum(self.rung[rows], ReliefKind.FORECLOSURE)] = 1.0
        obs[:, mdp.OBS_COVER] = np.where(
            self.enrolled, np.minimum(self.cover_remaining / (m * self.config.horizon), 1.0), 0.0
        )
        margin = inc - self.expenses - due
        obs[:, mdp.OBS_MARGIN] = np.clip(margin / np.maximum(due, 1), -1.0, 1.0)
        return obs

    def payment_mask(self) -> np.ndarray:
        mask = np.zeros((self.n, N_ACTIONS), dtype=bool)
        live = ~self.terminal
        mask[:, PaymentAction.SKIP] = live
        mask[:, PaymentAction.PAY] = True
        mask[:, PaymentAction.PAY_AND_ENROLL] = live & ~self.enrolled & self.has_product
        return mask

    def relief_mask(self) -> np.ndarray:
        mask = np.zeros((self.n, N_ACTIONS), dtype=bool)
        active = self.offer_pending
        mask[:, ReliefAction.ACCEPT] = active
        mask[:, ReliefAction.REJECT] = active & (self.rung < ReliefKind.FORECLOSURE)
        return mask

    def payment_observation(self) -> tuple[np.ndarray, np.ndarray]:
        return self._observe(mdp.Phase.PAYMENT), self.payment_mask()

    def relief_observation(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._observe(mdp.Phase.RELIEF), self.relief_mask(), self.offer_pending.copy()

    def _check_actions(self, actions: np.ndarray, mask: np.ndarray, rows: np.ndarray, phase: str) -> None:
        ok = mask[rows, actions[rows]] if len(rows) else np.ones(0, dtype=bool)
        if not ok.all():
            bad = int(rows[np.flatnonzero(~ok)[0]])
            raise ContractError(f"illegal {phase} action {int(actions[bad])} for borrower {bad} (env {int(self.env_idx[bad])})")

    def step_payment(self, actions) -> None:
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.n,):
            raise ContractError(f"expected {self.n} payment actions, got shape {actions.shape}")
        self._check_actions(actions, self.payment_mask(), np.arange(self.n), "payment")
        terminal = self.terminal
        live = ~terminal
        cash = self.savings + self.income - self.expenses
        funds = np.maximum(cash, 0)
        consumption_shortfall = np.maximum(-cash, 0)
        savings_before = self.savings.copy()

        enrol = (actions == PaymentAction.PAY_AND_ENROLL) & (funds >= self.P0)
        self.enrolled |= enrol
        self.enroll_step[enrol] = self.t
        self.cover_total[enrol] = self.V[enrol]
        self.cover_remaining[enrol] = self.V[enrol]
        premium = np.where(enrol, self.P0, 0)
        self.premium_paid += premium
        funds = funds - premium

        fee_due = self.fee_due()
        sched, regular = self.scheduled()
        pays = (actions != PaymentAction.SKIP) & live
        due = np.where(pays, sched + fee_due, fee_due)
        own = np.minimum(due, funds)
        short = due - own

        pause = pays & (short > 0) & (sched > 0) & self.enrolled & (self.F > 0) & ~self.forbearance_used
        if pause.any():
            self.status[pause] = FORBEARANCE
            self.months_left[pause] = self.F[pause]
            self.missed[pause] = 0
            self.forbearance_used |= pause
            sched = np.where(pause, 0, sched)
            regular = np.where(pause, 0, regular)
            due = np.where(pause, fee_due, due)
            own = np.minimum(due, funds)
            short = due - own

        draw = np.where(pays & self.enrolled, np.minimum(np.minimum(short, self.cover_remaining), self.m + self.Pt), 0)
        self.cover_remaining -= draw
        self.cover_drawn += draw
        available = own + draw
        fee_paid = np.minimum(fee_due, available)
        self.fees_paid += fee_paid
        self.fees_unpaid += fee_due - fee_paid
        paid = available - fee_paid

        # amortisation
        missed_now = live & (paid < sched)
        self.missed += np.where(live, regular - paid, 0)
        self.total_paid += paid
        paid_off = live & (self.total_paid == self.total_loan)
        resting = np.where(self.has_mod, MODIFIED, CURRENT)

        in_forb = live & ~paid_off & (self.status == FORBEARANCE)
        self.months_left[in_forb] -= 1
        forb_end = in_forb & (self.months_left == 0)
        self.status[forb_end] = resting[forb_end]

        other = live & ~paid_off & ~in_forb
        newly_delinquent = other & missed_now
        self.status[newly_delinquent] = DELINQUENT
        self.months_left[newly_delinquent] = 0
        self.offer_pending[newly_delinquent] = True

        in_plan = other & ~missed_now & (self.status == PLAN)
        self.months_left[in_plan] -= 1
        plan_end = in_plan & (self.months_left == 0)
        self.status[plan_end] = resting[plan_end]

        cured = other & ~missed_now & (self.status == DELINQUENT) & (self.missed == 0)
        self.status[cured] = resting[cured]

        self.status[paid_off] = PAID_OFF
        self.months_left[paid_off] = 0
        self.offer_pending[paid_off] = False

        self.delinquent_ever |= missed_now
        self.savings = funds - own
        self.month_Eh = np.where(live, sched + fee_due - draw + premium, 0)

        self._month.update(
            savings_before=savings_before,
            payment_action=actions,
            scheduled=sched,
            mortgage_paid=paid,
            missed=missed_now,
            fee_due=fee_due,
            fee_paid=fee_paid,
            premium=premium,
            cover_draw=draw,
            own_outlay=own + premium,
            housing_expense=self.month_Eh.copy(),
            consumption_shortfall=consumption_shortfall,
            enrolled_now=enrol,
            product_forbearance_start=pause,
        )

    def step_relief(self, actions=None) -> np.ndarray:
        """Resolve pending offers, update the HPI, and return per-agent utility."""
        active = self.offer_pending.copy()
        if actions is None:
            actions = np.full(self.n, ReliefAction.ACCEPT, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        self._check_actions(actions, self.relief_mask(), np.flatnonzero(active), "relief")
        kind = np.minimum(self.rung, ReliefKind.FORECLOSURE)
        accept = active & (actions == ReliefAction.ACCEPT)
        fore = active & (kind == ReliefKind.FORECLOSURE)
        svc = self.config.servicing

        self.rung = np.where(active, np.where(fore, np.maximum(self.rung, ReliefKind.FORECLOSURE + 1), self.rung + 1), self.rung)
        plan = accept & (kind == ReliefKind.REPAYMENT_PLAN)
        self.status[plan] = PLAN
        self.months_left[plan] = svc.plan_months
        forb = accept & (kind == ReliefKind.FORBEARANCE)
        self.status[forb] = FORBEARANCE
        self.months_left[forb] = svc.forbearance_months
        self.missed[forb] = 0
        mod = accept & (kind == ReliefKind.LOAN_MODIFICATION)
        self.has_mod |= mod
        self.mod_pay[mod] = mul_cents(self.m[mod], 1.0 - svc.modification_reduction)
        self.status[mod] = MODIFIED
        self.missed[mod] = 0
        self.status[fore] = FORECLOSED
        self.months_left[fore] = 0
        self.offer_pending[:] = False

        foreclosures = np.bincount(self.env_idx[fore], minlength=self.n_envs)
        self.foreclosures_by_month.append(foreclosures)
        self.h = update_hpi_array(self.h, foreclosures, self.config.foreclosure_impact, self.config.hpi_floor)

        reward = self.utility()
        if self.record_trace:
            self._month.update(
                relief_active=active,
                offer_kind=np.where(active, kind, -1),
                relief_action=np.where(active, actions, -1),
                foreclosed_now=fore,
                status=self.status.copy(),
                relief_rung=self.rung.copy(),
                missed_balance=self.missed.copy(),
                total_paid=self.total_paid.copy(),
                savings=self.savings.copy(),
                enrolled=self.enrolled.copy(),
                cover_remaining=self.cover_remaining.copy(),
                hpi=self.h[self.env_idx].copy(),
                reward=reward,
            )
            self.trace_rows.append({k: np.array(v, copy=True) for k, v in self._month.items()})
        self.t += 1
        return reward

    def utility(self) -> np.ndarray:
        inc = self.income
        liq = np.where(inc > 0, 1.0 - np.minimum(self.month_Eh / np.maximum(inc, 1), 1.0), 0.0)
        return self.gamma * liq + (1.0 - self.gamma) * self.h[self.env_idx] * self.equity()

    # -- outputs ------------------------------------------------------------

    def outcome(self) -> "EpisodeOutcome":
        return EpisodeOutcome(
            env_idx=self.env_idx.copy(),
            low_income=self.low_income.copy(),
            delinquent_ever=self.delinquent_ever.copy(),
            enrolled=self.enrolled.copy(),
            enroll_step=self.enroll_step.copy(),
            cover_total=self.cover_total.copy(),
            cover_remaining=self.cover_remaining.copy(),
            cover_drawn=self.cover_drawn.copy(),
            premium_paid=self.premium_paid.copy(),
            fees_paid=self.fees_paid.copy(),
            fees_unpaid=self.fees_unpaid.copy(),
            foreclosed=self.status == FORECLOSED,
            paid_off=self.status == PAID_OFF,
        )

    def trace(self) -> "Trace":
        if not self.record_trace:
            raise ContractError("environment was built with record_trace=False")
        return Trace(
            {k: np.stack([row[k] for row in self.trace_rows]) for k in self.trace_rows[0]} if self.trace_rows else {},
            env_idx=self.env_idx.copy(),
            low_income=self.low_income.copy(),
            V=self.cover_total.copy(),
        )


@dataclass
class EpisodeOutcome:
    """Per-borrower end-of-episode summary consumed by :mod:`mortgagesim.metrics`."""

    env_idx: np.ndarray
    low_income: np.ndarray
    delinquent_ever: np.ndarray
    enrolled: np.ndarray
    enroll_step: np.ndarray
    cover_total: np.ndarray
    cover_remaining: np.ndarray
    cover_drawn: np.ndarray
    premium_paid: np.ndarray
    fees_paid: np.ndarray
    fees_unpaid: np.ndarray
    foreclosed: np.ndarray
    paid_off: np.ndarray

    def select(self, mask: np.ndarray) -> "EpisodeOutcome":
        return EpisodeOutcome(**{k: v[mask] for k, v in self.__dict__.items()})


@dataclass
class Trace:
    """Month-by-borrower record: every field is an array of shape (T, n)."""

    fields: dict[str, np.ndarray]
    env_idx: np.ndarray
    low_income: np.ndarray
    V: np.ndarray

    @property
    def n_months(self) -> int:
        return len(self.fields["t"]) if self.fields else 0

    def rows(self):
        """One dict per borrower-month, in (month, borrower) order."""
        keys = sorted(self.fields)
        for ti in range(self.n_months):
            for i in range(len(self.env_idx)):
                row = {"schema": TRACE_SCHEMA, "borrower": i, "env": int(self.env_idx[i])}
                for k in keys:
                    v = self.fields[k][ti, i]
                    row[k] = None if isinstance(v, float) and np.isnan(v) else v.item()
                yield row

    def outcome(self) -> EpisodeOutcome:
        """Rebuild the episode summary from the monthly record alone."""
        f = self.fields
        enrolled_now = f["enrolled_now"]
        ever = enrolled_now.any(axis=0)
        step = np.where(ever, enrolled_now.argmax(axis=0), -1)
        last_status = f["status"][-1]
        return EpisodeOutcome(
            env_idx=self.env_idx,
            low_income=self.low_income,
            delinquent_ever=f["missed"].any(axis=0),
            enrolled=ever,
            enroll_step=step,
            cover_total=self.V,
            cover_remaining=f["cover_remaining"][-1],
            cover_drawn=f["cover_draw"].sum(axis=0),
            premium_paid=f["premium"].sum(axis=0),
            fees_paid=f["fee_paid"].sum(axis=0),
            fees_unpaid=(f["fee_due"] - f["fee_paid"]).sum(axis=0),
            foreclosed=last_status == FORECLOSED,
            paid_off=last_status == PAID_OFF,
        )
