from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mortgagesim.errors import ContractError
from mortgagesim.mdp import (
    OBS_BUFFER,
    OBS_DIM,
    OBS_GAMMA,
    OBS_OFFER,
    OBS_PRODUCT,
    BorrowerState,
    PaymentAction,
    Phase,
    ReliefAction,
    legal_actions,
    liquidity,
    observe,
    payment_step,
    relief_step,
    utility,
)
from mortgagesim.population import Group
from mortgagesim.products import CoverLedger, Product, enroll
from mortgagesim.servicing import LoanAccount, Status

M = 150000


def state(income=500000, expenses=200000, savings=1000000, product=Product(), gamma=0.5, paid_frac=0.4, **kw):
    acct = LoanAccount.open(M, M * 360, int(M * 360 * paid_frac))
    return BorrowerState(income, expenses, savings, acct, gamma, Group.OTHER, product, **kw)


def test_utility_example():
    s = state(income=300000, month_Eh=150000)
    assert utility(s, 1.0) == pytest.approx(0.45, abs=1e-12)


def test_utility_zero_income_and_endpoints():
    assert liquidity(100, 0) == 0.0
    s = state(income=300000, month_Eh=150000, gamma=1.0)
    assert utility(s, 0.3) == pytest.approx(0.5)
    s = replace(s, gamma_pref=0.0)
    assert utility(s, 0.5) == pytest.approx(0.2)


@given(st.floats(0, 1), st.integers(0, 10**7), st.integers(0, 10**7), st.floats(1e-6, 1))
def test_utility_bounds(g, eh, inc, h):
    s = replace(state(income=inc, month_Eh=eh), gamma_pref=g)
    assert 0.0 <= utility(s, h) <= 1.0


def test_observation_supertype():
    a, b = observe(state(gamma=0.2), 1.0), observe(state(gamma=0.9), 1.0)
    diff = np.flatnonzero(a != b)
    assert list(diff) == [OBS_GAMMA]
    assert a.shape == (OBS_DIM,)


def test_observation_null_product_and_buffer_clip():
    obs = observe(state(savings=3000000), 1.0)
    assert np.all(obs[OBS_PRODUCT] == 0)
    assert obs[OBS_BUFFER] == 10.0  # 20 before the clip
    assert observe(state(savings=300000), 1.0)[OBS_BUFFER] == pytest.approx(2.0)


@given(st.integers(0, 10**8), st.integers(0, 10**7), st.floats(0, 1))
def test_observation_range(savings, income, g):
    obs = observe(state(savings=savings, income=income, gamma=g), 1.0)
    assert np.all(np.isfinite(obs))
    assert np.all(obs >= -1.0) and np.all(obs <= 10.0)


def test_legal_actions():
    prod = Product(0, 15000, 1800000)
    assert legal_actions(state(product=prod), Phase.PAYMENT) == (0, 1, 2)
    assert legal_actions(state(), Phase.PAYMENT) == (0, 1)
    enrolled = state(product=prod, ledger=enroll(CoverLedger(), prod, 0))
    assert legal_actions(enrolled, Phase.PAYMENT) == (0, 1)
    with pytest.raises(ContractError):
        legal_actions(state(), Phase.RELIEF)


def test_skip_creates_offer_and_relief_flow():
    s, rec = payment_step(state(), PaymentAction.SKIP, 0)
    assert rec.missed and s.delinquent_ever and s.account.offer_pending
    assert legal_actions(s, Phase.RELIEF) == (ReliefAction.ACCEPT, ReliefAction.REJECT)
    obs = observe(s, 1.0, phase=Phase.RELIEF)
    assert obs[OBS_OFFER].tolist() == [1, 0, 0, 0]
    s, fc = relief_step(s, ReliefAction.ACCEPT)
    assert not fc and s.account.status is Status.REPAYMENT_PLAN


def test_skip_counts_as_expense():
    pay, _ = payment_step(state(), PaymentAction.PAY, 0)
    skip, _ = payment_step(state(), PaymentAction.SKIP, 0)
    assert pay.month_Eh == skip.month_Eh == M
    assert utility(skip, 1.0) < utility(pay, 1.0)


def test_pay_with_cover():
    prod = Product(0, 15000, 1800000)
    s = state(income=0, expenses=0, savings=0, product=prod)
    s, rec = payment_step(s, PaymentAction.PAY_AND_ENROLL, 0)
    assert rec.enrolled_now and rec.cover_draw == M + 15000 and not rec.missed
    assert s.month_Eh == 0
    assert s.ledger.cover_remaining == 1800000 - M - 15000


def test_enroll_fails_if_premium_unaffordable():
    prod = Product(500000, 0, 1000000)
    s, rec = payment_step(state(income=0, expenses=0, savings=100000, product=prod), PaymentAction.PAY_AND_ENROLL, 0)
    assert not rec.enrolled_now and not s.ledger.enrolled


def test_product_forbearance_pause():
    prod = Product(0, 0, 0, 3)
    s = state(income=0, expenses=0, savings=0, product=prod)
    s, _ = payment_step(s, PaymentAction.PAY_AND_ENROLL, 0)
    assert s.account.status is Status.FORBEARANCE and not s.delinquent_ever


def test_illegal_action():
    with pytest.raises(ContractError):
        payment_step(state(), PaymentAction.PAY_AND_ENROLL, 0)
