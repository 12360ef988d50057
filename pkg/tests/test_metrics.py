import time
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mortgagesim.economy import NEGATIVE_SHOCKS
from mortgagesim.env import EpisodeOutcome
from mortgagesim.errors import ContractError, GridError, IntegrityError
from mortgagesim.metrics import (
    MetricPoint,
    delinquency_rate,
    integrate_over_shocks,
    pareto_frontier,
    product_cost,
    shock_metrics,
    social_index,
)


def outcome(n, delinquent=(), low=(), enrolled=(), drawn=None, total=None, premium=None, fees=None):
    z = lambda: np.zeros(n, dtype=np.int64)
    flag = lambda idx: np.isin(np.arange(n), list(idx))
    drawn = z() if drawn is None else np.asarray(drawn)
    total = drawn.copy() if total is None else np.asarray(total)
    return EpisodeOutcome(
        env_idx=z(), low_income=flag(low), delinquent_ever=flag(delinquent), enrolled=flag(enrolled),
        enroll_step=np.where(flag(enrolled), 0, -1), cover_total=total, cover_remaining=total - drawn,
        cover_drawn=drawn, premium_paid=z() if premium is None else np.asarray(premium),
        fees_paid=z() if fees is None else np.asarray(fees), fees_unpaid=z(),
        foreclosed=np.zeros(n, bool), paid_off=np.zeros(n, bool),
    )


def test_delinquency_rate():
    r, rg = delinquency_rate(outcome(100, delinquent=range(30), low=range(50)))
    assert r == 0.30 and rg == {"low_income": 0.6, "other": 0.0}
    r, rg = delinquency_rate(outcome(10, low=[1]))
    assert r == 0 and set(rg.values()) == {0.0}


def test_empty_group_omitted_with_warning():
    with pytest.warns(UserWarning, match="empty"):
        _, rg = delinquency_rate(outcome(4, delinquent=[0]))
    assert rg == {"other": 0.25}


def test_cured_borrower_still_delinquent(calibration):
    from mortgagesim.economy import ShockConfig
    from mortgagesim.env import EnvConfig, MortgageEnv
    from mortgagesim.population import sample_population
    from mortgagesim.products import ScaledProductParams

    pop = [p for p in sample_population(calibration, 50, np.random.default_rng(0)) if p.paid_to_date < p.total_loan - 20 * p.monthly_payment_m][:1]
    env = MortgageEnv([pop], [ScaledProductParams()], ShockConfig(per_step_probability=0), EnvConfig(horizon=24), record_trace=True)
    while not env.done:
        env.begin_month()
        env.step_payment([0 if env.t == 5 else 1])
        env.step_relief()
    assert env.status[0] == 0 and env.missed[0] == 0
    assert delinquency_rate(env.trace().outcome(), {"all": np.ones(1, bool)})[0] == 1.0


def test_social_index():
    assert social_index({"low": 0.3, "other": 0.1}) == 0.3
    assert social_index({"low": 0.0, "other": 0.0}) == 0.0
    with pytest.raises(ContractError):
        social_index({})


def test_product_cost_examples():
    out = outcome(3, enrolled=[0, 2], drawn=[100000, 0, 0], total=[100000, 0, 500000],
                  premium=[10000, 0, 75000], fees=[20000, 0, 180000])
    cn, C = product_cost(out)
    assert list(cn) == [70000, 0, -255000]
    assert C == pytest.approx((70000 - 255000) / 3)


def test_product_cost_integrity():
    bad = outcome(1, enrolled=[0], drawn=[100], total=[100])
    bad.cover_remaining[:] = 5
    with pytest.raises(IntegrityError):
        product_cost(bad)
    with pytest.raises(IntegrityError):
        product_cost(outcome(1, drawn=[10]))


def test_integration():
    grid = NEGATIVE_SHOCKS
    assert integrate_over_shocks({s: 1.0 for s in grid}) == pytest.approx(1.0, abs=1e-15)
    assert integrate_over_shocks({s: -s for s in grid}) == pytest.approx(0.5, abs=1e-15)
    assert integrate_over_shocks({s: s * s for s in grid}) == pytest.approx(0.335, abs=1e-12)
    with pytest.raises(GridError, match="-0.3"):
        integrate_over_shocks({s: 1.0 for s in grid if s != -0.3})


@given(st.floats(-100, 100), st.floats(-100, 100))
def test_integration_exact_on_affine(a, b):
    val = integrate_over_shocks({s: a * s + b for s in NEGATIVE_SHOCKS})
    assert val == pytest.approx(-a / 2 + b, abs=1e-9)


def brute_frontier(coords):
    keep = []
    for i, p in enumerate(coords):
        dominated = any(all(q <= p) and any(q < p) for j, q in enumerate(coords) if j != i)
        keep.append(not dominated)
    return np.array(keep)


def test_pareto_hand_cases():
    pts = [MetricPoint("a", (1, 2)), MetricPoint("b", (2, 1)), MetricPoint("c", (2, 2))]
    assert [p.id for p in pareto_frontier(pts)] == ["a", "b"]
    assert pareto_frontier(pts[:1]) == pts[:1]
    assert pareto_frontier([]) == []
    with pytest.raises(ContractError):
        MetricPoint("x", (float("nan"), 1))


def test_pareto_brute_force_1000():
    rng = np.random.default_rng(0)
    coords = rng.random((1000, 2))
    pts = [MetricPoint(str(i), tuple(c)) for i, c in enumerate(coords)]
    t0 = time.perf_counter()
    front = {p.id for p in pareto_frontier(pts)}
    assert time.perf_counter() - t0 < 1.0
    assert front == {str(i) for i in np.flatnonzero(brute_frontier(coords))}


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=40),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_pareto_properties(raw, scale, shift):
    coords = np.array(raw, dtype=float)
    pts = [MetricPoint(str(i), tuple(c)) for i, c in enumerate(coords)]
    front = pareto_frontier(pts)
    assert [p.id for p in front] == [str(i) for i in np.flatnonzero(brute_frontier(coords))]
    assert pareto_frontier(front) == front
    moved = [MetricPoint(p.id, tuple(np.array(p.coords) * scale + shift)) for p in pts]
    assert [p.id for p in pareto_frontier(moved)] == [p.id for p in front]


def test_shock_metrics_usd():
    out = outcome(2, delinquent=[0], low=[0], enrolled=[0], drawn=[100000, 0], total=[200000, 0])
    m = shock_metrics(-0.5, out)
    assert m.C == 500.0 and m.cn_max == 1000.0 and m.omega == 1.0 and m.enrollment == 0.5
