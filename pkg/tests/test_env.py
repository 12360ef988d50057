import dataclasses

import numpy as np
import pytest

from mortgagesim import mdp
from mortgagesim.economy import ShockConfig, apply_shock
from mortgagesim.env import EnvConfig, MortgageEnv
from mortgagesim.errors import ContractError
from mortgagesim.population import sample_population
from mortgagesim.products import ScaledProductParams, scale_product
from mortgagesim.servicing import Status

from oracles import accounting_violations, random_episode


def test_matches_scalar_reference(calibration):
    """Step the vectorised world and the single-borrower MDP side by side."""
    rng = np.random.default_rng(1)
    pops = [sample_population(calibration, 15, rng) for _ in range(3)]
    prods = [ScaledProductParams(0.1, 0.05, 30.0), ScaledProductParams(), ScaledProductParams(0.0, 0.0, 0.0, 6)]
    cfg = EnvConfig(horizon=60)
    env = MortgageEnv(pops, prods, ShockConfig(per_step_probability=0.3), cfg, rng=np.random.default_rng(5))
    states = [
        mdp.BorrowerState.from_profile(p, scale_product(prods[e], p.monthly_payment_m, 60))
        for e, pop in enumerate(pops) for p in pop
    ]
    h = np.ones(3)
    arng = np.random.default_rng(9)
    mc = cfg.mdp_config()
    while not env.done:
        s = env.begin_month()
        states = [st if np.isnan(si) else dataclasses.replace(st, income_I=apply_shock(st.income_I, si)) for st, si in zip(states, s)]
        obs, mask = env.payment_observation()
        acts = np.array([arng.choice(np.flatnonzero(r)) for r in mask])
        for i, st in enumerate(states):
            assert np.allclose(mdp.observe(st, h[env.env_idx[i]], mc), obs[i])
            assert set(np.flatnonzero(mask[i])) == set(mdp.legal_actions(st, mdp.Phase.PAYMENT))
        env.step_payment(acts)
        states = [mdp.payment_step(st, a, env.t, mc)[0] for st, a in zip(states, acts)]
        obs, mask, active = env.relief_observation()
        racts = np.array([arng.choice(np.flatnonzero(r)) if a else 3 for r, a in zip(mask, active)])
        fc = np.zeros(3, int)
        for i, st in enumerate(states):
            assert st.account.offer_pending == active[i]
            if active[i]:
                assert np.allclose(mdp.observe(st, h[env.env_idx[i]], mc, mdp.Phase.RELIEF), obs[i])
                states[i], f = mdp.relief_step(st, racts[i], mc)
                fc[env.env_idx[i]] += f
        r = env.step_relief(racts)
        h = np.maximum(h * (1 - fc * 0.01), 1e-6)
        for i, st in enumerate(states):
            assert mdp.utility(st, h[env.env_idx[i]]) == pytest.approx(r[i], abs=1e-12)
            assert st.account.total_paid == env.total_paid[i]
            assert st.savings_A == env.savings[i]
            assert int(st.account.status) == env.status[i]
            assert st.ledger.cover_remaining == env.cover_remaining[i]


@pytest.mark.parametrize("seed", range(40))
def test_accounting_random_episodes(calibration, seed):
    env, start = random_episode(calibration, seed)
    assert accounting_violations(env, start) == []


def test_trace_outcome_matches_env(calibration):
    env, _ = random_episode(calibration, 123)
    a, b = env.outcome(), env.trace().outcome()
    for k in a.__dict__:
        assert np.array_equal(getattr(a, k), getattr(b, k)), k


def test_products_compiled_out_equals_null(calibration):
    rng = np.random.default_rng(4)
    pops = [sample_population(calibration, 20, rng)]
    runs = []
    for prod, use in ((ScaledProductParams(), True), (ScaledProductParams(0.2, 0.1, 60.0), False)):
        env = MortgageEnv(pops, [prod], ShockConfig(per_step_probability=0.3), EnvConfig(horizon=48),
                          rng=np.random.default_rng(7), record_trace=True, use_products=use)
        arng = np.random.default_rng(8)
        while not env.done:
            env.begin_month()
            _, mask = env.payment_observation()
            env.step_payment(np.where(mask[:, 0] & (arng.random(env.n) < 0.3), 0, 1))
            env.step_relief()
        runs.append(env.trace().fields)
    assert runs[0].keys() == runs[1].keys()
    for k in runs[0]:
        assert np.array_equal(runs[0][k], runs[1][k], equal_nan=True), k


def test_hpi_after_five_foreclosures(calibration):
    rng = np.random.default_rng(0)
    pop = sample_population(calibration, 100, rng)
    env = MortgageEnv([pop], [ScaledProductParams()], ShockConfig(per_step_probability=0.0), EnvConfig(), rng=rng)
    env.begin_month()
    env.step_payment(np.where(env.payment_mask()[:, 0], 0, 1))
    env.rung[:] = 3
    active = np.flatnonzero(env.offer_pending)
    assert len(active) >= 5
    env.offer_pending[active[5:]] = False
    env.step_relief()
    assert env.foreclosures_by_month[-1][0] == 5
    assert env.h[0] == pytest.approx(0.95, abs=1e-12)


def test_total_income_loss_then_skip_gets_offer(calibration):
    pop = sample_population(calibration, 10, np.random.default_rng(2))
    env = MortgageEnv([pop], [ScaledProductParams()], ShockConfig.evaluation(0, -1.0), EnvConfig(), record_trace=True)
    env.begin_month()
    assert (env.income == 0).all()
    live = ~env.terminal
    env.step_payment(np.where(live, 0, 1))
    _, mask, active = env.relief_observation()
    assert np.array_equal(active, live)
    assert (env.status[live] == int(Status.DELINQUENT)).all()


def test_illegal_action_names_borrower(calibration):
    pop = sample_population(calibration, 3, np.random.default_rng(2))
    env = MortgageEnv([pop], [ScaledProductParams()], ShockConfig(), EnvConfig())
    env.begin_month()
    with pytest.raises(ContractError, match="borrower"):
        env.step_payment(np.full(3, 2))
