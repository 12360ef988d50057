import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mortgagesim.errors import ContractError, TrainingError
from mortgagesim.learner import (
    Batch,
    CsvLog,
    PolicyNet,
    TrainConfig,
    Trainer,
    collect_rollout,
    gae,
    load_checkpoint,
    make_batch,
    make_policy,
    masked_log_probs,
    policy_forward,
    ppo_loss,
    ppo_update,
    sample_actions,
    save_checkpoint,
    train,
)
from mortgagesim.mdp import OBS_DIM

from oracles import SkipCostEnv


def brute_gae(r, v, d, beta, lam):
    """Direct double sum over future TD errors, cut at the first terminal."""
    K = len(r)
    out = np.zeros(K)
    for t in range(K):
        total = 0.0
        for l in range(K - t):
            j = t + l
            delta = r[j] + beta * v[j + 1] * (1 - d[j]) - v[j]
            total += (beta * lam) ** l * delta
            if d[j]:
                break
        out[t] = total
    return out


def test_gae_hand_example():
    assert np.allclose(gae([1, 1], [0, 0, 0], [0, 0], 1.0, 1.0), [2, 1])


def test_gae_length_mismatch():
    with pytest.raises(ContractError):
        gae([1, 1], [0, 0], [0, 0], 0.9, 0.9)


@settings(max_examples=200)
@given(st.integers(1, 6), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31))
def test_gae_brute_force(K, beta, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=K), rng.normal(size=K + 1)
    d = (rng.random(K) < 0.2).astype(float)
    assert np.allclose(gae(r, v, d, beta, lam), brute_gae(r, v, d, beta, lam), atol=1e-10, rtol=0)


def test_gae_reductions():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=6), rng.normal(size=7)
    d = np.zeros(6)
    one_step = r + 0.9 * v[1:] - v[:-1]
    assert np.array_equal(gae(r, v, d, 0.9, 0.0), one_step)
    mc = np.array([sum(0.9 ** l * r[t + l] for l in range(6 - t)) + 0.9 ** (6 - t) * v[6] for t in range(6)]) - v[:-1]
    assert np.allclose(gae(r, v, d, 0.9, 1.0), mc, atol=1e-12)


@given(st.integers(2, 8), st.integers(0, 2**31))
def test_gae_invalid_steps_are_transparent(K, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=K), rng.normal(size=K + 1)
    valid = rng.random(K) < 0.6
    valid[0] = True
    full = gae(r * valid, v, np.zeros(K), 0.95, 0.9, valid)
    idx = np.flatnonzero(valid)
    compact = gae(r[idx], np.append(v[idx], v[K]), np.zeros(len(idx)), 0.95, 0.9)
    assert np.allclose(full[idx], compact, atol=1e-12)
    assert np.all(full[~valid] == 0)


def test_initial_policy_near_uniform():
    pol = make_policy(TrainConfig())
    obs = np.random.default_rng(0).random((64, OBS_DIM))
    for legal in ([0, 1], [0, 1, 2], [3, 4]):
        mask = np.zeros((64, 5), dtype=bool)
        mask[:, legal] = True
        probs, _ = policy_forward(pol, obs, mask)
        assert np.abs(probs[:, legal] - 1 / len(legal)).max() < 0.05
        assert np.all(probs[~mask] == 0)


def test_single_legal_action_and_purity():
    pol = make_policy(TrainConfig())
    obs = np.random.default_rng(1).random(OBS_DIM)
    mask = np.array([0, 1, 0, 0, 0], dtype=bool)
    p, v = policy_forward(pol, obs, mask)
    assert p[1] == 1.0
    p2, v2 = policy_forward(pol, obs, mask)
    assert np.array_equal(p, p2) and v == v2
    with pytest.raises(ContractError):
        policy_forward(pol, obs, np.zeros(5, dtype=bool))


def test_sample_respects_mask():
    rng = np.random.default_rng(0)
    probs = np.array([[0.0, 1.0, 0, 0, 0], [0.5, 0.5, 0, 0, 0], [0, 0, 0, 0.3, 0.7]])
    for _ in range(200):
        a = sample_actions(probs, rng)
        assert probs[np.arange(3), a].min() > 0
    assert list(sample_actions(probs, rng, greedy=True)) == [1, 0, 4]


def _toy_batch(net, n=16, seed=0, offsets=None):
    rng = np.random.default_rng(seed)
    obs = torch.as_tensor(rng.random((n, net.obs_dim)), dtype=torch.float64)
    mask = torch.zeros((n, 5), dtype=torch.bool)
    mask[: n // 2, :3] = True
    mask[n // 2 :, 3:] = True
    actions = torch.as_tensor(np.where(np.arange(n) < n // 2, rng.integers(0, 3, n), rng.integers(3, 5, n)))
    with torch.no_grad():
        logits, _ = net(obs)
        logp = masked_log_probs(logits, mask).gather(1, actions[:, None]).squeeze(1)
    if offsets is None:
        offsets = rng.choice([0.0, 0.5, -0.5], size=n)
    old = logp - torch.as_tensor(offsets)
    adv = torch.as_tensor(rng.normal(size=n))
    ret = torch.as_tensor(rng.normal(size=n) * 5)
    return dict(obs=obs, mask=mask, actions=actions, old_logp=old, advantages=adv, returns=ret)


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = PolicyNet(obs_dim=4, hidden=(3,), value_scale=10.0).double()
    cfg = TrainConfig()
    batch = _toy_batch(net)
    loss, _ = ppo_loss(net, **batch, config=cfg)
    net.zero_grad()
    loss.backward()
    analytic = torch.cat([p.grad.flatten() for p in net.parameters()]).numpy()
    params = list(net.parameters())
    numeric = []
    eps = 1e-6
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = ppo_loss(net, **batch, config=cfg)[0].item()
                flat[i] = orig - eps
                down = ppo_loss(net, **batch, config=cfg)[0].item()
                flat[i] = orig
                numeric.append((up - down) / (2 * eps))
    numeric = np.array(numeric)
    rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    assert rel < 1e-4


def test_zero_advantage_gives_no_policy_gradient():
    torch.manual_seed(1)
    net = PolicyNet(obs_dim=4, hidden=(5,)).double()
    batch = _toy_batch(net)
    batch["advantages"] = torch.zeros_like(batch["advantages"])
    cfg = TrainConfig(entropy_coef=0.0)
    loss, _ = ppo_loss(net, **batch, config=cfg)
    loss.backward()
    assert torch.all(net.policy_head.weight.grad == 0) and torch.all(net.policy_head.bias.grad == 0)
    assert net.value_head.weight.grad.abs().sum() > 0


def test_clipped_sample_has_zero_logit_gradient():
    torch.manual_seed(2)
    net = PolicyNet(obs_dim=4, hidden=(5,)).double()
    batch = _toy_batch(net, n=2, offsets=np.array([0.5, 0.5]))  # ratio e^0.5 > 1 + eps
    batch["advantages"] = torch.tensor([1.0, 1.0], dtype=torch.float64)
    logits, _ = net(batch["obs"])
    logits.retain_grad()
    logp_all = masked_log_probs(logits, batch["mask"])
    logp = logp_all.gather(1, batch["actions"][:, None]).squeeze(1)
    ratio = torch.exp(logp - batch["old_logp"])
    clipped = torch.clamp(ratio, 0.8, 1.2)
    torch.minimum(ratio, clipped).sum().backward()
    assert torch.all(logits.grad == 0)


def test_nonfinite_gradient_raises():
    net = PolicyNet(obs_dim=4, hidden=(3,)).double()
    b = _toy_batch(net)
    batch = Batch(b["obs"].numpy(), b["mask"].numpy(), b["actions"].numpy(), b["old_logp"].numpy(),
                  np.full(16, np.nan), b["returns"].numpy())
    opt = torch.optim.Adam(net.parameters())
    with pytest.raises(TrainingError, match="non-finite"):
        ppo_update(net, batch, TrainConfig(), opt, np.random.default_rng(0))


def test_rollout_layout():
    env = SkipCostEnv(n=4, horizon=5)
    ro = collect_rollout(env, make_policy(TrainConfig()), np.random.default_rng(0), 5)
    assert ro.obs.shape[:2] == (10, 4) and ro.months == 5
    assert ro.valid[0::2].all() and not ro.valid[1::2].any()
    assert np.all(ro.rewards[0::2] > 0) and np.all(ro.rewards[1::2] == 0)
    b = make_batch(ro, 0.99, 0.95)
    assert len(b) == 20 and not b.forced.any()


def test_learns_to_pay():
    cfg = TrainConfig(iterations=200, rollouts=1, hidden=(16,), learning_rate=3e-3, seed=0)
    trainer = Trainer(cfg, horizon=12)
    rows = []
    policy = train(lambda prods, rng: SkipCostEnv(n=8, horizon=12), lambda rng: None, cfg, 12, log=rows.append, trainer=trainer)
    env = SkipCostEnv(n=64, horizon=12, seed=99)
    probs, _ = policy_forward(policy, *env.payment_observation())
    assert probs[:, 1].min() > 0.9
    assert len(rows) == 200


def _short_run(seed):
    cfg = TrainConfig(iterations=2, rollouts=1, hidden=(8,), seed=seed)
    rows = []
    pol = train(lambda prods, rng: SkipCostEnv(n=4, horizon=6, seed=int(rng.integers(1000))), lambda rng: None, cfg, 6, log=rows.append)
    return rows, pol


def test_training_deterministic():
    (r1, p1), (r2, p2) = _short_run(3), _short_run(3)
    assert r1 == r2
    for a, b in zip(p1.parameters(), p2.parameters()):
        assert torch.equal(a, b)
    assert _short_run(4)[0] != r1


def test_checkpoint_round_trip(tmp_path):
    _, pol = _short_run(0)
    path = tmp_path / "policy.json"
    save_checkpoint(path, pol, "abc", {"k": 1})
    net, doc = load_checkpoint(path)
    assert doc["fingerprint"] == "abc" and doc["meta"] == {"k": 1}
    for a, b in zip(pol.parameters(), net.parameters()):
        assert torch.equal(a, b)
    doc["obs_version"] = "obs/0"
    path.write_text(json.dumps(doc))
    with pytest.raises(ContractError, match="observation"):
        load_checkpoint(path)


def test_trainer_resume_equals_uninterrupted():
    factory = lambda prods, rng: SkipCostEnv(n=4, horizon=6, seed=int(rng.integers(1000)))
    cfg = TrainConfig(iterations=4, rollouts=1, hidden=(8,), seed=5)
    full = []
    train(factory, lambda rng: None, cfg, 6, log=full.append)
    first = Trainer(cfg, 6)
    part = []
    train(factory, lambda rng: None, TrainConfig(**{**cfg.to_dict(), "iterations": 2}), 6, log=part.append, trainer=first)
    state = json.loads(json.dumps(first.state_dict()))
    second = Trainer(cfg, 6)
    second.load_state_dict(state)
    train(factory, lambda rng: None, cfg, 6, log=part.append, trainer=second)
    assert part == full


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(beta=1.0)
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


def test_csv_log_exact_floats(tmp_path):
    log = CsvLog(tmp_path / "x.csv", "fingerprint=f seed=0")
    log({"a": 0.1 + 0.2, "b": 3})
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert lines == ["# fingerprint=f seed=0", "a,b", "0.30000000000000004,3"]
