"""Shared product-conditioned borrower policy and its PPO trainer.

One network serves every borrower. Its five logits cover both decision
heads (payment: skip / pay / pay-and-enroll, relief: accept / reject); the
legality mask of each sample selects the head. A scalar value head shares
the trunk.

Rollouts are laid out on a grid of ``2 * T`` slots per agent: slot ``2t``
is the payment decision of month ``t`` and slot ``2t + 1`` the relief
decision, present only when an offer is pending. Absent relief slots are
transparent to GAE. A month's utility is credited to its last decision.
Agents whose loan has ended keep a forced single-action payment slot so
the utility they keep earning still reaches the value function.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from . import rng as rngmod
from .errors import ContractError, TrainingError, add_context
from .mdp import N_ACTIONS, OBS_DIM, OBS_VERSION

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mortgagesim-policy/1"
ADV_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    rollouts: int = 10
    beta: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    learning_rate: float = 3e-4
    minibatch_size: int = 4096
    epochs: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.rollouts < 1:
            raise ContractError("iterations must be >= 0 and rollouts >= 1")
        if not 0.0 < self.beta < 1.0:
            raise ContractError("beta must lie in (0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ContractError("gae_lambda must lie in [0, 1]")
        if self.clip_epsilon <= 0 or self.learning_rate <= 0 or self.minibatch_size < 1 or self.epochs < 1:
            raise ContractError("clip_epsilon, learning_rate, minibatch_size and epochs must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class PolicyNet(nn.Module):
    """Tanh MLP trunk with a 5-way action head and a scalar value head."""

    def __init__(self, obs_dim: int = OBS_DIM, hidden: Sequence[int] = (64, 64), value_scale: float = 100.0):
        super().__init__()
        layers: list[nn.Module] = []
        d = obs_dim
        for width in hidden:
            layers += [nn.Linear(d, width), nn.Tanh()]
            d = width
        self.trunk = nn.Sequential(*layers)
        self.policy_head = nn.Linear(d, N_ACTIONS)
        self.value_head = nn.Linear(d, 1)
        self.obs_dim = obs_dim
        self.hidden = tuple(hidden)
        self.value_scale = value_scale

    def reset_parameters(self, generator: torch.Generator) -> None:
        for mod in self.trunk:
            if isinstance(mod, nn.Linear):
                nn.init.orthogonal_(mod.weight, gain=np.sqrt(2), generator=generator)
                nn.init.zeros_(mod.bias)
        nn.init.orthogonal_(self.policy_head.weight, gain=0.01, generator=generator)
        nn.init.zeros_(self.policy_head.bias)
        nn.init.orthogonal_(self.value_head.weight, gain=1.0, generator=generator)
        nn.init.zeros_(self.value_head.bias)

    def forward(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.trunk(obs)
        return self.policy_head(z), self.value_head(z).squeeze(-1) * self.value_scale


def make_policy(config: TrainConfig, obs_dim: int = OBS_DIM) -> PolicyNet:
    net = PolicyNet(obs_dim, config.hidden, value_scale=1.0 / (1.0 - config.beta))
    gen = torch.Generator().manual_seed(rngmod.stream_seed(config.seed, "torch"))
    net.reset_parameters(gen)
    return net


def masked_log_probs(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)


def masked_entropy(logp: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    p = logp.exp()
    return -(p * torch.where(mask, logp, torch.zeros_like(logp))).sum(-1)


def policy_forward(policy: PolicyNet, obs, mask) -> tuple[np.ndarray, np.ndarray]:
    """Action probabilities over the five actions (zero where illegal) and values."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        probs, value = policy_forward(policy, np.asarray(obs)[None], mask[None])
        return probs[0], value[0]
    if not mask.any(axis=1).all():
        raise ContractError("every row needs at least one legal action")
    dtype = next(policy.parameters()).dtype
    with torch.no_grad():
        logits, value = policy(torch.as_tensor(np.asarray(obs), dtype=dtype))
        probs = masked_log_probs(logits, torch.as_tensor(mask)).exp()
    return probs.double().numpy(), value.double().numpy()


def sample_actions(probs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> np.ndarray:
    if greedy:
        return probs.argmax(axis=1)
    u = rng.random(len(probs))
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1)
    # never land on a zero-probability action through round-off
    idx = np.minimum(idx, N_ACTIONS - 1)
    bad = probs[np.arange(len(idx)), idx] == 0
    if bad.any():
        idx[bad] = probs[bad].argmax(axis=1)
    return idx


def gae(rewards, values, dones, beta: float, lam: float, valid=None) -> np.ndarray:
    """Generalised advantage estimates, time-major.

    ``values`` carries one more entry than ``rewards`` along time (the
    bootstrap value). ``dones[k]`` cuts bootstrapping after step ``k``.
    Steps with ``valid == False`` are skipped as if absent.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    K = rewards.shape[0]
    if values.shape[0] != K + 1 or values.shape[1:] != rewards.shape[1:] or dones.shape != rewards.shape:
        raise ContractError(
            f"length mismatch: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}"
        )
    adv = np.zeros_like(rewards)
    next_adv = np.zeros(rewards.shape[1:])
    next_value = values[K].copy()
    for k in range(K - 1, -1, -1):
        cont = 1.0 - dones[k]
        delta = rewards[k] + beta * next_value * cont - values[k]
        a = delta + beta * lam * cont * next_adv
        if valid is None:
            adv[k], next_adv, next_value = a, a, values[k]
        else:
            v = np.asarray(valid[k], dtype=bool)
            adv[k] = np.where(v, a, 0.0)
            next_adv = np.where(v, a, next_adv)
            next_value = np.where(v, values[k], next_value)
    return adv


# -- rollouts ---------------------------------------------------------------


class VectorEnv(Protocol):
    n: int
    t: int
    done: bool

    def begin_month(self): ...
    def payment_observation(self) -> tuple[np.ndarray, np.ndarray]: ...
    def step_payment(self, actions) -> None: ...
    def relief_observation(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]: ...
    def step_relief(self, actions) -> np.ndarray: ...


@dataclass
class Rollout:
    obs: np.ndarray  # (K, n, D)
    mask: np.ndarray  # (K, n, A)
    actions: np.ndarray  # (K, n)
    logp: np.ndarray  # (K, n)
    values: np.ndarray  # (K + 1, n)
    rewards: np.ndarray  # (K, n)
    valid: np.ndarray  # (K, n)
    months: int

    def advantages(self, beta: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
        adv = gae(self.rewards, self.values, np.zeros_like(self.rewards), beta, lam, self.valid)
        return adv, adv + self.values[:-1]


def collect_rollout(env: VectorEnv, policy: PolicyNet, rng: np.random.Generator, horizon: int, greedy: bool = False) -> Rollout:
    n, K = env.n, 2 * horizon
    obs_buf = np.zeros((K, n, OBS_DIM), dtype=np.float32)
    mask_buf = np.zeros((K, n, N_ACTIONS), dtype=bool)
    act_buf = np.zeros((K, n), dtype=np.int64)
    logp_buf = np.zeros((K, n))
    val_buf = np.zeros((K + 1, n))
    rew_buf = np.zeros((K, n))
    valid = np.zeros((K, n), dtype=bool)
    months = 0
    while not env.done:
        k = 2 * env.t
        env.begin_month()
        obs, mask = env.payment_observation()
        probs, v = policy_forward(policy, obs, mask)
        a = sample_actions(probs, rng, greedy)
        obs_buf[k], mask_buf[k], act_buf[k], val_buf[k] = obs, mask, a, v
        logp_buf[k] = np.log(probs[np.arange(n), a])
        valid[k] = True
        env.step_payment(a)

        robs, rmask, active = env.relief_observation()
        ra = np.full(n, N_ACTIONS - 2, dtype=np.int64)
        if active.any():
            rows = np.flatnonzero(active)
            rp, rv = policy_forward(policy, robs[rows], rmask[rows])
            ra[rows] = sample_actions(rp, rng, greedy)
            obs_buf[k + 1, rows], mask_buf[k + 1, rows], val_buf[k + 1, rows] = robs[rows], rmask[rows], rv
            act_buf[k + 1, rows] = ra[rows]
            logp_buf[k + 1, rows] = np.log(rp[np.arange(len(rows)), ra[rows]])
            valid[k + 1, rows] = True
        r = env.step_relief(ra)
        rew_buf[k + 1, active] = r[active]
        rew_buf[k, ~active] = r[~active]
        months += 1
    K_used = 2 * months
    obs, mask = env.payment_observation()
    _, v_boot = policy_forward(policy, obs, mask)
    val_buf[K_used] = v_boot
    return Rollout(
        obs_buf[:K_used], mask_buf[:K_used], act_buf[:K_used], logp_buf[:K_used],
        val_buf[: K_used + 1], rew_buf[:K_used], valid[:K_used], months,
    )


@dataclass
class Batch:
    obs: np.ndarray
    mask: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def forced(self) -> np.ndarray:
        return self.mask.sum(axis=1) <= 1


def make_batch(rollout: Rollout, beta: float, lam: float) -> Batch:
    adv, ret = rollout.advantages(beta, lam)
    v = rollout.valid
    return Batch(rollout.obs[v], rollout.mask[v], rollout.actions[v], rollout.logp[v], adv[v], ret[v])


# -- PPO --------------------------------------------------------------------


def ppo_loss(policy: PolicyNet, obs, mask, actions, old_logp, advantages, returns, config: TrainConfig):
    """Clipped surrogate + value loss - entropy bonus, as tensors.

    ``advantages`` are used as given (normalise before calling). Rows with
    a single legal action carry no policy signal and only enter the value loss.
    """
    logits, value = policy(obs)
    logp_all = masked_log_probs(logits, mask)
    logp = logp_all.gather(1, actions[:, None]).squeeze(1)
    choice = (mask.sum(-1) > 1).to(logits.dtype)
    denom = choice.sum().clamp(min=1.0)
    ratio = torch.exp(logp - old_logp)
    clipped = torch.clamp(ratio, 1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon)
    surrogate = torch.minimum(ratio * advantages, clipped * advantages)
    policy_loss = -(surrogate * choice).sum() / denom
    value_loss = (((value - returns) / policy.value_scale) ** 2).mean()
    entropy = (masked_entropy(logp_all, mask) * choice).sum() / denom
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    with torch.no_grad():
        approx_kl = (((ratio - 1) - (logp - old_logp)) * choice).sum() / denom
    return loss, {
        "policy_loss": policy_loss.item(),
        "value_loss": value_loss.item(),
        "entropy": entropy.item(),
        "approx_kl": approx_kl.item(),
    }


def normalise_advantages(adv: np.ndarray, choice: np.ndarray) -> np.ndarray:
    sel = adv[choice]
    if sel.size == 0:
        return adv
    return (adv - sel.mean()) / (sel.std() + ADV_EPS)


def ppo_update(
    policy: PolicyNet,
    batch: Batch,
    config: TrainConfig,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
) -> dict[str, float]:
    """Run ``epochs`` passes of minibatch PPO on ``batch``; returns mean diagnostics."""
    dtype = next(policy.parameters()).dtype
    choice = ~batch.forced
    adv = normalise_advantages(batch.advantages, choice)
    tensors = dict(
        obs=torch.as_tensor(batch.obs, dtype=dtype),
        mask=torch.as_tensor(batch.mask),
        actions=torch.as_tensor(batch.actions),
        old_logp=torch.as_tensor(batch.logp, dtype=dtype),
        advantages=torch.as_tensor(adv, dtype=dtype),
        returns=torch.as_tensor(batch.returns, dtype=dtype),
    )
    stats: dict[str, list[float]] = {}
    n = len(batch)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = torch.as_tensor(perm[start : start + config.minibatch_size])
            mb = {k: v[idx] for k, v in tensors.items()}
            loss, info = ppo_loss(policy, **mb, config=config)
            optimizer.zero_grad()
            loss.backward()
            grads = [p.grad for p in policy.parameters() if p.grad is not None]
            if not all(torch.isfinite(g).all() for g in grads):
                raise TrainingError(f"non-finite gradient (epoch {epoch}, minibatch at {start}, loss {loss.item()!r}, {info})")
            nn.utils.clip_grad_norm_(policy.parameters(), config.max_grad_norm)
            optimizer.step()
            for k, v in info.items():
                stats.setdefault(k, []).append(v)
    return {k: float(np.mean(v)) for k, v in stats.items()}


# -- training loop ----------------------------------------------------------

EnvFactory = Callable[[list, np.random.Generator], VectorEnv]
ProductSource = Callable[[np.random.Generator], object]


class Trainer:
    """Holds the policy, optimiser and RNG streams across iterations."""

    def __init__(self, config: TrainConfig, horizon: int, policy: PolicyNet | None = None):
        torch.set_num_threads(1)
        self.config = config
        self.horizon = horizon
        self.policy = policy if policy is not None else make_policy(config)
        self.optimizer = torch.optim.Adam(self.policy.parameters(), lr=config.learning_rate)
        self.learner_rng = rngmod.stream(config.seed, "learner")
        self.env_rng = rngmod.stream(config.seed, "population")
        self.product_rng = rngmod.stream(config.seed, "outer")
        self.iteration = 0

    def collect(self, env_factory: EnvFactory, products: list) -> tuple[Rollout, VectorEnv]:
        env = env_factory(products, self.env_rng)
        return collect_rollout(env, self.policy, self.learner_rng, self.horizon), env

    def update(self, rollout: Rollout) -> dict[str, float]:
        batch = make_batch(rollout, self.config.beta, self.config.gae_lambda)
        return ppo_update(self.policy, batch, self.config, self.optimizer, self.learner_rng)

    def iterate(self, env_factory: EnvFactory, products: list) -> tuple[dict, VectorEnv]:
        """Collect one batch of rollouts (one product per environment) and update."""
        try:
            rollout, env = self.collect(env_factory, products)
            stats = self.update(rollout)
        except Exception as exc:
            raise add_context(exc, f"iteration {self.iteration}")
        row = {
            "iteration": self.iteration,
            "mean_reward": float(rollout.rewards.sum() / max(rollout.rewards.shape[1] * rollout.months, 1)),
            "delinquency": float(np.mean(getattr(env, "delinquent_ever", np.zeros(1)))),
            "enrollment": float(np.mean(getattr(env, "enrolled", np.zeros(1)))),
            **stats,
        }
        self.iteration += 1
        return row, env

    # checkpoint state

    def state_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "params": tensors_to_lists(self.policy.state_dict()),
            "optimizer": optimizer_to_lists(self.optimizer),
            "rng": {
                "learner": rngmod.get_state(self.learner_rng),
                "population": rngmod.get_state(self.env_rng),
                "outer": rngmod.get_state(self.product_rng),
            },
        }

    def load_state_dict(self, state: dict) -> None:
        self.iteration = int(state["iteration"])
        self.policy.load_state_dict(lists_to_tensors(state["params"], self.policy.state_dict()))
        optimizer_from_lists(self.optimizer, state["optimizer"])
        rngmod.set_state(self.learner_rng, state["rng"]["learner"])
        rngmod.set_state(self.env_rng, state["rng"]["population"])
        rngmod.set_state(self.product_rng, state["rng"]["outer"])


def train(
    env_factory: EnvFactory,
    product_source: ProductSource,
    config: TrainConfig,
    horizon: int,
    log: Callable[[dict], None] | None = None,
    trainer: Trainer | None = None,
) -> PolicyNet:
    """Run PPO for ``config.iterations``; products are resampled for every rollout."""
    trainer = trainer or Trainer(config, horizon)
    while trainer.iteration < config.iterations:
        products = [product_source(trainer.product_rng) for _ in range(config.rollouts)]
        row, _ = trainer.iterate(env_factory, products)
        logger.info("iter %d reward %.4f delinquency %.3f", row["iteration"], row["mean_reward"], row["delinquency"])
        if log is not None:
            log(row)
    return trainer.policy


# -- serialisation ----------------------------------------------------------


def tensors_to_lists(state: dict) -> dict:
    return {k: {"shape": list(v.shape), "data": v.detach().double().flatten().tolist()} for k, v in state.items()}


def lists_to_tensors(data: dict, template: dict) -> dict:
    out = {}
    for k, ref in template.items():
        entry = data[k]
        out[k] = torch.tensor(entry["data"], dtype=ref.dtype).reshape(entry["shape"])
    return out


def optimizer_to_lists(opt: torch.optim.Optimizer) -> dict:
    sd = opt.state_dict()
    state = {
        str(i): {k: ({"shape": list(v.shape), "data": v.double().flatten().tolist()} if torch.is_tensor(v) else v) for k, v in s.items()}
        for i, s in sd["state"].items()
    }
    return {"state": state, "param_groups": sd["param_groups"]}


def optimizer_from_lists(opt: torch.optim.Optimizer, data: dict) -> None:
    ref = opt.state_dict()
    dtype = next(iter(opt.param_groups[0]["params"])).dtype
    state = {}
    for i, s in data["state"].items():
        state[int(i)] = {
            k: (torch.tensor(v["data"], dtype=torch.float32 if k == "step" else dtype).reshape(v["shape"]) if isinstance(v, dict) else v)
            for k, v in s.items()
        }
    groups = [dict(g) for g in data["param_groups"]]
    for g, r in zip(groups, ref["param_groups"]):
        g["params"] = r["params"]
    opt.load_state_dict({"state": state, "param_groups": groups})


def config_fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, policy: PolicyNet, fingerprint: str, meta: dict | None = None, trainer_state: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "obs_version": OBS_VERSION,
        "fingerprint": fingerprint,
        "arch": {"obs_dim": policy.obs_dim, "hidden": list(policy.hidden), "value_scale": policy.value_scale},
        "meta": meta or {},
        "params": tensors_to_lists(policy.state_dict()),
    }
    if trainer_state is not None:
        doc["trainer"] = trainer_state
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[PolicyNet, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    if doc.get("obs_version") != OBS_VERSION:
        raise ContractError(f"{path}: observation layout {doc.get('obs_version')!r} != {OBS_VERSION!r}")
    arch = doc["arch"]
    net = PolicyNet(arch["obs_dim"], tuple(arch["hidden"]), arch["value_scale"])
    net.load_state_dict(lists_to_tensors(doc["params"], net.state_dict()))
    return net, doc


class CsvLog:
    """Append-only CSV writer with a fixed header and exact float formatting."""

    def __init__(self, path: str | Path, header_comment: str | None = None, append: bool = False):
        self.path = Path(path)
        self.header_comment = header_comment
        self.fields: list[str] | None = None
        if append and self.path.exists():
            with self.path.open() as fh:
                for line in fh:
                    if not line.startswith("#"):
                        self.fields = line.strip().split(",")
                        break
        else:
            self.path.write_text("" if header_comment is None else f"# {header_comment}\n")

    def __call__(self, row: dict) -> None:
        if self.fields is None:
            self.fields = list(row)
            with self.path.open("a") as fh:
                fh.write(",".join(self.fields) + "\n")
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow([_fmt(row.get(k)) for k in self.fields])
        with self.path.open("a") as fh:
            fh.write(buf.getvalue())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)
