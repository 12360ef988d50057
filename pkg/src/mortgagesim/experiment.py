"""Glue between the simulator, the learner and the metrics: training
environments, product sources, and scripted-shock evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .economy import NEGATIVE_SHOCKS, ShockConfig
from .env import EnvConfig, MortgageEnv
from .learner import PolicyNet, Trainer, collect_rollout
from .metrics import EvaluationResult, shock_metrics
from .population import PopulationCalibration, sample_population
from .outer import OuterTheta, sample_product_params
from .products import ScaledProductParams

EVAL_GAMMA = 0.5
DEFAULT_SHOCK_MONTH = 12


@dataclass(frozen=True)
class TrainingWorld:
    """Everything needed to build fresh training environments."""

    calibration: PopulationCalibration
    n_households: int = 100
    env: EnvConfig = EnvConfig()
    shocks: ShockConfig = ShockConfig()

    def factory(self, products: Sequence[ScaledProductParams], rng: np.random.Generator) -> MortgageEnv:
        """One environment per product, each with a freshly drawn population (gamma ~ U[0, 1])."""
        pops = [sample_population(self.calibration, self.n_households, rng) for _ in products]
        return MortgageEnv(pops, list(products), self.shocks, self.env, rng=rng)


def box_product_source(horizon: int, null_share: float = 0.0) -> Callable[[np.random.Generator], ScaledProductParams]:
    """Uniform draws over the full legal box, with an optional share of the null product."""

    def draw(rng: np.random.Generator) -> ScaledProductParams:
        u = rng.random(4)
        if u[0] < null_share:
            return ScaledProductParams()
        return ScaledProductParams(float(u[1]), float(u[2]), float(u[3] * horizon))

    return draw


def evaluate_product(
    policy: PolicyNet,
    calibration: PopulationCalibration,
    product: ScaledProductParams,
    seeds: Sequence[int],
    n_households: int = 100,
    env_config: EnvConfig = EnvConfig(),
    shocks: Sequence[float] = NEGATIVE_SHOCKS,
    shock_month: int = DEFAULT_SHOCK_MONTH,
    gamma: float = EVAL_GAMMA,
    greedy: bool = True,
) -> EvaluationResult:
    """Scripted-shock evaluation of one product across a shock grid.

    For each seed one population is drawn and replayed under every shock
    level, so curves differ only through the shock. Borrowers are pooled
    across seeds.
    """
    outcomes = {s: [] for s in shocks}
    for seed in seeds:
        pop_rng = rngmod.stream(seed, "evaluation")
        pop = sample_population(calibration, n_households, pop_rng, gamma=gamma)
        cfgs = [ShockConfig.evaluation(shock_month, s) for s in shocks]
        env = MortgageEnv([pop] * len(shocks), [product] * len(shocks), cfgs, env_config, rng=pop_rng)
        collect_rollout(env, policy, rngmod.stream(seed, "evaluation", 1), env_config.horizon, greedy=greedy)
        out = env.outcome()
        for k, s in enumerate(shocks):
            outcomes[s].append(out.select(out.env_idx == k))
    per_shock = [shock_metrics(s, _concat(outcomes[s])) for s in shocks]
    return EvaluationResult(product.to_dict(), per_shock, list(seeds), len(seeds) * len(shocks))


def _concat(parts):
    first = parts[0]
    return type(first)(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in first.__dict__})


def integrated_loss(result: EvaluationResult, loss: str) -> float:
    """Outer-layer loss from one evaluated product: integrated omega or integrated cost."""
    key = {"social_index": "omega", "cost": "C"}[loss]
    return result.integrated[key]


class RLInner:
    """Inner layer of the two-layer loop: one PPO iteration on products
    drawn from theta, then evaluation of freshly drawn products."""

    def __init__(
        self,
        world: TrainingWorld,
        trainer: Trainer,
        loss: str,
        eval_products: int,
        eval_seeds: Sequence[int],
        eval_shock_month: int = DEFAULT_SHOCK_MONTH,
        checkpoint: Callable[[int], str] | None = None,
    ):
        self.world = world
        self.trainer = trainer
        self.loss = loss
        self.eval_products = eval_products
        self.eval_seeds = list(eval_seeds)
        self.eval_shock_month = eval_shock_month
        self.checkpoint = checkpoint
        self.rng = rngmod.stream(trainer.config.seed, "evaluation", 2)

    def step(self, theta: OuterTheta, iteration: int) -> dict:
        train_products = [sample_product_params(theta, self.trainer.product_rng) for _ in range(self.trainer.config.rollouts)]
        train_row, _ = self.trainer.iterate(self.world.factory, train_products)
        eval_products = [sample_product_params(theta, self.rng) for _ in range(self.eval_products)]
        losses, evaluated = [], []
        for prod in eval_products:
            res = evaluate_product(
                self.trainer.policy, self.world.calibration, prod, self.eval_seeds,
                self.world.n_households, self.world.env, shock_month=self.eval_shock_month,
            )
            losses.append(integrated_loss(res, self.loss))
            evaluated.append({**prod.to_dict(), **{f"int_{k}": v for k, v in res.integrated.items()}})
        out = {
            "loss": float(np.mean(losses)),
            "products": evaluated,
            "metrics": {"train": train_row},
        }
        if self.checkpoint is not None:
            out["checkpoint"] = self.checkpoint(iteration)
        return out

    def state_dict(self) -> dict:
        return {"trainer": self.trainer.state_dict(), "rng": rngmod.get_state(self.rng)}

    def load_state_dict(self, state: dict) -> None:
        self.trainer.load_state_dict(state["trainer"])
        rngmod.set_state(self.rng, state["rng"])
