"""Experiment configuration: YAML in, validated dataclasses out, and back."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .economy import DEFAULT_FORECLOSURE_IMPACT, DEFAULT_SHOCK_PROBABILITY, NEGATIVE_SHOCKS, ShockConfig
from .env import EnvConfig
from .errors import ValidationError
from .learner import TrainConfig
from .mdp import OBS_VERSION
from .outer import Mode, OuterTheta, SearchConfig, TwoLayerConfig
from .population import PopulationCalibration, default_calibration_path, load_calibration
from .servicing import ServicingConfig

LOSSES = ("social_index", "cost")


@dataclass(frozen=True)
class EvaluationConfig:
    shocks: tuple[float, ...] = NEGATIVE_SHOCKS
    shock_month: int = 12
    gamma: float = 0.5
    seeds: tuple[int, ...] = (1000, 1001, 1002)
    n_households: int = 100


@dataclass(frozen=True)
class OuterConfig:
    mode: str = "adaptive"
    iterations: int = 500
    outer_update_period: int = 1
    loss: str = "social_index"
    eval_products: int = 2
    eval_seeds: tuple[int, ...] = (2000,)
    mu: tuple[float, float, float] | None = None  # default: full box
    delta: tuple[float, float, float] | None = None

    def theta0(self, horizon: int) -> OuterTheta:
        box = OuterTheta.full_box(horizon)
        return OuterTheta(self.mu or box.mu, self.delta or box.delta, horizon)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    calibration: str | None = None  # None: packaged synthetic calibration
    n_households: int = 100
    horizon: int = 120
    null_product_share: float = 0.2
    shock_probability: float = DEFAULT_SHOCK_PROBABILITY
    foreclosure_impact: float = DEFAULT_FORECLOSURE_IMPACT
    servicing: ServicingConfig = ServicingConfig()
    train: TrainConfig = TrainConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    outer: OuterConfig = OuterConfig()
    output_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        if self.n_households < 1:
            raise ValidationError("n_households", "must be at least 1")
        if not 1 <= self.horizon <= 360:
            raise ValidationError("horizon", "must lie in [1, 360]")
        if not 0.0 <= self.null_product_share <= 1.0:
            raise ValidationError("null_product_share", "must lie in [0, 1]")
        if self.calibration is not None and not Path(self.calibration).is_file():
            raise ValidationError("calibration", f"file not found: {self.calibration}")
        if self.outer.loss not in LOSSES:
            raise ValidationError("outer.loss", f"must be one of {LOSSES}")
        if self.outer.mode not in {m.value for m in Mode}:
            raise ValidationError("outer.mode", "must be 'fixed' or 'adaptive'")
        if self.outer.eval_products < 1:
            raise ValidationError("outer.eval_products", "must be at least 1")
        if not 0 <= self.evaluation.shock_month < self.horizon:
            raise ValidationError("evaluation.shock_month", "must fall inside the episode")
        if not self.evaluation.seeds:
            raise ValidationError("evaluation.seeds", "need at least one seed")
        ShockConfig(per_step_probability=self.shock_probability)
        self.outer.theta0(self.horizon)
        TwoLayerConfig(Mode(self.outer.mode), self.outer.iterations, self.outer.outer_update_period)
        return self

    # derived runtime objects

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def env_config(self) -> EnvConfig:
        return EnvConfig(horizon=self.horizon, foreclosure_impact=self.foreclosure_impact, servicing=self.servicing)

    def shock_config(self) -> ShockConfig:
        return ShockConfig(per_step_probability=self.shock_probability)

    def two_layer_config(self, mode: str | None = None) -> TwoLayerConfig:
        return TwoLayerConfig(Mode(mode or self.outer.mode), self.outer.iterations, self.outer.outer_update_period, SearchConfig(), self.seed)

    def load_calibration(self) -> PopulationCalibration:
        return load_calibration(self.calibration)

    # serialisation

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["train"].pop("seed")
        return _lists(d)

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        data = dict(data or {})
        nested = {"servicing": ServicingConfig, "evaluation": EvaluationConfig, "outer": OuterConfig}
        _check_keys(data, cls, "")
        kwargs = {}
        for k, v in data.items():
            if k in nested:
                if not isinstance(v, dict):
                    raise ValidationError(k, "must be a mapping")
                _check_keys(v, nested[k], f"{k}.")
                kwargs[k] = nested[k](**{kk: _tuples(vv) for kk, vv in v.items()})
            elif k == "train":
                if not isinstance(v, dict):
                    raise ValidationError(k, "must be a mapping")
                _check_keys(v, TrainConfig, "train.")
                if "seed" in v:
                    raise ValidationError("train.seed", "set the top-level seed instead")
                try:
                    kwargs[k] = TrainConfig.from_dict(v)
                except Exception as exc:
                    raise ValidationError("train", str(exc)) from None
            else:
                kwargs[k] = v
        return cls(**kwargs).validate()

    def fingerprint(self) -> str:
        """Hash of every setting that affects results (the output directory excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        d["seed"] = None
        return _hash(d)

    def policy_fingerprint(self) -> str:
        """Hash of what a checkpoint must agree on to be evaluated under this config."""
        return _hash(
            {
                "obs_version": OBS_VERSION,
                "horizon": self.horizon,
                "hidden": list(self.train.hidden),
                "servicing": asdict(self.servicing),
            }
        )


def _hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def _check_keys(data: dict, cls, prefix: str) -> None:
    known = {f.name for f in fields(cls)}
    for k in data:
        if k not in known:
            raise ValidationError(f"{prefix}{k}", "unknown key")


def _tuples(v):
    return tuple(_tuples(x) for x in v) if isinstance(v, list) else v


def _lists(v):
    if isinstance(v, dict):
        return {k: _lists(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_lists(x) for x in v]
    return v


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise ValidationError("config", f"file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(str(path), f"parse error: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ValidationError(str(path), "top level must be a mapping")
    try:
        return ExperimentConfig.from_dict(data)
    except TypeError as exc:
        raise ValidationError(str(path), str(exc)) from None


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
