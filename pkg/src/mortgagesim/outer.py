"""Product-design layer.

The outer layer owns a box distribution over scaled products (p0, p, v):
per parameter a centre ``mu`` and half-width ``delta``, clamped into the
legal box ``[0,1] x [0,1] x [0,T]``. In fixed mode it is a constant
distribution; in adaptive mode it is nudged by bounded actions chosen to
lower a loss computed from evaluated products.

``run_two_layer`` alternates the two layers: an inner step (policy
training on products drawn from the current distribution, then evaluation)
followed, every ``outer_update_period`` iterations, by one outer update.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import rng as rngmod
from .errors import ContractError, ValidationError, add_context
from .products import ScaledProductParams

logger = logging.getLogger(__name__)

PARAMS = ("p0", "p", "v")
DELTA_MIN_FRACTION = 0.01
MAX_STEP_FRACTION = 0.05


def box_upper(horizon: int) -> np.ndarray:
    return np.array([1.0, 1.0, float(horizon)])


@dataclass(frozen=True)
class OuterTheta:
    """Uniform box distribution: parameter k is drawn from [mu_k - delta_k, mu_k + delta_k] clamped to the legal box."""

    mu: tuple[float, float, float]
    delta: tuple[float, float, float]
    horizon: int = 120
    F: int = 0

    def __post_init__(self):
        mu, delta = np.asarray(self.mu, float), np.asarray(self.delta, float)
        if mu.shape != (3,) or delta.shape != (3,):
            raise ValidationError("theta", "mu and delta need one entry per parameter (p0, p, v)")
        if not (np.isfinite(mu).all() and np.isfinite(delta).all()):
            raise ValidationError("theta", "mu and delta must be finite")
        for k, name in enumerate(PARAMS):
            if delta[k] < 0:
                raise ValidationError(f"delta_{name}", "half-width must be non-negative")
        upper = box_upper(self.horizon)
        outside = (mu - delta > upper) | (mu + delta < 0.0)
        if outside.any():
            k = int(np.flatnonzero(outside)[0])
            raise ValidationError(f"mu_{PARAMS[k]}", "interval lies outside the legal box")

    @classmethod
    def full_box(cls, horizon: int = 120) -> "OuterTheta":
        upper = box_upper(horizon)
        return cls(tuple(upper / 2), tuple(upper / 2), horizon)

    @classmethod
    def dirac(cls, params: ScaledProductParams, horizon: int = 120) -> "OuterTheta":
        return cls((params.p0, params.p, params.v), (0.0, 0.0, 0.0), horizon, params.F)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        mu, delta = np.asarray(self.mu, float), np.asarray(self.delta, float)
        upper = box_upper(self.horizon)
        return np.clip(mu - delta, 0.0, upper), np.clip(mu + delta, 0.0, upper)

    def to_dict(self) -> dict:
        lo, hi = self.bounds()
        return {
            "mu": list(self.mu),
            "delta": list(self.delta),
            "horizon": self.horizon,
            "F": self.F,
            "lower": lo.tolist(),
            "upper": hi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OuterTheta":
        return cls(tuple(map(float, d["mu"])), tuple(map(float, d["delta"])), int(d.get("horizon", 120)), int(d.get("F", 0)))


@dataclass(frozen=True)
class OuterAction:
    """Increments ``(d_mu, d_delta)`` for p0, p and v, in that order."""

    d_mu: tuple[float, float, float] = (0.0, 0.0, 0.0)
    d_delta: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.d_mu, self.d_delta])

    @classmethod
    def from_array(cls, a) -> "OuterAction":
        a = np.asarray(a, dtype=float)
        return cls(tuple(a[:3].tolist()), tuple(a[3:].tolist()))


def max_step(horizon: int) -> np.ndarray:
    """Per-component bound on |action|, ordered like ``OuterAction.as_array``."""
    s = MAX_STEP_FRACTION * box_upper(horizon)
    return np.concatenate([s, s])


def clip_action(a, horizon: int) -> OuterAction:
    bound = max_step(horizon)
    return OuterAction.from_array(np.clip(np.asarray(a, float), -bound, bound))


def sample_product_params(theta: OuterTheta, rng: np.random.Generator) -> ScaledProductParams:
    """Independent uniform draw per parameter; a zero-width interval returns its point exactly."""
    lo, hi = theta.bounds()
    u = rng.random(3)
    x = np.where(hi > lo, lo + (hi - lo) * u, lo)
    x = np.minimum(x, hi)
    return ScaledProductParams(float(x[0]), float(x[1]), float(x[2]), theta.F)


def apply_outer_action(theta: OuterTheta, action: OuterAction, delta_min_fraction: float = DELTA_MIN_FRACTION) -> OuterTheta:
    """Shift centres and half-widths, floor the widths, then re-clamp into the box.

    The stored (mu, delta) is re-derived from the clamped interval, so a
    centre pushed against a wall drags the near edge with it and the
    interval narrows rather than leaving the box.
    """
    upper = box_upper(theta.horizon)
    dmin = delta_min_fraction * upper
    a = clip_action(action.as_array(), theta.horizon).as_array()
    delta = np.minimum(np.maximum(np.asarray(theta.delta) + a[3:], dmin), upper / 2)
    mu = np.asarray(theta.mu) + a[:3]
    lo = np.clip(mu - delta, 0.0, upper - 2 * dmin)
    hi = np.clip(mu + delta, lo + 2 * dmin, upper)
    if np.array_equal(lo, mu - delta) and np.array_equal(hi, mu + delta):
        # nothing clamped: keep the exact centre and width
        return replace(theta, mu=tuple(mu.tolist()), delta=tuple(delta.tolist()))
    return replace(theta, mu=tuple(((lo + hi) / 2).tolist()), delta=tuple(((hi - lo) / 2).tolist()))


# -- optimiser --------------------------------------------------------------


class OuterOptimizer(Protocol):
    def propose(self, theta: OuterTheta, history: list[tuple[OuterTheta, float]]) -> OuterAction: ...
    def state_dict(self) -> dict: ...
    def load_state_dict(self, state: dict) -> None: ...


@dataclass(frozen=True)
class SearchConfig:
    initial_scale: float = 1.0
    grow: float = 1.5  # scale factor after an improvement
    shrink: float = 0.9  # scale factor otherwise (one-fifth success rule)
    floor: float = 0.05
    ceiling: float = 1.0
    momentum: float = 0.5  # carry-over of the last improving displacement


def _as_point(theta: OuterTheta) -> np.ndarray:
    return np.concatenate([theta.mu, theta.delta])


class StochasticSearch:
    """Bounded (1+1) evolution strategy over theta.

    Every evaluated theta is a candidate. The next action steps from the
    current theta back to the best candidate so far (ties go to the most
    recent) plus Gaussian exploration noise. The noise scale, in units of
    the step bound, grows after an improvement and shrinks otherwise, so
    without signal it decays to ``floor``.
    """

    def __init__(self, config: SearchConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.scale = config.initial_scale
        self.best_loss = float("inf")
        self.best_point: np.ndarray | None = None
        self.velocity = np.zeros(6)

    def propose(self, theta: OuterTheta, history: list[tuple[OuterTheta, float]]) -> OuterAction:
        if not history:
            raise ContractError("outer update needs at least one evaluated theta")
        cfg = self.config
        latest_theta, latest = history[-1]
        point = _as_point(latest_theta)
        improved = latest < self.best_loss
        if improved:
            if self.best_point is not None:
                self.velocity = cfg.momentum * self.velocity + (point - self.best_point)
            self.best_loss, self.best_point = latest, point
        else:
            self.velocity = cfg.momentum * self.velocity
        self.scale = float(np.clip(self.scale * (cfg.grow if improved else cfg.shrink), cfg.floor, cfg.ceiling))
        losses = np.array([loss for _, loss in history])
        best = history[len(losses) - 1 - int(np.argmin(losses[::-1]))][0]
        pull = _as_point(best) - _as_point(theta)
        noise = self.rng.standard_normal(6) * max_step(theta.horizon) * self.scale
        return clip_action(pull + self.velocity + noise, theta.horizon)

    def state_dict(self) -> dict:
        return {
            "scale": self.scale,
            "best_loss": self.best_loss,
            "best_point": None if self.best_point is None else self.best_point.tolist(),
            "velocity": self.velocity.tolist(),
            "rng": rngmod.get_state(self.rng),
        }

    def load_state_dict(self, state: dict) -> None:
        self.scale = float(state["scale"])
        self.best_loss = float(state["best_loss"])
        self.best_point = None if state["best_point"] is None else np.array(state["best_point"])
        self.velocity = np.array(state["velocity"])
        rngmod.set_state(self.rng, state["rng"])


# -- synthetic objective ----------------------------------------------------


@dataclass(frozen=True)
class TargetRegion:
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]

    def mass(self, theta: OuterTheta) -> float:
        """Probability that a product drawn from ``theta`` lands in the region (closed form)."""
        lo, hi = theta.bounds()
        a, b = np.asarray(self.lower), np.asarray(self.upper)
        p = 1.0
        for k in range(3):
            if hi[k] > lo[k]:
                p *= max(0.0, min(hi[k], b[k]) - max(lo[k], a[k])) / (hi[k] - lo[k])
            else:
                p *= float(a[k] <= lo[k] <= b[k])
        return p

    def contains(self, params: ScaledProductParams) -> bool:
        x = np.array([params.p0, params.p, params.v])
        return bool(((np.asarray(self.lower) <= x) & (x <= np.asarray(self.upper))).all())

    def loss(self, theta: OuterTheta) -> float:
        """Missing mass plus the box-normalised distance from the theta centre to the region centre."""
        scale = box_upper(theta.horizon)
        centre = (np.asarray(self.lower) + np.asarray(self.upper)) / 2
        dist = float(np.linalg.norm((np.asarray(theta.mu) - centre) / scale))
        return (1.0 - self.mass(theta)) + dist


# -- two-layer loop ---------------------------------------------------------


class Mode(str, enum.Enum):
    FIXED = "fixed"
    ADAPTIVE = "adaptive"


class InnerLoop(Protocol):
    def step(self, theta: OuterTheta, iteration: int) -> dict:
        """Run one inner iteration under ``theta``; return at least ``loss`` and ``products``."""
        ...

    def state_dict(self) -> dict: ...
    def load_state_dict(self, state: dict) -> None: ...


@dataclass(frozen=True)
class TwoLayerConfig:
    mode: Mode = Mode.ADAPTIVE
    iterations: int = 500
    outer_update_period: int = 1
    search: SearchConfig = SearchConfig()
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.outer_update_period < 1:
            raise ValidationError("outer", "iterations must be >= 0 and outer_update_period >= 1")


class SyntheticInner:
    """Closed-form stand-in for the simulation: the loss depends on theta only."""

    def __init__(self, region: TargetRegion, rng: np.random.Generator, n_products: int = 10):
        self.region = region
        self.rng = rng
        self.n_products = n_products

    def step(self, theta: OuterTheta, iteration: int) -> dict:
        products = [sample_product_params(theta, self.rng) for _ in range(self.n_products)]
        return {
            "loss": self.region.loss(theta),
            "products": [p.to_dict() for p in products],
            "metrics": {"mass": self.region.mass(theta), "in_region": float(np.mean([self.region.contains(p) for p in products]))},
        }

    def state_dict(self) -> dict:
        return {"rng": rngmod.get_state(self.rng)}

    def load_state_dict(self, state: dict) -> None:
        rngmod.set_state(self.rng, state["rng"])


@dataclass
class TwoLayerState:
    iteration: int
    theta: OuterTheta
    history: list[tuple[OuterTheta, float]] = field(default_factory=list)

    def best(self) -> tuple[OuterTheta, float] | None:
        if not self.history:
            return None
        losses = [loss for _, loss in self.history]
        i = len(losses) - 1 - int(np.argmin(losses[::-1]))
        return self.history[i]


CHECKPOINT_FILE = "two_layer_state.json"
LOG_FILE = "two_layer_log.jsonl"


def run_two_layer(
    config: TwoLayerConfig,
    inner: InnerLoop,
    theta0: OuterTheta | None = None,
    out_dir: str | Path | None = None,
    resume: bool = False,
    optimizer: OuterOptimizer | None = None,
    header: dict | None = None,
    stop_after: int | None = None,
) -> list[dict]:
    """Two-layer loop: inner step under theta, then (adaptive) one bounded outer update.

    With ``out_dir`` every iteration appends a JSON line to the log and
    rewrites the checkpoint, so ``resume=True`` continues exactly where an
    interrupted run stopped. ``stop_after`` halts early (used to simulate
    interruption). Returns the log rows produced by this call.
    """
    optimizer = optimizer or StochasticSearch(config.search, rngmod.stream(config.seed, "outer"))
    state = TwoLayerState(0, theta0 or OuterTheta.full_box())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt, log_path = out / CHECKPOINT_FILE, out / LOG_FILE
        if resume and ckpt.exists():
            saved = json.loads(ckpt.read_text())
            state = TwoLayerState(
                saved["iteration"],
                OuterTheta.from_dict(saved["theta"]),
                [(OuterTheta.from_dict(t), loss) for t, loss in saved["history"]],
            )
            optimizer.load_state_dict(saved["optimizer"])
            inner.load_state_dict(saved["inner"])
            _truncate_log(log_path, state.iteration)
        else:
            log_path.write_text("" if header is None else json.dumps({"header": header}, sort_keys=True) + "\n")

    rows = []
    while state.iteration < config.iterations:
        if stop_after is not None and len(rows) >= stop_after:
            break
        k = state.iteration
        theta = state.theta
        try:
            result = inner.step(theta, k)
        except Exception as exc:
            raise add_context(exc, f"two-layer iteration {k}")
        loss = float(result["loss"])
        state.history.append((theta, loss))
        updated = config.mode is Mode.ADAPTIVE and (k + 1) % config.outer_update_period == 0
        action = optimizer.propose(theta, state.history) if updated else OuterAction()
        next_theta = apply_outer_action(theta, action) if updated else theta
        best_theta, best_loss = state.best()
        row = {
            "iteration": k,
            "mode": config.mode.value,
            "theta": theta.to_dict(),
            "loss": loss,
            "best_loss": best_loss,
            "outer_updated": updated,
            "action": action.as_array().tolist(),
            "products": result.get("products", []),
            "metrics": result.get("metrics", {}),
        }
        if "checkpoint" in result:
            row["checkpoint"] = result["checkpoint"]
        rows.append(row)
        state.iteration = k + 1
        state.theta = next_theta
        if out is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            saved = {
                "iteration": state.iteration,
                "theta": state.theta.to_dict(),
                "history": [(t.to_dict(), loss) for t, loss in state.history],
                "optimizer": optimizer.state_dict(),
                "inner": inner.state_dict(),
            }
            tmp = ckpt.with_suffix(".tmp")
            tmp.write_text(json.dumps(saved, sort_keys=True))
            tmp.replace(ckpt)
        logger.info("two-layer iter %d loss %.4f best %.4f", k, loss, best_loss)
    return rows


def _truncate_log(path: Path, iterations: int) -> None:
    """Drop any log rows written after the checkpoint (a crash between the two writes)."""
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        doc = json.loads(line)
        if "header" in doc or doc["iteration"] < iterations:
            keep.append(line)
    path.write_text("".join(line + "\n" for line in keep))


def read_log(path: str | Path) -> list[dict]:
    return [d for d in (json.loads(l) for l in Path(path).read_text().splitlines()) if "header" not in d]
