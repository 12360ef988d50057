"""Command-line experiment runner.

Subcommands: ``train``, ``evaluate``, ``sweep``, ``two-layer``, ``frontier``.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import rng as rngmod
from .config import ExperimentConfig, dump_config, load_config
from .errors import GridError, MortgageSimError, ValidationError
from .experiment import RLInner, TrainingWorld, box_product_source, evaluate_product
from .learner import CsvLog, Trainer, load_checkpoint, save_checkpoint, train
from .metrics import frontier_mask
from .outer import LOG_FILE, OuterTheta, run_two_layer, sample_product_params
from .products import ScaledProductParams, make_special

logger = logging.getLogger("mortgagesim")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(MortgageSimError):
    """Raised for user-facing configuration problems (exit code 2)."""


# -- helpers ----------------------------------------------------------------


def _stamp(config: ExperimentConfig) -> dict:
    return {"fingerprint": config.fingerprint(), "seed": config.seed}


def _stamp_line(config: ExperimentConfig) -> str:
    s = _stamp(config)
    return f"fingerprint={s['fingerprint']} seed={s['seed']}"


def _write_csv(path: Path, rows: list[dict], config: ExperimentConfig) -> None:
    buf = io.StringIO()
    buf.write(f"# {_stamp_line(config)}\n")
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    path.write_text(buf.getvalue())


def _read_csv(path: Path) -> list[dict]:
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def _write_json(path: Path, doc: dict, config: ExperimentConfig) -> None:
    path.write_text(json.dumps({**_stamp(config), **doc}, sort_keys=True, indent=2) + "\n")


def _out_dir(args, config: ExperimentConfig) -> Path:
    out = Path(args.out or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_policy(path: str, config: ExperimentConfig):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    policy, doc = load_checkpoint(p)
    want = config.policy_fingerprint()
    got = doc.get("meta", {}).get("policy_fingerprint")
    if got != want:
        raise ConfigError(
            f"checkpoint {p} was trained under policy fingerprint {got}, this config needs {want} "
            "(observation layout, horizon, network size or servicing rules differ)"
        )
    return policy, doc


def parse_product(text: str | None, horizon: int) -> ScaledProductParams:
    """Parse ``null``, ``p0,p,v[,F]`` (scaled by each borrower's m) or ``covid:F``."""
    if text is None or text == "null":
        return ScaledProductParams()
    if ":" in text:
        kind, arg = text.split(":", 1)
        if kind == "covid":
            prod = make_special("covid", F=int(arg))
            return ScaledProductParams(0.0, 0.0, 0.0, prod.forbearance_months_F)
        raise ConfigError(f"special product {kind!r} has dollar terms; give it as p0,p,v relative to m instead")
    try:
        parts = [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse product {text!r}; expected p0,p,v[,F]") from None
    if len(parts) not in (3, 4):
        raise ConfigError(f"cannot parse product {text!r}; expected p0,p,v[,F]")
    params = ScaledProductParams(parts[0], parts[1], parts[2], int(parts[3]) if len(parts) == 4 else 0)
    return params.validate(horizon)


def _shock_grid(args, config: ExperimentConfig) -> tuple[float, ...]:
    if getattr(args, "shocks", None):
        return tuple(round(float(s), 1) for s in args.shocks.split(","))
    return tuple(config.evaluation.shocks)


def _eval_kwargs(config: ExperimentConfig, shocks) -> dict:
    ev = config.evaluation
    return dict(
        seeds=list(ev.seeds),
        n_households=ev.n_households,
        env_config=config.env_config(),
        shocks=shocks,
        shock_month=ev.shock_month,
        gamma=ev.gamma,
    )


def _eval_rows(res, product_id: str) -> list[dict]:
    return [{"product_id": product_id, **r} for r in res.rows()]


def _integrated_or_grid_error(res) -> dict:
    try:
        return res.integrated
    except GridError as exc:
        raise GridError(f"integrated metrics refused: {exc}") from None


# -- subcommands ------------------------------------------------------------


def cmd_train(config: ExperimentConfig, out: Path, iterations: int | None = None) -> Path:
    torch.set_num_threads(1)
    tc = config.train_config()
    if iterations is not None:
        tc = type(tc).from_dict({**tc.to_dict(), "iterations": iterations})
    cal = config.load_calibration()
    world = TrainingWorld(cal, config.n_households, config.env_config(), config.shock_config())
    log = CsvLog(out / "train_log.csv", header_comment=_stamp_line(config))
    policy = train(world.factory, box_product_source(config.horizon, config.null_product_share), tc, config.horizon, log=log)
    ckpt = out / "policy.json"
    meta = {**_stamp(config), "policy_fingerprint": config.policy_fingerprint(), "iterations": tc.iterations}
    save_checkpoint(ckpt, policy, config.fingerprint(), meta)
    (out / "config.yaml").write_text(dump_config(config))
    return ckpt


def cmd_evaluate(config: ExperimentConfig, out: Path, checkpoint: str, product: ScaledProductParams, shocks, name: str) -> dict:
    policy, _ = _load_policy(checkpoint, config)
    cal = config.load_calibration()
    res = evaluate_product(policy, cal, product, **_eval_kwargs(config, shocks))
    _write_csv(out / f"eval_{name}.csv", _eval_rows(res, name), config)
    integrated = _integrated_or_grid_error(res)
    _write_json(out / f"eval_{name}_summary.json", {"checkpoint": str(checkpoint), **res.summary()} | {"integrated": integrated}, config)
    return integrated


def _evaluate_one(args):
    checkpoint, config_dict, product, shocks = args
    torch.set_num_threads(1)
    config = ExperimentConfig.from_dict(config_dict)
    policy, _ = load_checkpoint(checkpoint)
    return evaluate_product(policy, config.load_calibration(), product, **_eval_kwargs(config, shocks))


def cmd_sweep(config: ExperimentConfig, out: Path, checkpoint: str, n: int, theta: OuterTheta, jobs: int = 1) -> list[dict]:
    _load_policy(checkpoint, config)
    rng = rngmod.stream(config.seed, "outer", 1)
    products = [sample_product_params(theta, rng) for _ in range(n)]
    shocks = tuple(config.evaluation.shocks)
    tasks = [(checkpoint, config.to_dict(), p, shocks) for p in products]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_evaluate_one, tasks))
    else:
        results = [_evaluate_one(t) for t in tasks]
    per_shock, table = [], []
    for i, (prod, res) in enumerate(zip(products, results)):
        pid = f"product_{i:04d}"
        per_shock += _eval_rows(res, pid)
        integ = _integrated_or_grid_error(res)
        table.append({"product_id": pid, **prod.to_dict(), **{f"int_{k}": v for k, v in integ.items()}})
    mask = frontier_mask(np.array([[r["int_omega"], r["int_C"]] for r in table]))
    for r, k in zip(table, mask):
        r["on_frontier"] = int(k)
    _write_csv(out / "sweep_per_shock.csv", per_shock, config)
    _write_csv(out / "sweep_products.csv", table, config)
    _write_json(out / "sweep_theta.json", {"theta": theta.to_dict(), "n_products": n, "checkpoint": str(checkpoint)}, config)
    return table


def cmd_frontier(path: str, out_path: str | None, columns: tuple[str, str], config: ExperimentConfig | None = None) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"input not found: {p}")
    text = p.read_text()
    comment = next((l for l in text.splitlines() if l.startswith("#")), None)
    rows = _read_csv(p)
    if not rows:
        raise ConfigError(f"{p} has no rows")
    missing = [c for c in columns if c not in rows[0]]
    if missing:
        raise ConfigError(f"{p} lacks column(s) {missing}")
    try:
        coords = np.array([[float(r[c]) for c in columns] for r in rows])
    except ValueError as exc:
        raise ConfigError(f"{p}: non-numeric metric value ({exc})") from None
    if not np.isfinite(coords).all():
        raise ConfigError(f"{p}: non-finite metric values")
    mask = frontier_mask(coords)
    for r, k in zip(rows, mask):
        r["on_frontier"] = str(int(k))
    buf = io.StringIO()
    if comment is not None:
        buf.write(comment + "\n")
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    Path(out_path or p.with_name(p.stem + "_frontier.csv")).write_text(buf.getvalue())
    return rows


def cmd_two_layer(config: ExperimentConfig, out: Path, mode: str | None, resume: bool) -> list[dict]:
    torch.set_num_threads(1)
    tl = config.two_layer_config(mode)
    cal = config.load_calibration()
    world = TrainingWorld(cal, config.n_households, config.env_config(), config.shock_config())
    trainer = Trainer(config.train_config(), config.horizon)
    ckpt_path = out / "policy_latest.json"
    meta = {**_stamp(config), "policy_fingerprint": config.policy_fingerprint()}

    def checkpoint(iteration: int) -> str:
        save_checkpoint(ckpt_path, trainer.policy, config.fingerprint(), {**meta, "iteration": iteration})
        return f"{ckpt_path.name}@{iteration}"

    inner = RLInner(world, trainer, config.outer.loss, config.outer.eval_products, config.outer.eval_seeds,
                    config.evaluation.shock_month, checkpoint)
    if resume and not (out / LOG_FILE).exists():
        raise ConfigError(f"nothing to resume in {out}")
    (out / "config.yaml").write_text(dump_config(config))
    header = {**_stamp(config), "mode": tl.mode.value, "loss": config.outer.loss}
    return run_two_layer(tl, inner, config.outer.theta0(config.horizon), out, resume=resume, header=header)


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mortgagesim", description="Mortgage product design simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment YAML (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", help="output directory (overrides config.output_dir)")

    sp = sub.add_parser("train", help="train the product-conditioned borrower policy")
    common(sp)
    sp.add_argument("--iterations", type=int, help="override train.iterations")
    sp.add_argument("--deterministic", action="store_true", help="single thread, serial (always the case here)")

    sp = sub.add_parser("evaluate", help="evaluate one product over the shock grid")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--product", default="null", help="null | p0,p,v[,F] | covid:F")
    sp.add_argument("--shocks", help="comma-separated shock grid, e.g. --shocks=-1.0,-0.5,0.0 (default: config)")
    sp.add_argument("--name", default=None, help="output file stem")

    sp = sub.add_parser("sweep", help="sample products, evaluate each, flag the Pareto frontier")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("-n", "--n-products", type=int, default=100)
    sp.add_argument("--theta", help="JSON file with mu/delta (default: full legal box)")
    sp.add_argument("--jobs", type=int, default=1, help="parallel evaluation processes")

    sp = sub.add_parser("two-layer", help="run the alternating outer/inner loop")
    common(sp)
    sp.add_argument("--mode", choices=["fixed", "adaptive"])
    sp.add_argument("--resume", action="store_true")

    sp = sub.add_parser("frontier", help="flag Pareto-optimal rows of a metrics CSV")
    sp.add_argument("input")
    sp.add_argument("--output")
    sp.add_argument("--columns", default="int_omega,int_C", help="two or more metric columns to minimise")
    return p


def _config(args) -> ExperimentConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = ExperimentConfig.from_dict({**config.to_dict(), "seed": args.seed})
    return config


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "frontier":
            cols = tuple(args.columns.split(","))
            cmd_frontier(args.input, args.output, cols)
            return EXIT_OK
        config = _config(args)
        out = _out_dir(args, config)
        if args.command == "train":
            if args.iterations is not None and args.iterations < 0:
                raise ConfigError("--iterations must be non-negative")
            print(cmd_train(config, out, args.iterations))
        elif args.command == "evaluate":
            product = parse_product(args.product, config.horizon)
            shocks = _shock_grid(args, config)
            name = args.name or ("null" if product.is_null else "product")
            print(json.dumps(cmd_evaluate(config, out, args.checkpoint, product, shocks, name), sort_keys=True))
        elif args.command == "sweep":
            theta = OuterTheta.full_box(config.horizon)
            if args.theta:
                tp = Path(args.theta)
                if not tp.is_file():
                    raise ConfigError(f"theta file not found: {tp}")
                theta = OuterTheta.from_dict({"horizon": config.horizon, **json.loads(tp.read_text())})
            if args.n_products < 1:
                raise ConfigError("--n-products must be at least 1")
            cmd_sweep(config, out, args.checkpoint, args.n_products, theta, max(args.jobs, 1))
        elif args.command == "two-layer":
            cmd_two_layer(config, out, args.mode, args.resume)
    except (ConfigError, ValidationError, GridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MortgageSimError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
