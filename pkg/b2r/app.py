"""Command-line entry point: ``b2r <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .adapters import DatasetFormatError, dump_json
from .cmdp import EnvParameterError
from .setting import SETTINGS
from .tools import TOOLS

logger = logging.getLogger(__name__)

SECTIONS = ("model", "train", "rollout", "theory", "env_params")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


class RunConfig(BaseModel):
    """Resolved configuration of one CLI invocation (defaults < SETTINGS < file < flags)."""

    model_config = ConfigDict(extra="forbid")

    command: str
    seed: int = Field(default_factory=lambda: SETTINGS.seed)
    workers: int = Field(default_factory=lambda: SETTINGS.workers, ge=1)
    log_level: str = Field(default_factory=lambda: SETTINGS.log_level)
    env: str = Field(default_factory=lambda: SETTINGS.env_id)
    n_trajectories: int = Field(default_factory=lambda: SETTINGS.n_trajectories, ge=1)

    inp: Optional[str] = None
    inputs: List[str] = Field(default_factory=list)
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    data: Optional[str] = None
    episodes_csv: Optional[str] = None
    trace: Optional[str] = None

    kappa: List[float] = Field(default_factory=list)
    strategy: str = "shift"
    cost_mode: str = "auto"
    epsilon: Optional[float] = Field(default=None, gt=0.0)
    buffer: float = Field(default=1.0, gt=0.0)
    fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    method: str = "b2r"
    c_max: Optional[float] = Field(default=None, gt=0.0)
    grid: bool = False
    chain: bool = False
    random: Optional[int] = Field(default=None, ge=1)

    model: Dict[str, Any] = Field(default_factory=dict)
    train: Dict[str, Any] = Field(default_factory=dict)
    rollout: Dict[str, Any] = Field(default_factory=dict)
    theory: Dict[str, Any] = Field(default_factory=dict)
    env_params: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("kappa", mode="before")
    @classmethod
    def _listify(cls, value: Any) -> Any:
        if value is None:
            return []
        return value if isinstance(value, (list, tuple)) else [value]

    @field_validator("kappa")
    @classmethod
    def _non_negative(cls, value: List[float]) -> List[float]:
        if any(k < 0 for k in value):
            raise ValueError(f"kappa must be >= 0, got {value}")
        return value

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) in (None, [], "")]
        if missing:
            flags = ", ".join("--" + ("in" if n == "inp" else n.replace("_", "-")) for n in missing)
            raise ConfigError(f"{self.command}: missing required option(s) {flags}")


# ------------------------------
# Parser
# ------------------------------
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or YAML run config; flags override it")
    p.add_argument("--seed", type=int, help="global seed (falls back to B2R_SEED)")
    p.add_argument("--workers", type=int, help="threads for per-trajectory work")
    p.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING, ...")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hidden-dim", dest="model.hidden_dim", type=int)
    p.add_argument("--n-heads", dest="model.n_heads", type=int)
    p.add_argument("--n-layers", dest="model.n_layers", type=int)
    p.add_argument("--dropout", dest="model.dropout", type=float)
    p.add_argument("--context-len", dest="model.context_len", type=int)
    p.add_argument("--rope-base", dest="model.rope_base", type=float)
    p.add_argument("--positional", dest="model.positional", choices=["rope", "absolute"])


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--learning-rate", dest="train.learning_rate", type=float)
    p.add_argument("--batch-size", dest="train.batch_size", type=int)
    p.add_argument("--grad-clip-norm", dest="train.grad_clip_norm", type=float)
    p.add_argument("--steps-per-epoch", dest="train.steps_per_epoch", type=int)
    p.add_argument("--epochs", dest="train.epochs", type=int)
    p.add_argument("--weight-decay", dest="train.weight_decay", type=float)
    p.add_argument("--eval-every", dest="train.eval_every", type=int,
                   help="epochs between evaluations for early stopping (0 = off)")
    p.add_argument("--patience", dest="train.patience", type=int)
    p.add_argument("--fraction", type=float, help="subsample this share of trajectories")


def _rollout_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint")
    p.add_argument("--target-return", dest="rollout.target_return", type=float)
    p.add_argument("--action-mode", dest="rollout.action_mode", choices=["mean", "sample"])
    p.add_argument("--max-horizon", dest="rollout.max_horizon", type=int)
    p.add_argument("--eps-stability", dest="rollout.eps_stability", type=float)


def _chain_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-states", dest="env_params.n_states", type=int)
    p.add_argument("--hazard", dest="env_params.hazard", type=int, nargs="+",
                   help="chain states that incur cost 1")
    p.add_argument("--chain-horizon", dest="env_params.horizon", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="b2r", description="Offline safe RL with CTG realignment")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        _common(p)
        return p

    p = add("gen-data", "generate an annotated offline dataset")
    p.add_argument("--env", choices=["velocity", "chain"])
    p.add_argument("--n-trajectories", dest="n_trajectories", type=int)
    p.add_argument("--out")
    p.add_argument("--max-horizon", dest="env_params.max_horizon", type=int)
    _chain_flags(p)

    p = add("filter", "keep trajectories with C(tau) <= kappa")
    p.add_argument("--in", dest="inp")
    p.add_argument("--out")
    p.add_argument("--kappa", type=float)

    p = add("realign", "filter and realign CTG to one or more budgets")
    p.add_argument("--in", dest="inp")
    p.add_argument("--out")
    p.add_argument("--kappa", type=float, nargs="+")
    p.add_argument("--strategy", choices=["shift", "avg", "rand", "scale"])
    p.add_argument("--cost-mode", dest="cost_mode", choices=["auto", "discrete", "continuous"])

    p = add("audit", "check a realigned dataset against the safe-aligned data assumption")
    p.add_argument("--in", dest="inp")
    p.add_argument("--c-max", dest="c_max", type=float)

    p = add("train", "behaviour-clone the policy on a realigned dataset")
    p.add_argument("--in", dest="inp")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--allow-unaligned", dest="train.allow_unaligned", action="store_true",
                   help="skip the filtered/realigned precondition (ablation runs)")
    _model_flags(p)
    _train_flags(p)

    p = add("train-boundary", "train on the boundary band only, raw CTG")
    p.add_argument("--in", dest="inp")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--kappa", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--buffer", type=float, help="band centre as a multiple of kappa")
    _model_flags(p)
    _train_flags(p)

    p = add("rollout", "run one episode and optionally write a per-step trace")
    p.add_argument("--kappa", type=float)
    p.add_argument("--trace", help="CSV path for the per-step trace")
    _rollout_flags(p)

    p = add("eval", "evaluate a checkpoint at one or more budgets")
    p.add_argument("--kappa", type=float, nargs="+")
    p.add_argument("--out", help="eval JSON path")
    p.add_argument("--method", help="label used by report")
    p.add_argument("--data", help="dataset whose manifest gives the reward range")
    p.add_argument("--episodes", dest="rollout.n_episodes", type=int)
    p.add_argument("--eval-seeds", dest="rollout.seeds", type=int, nargs="+")
    p.add_argument("--episodes-csv", dest="episodes_csv")
    _rollout_flags(p)

    p = add("verify-theorem1", "Monte Carlo check of the safety bounds")
    p.add_argument("--sigma", dest="theory.sigma", type=float)
    p.add_argument("--delta", dest="theory.delta", type=float)
    p.add_argument("--horizon", dest="theory.horizon", type=int)
    p.add_argument("--kappa", dest="theory.kappa", type=float)
    p.add_argument("--c-max", dest="theory.c_max", type=float)
    p.add_argument("--n-trials", dest="theory.n_trials", type=int)
    p.add_argument("--error-dist", dest="theory.error_dist", choices=["uniform", "rademacher"])
    p.add_argument("--plan-margin", dest="theory.plan_margin", type=float)
    p.add_argument("--grid", action="store_true", help="run the built-in nine-config grid")
    p.add_argument("--out")

    p = add("verify-theorem2", "region-vs-band return ordering")
    p.add_argument("--kappa", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--in", dest="inp")
    p.add_argument("--chain", action="store_true", help="enumerate every chain trajectory")
    p.add_argument("--random", type=int, help="number of random (R, C) datasets")
    p.add_argument("--out")
    _chain_flags(p)

    p = add("report", "aggregate eval JSONs into a task/method CSV")
    p.add_argument("--in", dest="inputs", nargs="+")
    p.add_argument("--out")

    return parser


# ------------------------------
# Config resolution
# ------------------------------
def _load_config_file(path: str) -> Dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"Config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p} is not valid JSON/YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p} must contain a mapping at the top level")
    return data


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    given = dict(vars(args))
    config_path = given.pop("config", None)
    merged: Dict[str, Any] = _load_config_file(config_path) if config_path else {}
    for section in SECTIONS:
        merged[section] = dict(merged.get(section) or {})

    for key, value in given.items():
        if "." in key:
            section, name = key.split(".", 1)
            merged[section][name] = value
        else:
            merged[key] = value
    return RunConfig.model_validate(merged)


def dispatch(run: RunConfig) -> Dict[str, Any]:
    tool = TOOLS[run.command]
    cmd = run.command
    if cmd == "gen-data":
        run.require("out")
        return tool(run.env, run.n_trajectories, run.seed, run.out, run.env_params, run.workers)
    if cmd == "filter":
        run.require("inp", "out", "kappa")
        return tool(run.inp, run.out, run.kappa[0])
    if cmd == "realign":
        run.require("inp", "out", "kappa")
        return tool(run.inp, run.out, run.kappa, run.strategy, run.seed, run.cost_mode, run.workers)
    if cmd == "audit":
        run.require("inp")
        return tool(run.inp, run.c_max)
    if cmd == "train":
        run.require("inp", "out")
        return tool(run.inp, run.out, run.model, {"seed": run.seed, **run.train}, run.fraction)
    if cmd == "train-boundary":
        run.require("inp", "out", "kappa", "epsilon")
        return tool(run.inp, run.out, run.kappa[0], run.epsilon, run.buffer,
                    run.model, {"seed": run.seed, **run.train}, run.fraction)
    if cmd == "rollout":
        run.require("checkpoint", "kappa")
        return tool(run.checkpoint, run.kappa[0], run.seed, run.trace, run.rollout)
    if cmd == "eval":
        run.require("checkpoint", "kappa", "out")
        return tool(run.checkpoint, run.kappa, run.out, run.method, run.data,
                    run.episodes_csv, {"workers": run.workers, **run.rollout})
    if cmd == "report":
        run.require("inputs", "out")
        return tool(run.inputs, run.out)
    if cmd == "verify-theorem1":
        theory = {**SETTINGS.theory, **run.theory}
        if not run.grid:
            missing = [k for k in ("sigma", "delta", "horizon") if k not in theory]
            if missing:
                raise ConfigError(f"verify-theorem1: missing {missing} (or pass --grid)")
        return tool(theory, run.grid, run.out, run.seed, run.workers)
    if cmd == "verify-theorem2":
        run.require("kappa")
        epsilon = run.epsilon if run.epsilon is not None else float(SETTINGS.theory.get("epsilon", 0.5))
        chain = run.env_params if run.chain else None
        return tool(run.kappa[0], epsilon, run.inp, chain, run.random, run.seed, run.out)
    raise ConfigError(f"unknown command {cmd}")


# ------------------------------
# Entry point
# ------------------------------
USAGE_ERRORS = (
    ConfigError, FileNotFoundError, DatasetFormatError, EnvParameterError, ValidationError,
)
DOMAIN_ERRORS = (ValueError, RuntimeError, ArithmeticError)


def _emit_error(err: BaseException) -> None:
    sys.stderr.write(dump_json({"error": str(err), "type": err.__class__.__name__}) + "\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        run = resolve_run_config(args)
    except USAGE_ERRORS as err:
        _emit_error(err)
        return 2

    logging.basicConfig(
        level=getattr(logging, run.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logger.debug("resolved config: %s", run.model_dump())

    try:
        payload = dispatch(run)
    except USAGE_ERRORS as err:
        _emit_error(err)
        return 2
    except DOMAIN_ERRORS as err:
        logger.debug("domain error", exc_info=True)
        _emit_error(err)
        return 1

    sys.stdout.write(dump_json(payload) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
