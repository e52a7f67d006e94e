from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .adapters import (
    DatasetFormatError,
    load_dataset,
    load_manifest,
    read_json,
    save_dataset,
    write_csv,
    write_json,
)
from .cmdp import build_env_params, get_env_spec, make_env
from .datasets import (
    DatasetManifest,
    Strategy,
    annotate_all,
    empirical_reward_range,
    filter_safe,
    generate_dataset,
    prepare_multi_target,
    subsample,
)
from .evaluation import (
    EPISODE_HEADER,
    TRACE_HEADER,
    RolloutConfig,
    evaluate_targets,
    rollout,
)
from .policy import B2RPolicy, ModelConfig
from .setting import SETTINGS
from .theory import (
    TheoryConfig,
    assumption1_audit,
    chain_theorem2_oracle,
    default_grid,
    random_theorem2_check,
    simulate_theorem1,
    theorem1_bound,
    verify_theorem2,
)
from .trainer import TrainConfig, TrainReport, train, train_boundary_baseline

logger = logging.getLogger(__name__)

EVAL_FORMAT = "b2r-eval-1"
REPORT_HEADER = ("task", "method", "reward", "cost", "safe")


# ------------------------------
# Config helpers
# ------------------------------
def build_model_config(
    env_id: str,
    env_params: Dict[str, Any],
    overrides: Optional[Dict[str, Any]] = None,
) -> ModelConfig:
    """Env-derived fields < SETTINGS.model < overrides."""
    spec = get_env_spec(env_id, **env_params)
    fields: Dict[str, Any] = {
        "state_dim": spec.state_dim,
        "action_dim": spec.action_dim,
        "action_low": list(spec.action_low),
        "action_high": list(spec.action_high),
        "discrete_actions": spec.discrete_actions,
        "env_id": env_id,
        "env_params": env_params,
    }
    fields.update(SETTINGS.model)
    fields.update(overrides or {})
    return ModelConfig.model_validate(fields)


def build_train_config(overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    fields: Dict[str, Any] = {"seed": SETTINGS.seed}
    fields.update(SETTINGS.train)
    fields.update(overrides or {})
    return TrainConfig.model_validate(fields)


def _env_factory(env_id: str, env_params: Dict[str, Any]):
    return lambda: make_env(env_id, **env_params)


def _reward_range(env_id: str, env_params: Dict[str, Any],
                  manifest: Optional[DatasetManifest]) -> Tuple[float, float]:
    if manifest is not None and manifest.reward_min is not None and manifest.reward_max is not None:
        if manifest.reward_max > manifest.reward_min:
            return manifest.reward_min, manifest.reward_max
        logger.warning("manifest reward range is degenerate; using the analytic env range")
    spec = get_env_spec(env_id, **env_params)
    return spec.reward_min, spec.reward_max


# ------------------------------
# Dataset steps
# ------------------------------
def generate(
    env_id: str,
    n_trajectories: int,
    seed: int,
    out: str | Path,
    env_params: Optional[Dict[str, Any]] = None,
    workers: int = 1,
) -> Dict[str, Any]:
    env_params = dict(env_params or {})
    trajectories = generate_dataset(env_id, n_trajectories, seed, **env_params)
    dataset = annotate_all(trajectories, workers)
    r_min, r_max = empirical_reward_range(dataset)
    manifest = DatasetManifest(
        env_id=env_id,
        total=len(dataset),
        kept=len(dataset),
        dropped=0,
        seed=seed,
        reward_min=r_min,
        reward_max=r_max,
        env_params=env_params,
    )
    path = save_dataset(out, dataset, manifest)
    costs = [at.total_cost for at in dataset]
    return {
        "dataset": str(path),
        "manifest": manifest.to_dict(),
        "cost_range": [min(costs), max(costs)],
        "reward_range": [r_min, r_max],
    }


def filter_dataset(inp: str | Path, out: str | Path, kappa: float) -> Dict[str, Any]:
    dataset, source = load_dataset(inp)
    kept = filter_safe(dataset, kappa)
    warnings = list(source.warnings)
    if not kept:
        warnings.append(f"filter at kappa={kappa} kept no trajectories")
    manifest = DatasetManifest(
        env_id=source.env_id,
        total=len(dataset),
        kept=len(kept),
        dropped=len(dataset) - len(kept),
        seed=source.seed,
        kappa=kappa,
        kappas=source.kappas,
        strategy=source.strategy,
        reward_min=source.reward_min,
        reward_max=source.reward_max,
        warnings=warnings,
        flags=list(source.flags),
        audit=source.audit,
        env_params=source.env_params,
    )
    path = save_dataset(out, kept, manifest)
    return {"dataset": str(path), "manifest": manifest.to_dict()}


def realign_dataset_file(
    inp: str | Path,
    out: str | Path,
    kappas: Sequence[float],
    strategy: str,
    seed: int,
    cost_mode: str = "auto",
    workers: int = 1,
) -> Dict[str, Any]:
    """Filter + realign at every kappa (one kappa is plain filter + realign), then audit."""
    dataset, source = load_dataset(inp)
    strat = Strategy.parse(strategy)
    result = prepare_multi_target(
        dataset, kappas, strat, seed=seed, cost_mode=cost_mode, workers=workers
    )
    spec = get_env_spec(source.env_id, **source.env_params)
    audit = assumption1_audit(result.dataset, spec.c_max)

    total = len(dataset) * len(kappas)
    warnings = list(source.warnings)
    warnings.extend(f"kappa={k} produced an empty safe set and was skipped" for k in result.skipped)
    if not audit.passed:
        warnings.append(f"assumption audit failed: {audit.violation}")
    manifest = DatasetManifest(
        env_id=source.env_id,
        total=total,
        kept=len(result.dataset),
        dropped=total - len(result.dataset),
        seed=seed,
        kappa=float(kappas[0]) if len(kappas) == 1 else None,
        kappas=[float(k) for k in kappas],
        strategy=strat.value,
        reward_min=source.reward_min,
        reward_max=source.reward_max,
        warnings=warnings,
        flags=result.flags,
        audit=audit.to_dict(),
        env_params=source.env_params,
    )
    path = save_dataset(out, result.dataset, manifest)
    return {"dataset": str(path), "manifest": manifest.to_dict(), "counts": result.counts}


def audit_dataset(inp: str | Path, c_max: Optional[float] = None) -> Dict[str, Any]:
    dataset, manifest = load_dataset(inp)
    if c_max is None:
        c_max = get_env_spec(manifest.env_id, **manifest.env_params).c_max
    result = assumption1_audit(dataset, c_max)
    return {"dataset": str(inp), "audit": result.to_dict()}


# ------------------------------
# Training steps
# ------------------------------
def _write_training_outputs(report: TrainReport, out: str | Path, label: str) -> Dict[str, Any]:
    ckpt = report.policy.save(out)
    loss_csv = write_csv(
        Path(str(out) + ".loss.csv"), ("step", "loss"), enumerate(report.loss_curve)
    )
    payload = {"checkpoint": str(ckpt), "loss_log": str(loss_csv), "method": label}
    payload.update(report.summary())
    payload["wall_time_s"] = round(report.wall_time, 3)
    return payload


def _eval_callback(config: ModelConfig, kappa: float, reward_range: Tuple[float, float]):
    rollout_cfg = RolloutConfig(kappa=kappa, n_episodes=3, seeds=[SETTINGS.seed],
                                eps_stability=SETTINGS.eps_stability)
    factory = _env_factory(config.env_id, config.env_params)

    def score(policy: B2RPolicy) -> float:
        return evaluate_targets(policy, factory, [kappa], rollout_cfg, reward_range)[0].reward

    return score


def train_policy(
    inp: str | Path,
    out: str | Path,
    model_overrides: Optional[Dict[str, Any]] = None,
    train_overrides: Optional[Dict[str, Any]] = None,
    fraction: float = 1.0,
) -> Dict[str, Any]:
    dataset, manifest = load_dataset(inp)
    train_cfg = build_train_config(train_overrides)
    dataset = subsample(dataset, fraction, train_cfg.seed)
    model_cfg = build_model_config(manifest.env_id, manifest.env_params, model_overrides)

    eval_fn = None
    if train_cfg.eval_every and dataset and dataset[0].kappa_tag is not None:
        eval_fn = _eval_callback(
            model_cfg, dataset[0].kappa_tag,
            _reward_range(manifest.env_id, manifest.env_params, manifest),
        )
    report = train(dataset, model_cfg, train_cfg, eval_fn=eval_fn)
    label = "b2r" if not train_cfg.allow_unaligned else "b2r-ablation"
    payload = _write_training_outputs(report, out, label)
    payload["fraction"] = fraction
    return payload


def train_boundary(
    inp: str | Path,
    out: str | Path,
    kappa: float,
    epsilon: float,
    buffer: float = 1.0,
    model_overrides: Optional[Dict[str, Any]] = None,
    train_overrides: Optional[Dict[str, Any]] = None,
    fraction: float = 1.0,
) -> Dict[str, Any]:
    dataset, manifest = load_dataset(inp)
    train_cfg = build_train_config(train_overrides)
    dataset = subsample(dataset, fraction, train_cfg.seed)
    model_cfg = build_model_config(manifest.env_id, manifest.env_params, model_overrides)
    report = train_boundary_baseline(dataset, kappa, epsilon, model_cfg, train_cfg, buffer=buffer)
    payload = _write_training_outputs(report, out, "boundary")
    payload.update({"kappa": kappa, "epsilon": epsilon, "buffer": buffer, "fraction": fraction})
    return payload


# ------------------------------
# Deployment steps
# ------------------------------
def _rollout_config(kappa: float, overrides: Optional[Dict[str, Any]]) -> RolloutConfig:
    fields: Dict[str, Any] = {
        "kappa": kappa,
        "n_episodes": SETTINGS.n_episodes,
        "seeds": SETTINGS.eval_seeds,
        "action_mode": SETTINGS.action_mode,
        "eps_stability": SETTINGS.eps_stability,
        "workers": SETTINGS.workers,
    }
    fields.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RolloutConfig.model_validate(fields)


def rollout_policy(
    checkpoint: str | Path,
    kappa: float,
    seed: int,
    trace_out: Optional[str | Path] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    policy = B2RPolicy.load(checkpoint)
    cfg = _rollout_config(kappa, overrides)
    env = make_env(policy.config.env_id, **policy.config.env_params)
    result = rollout(policy, env, cfg, seed=seed)
    payload: Dict[str, Any] = {
        "checkpoint": str(checkpoint),
        "kappa": kappa,
        "seed": seed,
        "horizon": result.trajectory.horizon,
        "return": result.total_return,
        "cost": result.total_cost,
        "violated": result.total_cost > kappa,
        "final_ctg": result.ctg_tokens[-1],
    }
    if trace_out is not None:
        payload["trace"] = str(write_csv(trace_out, TRACE_HEADER, result.trace_rows()))
    return payload


def evaluate_policy(
    checkpoint: str | Path,
    kappas: Sequence[float],
    out: str | Path,
    method: str = "b2r",
    data: Optional[str | Path] = None,
    episodes_csv: Optional[str | Path] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    policy = B2RPolicy.load(checkpoint)
    mc = policy.config
    manifest = load_manifest(data) if data is not None else None
    reward_range = _reward_range(mc.env_id, mc.env_params, manifest)
    cfg = _rollout_config(float(kappas[0]), overrides)
    summaries = evaluate_targets(
        policy, _env_factory(mc.env_id, mc.env_params), kappas, cfg, reward_range
    )

    payload = {
        "format_version": EVAL_FORMAT,
        "task": mc.env_id,
        "method": method,
        "checkpoint": str(checkpoint),
        "reward_range": list(reward_range),
        "summaries": [s.to_dict() for s in summaries],
    }
    write_json(out, payload)
    if episodes_csv is not None:
        rows: List[Tuple[Any, ...]] = []
        for s in summaries:
            rows.extend(s.episode_rows())
        write_csv(episodes_csv, EPISODE_HEADER, rows)
    return payload


def report(eval_files: Sequence[str | Path], out: str | Path) -> Dict[str, Any]:
    """One row per eval file: normalised reward and cost averaged over its budgets."""
    rows: List[Tuple[Any, ...]] = []
    for path in eval_files:
        data = read_json(path)
        if data.get("format_version") != EVAL_FORMAT:
            raise DatasetFormatError(
                f"{path}: expected eval format {EVAL_FORMAT!r}, found {data.get('format_version')!r}"
            )
        summaries = data["summaries"]
        reward = math.fsum(s["reward"] for s in summaries) / len(summaries)
        cost = math.fsum(s["cost"] for s in summaries) / len(summaries)
        rows.append((data["task"], data["method"], reward, cost, int(cost < 1.0)))
    write_csv(out, REPORT_HEADER, rows)
    return {
        "report": str(out),
        "rows": [dict(zip(REPORT_HEADER, r)) for r in rows],
    }


# ------------------------------
# Theory steps
# ------------------------------
def verify_theorem1(
    config: Optional[TheoryConfig],
    out: Optional[str | Path] = None,
    grid: bool = False,
    n_trials: Optional[int] = None,
    seed: int = 0,
    workers: int = 1,
) -> Dict[str, Any]:
    if grid:
        configs = default_grid(n_trials=n_trials or SETTINGS.theory.get("n_trials", 100_000), seed=seed)
    elif config is not None:
        configs = [config]
    else:
        raise ValueError("verify-theorem1 needs either a configuration or --grid")

    reports = []
    for cfg in configs:
        bound = theorem1_bound(cfg)
        logger.info(
            "H=%d sigma=%s delta=%s: prob_bound=%.6g expected_bound=%.6g",
            cfg.horizon, cfg.sigma, cfg.delta, bound.prob_bound, bound.expected_cost_bound,
        )
        reports.append(simulate_theorem1(cfg, workers).to_dict())
    payload = {"reports": reports, "passed": all(r["passed"] for r in reports)}
    if out is not None:
        write_json(out, payload)
    return payload


def verify_theorem2_cmd(
    kappa: float,
    epsilon: float,
    inp: Optional[str | Path] = None,
    chain: Optional[Dict[str, Any]] = None,
    random_n: Optional[int] = None,
    seed: int = 0,
    out: Optional[str | Path] = None,
) -> Dict[str, Any]:
    payload: Dict[str, Any] = {"kappa": kappa, "epsilon": epsilon}
    if inp is not None:
        dataset, _ = load_dataset(inp)
        payload["dataset"] = verify_theorem2(dataset, kappa, epsilon).to_dict()
    if chain is not None:
        params = build_env_params("chain", **chain)
        payload["chain"] = chain_theorem2_oracle(params, kappa, epsilon).to_dict()
    if random_n:
        payload["random"] = random_theorem2_check(random_n, seed)
    if len(payload) == 2:
        raise ValueError("verify-theorem2 needs --in, --chain or --random")
    checks = [v.get("holds") for k, v in payload.items() if isinstance(v, dict)]
    payload["holds"] = all(checks)
    if out is not None:
        write_json(out, payload)
    return payload

