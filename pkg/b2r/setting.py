from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List

import os

import yaml
from dotenv import load_dotenv


@dataclass
class AppSettings:
    seed: int = 0
    log_level: str = "INFO"
    workers: int = 1

    env_id: str = "velocity"
    n_trajectories: int = 300

    model: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)

    eps_stability: float = 0.1
    n_episodes: int = 20
    eval_seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    action_mode: str = "mean"

    theory: Dict[str, Any] = field(default_factory=dict)


def _load_yaml(path: Path) -> Dict[str, Any]:
    if not path.is_file():
        return {}
    with path.open("r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    return data if isinstance(data, dict) else {}


def _section(cfg: Dict[str, Any], key: str) -> Dict[str, Any]:
    value = cfg.get(key, {})
    return value if isinstance(value, dict) else {}


def load_settings(config_path: str | None = None) -> AppSettings:
    load_dotenv()
    default_path = Path(__file__).parent / "configs" / "default.yaml"
    cfg = _load_yaml(Path(config_path or os.getenv("B2R_CONFIG", "") or default_path))

    run_cfg = _section(cfg, "run")
    data_cfg = _section(cfg, "data")
    eval_cfg = _section(cfg, "eval")

    # ENV > YAML
    seed = int(os.getenv("B2R_SEED", run_cfg.get("seed", 0)))
    log_level = os.getenv("B2R_LOG_LEVEL", run_cfg.get("log_level", "INFO")).upper()

    return AppSettings(
        seed=seed,
        log_level=log_level,
        workers=int(run_cfg.get("workers", 1)),
        env_id=data_cfg.get("env", "velocity"),
        n_trajectories=int(data_cfg.get("n_trajectories", 300)),
        model=_section(cfg, "model"),
        train=_section(cfg, "train"),
        eps_stability=float(eval_cfg.get("eps_stability", 0.1)),
        n_episodes=int(eval_cfg.get("n_episodes", 20)),
        eval_seeds=[int(s) for s in eval_cfg.get("seeds", [0, 1, 2])],
        action_mode=eval_cfg.get("action_mode", "mean"),
        theory=_section(cfg, "theory"),
    )


# global settings instance
SETTINGS: AppSettings = load_settings()
