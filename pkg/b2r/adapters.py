from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .cmdp import Trajectory
from .datasets import FORMAT_VERSION, AnnotatedTrajectory, DatasetManifest

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "b2r-ckpt-1"


class DatasetFormatError(ValueError):
    """Malformed dataset or checkpoint file; carries the offending record index when known."""

    def __init__(self, message: str, record: Optional[int] = None):
        self.record = record
        prefix = f"record {record}: " if record is not None else ""
        super().__init__(prefix + message)


# ---------------- Paths -----------------

def manifest_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".manifest.json")


def config_sidecar_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".config.json")


def _ensure_parent(path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def dump_json(payload: Any) -> str:
    """Canonical JSON text: sorted keys, two-space indent, shortest round-trip floats."""
    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=False, default=_json_default)


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def write_json(path: str | Path, payload: Any) -> Path:
    p = _ensure_parent(path)
    p.write_text(dump_json(payload) + "\n", encoding="utf-8")
    return p


def read_json(path: str | Path) -> Any:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"File not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{p} is not valid JSON: {exc}") from exc


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    p = _ensure_parent(path)
    with p.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row]
            )
    return p


# ---------------- Dataset JSON-lines -----------------

def _encode_record(at: AnnotatedTrajectory) -> Dict[str, Any]:
    record: Dict[str, Any] = {
        "env_id": at.traj.env_id,
        "states": at.traj.states.tolist(),
        "actions": at.traj.actions.tolist(),
        "rewards": at.traj.rewards.tolist(),
        "costs": at.traj.costs.tolist(),
        "rtg": at.rtg.tolist(),
        "ctg": at.ctg.tolist(),
    }
    if at.kappa_tag is not None:
        record["kappa_tag"] = at.kappa_tag
    if at.strategy is not None:
        record["strategy"] = at.strategy
    if at.cost_mode is not None:
        record["cost_mode"] = at.cost_mode
    return record


def _decode_record(raw: Mapping[str, Any], index: int) -> AnnotatedTrajectory:
    missing = [k for k in ("states", "actions", "rewards", "costs", "rtg", "ctg") if k not in raw]
    if missing:
        raise DatasetFormatError(f"missing fields {missing}", record=index)
    try:
        traj = Trajectory(
            states=raw["states"],
            actions=raw["actions"],
            rewards=raw["rewards"],
            costs=raw["costs"],
            env_id=str(raw.get("env_id", "")),
        )
        return AnnotatedTrajectory(
            traj=traj,
            rtg=raw["rtg"],
            ctg=raw["ctg"],
            kappa_tag=raw.get("kappa_tag"),
            strategy=raw.get("strategy"),
            cost_mode=raw.get("cost_mode"),
        )
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(str(exc), record=index) from exc


def save_dataset(
    path: str | Path,
    dataset: Sequence[AnnotatedTrajectory],
    manifest: DatasetManifest,
) -> Path:
    """Write one trajectory per line plus the sidecar manifest."""
    if manifest.kept != len(dataset):
        raise ValueError(
            f"manifest says kept={manifest.kept} but {len(dataset)} trajectories were given"
        )
    p = _ensure_parent(path)
    with p.open("w", encoding="utf-8") as fh:
        for at in dataset:
            fh.write(json.dumps(_encode_record(at), sort_keys=True, allow_nan=False))
            fh.write("\n")
    write_json(manifest_path(p), manifest.to_dict())
    logger.info("wrote %d trajectories to %s", len(dataset), p)
    return p


def load_manifest(path: str | Path) -> DatasetManifest:
    mp = manifest_path(path)
    data = read_json(mp)
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(
            f"dataset format version mismatch: expected {FORMAT_VERSION!r}, found {version!r} in {mp}"
        )
    try:
        return DatasetManifest.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"invalid manifest {mp}: {exc}") from exc


def load_dataset(path: str | Path) -> Tuple[List[AnnotatedTrajectory], DatasetManifest]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Dataset not found: {p}")
    manifest = load_manifest(p)

    dataset: List[AnnotatedTrajectory] = []
    dims: Optional[Tuple[int, int]] = None
    with p.open("r", encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"malformed JSON ({exc.msg})", record=index) from exc
            at = _decode_record(raw, index)
            current = (at.traj.state_dim, at.traj.action_dim)
            if dims is None:
                dims = current
            elif current != dims:
                raise DatasetFormatError(
                    f"dimension mismatch: (state, action)={current}, expected {dims}",
                    record=index,
                )
            dataset.append(at)

    if len(dataset) != manifest.kept:
        raise DatasetFormatError(
            f"manifest lists kept={manifest.kept} but {p} holds {len(dataset)} records"
        )
    return dataset, manifest


# ---------------- Checkpoints -----------------

def save_checkpoint(
    path: str | Path,
    params: Mapping[str, np.ndarray],
    config: Mapping[str, Any],
) -> Path:
    """Flat record of named float64 tensors; the model config goes to a JSON sidecar."""
    tensors = []
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"refusing to write non-finite tensor {name}")
        tensors.append({"name": name, "shape": list(arr.shape), "values": arr.reshape(-1).tolist()})
    p = write_json(path, {"format_version": CHECKPOINT_FORMAT, "tensors": tensors})
    write_json(config_sidecar_path(p), dict(config))
    return p


def load_checkpoint(path: str | Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    data = read_json(path)
    version = data.get("format_version") if isinstance(data, dict) else None
    if version != CHECKPOINT_FORMAT:
        raise DatasetFormatError(
            f"checkpoint format version mismatch: expected {CHECKPOINT_FORMAT!r}, found {version!r}"
        )
    params: Dict[str, np.ndarray] = {}
    for index, entry in enumerate(data.get("tensors", [])):
        try:
            shape = tuple(int(s) for s in entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"malformed tensor entry: {exc}", record=index) from exc
        if values.size != math.prod(shape):
            raise DatasetFormatError(
                f"tensor {entry.get('name')!r} has {values.size} values for shape {shape}",
                record=index,
            )
        params[str(entry["name"])] = values.reshape(shape)
    config = read_json(config_sidecar_path(path))
    return params, config
