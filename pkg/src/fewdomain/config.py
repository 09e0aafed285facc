"""JSON experiment configs.

Keys mirror :class:`~fewdomain.pipeline.ExperimentConfig` field names;
``episodic`` and ``mats`` are nested objects. Task specs are either
generator dicts (``TaskSpec.to_dict`` layout) or ``{"file": path,
"task_id": id}`` references to feature files, resolved relative to the
config file. A ``"bench"`` key starts from a preset (see
:mod:`fewdomain.benches`), with ``"bench_args"`` passed to it and any other
keys overriding the preset's fields::

    {"bench": "mats_pool", "bench_args": {"delta": 12}, "seeds": [0, 1, 2]}
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from fewdomain import benches
from fewdomain.episodic import EpisodicConfig
from fewdomain.mats import MatsConfig
from fewdomain.pipeline import ExperimentConfig
from fewdomain.taskbench import Task, TaskSpec

_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}
_EXTRA = {"bench", "bench_args"}


def _task_entry(entry, base_dir: Path):
    if isinstance(entry, dict) and "file" in entry:
        path = Path(entry["file"])
        if not path.is_absolute():
            path = base_dir / path
        return {"file": str(path), "task_id": entry.get("task_id")}
    if isinstance(entry, dict):
        return TaskSpec.from_dict(entry)
    raise ValueError(f"task entry must be an object, got {type(entry).__name__}")


def config_from_dict(data: dict, base_dir=".") -> ExperimentConfig:
    unknown = set(data) - _FIELDS - _EXTRA
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    base_dir = Path(base_dir)
    data = dict(data)
    if "episodic" in data:
        data["episodic"] = EpisodicConfig(**data["episodic"])
    if "mats" in data:
        data["mats"] = MatsConfig(**data["mats"])
    if "base_task_specs" in data:
        data["base_task_specs"] = [_task_entry(e, base_dir) for e in data["base_task_specs"]]
    if data.get("novel_task_spec") is not None:
        data["novel_task_spec"] = _task_entry(data["novel_task_spec"], base_dir)

    bench = data.pop("bench", None)
    bench_args = data.pop("bench_args", {})
    if bench is None:
        if bench_args:
            raise ValueError("bench_args given without bench")
        return ExperimentConfig(**data)
    cfg = benches.preset(bench, **bench_args)
    return dataclasses.replace(cfg, **data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be an object")
    return config_from_dict(data, path.parent)


def _task_to_json(spec):
    if isinstance(spec, TaskSpec):
        return spec.to_dict()
    if isinstance(spec, Task):
        raise ValueError(f"task {spec.task_id!r} is materialized; write it to a feature file instead")
    return spec


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "base_task_specs":
            v = [_task_to_json(s) for s in v]
        elif f.name == "novel_task_spec":
            v = None if v is None else _task_to_json(v)
        elif dataclasses.is_dataclass(v):
            v = dataclasses.asdict(v)
        out[f.name] = v
    return out


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=1) + "\n", encoding="utf-8")
