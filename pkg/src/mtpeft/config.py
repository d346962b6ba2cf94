"""YAML experiment configuration and data preparation.

Schema (``format_version: 1``)::

    format_version: 1
    name: mft-serial            # run name, also the default output subdir
    seed: 42                    # model init, sampler and dropout seed
    output_dir: runs/mft        # optional; relative to the config file
    mode: peft                  # full | peft
    peft: {method: serial_adapter, bottleneck_r: 64}
    loss_weighting: learnable   # learnable | uniform
    backbone: {n_layers: 4, d_model: 128, ...}
    train: {per_task_batch: 16, max_epochs: 10, ...}
                                # max_steps / max_task_batches cap updates;
                                # the latter divides by the task count
    synthetic: {seed: 7, train_size: 1000, ...}   # needed by synthetic tasks
    tasks:
      - name: clone                     # a synthetic task
      - name: devign                    # a file-backed task
        kind: binary_classification
        metric: accuracy
        schema: single_function
        train: data/train.jsonl
        valid: data/valid.jsonl
        test: data/test.jsonl

Task ids follow list order.  Relative paths resolve against the config
file's directory.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .data import TaskDataset, TaskSpec, build_dataset, load_jsonl_task, validate_tasks
from .errors import ConfigError, DataError
from .peft import PeftConfig
from .synthetic import (TASK_LAYOUT, SyntheticSpec, canonical_records,
                        generate_synthetic_tasks)
from .trainer import TrainConfig

FORMAT_VERSION = 1
TOP_LEVEL = ("format_version", "name", "seed", "output_dir", "mode", "peft", "loss_weighting",
             "backbone", "train", "synthetic", "tasks")
TASK_FIELDS = ("name", "kind", "metric", "schema", "train", "valid", "test", "index")
SPLITS = ("train", "valid", "test")


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    mode: str
    backbone: BackboneConfig
    train: TrainConfig
    tasks: list[TaskSpec]
    peft: PeftConfig | None = None
    loss_weighting: str = "learnable"
    synthetic: SyntheticSpec | None = None
    synthetic_seed: int | None = None
    output_dir: str | None = None
    base_dir: str = "."
    format_version: int = FORMAT_VERSION

    @property
    def max_seq_len(self) -> int:
        return self.train.max_seq_len or self.backbone.max_seq_len

    def to_dict(self) -> dict:
        synthetic = None
        if self.synthetic is not None:
            synthetic = dict(self.synthetic.to_dict(), seed=self.synthetic_seed)
        tasks = []
        for t in self.tasks:
            d = t.to_dict()
            d.pop("task_id")
            if t.synthetic:
                d = {"name": t.name}
            tasks.append(d)
        return {
            "format_version": self.format_version,
            "name": self.name,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "mode": self.mode,
            "peft": self.peft.to_dict() if self.peft else None,
            "loss_weighting": self.loss_weighting,
            "backbone": self.backbone.to_dict(),
            "train": self.train.to_dict(),
            "synthetic": synthetic,
            "tasks": tasks,
        }

    def with_overrides(self, seed: int | None = None, tasks: list[str] | None = None,
                       name: str | None = None) -> ExperimentConfig:
        """Copy with a new seed and/or a subset of tasks (ids renumbered)."""
        cfg = copy.deepcopy(self)
        if seed is not None:
            cfg.seed = seed
            cfg.train.seed = seed
        if tasks is not None:
            by_name = {t.name: t for t in cfg.tasks}
            missing = [n for n in tasks if n not in by_name]
            if missing:
                raise ConfigError("tasks", f"unknown task(s) {missing}")
            cfg.tasks = [by_name[n] for n in tasks]
            for i, t in enumerate(cfg.tasks):
                t.task_id = i
        if name is not None:
            cfg.name = name
        return cfg


def _line_map(node, prefix: str = "", out: dict | None = None) -> dict[str, int]:
    """Dotted key path -> 1-based line, from a composed YAML node tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = f"{prefix}.{key.value}" if prefix else str(key.value)
            out[path] = key.start_mark.line + 1
            _line_map(value, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            path = f"{prefix}[{i}]"
            out[path] = item.start_mark.line + 1
            _line_map(item, path, out)
    return out


def _locate(lines: dict[str, int], field_path: str) -> int | None:
    path = field_path
    while path:
        if path in lines:
            return lines[path]
        cut = max(path.rfind("."), path.rfind("["))
        path = path[:cut] if cut > 0 else ""
    return None


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(key, "must be a mapping")
    return value


def _resolve(base: Path, path: str | None) -> str | None:
    if path is None:
        return None
    p = Path(path)
    return str(p if p.is_absolute() else base / p)


def _task(i: int, raw, base: Path) -> TaskSpec:
    if isinstance(raw, str):
        raw = {"name": raw}
    if not isinstance(raw, dict) or "name" not in raw:
        raise ConfigError(f"tasks[{i}]", "each task needs a name")
    unknown = sorted(set(raw) - set(TASK_FIELDS))
    if unknown:
        raise ConfigError(f"tasks[{i}].{unknown[0]}", "unknown field")
    name = str(raw["name"])
    if "train" not in raw:
        if name not in TASK_LAYOUT:
            raise ConfigError(f"tasks[{i}].train",
                              f"task {name!r} is not synthetic and names no data files")
        kind, metric, schema = TASK_LAYOUT[name]
        return TaskSpec(i, name, kind, metric, schema=schema, synthetic=name)
    for key in ("kind", "metric", "schema", "valid", "test"):
        if key not in raw:
            raise ConfigError(f"tasks[{i}].{key}", "required for file-backed tasks")
    paths = {k: _resolve(base, raw.get(k)) for k in (*SPLITS, "index")}
    return TaskSpec(i, name, raw["kind"], raw["metric"], schema=raw["schema"], **paths)


def parse_config(raw: dict, base_dir=".") -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig` from a parsed mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    unknown = sorted(set(raw) - set(TOP_LEVEL))
    if unknown:
        raise ConfigError(unknown[0], "unknown top-level field")
    version = raw.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError("format_version", f"expected {FORMAT_VERSION}, got {version!r}")
    base = Path(base_dir)
    seed = int(raw.get("seed", 42))
    mode = raw.get("mode", "peft")
    if mode not in ("full", "peft"):
        raise ConfigError("mode", f"must be 'full' or 'peft', got {mode!r}")
    backbone = BackboneConfig.from_dict(_section(raw, "backbone"))

    train_raw = dict(_section(raw, "train"))
    train_raw.setdefault("seed", seed)
    train_raw["mode"] = mode
    train = TrainConfig.from_dict(train_raw)
    if train.max_seq_len is not None and train.max_seq_len > backbone.max_seq_len:
        raise ConfigError("train.max_seq_len", "exceeds backbone.max_seq_len")

    peft = None
    if mode == "peft":
        peft = PeftConfig.from_dict(_section(raw, "peft"))

    loss_weighting = raw.get("loss_weighting", "learnable")
    if loss_weighting not in ("learnable", "uniform"):
        raise ConfigError("loss_weighting", "must be 'learnable' or 'uniform'")

    tasks_raw = raw.get("tasks")
    if not isinstance(tasks_raw, list) or not tasks_raw:
        raise ConfigError("tasks", "must be a non-empty list")
    tasks = [_task(i, t, base) for i, t in enumerate(tasks_raw)]
    validate_tasks(tasks)

    synthetic, synthetic_seed = None, None
    if raw.get("synthetic") is not None or any(t.synthetic for t in tasks):
        syn = dict(_section(raw, "synthetic"))
        synthetic_seed = int(syn.pop("seed", seed))
        synthetic = SyntheticSpec.from_dict(syn)

    return ExperimentConfig(
        name=str(raw.get("name", "run")), seed=seed, mode=mode, backbone=backbone, train=train,
        tasks=tasks, peft=peft, loss_weighting=loss_weighting, synthetic=synthetic,
        synthetic_seed=synthetic_seed, output_dir=_resolve(base, raw.get("output_dir")),
        base_dir=str(base),
    )


def load_config(path) -> ExperimentConfig:
    """Read a YAML config; errors carry the offending field and line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from exc
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError("<syntax>", str(getattr(exc, "problem", exc)), line) from exc
    lines = _line_map(node) if node is not None else {}
    try:
        return parse_config(raw, path.parent)
    except ConfigError as exc:
        raise ConfigError(exc.field, exc.message, _locate(lines, exc.field)) from exc
    except TypeError as exc:
        raise ConfigError("<root>", str(exc)) from exc


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def prepare_data(cfg: ExperimentConfig) -> dict[str, list[TaskDataset]]:
    """Tokenize every task's splits: ``{split: [dataset per task]}``."""
    corpus = None
    if any(t.synthetic for t in cfg.tasks):
        corpus = generate_synthetic_tasks(cfg.synthetic, cfg.synthetic_seed)
    out: dict[str, list[TaskDataset]] = {s: [] for s in SPLITS}
    for t in cfg.tasks:
        for split in SPLITS:
            if t.synthetic:
                ds = build_dataset(t, canonical_records(corpus, t.synthetic, split), cfg.max_seq_len, split)
            else:
                path = getattr(t, split)
                if not Path(path).is_file():
                    raise DataError(f"task {t.name!r}: {split} file not found: {path}")
                if t.index is not None and not Path(t.index).is_file():
                    raise DataError(f"task {t.name!r}: index file not found: {t.index}")
                ds = load_jsonl_task(path, t.schema, t, cfg.max_seq_len, split, t.index)
            out[split].append(ds)
    return out


def data_summary(data: dict[str, list[TaskDataset]]) -> list[dict]:
    return [ds.summary for split in SPLITS for ds in data[split]]
