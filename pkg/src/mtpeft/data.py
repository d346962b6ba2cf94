"""Multi-task data pipeline: tokenize, size uniformly, label, concatenate, sample.

Tokens are raw UTF-8 bytes (0-255) plus three specials.  Every sample is
padded/truncated to the same length so sub-batches from different tasks can be
stacked into one global batch.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, InvalidArgumentError

log = logging.getLogger(__name__)

PAD, BOS, SEP = 256, 257, 258
VOCAB_SIZE = 259

TASK_KINDS = ("binary_classification", "pair_classification", "retrieval")
METRICS = ("f1", "accuracy", "mrr")
SCHEMAS = ("single_function", "code_pair_with_index", "query_code")
MALFORMED_LIMIT = 0.5


# -- tokenization --------------------------------------------------------

def tokenize(text: str, max_len: int) -> np.ndarray:
    """``[BOS] + utf-8 bytes``, truncated to ``max_len`` then PAD-filled."""
    if max_len < 2:
        raise InvalidArgumentError(f"tokenize: max_len must be >= 2, got {max_len}")
    ids = np.full(max_len, PAD, dtype=np.int64)
    body = text.encode("utf-8")[: max_len - 1]
    ids[0] = BOS
    ids[1:1 + len(body)] = np.frombuffer(body, dtype=np.uint8)
    return ids


def encode_pair(a: str, b: str, max_len: int) -> np.ndarray:
    """``[BOS] a [SEP] b`` with both segments truncated proportionally to fit."""
    if max_len < 3:
        raise InvalidArgumentError(f"encode_pair: max_len must be >= 3, got {max_len}")
    ba, bb = a.encode("utf-8"), b.encode("utf-8")
    budget = max_len - 2
    if len(ba) + len(bb) > budget:
        keep_a = int(budget * len(ba) / (len(ba) + len(bb)))
        keep_b = min(len(bb), budget - keep_a)
        keep_a = budget - keep_b
        ba, bb = ba[:keep_a], bb[:keep_b]
    body = ba + bytes([0]) + bb  # placeholder byte replaced by SEP
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[0] = BOS
    ids[1:1 + len(body)] = np.frombuffer(body, dtype=np.uint8)
    ids[1 + len(ba)] = SEP
    return ids


def pad_mask(ids: np.ndarray) -> np.ndarray:
    return np.asarray(ids) != PAD


# -- task and sample types -----------------------------------------------

@dataclass
class TaskSpec:
    task_id: int
    name: str
    kind: str
    metric: str
    schema: str | None = None
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    index: str | None = None
    synthetic: str | None = None

    def validate(self) -> TaskSpec:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"tasks.{self.name}.kind", f"must be one of {TASK_KINDS}")
        if self.metric not in METRICS:
            raise ConfigError(f"tasks.{self.name}.metric", f"must be one of {METRICS}")
        if (self.kind == "retrieval") != (self.metric == "mrr"):
            raise ConfigError(f"tasks.{self.name}.metric", "retrieval tasks use mrr, and only they do")
        if self.schema is not None and self.schema not in SCHEMAS:
            raise ConfigError(f"tasks.{self.name}.schema", f"must be one of {SCHEMAS}")
        return self

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def validate_tasks(tasks: Sequence[TaskSpec]) -> None:
    if not tasks:
        raise ConfigError("tasks", "at least one task is required")
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ConfigError("tasks", f"duplicate task_id in {ids}")
    if sorted(ids) != list(range(len(ids))):
        raise ConfigError("tasks", f"task ids must be dense 0..K-1, got {ids}")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ConfigError("tasks", f"duplicate task name in {names}")
    for t in tasks:
        t.validate()


@dataclass
class Sample:
    task_id: int
    input_ids: np.ndarray
    second_input_ids: np.ndarray | None = None
    label: int = 0


class TaskDataset:
    """One task's split as stacked arrays (rows are samples)."""

    def __init__(self, task_id: int, name: str, kind: str, input_ids: np.ndarray,
                 labels: np.ndarray, second_input_ids: np.ndarray | None = None,
                 summary: dict | None = None):
        self.task_id = task_id
        self.name = name
        self.kind = kind
        self.input_ids = np.asarray(input_ids, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.second_input_ids = None if second_input_ids is None else np.asarray(second_input_ids, dtype=np.int64)
        self.summary = summary or {}

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def max_seq_len(self) -> int:
        return self.input_ids.shape[1]

    def __getitem__(self, i: int) -> Sample:
        second = None if self.second_input_ids is None else self.second_input_ids[i]
        return Sample(self.task_id, self.input_ids[i], second, int(self.labels[i]))

    def rows(self, indices) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        second = None if self.second_input_ids is None else self.second_input_ids[idx]
        return self.input_ids[idx], second, self.labels[idx]


def build_dataset(task: TaskSpec, records: Sequence[dict], max_len: int, split: str = "train") -> TaskDataset:
    """Tokenize canonical records into a :class:`TaskDataset`.

    Canonical records: ``{"func", "target"}`` for single-input classification,
    ``{"code1", "code2", "label"}`` for pairs, ``{"query", "code"}`` for
    retrieval.  Records whose text is empty are filtered out.
    """
    first, second, labels = [], [], []
    filtered = 0
    for rec in records:
        if task.kind == "binary_classification":
            if not rec["func"].strip():
                filtered += 1
                continue
            first.append(tokenize(rec["func"], max_len))
            labels.append(int(rec["target"]))
        elif task.kind == "pair_classification":
            if not rec["code1"].strip() or not rec["code2"].strip():
                filtered += 1
                continue
            first.append(encode_pair(rec["code1"], rec["code2"], max_len))
            labels.append(int(rec["label"]))
        else:
            if not rec["query"].strip() or not rec["code"].strip():
                filtered += 1
                continue
            first.append(tokenize(rec["query"], max_len))
            second.append(tokenize(rec["code"], max_len))
            labels.append(0)
    if not first:
        raise DataError(f"{task.name}/{split}: no usable samples")
    summary = {"task": task.name, "split": split, "kept": len(first), "skipped": filtered,
               "filtered_empty": filtered}
    return TaskDataset(
        task.task_id, task.name, task.kind, np.stack(first), np.array(labels),
        np.stack(second) if second else None, summary,
    )


# -- JSONL loaders -------------------------------------------------------

def _read_lines(path: Path) -> list[str]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty dataset")
    return lines


def _parse_records(path: Path, parse) -> tuple[list[dict], int]:
    lines = _read_lines(path)
    records, malformed = [], 0
    for ln in lines:
        try:
            rec = parse(ln)
        except (ValueError, KeyError, TypeError):
            malformed += 1
            continue
        records.append(rec)
    if malformed / len(lines) > MALFORMED_LIMIT:
        raise DataError(f"{path}: {malformed} of {len(lines)} lines malformed")
    if malformed:
        log.warning("%s: skipped %d malformed line(s)", path, malformed)
    return records, malformed


def _single_function(line: str) -> dict:
    obj = json.loads(line)
    func, target = obj["func"], obj["target"]
    if not isinstance(func, str) or target not in (0, 1) or isinstance(target, bool):
        raise ValueError("bad single_function record")
    return {"func": func, "target": int(target)}


def _query_code(line: str) -> dict:
    obj = json.loads(line)
    query = obj["query"] if "query" in obj else obj["docstring"]
    code = obj["code"]
    if not isinstance(query, str) or not isinstance(code, str):
        raise ValueError("bad query_code record")
    return {"query": query, "code": code}


def _pair_ids(line: str) -> dict:
    line = line.strip()
    if line.startswith("{"):
        obj = json.loads(line)
        a, b, label = obj["id1"], obj["id2"], obj["label"]
    else:
        a, b, label = line.split("\t")
    label = int(label)
    if label not in (0, 1):
        raise ValueError("bad pair label")
    return {"id1": str(a), "id2": str(b), "label": label}


def _index_entry(line: str) -> dict:
    obj = json.loads(line)
    if not isinstance(obj["func"], str):
        raise ValueError("bad index entry")
    return {"idx": str(obj["idx"]), "func": obj["func"]}


def load_jsonl_task(path, schema: str, task: TaskSpec, max_len: int, split: str = "train",
                    index_path=None) -> TaskDataset:
    """Load one split in one of the three distributed formats.

    ``single_function``: ``{"func", "target"}`` per line.
    ``code_pair_with_index``: pair lines (``{"id1","id2","label"}`` or
    ``id1<TAB>id2<TAB>label``) plus an index file of ``{"idx", "func"}``.
    ``query_code``: ``{"query"|"docstring", "code"}`` per line.

    Malformed lines are skipped and counted; more than half malformed is an
    error.  The summary lands in ``dataset.summary``.
    """
    path = Path(path)
    if schema == "single_function":
        records, malformed = _parse_records(path, _single_function)
    elif schema == "query_code":
        records, malformed = _parse_records(path, _query_code)
    elif schema == "code_pair_with_index":
        if index_path is None:
            raise DataError(f"{path}: code_pair_with_index needs an index file")
        index_records, _ = _parse_records(Path(index_path), _index_entry)
        code = {r["idx"]: r["func"] for r in index_records}
        pairs, malformed = _parse_records(path, _pair_ids)
        records = []
        for p in pairs:
            if p["id1"] not in code or p["id2"] not in code:
                malformed += 1
                continue
            records.append({"code1": code[p["id1"]], "code2": code[p["id2"]], "label": p["label"]})
    else:
        raise ConfigError("schema", f"must be one of {SCHEMAS}, got {schema!r}")
    ds = build_dataset(task, records, max_len, split)
    ds.summary["skipped"] += malformed
    ds.summary["malformed"] = malformed
    return ds


# -- concatenation and round-robin sampling --------------------------------

class ConcatenatedDataset:
    """Per-task datasets behind one global index space."""

    def __init__(self, datasets: Sequence[TaskDataset]):
        if not datasets:
            raise DataError("ConcatenatedDataset: no datasets")
        for ds in datasets:
            if len(ds) == 0:
                raise DataError(f"task {ds.name!r} has an empty dataset")
        self.datasets = sorted(datasets, key=lambda d: d.task_id)
        self.offsets = np.concatenate([[0], np.cumsum([len(d) for d in self.datasets])])

    def __len__(self) -> int:
        return int(self.offsets[-1])

    @property
    def sizes(self) -> list[int]:
        return [len(d) for d in self.datasets]

    def locate(self, global_index: int) -> tuple[int, int]:
        if not 0 <= global_index < len(self):
            raise IndexError(global_index)
        t = int(np.searchsorted(self.offsets, global_index, side="right") - 1)
        return t, int(global_index - self.offsets[t])

    def global_index(self, task: int, local: int) -> int:
        if not 0 <= local < len(self.datasets[task]):
            raise IndexError((task, local))
        return int(self.offsets[task] + local)

    def __getitem__(self, global_index: int) -> Sample:
        t, i = self.locate(global_index)
        return self.datasets[t][i]


@dataclass
class SubBatch:
    task_id: int
    indices: np.ndarray
    input_ids: np.ndarray
    second_input_ids: np.ndarray | None
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def n_rows(self) -> int:
        """Encoder rows this sub-batch contributes (retrieval encodes two sides)."""
        return len(self.indices) * (1 if self.second_input_ids is None else 2)

    def encoder_inputs(self) -> np.ndarray:
        if self.second_input_ids is None:
            return self.input_ids
        return np.concatenate([self.input_ids, self.second_input_ids])


@dataclass
class MultiTaskBatch:
    sub_batches: list[SubBatch]
    task_order: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.task_order:
            self.task_order = [sb.task_id for sb in self.sub_batches]

    def encoder_inputs(self) -> np.ndarray:
        return np.concatenate([sb.encoder_inputs() for sb in self.sub_batches])

    @property
    def row_counts(self) -> list[int]:
        return [sb.n_rows for sb in self.sub_batches]


def _derived_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def epoch_length(sizes: Sequence[int], per_task_batch: int) -> int:
    return math.ceil(max(sizes) / per_task_batch)


def round_robin_batches(data: ConcatenatedDataset, per_task_batch: int, seed: int,
                        epoch: int = 0) -> Iterator[MultiTaskBatch]:
    """One epoch of global batches, one sub-batch per task in task-id order.

    Each task walks a seeded permutation of its samples.  An exhausted task
    restarts with a fresh permutation (seeded from run seed, epoch, task and
    restart count), so small tasks are oversampled.  An epoch is
    ``ceil(max_task_size / per_task_batch)`` steps.
    """
    if per_task_batch < 1:
        raise InvalidArgumentError("per_task_batch must be >= 1")
    n_steps = epoch_length(data.sizes, per_task_batch)
    cursors = []
    for ds in data.datasets:
        cursors.append({"perm": _derived_rng(seed, epoch, ds.task_id, 0).permutation(len(ds)),
                        "pos": 0, "restarts": 0})
    for _ in range(n_steps):
        subs = []
        for ds, cur in zip(data.datasets, cursors):
            take = []
            while len(take) < per_task_batch:
                if cur["pos"] == len(cur["perm"]):
                    cur["restarts"] += 1
                    cur["perm"] = _derived_rng(seed, epoch, ds.task_id, cur["restarts"]).permutation(len(ds))
                    cur["pos"] = 0
                n = min(per_task_batch - len(take), len(cur["perm"]) - cur["pos"])
                take.extend(cur["perm"][cur["pos"]:cur["pos"] + n])
                cur["pos"] += n
            idx = np.asarray(take, dtype=np.int64)
            first, second, labels = ds.rows(idx)
            subs.append(SubBatch(ds.task_id, idx, first, second, labels))
        yield MultiTaskBatch(subs)


def sequential_batches(ds: TaskDataset, batch_size: int) -> Iterator[SubBatch]:
    """Deterministic in-order batches for evaluation (last one may be short)."""
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        first, second, labels = ds.rows(idx)
        yield SubBatch(ds.task_id, idx, first, second, labels)
