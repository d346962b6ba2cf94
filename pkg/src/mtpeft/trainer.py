"""Optimisation loop, early stopping, metrics and token-cost accounting."""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from . import autograd as ag
from .backbone import trainable_census
from .data import ConcatenatedDataset, TaskDataset, TaskSpec, round_robin_batches
from .errors import ConfigError, DataError, NonFiniteError, TrainingDivergedError
from .mtl import MultiTaskModel, classification_loss, retrieval_loss

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
DEFAULT_LR = {"peft": 1e-4, "full": 2e-5}


@dataclass
class TrainConfig:
    mode: str = "peft"
    learning_rate: float | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epsilon: float = 1e-8
    per_task_batch: int = 8
    max_epochs: int = 10
    early_stop_patience: int = 2
    seed: int = 42
    max_seq_len: int | None = None
    dtype: str = "float64"
    head_dropout: float = 0.1
    retrieval_temperature: float = 0.05
    eval_batch_size: int = 64
    retrieval_eval_pool: int | None = None
    max_steps: int | None = None
    # cap on steps x tasks: equal compute for single- and multi-task runs
    max_task_batches: int | None = None

    def validate(self) -> TrainConfig:
        if self.mode not in DEFAULT_LR:
            raise ConfigError("train.mode", f"must be 'full' or 'peft', got {self.mode!r}")
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.mode]
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate", "must be > 0")
        if self.early_stop_patience < 1:
            raise ConfigError("train.early_stop_patience", "must be >= 1")
        if self.per_task_batch < 1:
            raise ConfigError("train.per_task_batch", "must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("train.max_epochs", "must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype", "must be float32 or float64")
        if self.retrieval_eval_pool is not None and self.retrieval_eval_pool < 2:
            raise ConfigError("train.retrieval_eval_pool", "must be >= 2")
        for name in ("max_steps", "max_task_batches"):
            if getattr(self, name) is not None and getattr(self, name) < 1:
                raise ConfigError(f"train.{name}", "must be >= 1")
        return self

    def step_limit(self, n_tasks: int) -> int | None:
        limits = [self.max_steps] if self.max_steps is not None else []
        if self.max_task_batches is not None:
            limits.append(max(1, self.max_task_batches // n_tasks))
        return min(limits) if limits else None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"train.{unknown[0]}", "unknown field")
        return cls(**data).validate()


class Adam:
    """Bias-corrected Adam over the model's trainable parameters."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if not p.frozen]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if p.frozen or p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(p.name or "parameter", "gradient is not finite")
            m, v = self.m[id(p)], self.v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- metrics -------------------------------------------------------------

def f1_score(preds, labels) -> float:
    preds, labels = np.asarray(preds, dtype=bool), np.asarray(labels, dtype=bool)
    tp = int(np.sum(preds & labels))
    fp = int(np.sum(preds & ~labels))
    fn = int(np.sum(~preds & labels))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.size == 0:
        raise DataError("accuracy: empty prediction set")
    return float(np.mean(preds == labels))


def compute_mrr(query_embs, code_embs, pairing=None) -> float:
    """Mean reciprocal rank of each query's true code under cosine similarity.

    ``pairing[i]`` is the index of query ``i``'s code (default: identity).
    Ties rank the lower code index first.
    """
    q = np.asarray(query_embs, dtype=np.float64)
    c = np.asarray(code_embs, dtype=np.float64)
    n = q.shape[0]
    pairing = np.arange(n) if pairing is None else np.asarray(pairing)
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    cn = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)
    sims = qn @ cn.T
    true = sims[np.arange(n), pairing][:, None]
    idx = np.arange(c.shape[0])[None, :]
    ahead = (sims > true) | ((sims == true) & (idx < pairing[:, None]))
    ranks = 1 + ahead.sum(axis=1)
    return float(np.mean(1.0 / ranks))


# -- evaluation ----------------------------------------------------------

def _eval_chunks(n: int, size: int) -> list[slice]:
    """Contiguous chunks of ``size``; a trailing singleton joins its neighbour."""
    bounds = list(range(0, n, size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        bounds.pop(-2)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def _embed(model: MultiTaskModel, task: TaskSpec, ids: np.ndarray, batch: int) -> np.ndarray:
    head = model.heads[task.name]
    outs = []
    for start in range(0, len(ids), batch):
        pooled = model.encode(ids[start:start + batch])
        outs.append(head(pooled).data)
    return np.concatenate(outs)


def task_outputs(model: MultiTaskModel, task: TaskSpec, ds: TaskDataset, batch: int = 64):
    """Logits (classification) or (query, code) embeddings (retrieval), eval mode."""
    was_training = model.training
    model.eval()
    try:
        with ag.no_grad():
            if task.kind == "retrieval":
                return _embed(model, task, ds.input_ids, batch), _embed(model, task, ds.second_input_ids, batch)
            return _embed(model, task, ds.input_ids, batch).reshape(-1)
    finally:
        model.train(was_training)


def metric_from_outputs(task: TaskSpec, outputs, labels, pool: int | None = None) -> float:
    if task.kind == "retrieval":
        q, c = outputs
        if pool is None:
            return compute_mrr(q, c)
        chunks = _eval_chunks(len(q), pool)
        return float(np.mean(np.concatenate([
            [compute_mrr(q[s], c[s])] * (s.stop - s.start) for s in chunks
        ])))
    preds = outputs > 0
    if task.metric == "f1":
        return f1_score(preds, labels)
    return accuracy(preds, labels)


def evaluate(model: MultiTaskModel, task: TaskSpec, ds: TaskDataset, batch: int = 64,
             retrieval_pool: int | None = None) -> float:
    """Task metric on a split: F1/accuracy at logit threshold 0, or MRR."""
    if ds is None or len(ds) == 0:
        raise DataError(f"evaluate: empty split for task {task.name!r}")
    outputs = task_outputs(model, task, ds, batch)
    return metric_from_outputs(task, outputs, ds.labels, retrieval_pool)


def validation_loss(model: MultiTaskModel, task: TaskSpec, ds: TaskDataset, outputs,
                    chunk: int) -> float:
    """Sample-weighted mean task loss in eval mode (retrieval: in-batch chunks)."""
    with ag.no_grad():
        if task.kind == "retrieval":
            q, c = outputs
            total = 0.0
            for s in _eval_chunks(len(q), chunk):
                loss = retrieval_loss(ag.Tensor(q[s]), ag.Tensor(c[s]), model.temperature)
                total += loss.item() * (s.stop - s.start)
            return total / len(q)
        return classification_loss(ag.Tensor(outputs), ds.labels).item()


# -- reports ---------------------------------------------------------------

@dataclass
class RunReport:
    run_name: str
    tasks: list[str]
    metrics: dict[str, str]
    mode: str
    peft_method: str | None
    seed: int
    per_task_batch: int
    global_batch_size: int
    max_seq_len: int
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_loss: float = math.inf
    updates_to_best: int = 0
    total_updates: int = 0
    tokens_to_best: int = 0
    stopped_early: bool = False
    valid_metrics: dict[str, float] = field(default_factory=dict)
    test_metrics: dict[str, float] = field(default_factory=dict)
    census: dict[str, dict] = field(default_factory=dict)
    alpha_trajectory: list[list[float]] = field(default_factory=list)
    early_stop_aggregate: str = "uniform_mean_of_task_valid_losses"
    batch_size_semantics: str = "global = n_tasks x per_task_batch samples"
    wall_clock_seconds: float = 0.0

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_tasks"] = self.n_tasks
        return d

    @classmethod
    def from_dict(cls, data: dict) -> RunReport:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def token_cost(report: RunReport) -> int:
    """Updates-to-best x global batch size x sequence length."""
    return int(report.updates_to_best) * int(report.global_batch_size) * int(report.max_seq_len)


# -- training ----------------------------------------------------------------

def _as_concat(split) -> ConcatenatedDataset:
    if isinstance(split, ConcatenatedDataset):
        return split
    if isinstance(split, Mapping):
        return ConcatenatedDataset(list(split.values()))
    return ConcatenatedDataset(list(split))


def train(model: MultiTaskModel, data: Mapping[str, object], config: TrainConfig,
          run_name: str = "run") -> RunReport:
    """Round-robin multi-task training with early stopping on mean valid loss.

    ``data`` maps ``"train"`` and ``"valid"`` (optionally ``"test"``) to
    per-task datasets.  The best-validation parameters are restored before
    returning.
    """
    config.validate()
    started = time.perf_counter()
    tasks = model.tasks
    train_data = _as_concat(data["train"])
    valid = {ds.task_id: ds for ds in _as_concat(data["valid"]).datasets}
    test = {ds.task_id: ds for ds in _as_concat(data["test"]).datasets} if data.get("test") else {}
    if sorted(ds.task_id for ds in train_data.datasets) != [t.task_id for t in tasks]:
        raise DataError("training data does not match the model's task set")
    seq_len = train_data.datasets[0].max_seq_len

    peft_method = getattr(getattr(model.encoder, "peft_config", None), "method", None)
    report = RunReport(
        run_name=run_name, tasks=[t.name for t in tasks], metrics={t.name: t.metric for t in tasks},
        mode=config.mode, peft_method=peft_method, seed=config.seed,
        per_task_batch=config.per_task_batch, global_batch_size=len(tasks) * config.per_task_batch,
        max_seq_len=seq_len,
        census={k: v.to_dict() for k, v in trainable_census(model).items()},
    )

    model.reseed_dropout(config.seed)
    opt = Adam(model.parameters(), config.learning_rate, config.adam_beta1, config.adam_beta2, config.epsilon)
    best_state = None
    bad_epochs = 0
    step = 0
    limit = config.step_limit(len(tasks))
    for epoch in range(config.max_epochs):
        model.train()
        sums = {t.task_id: 0.0 for t in tasks}
        n_steps = 0
        for batch in round_robin_batches(train_data, config.per_task_batch, config.seed, epoch):
            if limit is not None and step >= limit:
                break
            total, losses = model.combined_loss(batch)
            value = total.item()
            if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                raise TrainingDivergedError(step, value)
            opt.zero_grad()
            model.zero_grad()
            total.backward()
            opt.step()
            step += 1
            n_steps += 1
            for tid, loss in losses.items():
                sums[tid] += loss.item()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            alpha = model.alphas()
        for w in caught:
            log.warning("epoch %d: %s", epoch + 1, w.message)

        record = {"epoch": epoch + 1, "steps": n_steps, "updates": step,
                  "train_loss": {t.name: sums[t.task_id] / max(n_steps, 1) for t in tasks},
                  "valid_loss": {}, "valid_metric": {},
                  "alpha": alpha.tolist(), "min_alpha": float(alpha.min())}
        for t in tasks:
            outputs = task_outputs(model, t, valid[t.task_id], config.eval_batch_size)
            record["valid_loss"][t.name] = validation_loss(model, t, valid[t.task_id], outputs,
                                                          config.per_task_batch)
            record["valid_metric"][t.name] = metric_from_outputs(
                t, outputs, valid[t.task_id].labels, config.retrieval_eval_pool)
        aggregate = float(np.mean(list(record["valid_loss"].values())))
        record["valid_aggregate"] = aggregate
        report.epochs.append(record)
        report.alpha_trajectory.append(alpha.tolist())
        log.info("epoch %d: train %s valid %.4f metrics %s", epoch + 1,
                 {k: round(v, 4) for k, v in record["train_loss"].items()}, aggregate,
                 {k: round(v, 4) for k, v in record["valid_metric"].items()})

        if aggregate < report.best_valid_loss:
            report.best_valid_loss = aggregate
            report.best_epoch = epoch + 1
            report.updates_to_best = step
            report.valid_metrics = dict(record["valid_metric"])
            best_state = {p.name: p.data.copy() for p in opt.params}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.early_stop_patience:
                report.stopped_early = True
                break
        if limit is not None and step >= limit:
            break

    report.total_updates = step
    if best_state is not None:
        for p in opt.params:
            p.data[...] = best_state[p.name]
    report.tokens_to_best = token_cost(report)
    for t in tasks:
        if t.task_id in test:
            report.test_metrics[t.name] = evaluate(model, t, test[t.task_id], config.eval_batch_size,
                                                   config.retrieval_eval_pool)
    model.eval()
    report.wall_clock_seconds = time.perf_counter() - started
    return report
