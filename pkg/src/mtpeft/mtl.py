"""Hard-parameter-sharing multi-task model with learnable loss weights."""

from __future__ import annotations

import math
import warnings
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Module, Parameter, Tensor
from .backbone import (Backbone, BackboneConfig, Linear, build_backbone, load_archive,
                       save_archive)
from .data import MultiTaskBatch, TaskSpec, pad_mask, validate_tasks
from .errors import ConfigError, InvalidArgumentError, NonFiniteError, ShapeError
from .peft import AdaptedModel, PeftConfig, inject_peft

RETRIEVAL_DIM = 512
ALPHA_COLLAPSE = 0.01


class ClassificationHead(Module):
    """d -> d/2 -> 1 with relu and dropout between the two projections."""

    def __init__(self, d_model: int, rng, dropout: float = 0.1):
        self.fc1 = Linear(d_model, d_model // 2, rng)
        self.fc2 = Linear(d_model // 2, 1, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        h = ag.dropout(ag.relu(self.fc1(x)), self.dropout, self.training, rng)
        return self.fc2(h)


class RetrievalHead(Module):
    def __init__(self, d_model: int, rng, dim: int = RETRIEVAL_DIM):
        self.proj = Linear(d_model, dim, rng)

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        return self.proj(x)


class LossWeights(Module):
    """Task weights ``softmax(theta)``; ``theta`` starts at zero."""

    def __init__(self, n_tasks: int, learnable: bool = True):
        if n_tasks < 1:
            raise InvalidArgumentError("LossWeights: need at least one task")
        self.theta = Parameter(np.zeros(n_tasks, dtype=ag.get_default_dtype()), frozen=not learnable)

    def alphas(self) -> Tensor:
        return ag.softmax(self.theta, axis=0)


def classification_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    if labels.size and not np.all((labels == 0) | (labels == 1)):
        raise InvalidArgumentError(f"classification_loss: labels must be 0/1, got {np.unique(labels)}")
    return ag.bce_with_logits(ag.reshape(logits, (-1,)), labels.reshape(-1))


def retrieval_loss(query_emb: Tensor, code_emb: Tensor, temperature: float = 0.05) -> Tensor:
    """In-batch InfoNCE, query -> code: each query's positive is the code in its row."""
    if query_emb.shape != code_emb.shape:
        raise ShapeError("retrieval_loss", query_emb.shape, code_emb.shape)
    n = query_emb.shape[0]
    if n < 2:
        raise InvalidArgumentError("retrieval_loss: need at least 2 pairs for in-batch negatives")
    if temperature <= 0:
        raise InvalidArgumentError("retrieval_loss: temperature must be positive")
    q = ag.l2_normalize(query_emb, axis=-1)
    c = ag.l2_normalize(code_emb, axis=-1)
    sims = ag.matmul(q, ag.transpose(c)) * (1.0 / temperature)
    return ag.cross_entropy(sims, np.arange(n))


def combine_losses(losses: Sequence[Tensor], weights: LossWeights, names: Sequence[str] | None = None) -> Tensor:
    """``sum_k softmax(theta)_k * L_k``."""
    k = weights.theta.shape[0]
    if len(losses) != k:
        raise ShapeError("combine_losses", (len(losses),), weights.theta.shape)
    for i, loss in enumerate(losses):
        if not np.all(np.isfinite(loss.data)):
            raise NonFiniteError(names[i] if names else f"task {i}", "loss is not finite")
    stacked = ag.stack([ag.reshape(l, ()) for l in losses])
    return ag.tsum(weights.alphas() * stacked)


class MultiTaskModel(Module):
    """Shared (adapted) encoder, one head per task, learnable loss weights."""

    def __init__(self, encoder, tasks: Sequence[TaskSpec], loss_weighting: str = "learnable",
                 head_dropout: float = 0.1, temperature: float = 0.05, seed: int = 42):
        validate_tasks(tasks)
        if loss_weighting not in ("learnable", "uniform"):
            raise ConfigError("loss_weighting", "must be 'learnable' or 'uniform'")
        self.encoder = encoder
        self.tasks = sorted(tasks, key=lambda t: t.task_id)
        self.loss_weighting = loss_weighting
        self.temperature = temperature
        self.head_dropout = head_dropout
        d = encoder.config.d_model
        rng = np.random.default_rng([seed, 0x4EAD])
        dtype = encoder.backbone.embeddings.token.dtype if isinstance(encoder, AdaptedModel) \
            else encoder.embeddings.token.dtype
        with ag.default_dtype(dtype):
            self.heads = {}
            for t in self.tasks:
                if t.kind == "retrieval":
                    self.heads[t.name] = RetrievalHead(d, rng)
                else:
                    self.heads[t.name] = ClassificationHead(d, rng, head_dropout)
            self.loss_weights = LossWeights(len(self.tasks), learnable=loss_weighting == "learnable")
        self._rng = np.random.Generator(np.random.Philox(key=[seed, 0x4EAD]))
        self.assign_names()

    def _children(self):
        # encoder parameters live under "backbone." and "peft.", not "encoder."
        if isinstance(self.encoder, AdaptedModel):
            yield from self.encoder._children()
        else:
            yield "backbone", self.encoder
        for name, head in self.heads.items():
            yield f"heads.{name}", head
        yield "loss_weights", self.loss_weights

    @property
    def task_by_id(self) -> dict[int, TaskSpec]:
        return {t.task_id: t for t in self.tasks}

    def reseed_dropout(self, seed: int) -> None:
        self._rng = np.random.Generator(np.random.Philox(key=[seed, 0x4EAD]))
        self.encoder.reseed_dropout(seed)

    def encode(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        mask = pad_mask(ids)
        # all-pad trailing columns are masked out as keys and never pooled, so dropping them is exact
        width = max(1, int(mask.any(axis=0).nonzero()[0].max(initial=0)) + 1)
        _, pooled = self.encoder.encode(ids[:, :width], mask[:, :width])
        return pooled

    def encode_batch(self, batch: MultiTaskBatch) -> Tensor:
        """Pooled rows for ``batch.encoder_inputs()``, one forward per segment so
        short segments are not padded to the longest one."""
        segments = []
        for sb in batch.sub_batches:
            segments.append(sb.input_ids)
            if sb.second_input_ids is not None:
                segments.append(sb.second_input_ids)
        return ag.concat([self.encode(s) for s in segments])

    def route(self, pooled: Tensor, task_order: Sequence[int], row_counts: Sequence[int]) -> dict[int, Tensor]:
        """Slice ``pooled`` by recorded task order and apply each task's head."""
        if sum(row_counts) != pooled.shape[0]:
            raise ShapeError("route", pooled.shape, (sum(row_counts),), detail="row counts")
        lookup = self.task_by_id
        out, start = {}, 0
        for tid, n in zip(task_order, row_counts):
            if tid not in lookup:
                raise InvalidArgumentError(f"route: unknown task_id {tid}")
            if n < 1:
                raise InvalidArgumentError(f"route: task {tid} has an empty sub-batch")
            rows = ag.getitem(pooled, slice(start, start + n))
            out[tid] = self.heads[lookup[tid].name](rows, self._rng)
            start += n
        return out

    def task_loss(self, task: TaskSpec, output: Tensor, labels) -> Tensor:
        if task.kind == "retrieval":
            n = output.shape[0] // 2
            return retrieval_loss(output[:n], output[n:], self.temperature)
        return classification_loss(output, labels)

    def task_losses(self, batch: MultiTaskBatch) -> dict[int, Tensor]:
        pooled = self.encode_batch(batch)
        outputs = self.route(pooled, batch.task_order, batch.row_counts)
        lookup = self.task_by_id
        return {sb.task_id: self.task_loss(lookup[sb.task_id], outputs[sb.task_id], sb.labels)
                for sb in batch.sub_batches}

    def combined_loss(self, batch: MultiTaskBatch) -> tuple[Tensor, dict[int, Tensor]]:
        losses = self.task_losses(batch)
        ordered = [losses[t.task_id] for t in self.tasks]
        total = combine_losses(ordered, self.loss_weights, [t.name for t in self.tasks])
        return total, losses

    def alphas(self) -> np.ndarray:
        with ag.no_grad():
            alpha = self.loss_weights.alphas().data.copy()
        if alpha.min() < ALPHA_COLLAPSE:
            warnings.warn(f"loss weight collapse: min alpha {alpha.min():.4g}", stacklevel=2)
        return alpha


def build_multitask_model(encoder, tasks: Sequence[TaskSpec], loss_weighting: str = "learnable",
                          head_dropout: float = 0.1, temperature: float = 0.05,
                          seed: int = 42) -> MultiTaskModel:
    """Attach heads and loss weights; heads and theta are always trainable
    (theta stays frozen at zero under uniform weighting)."""
    return MultiTaskModel(encoder, tasks, loss_weighting, head_dropout, temperature, seed)


def assemble_model(backbone_config: BackboneConfig, tasks: Sequence[TaskSpec], mode: str = "peft",
                   peft: PeftConfig | None = None, loss_weighting: str = "learnable",
                   head_dropout: float = 0.1, temperature: float = 0.05, seed: int = 42,
                   dtype="float64", initialize: bool = True) -> MultiTaskModel:
    """Backbone (+ PEFT in ``peft`` mode) + heads, all from one seed."""
    if mode not in ("full", "peft"):
        raise ConfigError("mode", f"must be 'full' or 'peft', got {mode!r}")
    with ag.default_dtype(dtype):
        encoder = build_backbone(backbone_config, seed=seed, initialize=initialize)
        if mode == "peft":
            if peft is None:
                raise ConfigError("peft", "peft mode needs a PEFT configuration")
            encoder = inject_peft(encoder, peft, seed=seed)
        return build_multitask_model(encoder, tasks, loss_weighting, head_dropout, temperature, seed)


# -- checkpointing -----------------------------------------------------------

def model_config(model: MultiTaskModel, extra: dict | None = None) -> dict:
    enc = model.encoder
    peft = enc.peft_config.to_dict() if isinstance(enc, AdaptedModel) else None
    cfg = {
        "backbone": enc.config.to_dict(),
        "mode": "peft" if peft else "full",
        "peft": peft,
        "tasks": [t.to_dict() for t in model.tasks],
        "loss_weighting": model.loss_weighting,
        "head_dropout": model.head_dropout,
        "temperature": model.temperature,
        "dtype": str(model.loss_weights.theta.dtype),
    }
    if extra:
        cfg.update(extra)
    return cfg


def save_model(model: MultiTaskModel, path, extra: dict | None = None):
    return save_archive(path, model_config(model, extra), model.state_dict())


def load_model(path) -> tuple[MultiTaskModel, dict]:
    cfg, state = load_archive(path)
    tasks = [TaskSpec(**t) for t in cfg["tasks"]]
    peft = PeftConfig.from_dict(cfg["peft"]) if cfg.get("peft") else None
    model = assemble_model(
        BackboneConfig.from_dict(cfg["backbone"]), tasks, cfg["mode"], peft,
        cfg["loss_weighting"], cfg["head_dropout"], cfg["temperature"], dtype=cfg["dtype"],
        initialize=False,
    )
    model.load_state_dict(state)
    return model, cfg
