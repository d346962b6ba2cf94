"""Desk-scale transformer backbone with freeze control and parameter census."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Module, Parameter, Tensor
from .errors import ConfigError, InvalidArgumentError, ShapeError

ARCHITECTURES = ("encoder_only", "decoder_only")
INIT_STD = 0.02
MASK_VALUE = -1e9
CHECKPOINT_FORMAT_VERSION = 1

# parameters outside the shared encoder (excluded from the PEFT-only census)
HEAD_PREFIXES = ("heads.", "loss_weights.")


@dataclass
class BackboneConfig:
    architecture: str = "encoder_only"
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ffn: int = 512
    vocab_size: int = 259
    max_seq_len: int = 128
    dropout: float = 0.1

    def validate(self) -> BackboneConfig:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError("backbone.architecture", f"must be one of {ARCHITECTURES}, got {self.architecture!r}")
        for name in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"backbone.{name}", f"must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError("backbone.n_heads", f"{self.n_heads} does not divide d_model={self.d_model}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("backbone.dropout", f"must be in [0, 1), got {self.dropout}")
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> BackboneConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"backbone.{unknown[0]}", "unknown field")
        return cls(**data).validate()


def reference_125m_config() -> BackboneConfig:
    """12-layer, 768-wide encoder with ~125M parameters (roughly CodeBERT-sized)."""
    return BackboneConfig(
        architecture="encoder_only", n_layers=12, d_model=768, n_heads=12, d_ffn=3072,
        vocab_size=51416, max_seq_len=1026, dropout=0.1,
    )


def closed_form_parameter_count(config: BackboneConfig) -> int:
    d, f = config.d_model, config.d_ffn
    embeddings = (config.vocab_size + config.max_seq_len) * d
    attention = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    norms = 2 * 2 * d
    return embeddings + config.n_layers * (attention + ffn + norms) + 2 * d


# -- building blocks ---------------------------------------------------------

def _normal(rng: np.random.Generator | None, shape, std: float = INIT_STD) -> np.ndarray:
    if rng is None:
        return np.zeros(shape, dtype=ag.get_default_dtype())
    return (rng.standard_normal(shape) * std).astype(ag.get_default_dtype())


class Linear(Module):
    """Affine map with ``weight`` stored [out, in]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None):
        self.weight = Parameter(_normal(rng, (d_out, d_in)))
        self.bias = Parameter(np.zeros(d_out, dtype=ag.get_default_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d, dtype=ag.get_default_dtype()))
        self.bias = Parameter(np.zeros(d, dtype=ag.get_default_dtype()))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, self.eps)


class PeftHooks:
    """Insertion points exposed to PEFT modules; the base class is a no-op.

    ``layer`` is the block index.  Subclasses override the points they use.
    """

    def project(self, layer: int, which: str, x: Tensor, proj: Linear) -> Tensor:
        return proj(x)

    def attention_output(self, layer: int, out: Tensor) -> Tensor:
        return out

    def ffn_output(self, layer: int, ffn_input: Tensor, out: Tensor) -> Tensor:
        return out

    def prefix(self, layer: int, n_heads: int) -> tuple[Tensor, Tensor] | None:
        return None


NO_HOOKS = PeftHooks()


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return ag.transpose(ag.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    """softmax(q kᵀ / sqrt(d_head) + mask) v over the last two axes."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * scale
    if mask is not None:
        scores = scores + Tensor(mask.astype(scores.dtype, copy=False))
    return ag.matmul(ag.softmax(scores, axis=-1), v)


def apply_prefix(keys: Tensor, values: Tensor, prefix_kv: tuple[Tensor, Tensor] | None,
                 mask: np.ndarray | None):
    """Prepend per-layer prefix keys/values and widen the additive mask.

    ``prefix_kv`` holds [1 or B, heads, P, d_head] tensors.  Prefix columns are
    always attendable (mask value 0).
    """
    if prefix_kv is None:
        return keys, values, mask
    pk, pv = prefix_kv
    b, h, _, dh = keys.shape
    if pk.shape[1:] != (h, pk.shape[2], dh) or pv.shape != pk.shape:
        raise ShapeError("apply_prefix", keys.shape, pk.shape)
    n_prefix = pk.shape[2]
    if n_prefix == 0:
        return keys, values, mask
    pk = ag.broadcast_to(pk, (b, h, n_prefix, dh))
    pv = ag.broadcast_to(pv, (b, h, n_prefix, dh))
    keys = ag.concat([pk, keys], axis=2)
    values = ag.concat([pv, values], axis=2)
    if mask is not None:
        pad = np.zeros(mask.shape[:-1] + (n_prefix,), dtype=mask.dtype)
        mask = np.concatenate([pad, mask], axis=-1)
    return keys, values, mask


class SelfAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng):
        self.n_heads = n_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.o_proj = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor, mask: np.ndarray, hooks: PeftHooks, layer: int) -> Tensor:
        q = split_heads(hooks.project(layer, "query", x, self.q_proj), self.n_heads)
        k = split_heads(hooks.project(layer, "key", x, self.k_proj), self.n_heads)
        v = split_heads(hooks.project(layer, "value", x, self.v_proj), self.n_heads)
        k, v, mask = apply_prefix(k, v, hooks.prefix(layer, self.n_heads), mask)
        ctx = merge_heads(scaled_dot_attention(q, k, v, mask))
        return hooks.project(layer, "output", ctx, self.o_proj)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ffn: int, rng):
        self.fc1 = Linear(d_model, d_ffn, rng)
        self.fc2 = Linear(d_ffn, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, config: BackboneConfig, rng):
        self.ln1 = LayerNorm(config.d_model)
        self.attn = SelfAttention(config.d_model, config.n_heads, rng)
        self.ln2 = LayerNorm(config.d_model)
        self.ffn = FeedForward(config.d_model, config.d_ffn, rng)
        self.dropout = config.dropout

    def __call__(self, x, mask, hooks: PeftHooks, layer: int, rng) -> Tensor:
        attn = self.attn(self.ln1(x), mask, hooks, layer)
        attn = hooks.attention_output(layer, attn)
        x = x + ag.dropout(attn, self.dropout, self.training, rng)
        ffn_in = self.ln2(x)
        out = hooks.ffn_output(layer, ffn_in, self.ffn(ffn_in))
        return x + ag.dropout(out, self.dropout, self.training, rng)


class Embeddings(Module):
    def __init__(self, config: BackboneConfig, rng):
        self.token = Parameter(_normal(rng, (config.vocab_size, config.d_model)))
        self.position = Parameter(_normal(rng, (config.max_seq_len, config.d_model)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        t = ids.shape[1]
        return ag.embedding(self.token, ids) + ag.getitem(self.position, slice(0, t))


class Backbone(Module):
    def __init__(self, config: BackboneConfig, seed: int = 42, initialize: bool = True):
        self.config = config.validate()
        rng = np.random.default_rng(seed) if initialize else None
        self.embeddings = Embeddings(config, rng)
        self.layers = [Block(config, rng) for _ in range(config.n_layers)]
        self.final_ln = LayerNorm(config.d_model)
        self._dropout_rng = np.random.Generator(np.random.Philox(key=seed))

    def reseed_dropout(self, seed: int) -> None:
        self._dropout_rng = np.random.Generator(np.random.Philox(key=seed))

    def attention_mask(self, pad_mask: np.ndarray) -> np.ndarray:
        """Additive mask [B, 1, T, T]: padding keys, plus causality for decoders."""
        b, t = pad_mask.shape
        allowed = np.broadcast_to(pad_mask[:, None, None, :], (b, 1, t, t))
        if self.config.architecture == "decoder_only":
            allowed = allowed & np.tril(np.ones((t, t), dtype=bool))[None, None]
        return np.where(allowed, 0.0, MASK_VALUE).astype(ag.get_default_dtype())

    def encode(self, ids, pad_mask=None, hooks: PeftHooks | None = None) -> tuple[Tensor, Tensor]:
        """Return hidden states [B, T, d] and the pooled representation [B, d].

        Encoders pool the first token; decoders pool the last non-pad token.
        ``pad_mask`` is True at real tokens (default: all real).
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError("encode", ids.shape, detail="token ids must be [batch, seq]")
        b, t = ids.shape
        if t > self.config.max_seq_len:
            raise InvalidArgumentError(
                f"encode: sequence length {t} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if pad_mask is None:
            pad_mask = np.ones((b, t), dtype=bool)
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if pad_mask.shape != ids.shape:
            raise ShapeError("encode", ids.shape, pad_mask.shape, detail="pad_mask")
        hooks = hooks or NO_HOOKS
        mask = self.attention_mask(pad_mask)
        x = ag.dropout(self.embeddings(ids), self.config.dropout, self.training, self._dropout_rng)
        for i, block in enumerate(self.layers):
            x = block(x, mask, hooks, i, self._dropout_rng)
        hidden = self.final_ln(x)
        if self.config.architecture == "encoder_only":
            pooled = ag.getitem(hidden, (slice(None), 0))
        else:
            last = t - 1 - np.argmax(pad_mask[:, ::-1], axis=1)
            pooled = ag.getitem(hidden, (np.arange(b), last))
        return hidden, pooled


def build_backbone(config: BackboneConfig, seed: int = 42, initialize: bool = True) -> Backbone:
    """Deterministically initialised backbone; all parameters start trainable.

    ``initialize=False`` allocates zero weights (cheap census of large configs).
    """
    backbone = Backbone(config, seed=seed, initialize=initialize)
    backbone.assign_names("backbone")
    return backbone


# -- freezing and census -----------------------------------------------------

def set_frozen(model: Module, name_filter: str | Callable[[str], bool], frozen: bool) -> int:
    """Set the frozen flag on matching parameters; return how many changed.

    ``name_filter`` is a glob over full parameter names (e.g. ``"peft.*"``) or
    a predicate.  A filter matching nothing emits a warning.
    """
    matched = ag.select_parameters(model, name_filter)
    if not matched:
        warnings.warn(f"set_frozen: filter {name_filter!r} matched no parameters", stacklevel=2)
        return 0
    changed = 0
    for _, p in matched:
        if p.frozen != frozen:
            p.frozen = frozen
            changed += 1
    return changed


@dataclass(frozen=True)
class Census:
    count: int
    total: int

    @property
    def fraction(self) -> float:
        return self.count / self.total if self.total else 0.0

    @property
    def percent(self) -> float:
        return 100.0 * self.fraction

    def to_dict(self) -> dict:
        return {"count": self.count, "total": self.total, "fraction": self.fraction,
                "percent": self.percent}


def count_parameters(model: Module, filter: str = "all") -> Census:
    """Parameter census: ``all``, ``trainable``, or a name prefix such as ``"peft."``.

    The denominator is every parameter of ``model`` (backbone, injected
    modules, heads, loss weights).
    """
    named = [(p.name or n, p) for n, p in model.named_parameters()]
    total = sum(p.size for _, p in named)
    if filter == "all":
        count = total
    elif filter == "trainable":
        count = sum(p.size for _, p in named if not p.frozen)
    else:
        count = sum(p.size for n, p in named if n.startswith(filter))
    return Census(count=count, total=total)


def trainable_census(model: Module) -> dict[str, Census]:
    """Both Trainable% variants.

    ``with_heads``: trainable / everything.  ``peft_only``: trainable encoder
    parameters (PEFT modules, or the backbone in full mode) over backbone +
    PEFT, i.e. heads and loss weights excluded from both sides.
    """
    named = [(p.name or n, p) for n, p in model.named_parameters()]
    encoder = [(n, p) for n, p in named if not n.startswith(HEAD_PREFIXES)]
    return {
        "with_heads": Census(sum(p.size for _, p in named if not p.frozen), sum(p.size for _, p in named)),
        "peft_only": Census(sum(p.size for _, p in encoder if not p.frozen), sum(p.size for _, p in encoder)),
    }


# -- checkpoint archive ------------------------------------------------------

def save_archive(path, config: dict, state: dict[str, np.ndarray]) -> Path:
    """Write config + named arrays to one ``.npz`` archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION, "config": config,
            "shapes": {k: list(v.shape) for k, v in state.items()}}
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    arrays = {f"param/{k}": v for k, v in state.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=blob, **arrays)
    return path


def load_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise InvalidArgumentError(f"unsupported checkpoint format {meta.get('format_version')!r}")
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    for name, shape in meta["shapes"].items():
        if list(state[name].shape) != shape:
            raise ShapeError("load_archive", tuple(shape), state[name].shape, detail=name)
    return meta["config"], state
