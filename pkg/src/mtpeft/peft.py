"""Injectable PEFT modules: serial/parallel adapters, LoRA, prefix tuning.

Every module is zero-initialised on its output path (``W_up`` or ``B``) so an
adapted model reproduces the frozen backbone exactly until training moves it.
Prefix tuning is the exception: prefixes change attention from step 0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import Module, Parameter, Tensor
from .backbone import Backbone, Linear, PeftHooks, apply_prefix  # noqa: F401  (re-exported)
from .errors import ConfigError, InvalidArgumentError, ShapeError

METHODS = ("serial_adapter", "parallel_adapter", "lora", "prefix")
LORA_TARGETS = ("query", "key", "value", "output")


@dataclass
class PeftConfig:
    method: str = "serial_adapter"
    bottleneck_r: int = 64
    lora_rank: int = 16
    lora_targets: tuple[str, ...] = ("query", "value")
    lora_scaling: float = 1.0
    prefix_length: int = 20
    prefix_reparam_width: int = 512

    def validate(self) -> PeftConfig:
        if self.method not in METHODS:
            raise ConfigError("peft.method", f"must be one of {METHODS}, got {self.method!r}")
        for name in ("bottleneck_r", "lora_rank", "prefix_length", "prefix_reparam_width"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"peft.{name}", "must be >= 1")
        self.lora_targets = tuple(self.lora_targets)
        if self.method == "lora":
            if not self.lora_targets:
                raise ConfigError("peft.lora_targets", "must be non-empty for lora")
            bad = [t for t in self.lora_targets if t not in LORA_TARGETS]
            if bad:
                raise ConfigError("peft.lora_targets", f"unknown projection(s) {bad}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> PeftConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"peft.{unknown[0]}", "unknown field")
        data = dict(data)
        if "lora_targets" in data:
            data["lora_targets"] = tuple(data["lora_targets"])
        return cls(**data).validate()


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape).astype(ag.get_default_dtype())


def _zeros(shape):
    return np.zeros(shape, dtype=ag.get_default_dtype())


class SerialAdapterModule(Module):
    """Bottleneck ``d -> r -> d``; ``W_down`` is [d, r], ``W_up`` is [r, d]."""

    def __init__(self, d: int, r: int, rng: np.random.Generator):
        self.W_down = Parameter(_uniform(rng, (d, r), 1.0 / math.sqrt(d)))
        self.b_down = Parameter(_zeros(r))
        self.W_up = Parameter(_zeros((r, d)))
        self.b_up = Parameter(_zeros(d))

    @property
    def d(self) -> int:
        return self.W_down.shape[0]

    def bottleneck(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.d:
            raise ShapeError("adapter", h.shape, self.W_down.shape, detail="trailing dim must equal d")
        x = ag.reshape(h, (1, -1)) if h.ndim == 1 else h
        out = ag.relu(x @ self.W_down + self.b_down) @ self.W_up + self.b_up
        return ag.reshape(out, h.shape) if h.ndim == 1 else out


# same parameters, different wiring
ParallelAdapterModule = SerialAdapterModule


def apply_serial_adapter(h: Tensor, module: SerialAdapterModule) -> Tensor:
    """``W_up·relu(W_down·h + b_down) + b_up + h``."""
    return module.bottleneck(h) + h


def apply_parallel_adapter(sublayer_input: Tensor, sublayer_output: Tensor,
                           module: SerialAdapterModule) -> Tensor:
    """Side path reads the sublayer input and is added to its output."""
    if sublayer_input.shape[-1] != sublayer_output.shape[-1]:
        raise ShapeError("parallel_adapter", sublayer_input.shape, sublayer_output.shape)
    return sublayer_output + module.bottleneck(sublayer_input)


class LoraModule(Module):
    """Low-rank update ``B·A`` next to a frozen projection.

    ``A`` is [rank, d_in] (small uniform), ``B`` is [d_out, rank] (zeros).
    A rank equal to the full width is refused unless ``allow_full_rank``.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, scaling: float, rng,
                 allow_full_rank: bool = False):
        limit = min(d_in, d_out)
        if rank > limit or (rank == limit and not allow_full_rank):
            raise InvalidArgumentError(f"lora: rank {rank} is not low-rank for a {d_out}x{d_in} projection")
        self.A = Parameter(_uniform(rng, (rank, d_in), 1.0 / math.sqrt(d_in)))
        self.B = Parameter(_zeros((d_out, rank)))
        self.scaling = float(scaling)

    def delta(self, x: Tensor) -> Tensor:
        return ag.linear(ag.linear(x, self.A), self.B) * self.scaling


def apply_lora(x: Tensor, W, module: LoraModule, bias=None) -> Tensor:
    """``x·Wᵀ (+ bias) + scaling·x·Aᵀ·Bᵀ``; ``W`` may be a tensor or a Linear."""
    if isinstance(W, Linear):
        W, bias = W.weight, W.bias
    if x.shape[-1] != module.A.shape[1] or W.shape[1] != module.A.shape[1]:
        raise ShapeError("lora", x.shape, W.shape, module.A.shape)
    return ag.linear(x, W, bias) + module.delta(x)


class PrefixModule(Module):
    """Per-layer key/value prefixes from a reparameterised prefix table.

    ``table`` [P, d] -> Linear(d, width) -> tanh -> Linear(width, L·2·d),
    reshaped to [L, 2, P, d].
    """

    def __init__(self, n_layers: int, d: int, prefix_length: int, width: int, rng):
        if prefix_length < 0:
            raise InvalidArgumentError("prefix_length must be >= 0")
        self.n_layers, self.d, self.prefix_length = n_layers, d, prefix_length
        self.table = Parameter((rng.standard_normal((prefix_length, d)) * 0.02).astype(ag.get_default_dtype()))
        self.reparam_in = Linear(d, width, rng)
        self.reparam_out = Linear(width, n_layers * 2 * d, rng)

    def all_prefixes(self) -> Tensor:
        hidden = ag.tanh(self.reparam_in(self.table))
        kv = self.reparam_out(hidden)  # [P, L*2*d]
        kv = ag.reshape(kv, (self.prefix_length, self.n_layers, 2, self.d))
        return ag.transpose(kv, (1, 2, 0, 3))  # [L, 2, P, d]

    @staticmethod
    def layer_kv(prefixes: Tensor, layer_index: int, n_heads: int) -> tuple[Tensor, Tensor]:
        n_layers, _, p, d = prefixes.shape
        if not 0 <= layer_index < n_layers:
            raise InvalidArgumentError(f"prefix: layer_index {layer_index} outside [0, {n_layers})")
        dh = d // n_heads

        def heads(t):
            return ag.transpose(ag.reshape(t, (1, p, n_heads, dh)), (0, 2, 1, 3))

        return heads(prefixes[layer_index, 0]), heads(prefixes[layer_index, 1])


# -- hook implementations ----------------------------------------------------

class _SerialHooks(PeftHooks):
    def __init__(self, modules):
        self.m = modules

    def attention_output(self, layer, out):
        return apply_serial_adapter(out, self.m.attn_adapters[layer])

    def ffn_output(self, layer, ffn_input, out):
        return apply_serial_adapter(out, self.m.ffn_adapters[layer])


class _ParallelHooks(PeftHooks):
    def __init__(self, modules):
        self.m = modules

    def ffn_output(self, layer, ffn_input, out):
        return apply_parallel_adapter(ffn_input, out, self.m.ffn_adapters[layer])


class _LoraHooks(PeftHooks):
    def __init__(self, modules):
        self.m = modules

    def project(self, layer, which, x, proj):
        adapters = self.m.targets.get(which)
        if adapters is None:
            return proj(x)
        return apply_lora(x, proj, adapters[layer])


class _PrefixHooks(PeftHooks):
    def __init__(self, modules):
        self.m = modules
        self._cache = None

    def prefix(self, layer, n_heads):
        if self._cache is None:
            self._cache = self.m.prefix.all_prefixes()
        return PrefixModule.layer_kv(self._cache, layer, n_heads)


class SerialAdapters(Module):
    def __init__(self, cfg: PeftConfig, n_layers: int, d: int, rng):
        self.attn_adapters = [SerialAdapterModule(d, cfg.bottleneck_r, rng) for _ in range(n_layers)]
        self.ffn_adapters = [SerialAdapterModule(d, cfg.bottleneck_r, rng) for _ in range(n_layers)]

    def hooks(self) -> PeftHooks:
        return _SerialHooks(self)


class ParallelAdapters(Module):
    def __init__(self, cfg: PeftConfig, n_layers: int, d: int, rng):
        self.ffn_adapters = [SerialAdapterModule(d, cfg.bottleneck_r, rng) for _ in range(n_layers)]

    def hooks(self) -> PeftHooks:
        return _ParallelHooks(self)


class LoraAdapters(Module):
    def __init__(self, cfg: PeftConfig, n_layers: int, d: int, rng):
        self.targets = {
            t: [LoraModule(d, d, cfg.lora_rank, cfg.lora_scaling, rng) for _ in range(n_layers)]
            for t in cfg.lora_targets
        }

    def _children(self):
        for t, mods in self.targets.items():
            for i, m in enumerate(mods):
                yield f"{t}.{i}", m

    def hooks(self) -> PeftHooks:
        return _LoraHooks(self)


class PrefixTuning(Module):
    def __init__(self, cfg: PeftConfig, n_layers: int, d: int, rng):
        self.prefix = PrefixModule(n_layers, d, cfg.prefix_length, cfg.prefix_reparam_width, rng)

    def hooks(self) -> PeftHooks:
        return _PrefixHooks(self)


_CONTAINERS = {
    "serial_adapter": SerialAdapters,
    "parallel_adapter": ParallelAdapters,
    "lora": LoraAdapters,
    "prefix": PrefixTuning,
}


class AdaptedModel(Module):
    """A frozen backbone plus one PEFT container registered under ``peft.``."""

    def __init__(self, backbone: Backbone, config: PeftConfig, peft: Module):
        self.backbone = backbone
        self.peft = peft
        self.peft_config = config

    @property
    def config(self):
        return self.backbone.config

    def encode(self, ids, pad_mask=None):
        return self.backbone.encode(ids, pad_mask, hooks=self.peft.hooks())

    def reseed_dropout(self, seed: int) -> None:
        self.backbone.reseed_dropout(seed)


def inject_peft(backbone: Backbone, config: PeftConfig, seed: int = 0) -> AdaptedModel:
    """Freeze ``backbone`` and attach the configured PEFT modules.

    Serial adapters: two per block (after attention and after FFN).  Parallel
    adapters: one per block, beside the FFN.  LoRA: wraps the target
    projections of every block.  Prefix: one reparameterised prefix table
    feeding every layer.
    """
    config.validate()
    cfg = backbone.config
    rng = np.random.default_rng([seed, 0x9EF7])
    with ag.default_dtype(backbone.embeddings.token.dtype):
        peft = _CONTAINERS[config.method](config, cfg.n_layers, cfg.d_model, rng)
    for p in backbone.parameters():
        p.frozen = True
    model = AdaptedModel(backbone, config, peft)
    model.assign_names()
    return model


def peft_parameter_count(config: PeftConfig, n_layers: int, d: int) -> int:
    """Closed-form size of the injected modules."""
    r = config.bottleneck_r
    adapter = 2 * d * r + r + d
    if config.method == "serial_adapter":
        return 2 * n_layers * adapter
    if config.method == "parallel_adapter":
        return n_layers * adapter
    if config.method == "lora":
        return len(config.lora_targets) * n_layers * 2 * d * config.lora_rank
    w, p = config.prefix_reparam_width, config.prefix_length
    return p * d + (d * w + w) + (w * n_layers * 2 * d + n_layers * 2 * d)
