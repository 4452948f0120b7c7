"""The four reference tuning methods, each a small trainable module wired
to backbone sites through additive delta hooks.

prompt   trainable rows prepended to the embedded sequence
bitfit   zero-initialized additive offsets at every bias-carrying site
lora     low-rank bypass around attention projections, delta = alpha * x Wd Wu
adapter  bottleneck transform of a sub-layer output, delta = act(f Wd) Wu

All module weights are trainable; the backbone stays frozen. Up
projections start at zero so lora and adapter leave the forward pass
bitwise unchanged until the first optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, UsageError
from .model import Backbone, DeltaHooks
from .serialize import load_checkpoint, save_checkpoint, tensors_hash

PET_KINDS = ("prompt", "bitfit", "lora", "adapter")

LORA_INIT_STD = 0.02
ADAPTER_INIT_STD = 0.02


@dataclass
class PetConfig:
    kind: str
    prompt_len: int = 100
    lora_rank: int = 8
    lora_alpha: float = 16.0
    adapter_bottleneck: int = 24
    adapter_activation: str = "relu"
    adapter_bias: bool = False
    target_projections: tuple = ("q", "v")
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in PET_KINDS:
            raise ConfigError(f"unknown tuning method {self.kind!r}, expected one of {PET_KINDS}")
        if self.prompt_len < 1 or self.lora_rank < 1 or self.adapter_bottleneck < 1:
            raise ConfigError("prompt_len, lora_rank and adapter_bottleneck must all be >= 1")
        self.target_projections = tuple(self.target_projections)
        bad = set(self.target_projections) - {"q", "k", "v", "out"}
        if bad:
            raise ConfigError(f"unknown attention projections: {sorted(bad)}")


class TuningModule:
    """Named trainable weights plus the hooks that insert them."""

    def __init__(self, kind: str, model: Backbone):
        self.kind = kind
        self.model = model
        self.weights: dict[str, Tensor] = {}
        self.hooks = DeltaHooks()

    def _new_weight(self, name: str, arr) -> Tensor:
        t = Tensor(arr, requires_grad=True, name=name)
        self.weights[name] = t
        return t

    def trainable_parameters(self) -> dict[str, Tensor]:
        return self.weights

    def count_trainable(self) -> int:
        return sum(t.size for t in self.weights.values())

    def weights_hash(self) -> str:
        return tensors_hash({n: t.data for n, t in self.weights.items()})

    def save(self, path, config: dict | None = None):
        save_checkpoint(path, "tuning-module", {"kind": self.kind, **(config or {})},
                        {n: t.data for n, t in self.weights.items()})

    def load_weights(self, path):
        doc = load_checkpoint(path)
        if doc["kind"] != "tuning-module":
            raise ConfigError(f"expected a tuning-module checkpoint, got {doc['kind']!r}")
        if set(doc["tensors"]) != set(self.weights):
            raise ConfigError("checkpoint weights do not match this module's layout")
        for name, arr in doc["tensors"].items():
            if arr.shape != self.weights[name].data.shape:
                raise ConfigError(f"checkpoint tensor {name} has shape {arr.shape}, module expects {self.weights[name].data.shape}")
            self.weights[name].data = arr


class PetModule(TuningModule):
    def __init__(self, kind: str, model: Backbone, config: PetConfig):
        super().__init__(kind, model)
        self.config = config

    def save(self, path, config=None):
        cfg = {
            "prompt_len": self.config.prompt_len,
            "lora_rank": self.config.lora_rank,
            "lora_alpha": self.config.lora_alpha,
            "adapter_bottleneck": self.config.adapter_bottleneck,
            "adapter_activation": self.config.adapter_activation,
            "adapter_bias": self.config.adapter_bias,
            "target_projections": list(self.config.target_projections),
            "init_seed": self.config.init_seed,
        }
        super().save(path, cfg)


def freeze_backbone(model: Backbone):
    model.set_trainable(False)


def unfreeze_backbone(model: Backbone):
    model.set_trainable(True)


def attach_prompt(model: Backbone, cfg: PetConfig) -> PetModule:
    """Prepend cfg.prompt_len trainable rows to the embedded input."""
    if cfg.prompt_len >= model.config.max_seq_len:
        raise ConfigError(f"prompt_len={cfg.prompt_len} leaves no room under max_seq_len={model.config.max_seq_len}")
    freeze_backbone(model)
    module = PetModule("prompt", model, cfg)
    rng = np.random.default_rng(cfg.init_seed)
    rows = module._new_weight("prompt.weight", rng.normal(0.0, 1.0, size=(cfg.prompt_len, model.config.d_model)))
    module.hooks.set_prompt(cfg.prompt_len, lambda: rows)
    model.attach(module)
    return module


def attach_bitfit(model: Backbone) -> PetModule:
    """Additive offset per bias-carrying site, starting at zero."""
    freeze_backbone(model)
    module = PetModule("bitfit", model, PetConfig(kind="bitfit"))
    for site in model.bias_sites():
        dim = model.config.d_model
        delta = module._new_weight(f"bitfit.{site}", np.zeros(dim))
        module.hooks.add(site, lambda h_in, f_out, t=delta: t)
    model.attach(module)
    return module


def attach_lora(model: Backbone, cfg: PetConfig) -> PetModule:
    """Low-rank bypass on the configured attention projections."""
    d = model.config.d_model
    if cfg.lora_rank > d:
        raise ConfigError(f"lora_rank={cfg.lora_rank} exceeds d_model={d}")
    freeze_backbone(model)
    module = PetModule("lora", model, cfg)
    rng = np.random.default_rng(cfg.init_seed)
    for site in model.projection_sites(cfg.target_projections):
        down = module._new_weight(f"lora.{site}.down", rng.normal(0.0, LORA_INIT_STD, size=(d, cfg.lora_rank)))
        up = module._new_weight(f"lora.{site}.up", np.zeros((cfg.lora_rank, d)))

        def delta(h_in, f_out, down=down, up=up, alpha=cfg.lora_alpha):
            return ad.scale(ad.matmul(ad.matmul(h_in, down), up), alpha)

        module.hooks.add(site, delta)
    model.attach(module)
    return module


def attach_adapter(model: Backbone, cfg: PetConfig) -> PetModule:
    """Bottleneck transform of each sub-layer output (attention and FFN)."""
    d = model.config.d_model
    freeze_backbone(model)
    module = PetModule("adapter", model, cfg)
    rng = np.random.default_rng(cfg.init_seed)
    for site in model.adapter_sites():
        down = module._new_weight(f"adapter.{site}.down", rng.normal(0.0, ADAPTER_INIT_STD, size=(d, cfg.adapter_bottleneck)))
        up = module._new_weight(f"adapter.{site}.up", np.zeros((cfg.adapter_bottleneck, d)))
        b_down = b_up = None
        if cfg.adapter_bias:
            b_down = module._new_weight(f"adapter.{site}.down_bias", np.zeros(cfg.adapter_bottleneck))
            b_up = module._new_weight(f"adapter.{site}.up_bias", np.zeros(d))

        def delta(h_in, f_out, down=down, up=up, b_down=b_down, b_up=b_up, act=cfg.adapter_activation):
            mid = ad.matmul(f_out, down)
            if b_down is not None:
                mid = ad.add(mid, b_down)
            out = ad.matmul(ad.nonlinearity(mid, act), up)
            if b_up is not None:
                out = ad.add(out, b_up)
            return out

        module.hooks.add(site, delta)
    model.attach(module)
    return module


class FullTuning(TuningModule):
    """Everything trainable: the reference the tuning methods are held against."""

    def __init__(self, model: Backbone):
        super().__init__("ft", model)
        unfreeze_backbone(model)
        self.weights = model.parameters()

    def save(self, path, config=None):
        raise UsageError("save the backbone itself for full-parameter tuning")


def attach_ft(model: Backbone) -> FullTuning:
    return FullTuning(model)


def attach_pet(model: Backbone, cfg: PetConfig) -> PetModule:
    if cfg.kind == "prompt":
        return attach_prompt(model, cfg)
    if cfg.kind == "bitfit":
        return attach_bitfit(model)
    if cfg.kind == "lora":
        return attach_lora(model, cfg)
    return attach_adapter(model, cfg)


def count_trainable(module: TuningModule) -> int:
    return module.count_trainable()


def load_pet(model: Backbone, path) -> PetModule:
    """Rebuild a saved method on a compatible backbone and load its weights."""
    doc = load_checkpoint(path)
    cfg_d = dict(doc["config"])
    kind = cfg_d.pop("kind")
    cfg_d["target_projections"] = tuple(cfg_d.get("target_projections", ("q", "v")))
    module = attach_pet(model, PetConfig(kind=kind, **cfg_d))
    module.load_weights(path)
    return module
