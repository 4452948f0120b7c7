"""Hookable encoder backbone.

Every sub-layer output is a named site where an attached tuning module
may add a delta: the site value becomes f(h_in) + delta, and deltas are
applied additively nowhere else. The backbone itself is the frozen
parameter set; tuning modules own all trainable weights.

Blocks are pre-norm: layer norm feeds each sub-layer and the sub-layer
output joins the residual stream. Classification pools the sequence by
mean (prompt rows excluded) and applies a linear head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, InputError, ShapeError
from .serialize import load_checkpoint, save_checkpoint, tensors_hash


@dataclass
class ModelConfig:
    num_blocks: int = 2
    d_model: int = 32
    num_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 768
    max_seq_len: int = 64
    num_classes: int = 4
    activation: str = "relu"
    head_init: str = "gaussian"  # "gaussian" | "zero"

    def __post_init__(self):
        for name in ("num_blocks", "d_model", "num_heads", "d_ff", "vocab_size", "max_seq_len", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.num_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.d_ff <= self.d_model:
            raise ConfigError(f"d_ff={self.d_ff} must exceed d_model={self.d_model}")
        if self.head_init not in ("gaussian", "zero"):
            raise ConfigError(f"unknown head_init {self.head_init!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class DeltaHooks:
    """Binding of backbone sites to delta-producing closures.

    Additive closures receive (h_in, f_out) and return the delta tensor
    for that site. The prompt slot is different in kind: it prepends rows
    to the embedded sequence before the first block.
    """

    def __init__(self):
        self.additive = {}
        self.prompt_fn = None
        self.prompt_len = 0

    def add(self, site: str, fn):
        if site in self.additive:
            raise ConfigError(f"site {site!r} already has a hook bound")
        self.additive[site] = fn

    def set_prompt(self, length: int, fn):
        if self.prompt_fn is not None:
            raise ConfigError("prompt slot already bound")
        self.prompt_fn = fn
        self.prompt_len = length

    def sites(self):
        out = set(self.additive)
        if self.prompt_fn is not None:
            out.add("prompt")
        return out

    @classmethod
    def merged(cls, hook_sets) -> "DeltaHooks":
        merged = cls()
        for hs in hook_sets:
            for site, fn in hs.additive.items():
                merged.add(site, fn)
            if hs.prompt_fn is not None:
                merged.set_prompt(hs.prompt_len, hs.prompt_fn)
        return merged


class Backbone:
    """Frozen-by-default encoder with a parameter registry and hook sites."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._attached = []
        rng = np.random.default_rng(seed)
        c = config

        def param(name, arr):
            t = Tensor(arr, requires_grad=False, name=name)
            self.params[name] = t
            return t

        def linear_init(fan_in, shape):
            return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

        param("embedding", rng.normal(0.0, 1.0, size=(c.vocab_size, c.d_model)))
        for b in range(c.num_blocks):
            for proj in ("q", "k", "v"):
                param(f"block{b}.attn.w{proj}", linear_init(c.d_model, (c.d_model, c.d_model)))
                param(f"block{b}.attn.b{proj}", np.zeros(c.d_model))
            param(f"block{b}.attn.wo", linear_init(c.d_model, (c.d_model, c.d_model)))
            param(f"block{b}.attn.bo", np.zeros(c.d_model))
            for ln in ("ln1", "ln2"):
                param(f"block{b}.{ln}.gain", np.ones(c.d_model))
                param(f"block{b}.{ln}.bias", np.zeros(c.d_model))
            param(f"block{b}.ffn.w1", linear_init(c.d_model, (c.d_model, c.d_ff)))
            param(f"block{b}.ffn.b1", np.zeros(c.d_ff))
            param(f"block{b}.ffn.w2", linear_init(c.d_ff, (c.d_ff, c.d_model)))
            param(f"block{b}.ffn.b2", np.zeros(c.d_model))
        param("final_ln.gain", np.ones(c.d_model))
        param("final_ln.bias", np.zeros(c.d_model))
        if c.head_init == "zero":
            param("head.weight", np.zeros((c.d_model, c.num_classes)))
        else:
            param("head.weight", linear_init(c.d_model, (c.d_model, c.num_classes)))
        param("head.bias", np.zeros(c.num_classes))

    # ------------------------------------------------------------ registry

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def params_hash(self) -> str:
        return tensors_hash({name: t.data for name, t in self.params.items()})

    def set_trainable(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag

    # ------------------------------------------------------------ sites

    def hook_sites(self):
        """Additive sites in forward order, plus the special prompt slot."""
        sites = []
        for b in range(self.config.num_blocks):
            sites += [f"block{b}.ln1.out", f"block{b}.attn.q", f"block{b}.attn.k", f"block{b}.attn.v",
                      f"block{b}.attn.out", f"block{b}.ln2.out", f"block{b}.ffn.out"]
        sites.append("final_ln.out")
        return sites

    def bias_sites(self):
        """Sites whose frozen transform ends in a bias: attention projections and layer norms."""
        sites = []
        for b in range(self.config.num_blocks):
            sites += [f"block{b}.attn.q", f"block{b}.attn.k", f"block{b}.attn.v",
                      f"block{b}.attn.out", f"block{b}.ln1.out", f"block{b}.ln2.out"]
        sites.append("final_ln.out")
        return sites

    def adapter_sites(self):
        sites = []
        for b in range(self.config.num_blocks):
            sites += [f"block{b}.attn.out", f"block{b}.ffn.out"]
        return sites

    def projection_sites(self, projections=("q", "v")):
        return [f"block{b}.attn.{p}" for b in range(self.config.num_blocks) for p in projections]

    # ------------------------------------------------------------ module binding

    def attach(self, module):
        taken = set()
        for m in self._attached:
            taken |= m.hooks.sites()
        overlap = taken & module.hooks.sites()
        if overlap:
            raise ConfigError(f"sites already bound by another module: {sorted(overlap)}")
        unknown = module.hooks.sites() - set(self.hook_sites()) - {"prompt"}
        if unknown:
            raise ConfigError(f"unknown hook sites: {sorted(unknown)}")
        self._attached.append(module)

    def detach(self, module):
        self._attached.remove(module)

    def detach_all(self):
        self._attached = []

    def attached_modules(self):
        return list(self._attached)

    def combined_hooks(self) -> DeltaHooks:
        return DeltaHooks.merged(m.hooks for m in self._attached)

    # ------------------------------------------------------------ forward

    def _apply_hook(self, site, h_in, f_out, hooks, trace):
        fn = hooks.additive.get(site) if hooks is not None else None
        if fn is None:
            return f_out
        delta = fn(h_in, f_out)
        if delta.data.shape != f_out.data.shape and delta.data.shape != f_out.data.shape[-1:]:
            raise ShapeError(f"hook at {site} produced shape {delta.data.shape}, site is {f_out.data.shape}")
        out = ad.add(f_out, delta)
        if trace is not None:
            trace.append({"site": site, "f_out": f_out.data.copy(), "delta": np.broadcast_to(delta.data, f_out.data.shape).copy(), "h_out": out.data.copy()})
        return out

    def _linear(self, x, w, b):
        return ad.add(ad.matmul(x, self.params[w]), self.params[b])

    def _attention(self, x, block, hooks, trace):
        c = self.config
        q = self._apply_hook(f"block{block}.attn.q", x, self._linear(x, f"block{block}.attn.wq", f"block{block}.attn.bq"), hooks, trace)
        k = self._apply_hook(f"block{block}.attn.k", x, self._linear(x, f"block{block}.attn.wk", f"block{block}.attn.bk"), hooks, trace)
        v = self._apply_hook(f"block{block}.attn.v", x, self._linear(x, f"block{block}.attn.wv", f"block{block}.attn.bv"), hooks, trace)
        heads = []
        for h in range(c.num_heads):
            lo = h * c.d_head
            qi = ad.narrow(q, -1, lo, c.d_head)
            ki = ad.narrow(k, -1, lo, c.d_head)
            vi = ad.narrow(v, -1, lo, c.d_head)
            scores = ad.scale(ad.matmul(qi, ad.swap_last_axes(ki)), 1.0 / math.sqrt(c.d_head))
            heads.append(ad.matmul(ad.softmax_rows(scores), vi))
        cat = concat_heads(heads)
        out = self._linear(cat, f"block{block}.attn.wo", f"block{block}.attn.bo")
        return self._apply_hook(f"block{block}.attn.out", x, out, hooks, trace)

    def attention_head_forward(self, x: Tensor, block: int, head: int) -> Tensor:
        """Single attention head on input x: softmax(q kT / sqrt(d_head)) v."""
        c = self.config
        if not 0 <= block < c.num_blocks:
            raise InputError(f"block {block} out of range")
        if not 0 <= head < c.num_heads:
            raise InputError(f"head {head} out of range (num_heads={c.num_heads})")
        lo = head * c.d_head
        q = ad.narrow(self._linear(x, f"block{block}.attn.wq", f"block{block}.attn.bq"), -1, lo, c.d_head)
        k = ad.narrow(self._linear(x, f"block{block}.attn.wk", f"block{block}.attn.bk"), -1, lo, c.d_head)
        v = ad.narrow(self._linear(x, f"block{block}.attn.wv", f"block{block}.attn.bv"), -1, lo, c.d_head)
        scores = ad.scale(ad.matmul(q, ad.swap_last_axes(k)), 1.0 / math.sqrt(c.d_head))
        return ad.matmul(ad.softmax_rows(scores), v)

    def mha_forward(self, x: Tensor, block: int = 0) -> Tensor:
        """Concatenated heads transformed by the output projection."""
        return self._attention(x, block, None, None)

    def ffn_forward(self, x: Tensor, block: int = 0) -> Tensor:
        h = ad.nonlinearity(self._linear(x, f"block{block}.ffn.w1", f"block{block}.ffn.b1"), self.config.activation)
        return self._linear(h, f"block{block}.ffn.w2", f"block{block}.ffn.b2")

    def block_forward(self, h: Tensor, block: int, hooks: DeltaHooks | None = None, trace=None) -> Tensor:
        """Pre-norm block: LN -> attention -> residual, LN -> FFN -> residual."""
        self._check_hook_sites(hooks)
        x1 = self._apply_hook(f"block{block}.ln1.out", h,
                              ad.layer_norm(h, self.params[f"block{block}.ln1.gain"], self.params[f"block{block}.ln1.bias"]),
                              hooks, trace)
        h = ad.add(h, self._attention(x1, block, hooks, trace))
        x2 = self._apply_hook(f"block{block}.ln2.out", h,
                              ad.layer_norm(h, self.params[f"block{block}.ln2.gain"], self.params[f"block{block}.ln2.bias"]),
                              hooks, trace)
        f = self._apply_hook(f"block{block}.ffn.out", x2, self.ffn_forward(x2, block), hooks, trace)
        return ad.add(h, f)

    def _check_hook_sites(self, hooks):
        if hooks is None:
            return
        unknown = set(hooks.additive) - set(self.hook_sites())
        if unknown:
            raise ConfigError(f"unknown hook sites: {sorted(unknown)}")

    def forward(self, ids, hooks: DeltaHooks | None = None, trace=None) -> Tensor:
        """Token ids -> class logits: embed, run blocks, mean-pool, classify.

        ids may be one sequence (n,) or a batch (B, n); logits follow suit.
        With hooks=None the hooks of all attached modules apply.
        """
        if hooks is None:
            hooks = self.combined_hooks()
        self._check_hook_sites(hooks)
        c = self.config
        ids = np.asarray(ids)
        if not np.issubdtype(ids.dtype, np.integer):
            raise InputError(f"token ids must be integers, got dtype {ids.dtype}")
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise InputError(f"token ids must be 1-D or 2-D, got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            bad = ids[(ids < 0) | (ids >= c.vocab_size)][0]
            raise InputError(f"token id {int(bad)} outside vocabulary of size {c.vocab_size}")
        n_prompt = hooks.prompt_len if hooks.prompt_fn is not None else 0
        if ids.shape[1] + n_prompt > c.max_seq_len:
            raise InputError(f"sequence length {ids.shape[1]} plus {n_prompt} prompt rows exceeds max_seq_len={c.max_seq_len}")

        h = ad.embedding(self.params["embedding"], ids)
        if n_prompt:
            rows = hooks.prompt_fn()
            h = ad.concat([ad.expand_batch(rows, ids.shape[0]), h], axis=1)
        for b in range(c.num_blocks):
            h = self.block_forward(h, b, hooks, trace)
        h = self._apply_hook("final_ln.out", h,
                             ad.layer_norm(h, self.params["final_ln.gain"], self.params["final_ln.bias"]),
                             hooks, trace)
        if n_prompt:
            h = ad.narrow(h, 1, n_prompt, ids.shape[1])
        pooled = ad.mean_axis(h, 1)
        logits = ad.add(ad.matmul(pooled, self.params["head.weight"]), self.params["head.bias"])
        if single:
            logits = ad.reshape(logits, (c.num_classes,))
        return logits

    # ------------------------------------------------------------ persistence

    def save(self, path):
        save_checkpoint(path, "backbone", self.config.to_dict(),
                        {name: t.data for name, t in self.params.items()},
                        extra={"seed": self.seed})

    @classmethod
    def load(cls, path) -> "Backbone":
        doc = load_checkpoint(path)
        if doc["kind"] != "backbone":
            raise ConfigError(f"expected a backbone checkpoint, got kind={doc['kind']!r}")
        model = cls(ModelConfig.from_dict(doc["config"]), seed=doc.get("extra", {}).get("seed", 0))
        for name, arr in doc["tensors"].items():
            model.params[name].data = arr
        return model


def concat_heads(heads):
    return heads[0] if len(heads) == 1 else ad.concat(heads, axis=-1)


def closed_form_param_count(config: ModelConfig) -> int:
    """Backbone size from the layer dimensions alone."""
    c = config
    per_block = (
        4 * (c.d_model * c.d_model + c.d_model)          # q, k, v, o projections with biases
        + (c.d_model * c.d_ff + c.d_ff)                  # ffn in
        + (c.d_ff * c.d_model + c.d_model)               # ffn out
        + 2 * 2 * c.d_model                              # two layer norms
    )
    return (
        c.vocab_size * c.d_model
        + c.num_blocks * per_block
        + 2 * c.d_model                                  # final layer norm
        + c.d_model * c.num_classes + c.num_classes      # classifier head
    )
