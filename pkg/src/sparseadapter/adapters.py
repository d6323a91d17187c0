"""Adapter variants plugged into the encoder, plus parameter-budget accounting.

Four variants:
  * houlsby  - bottleneck after attention and after FFN, every layer
  * pfeiffer - bottleneck after FFN only
  * lora     - rank decomposition added to the attention q/v projections
  * mam      - parallel bottleneck at FFN plus learned prefix key/value
               vectors at attention

Adapter weight matrices are the prunable parameter set; biases and prefix
vectors are trainable but never pruned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Model

VARIANTS = ("houlsby", "pfeiffer", "lora", "mam")

PREFIX_INIT_STD = 0.5  # prefix vectors act as extra key/value rows, so O(1) scale


@dataclass
class AdapterSpec:
    """Which adapter variant to insert and how wide to make it.

    Both projections are drawn from Gaussian(0, gaussian_std) instead of the
    conventional zero up-projection: zero weights would give identically zero
    magnitude and loss-sensitivity scores, making pruning at initialization
    degenerate. ``lora_zero_b`` restores zero-init B for non-pruning baselines.
    """

    variant: str = "houlsby"
    r: int = 64
    lora_alpha: float = 16.0
    prefix_len: int = 4
    gaussian_std: float = 1e-2
    lora_zero_b: bool = False

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown adapter variant '{self.variant}'")
        if self.r < 1:
            raise ValueError("bottleneck dimension r must be >= 1")
        if self.gaussian_std <= 0:
            raise ValueError("gaussian_std must be > 0")
        if self.variant == "mam" and self.prefix_len < 1:
            raise ValueError("mam requires prefix_len >= 1")


@dataclass
class LargeSparseConfig:
    """Width-for-density trade at a fixed trainable-kept budget."""

    r_base: int
    scale_k: int
    r: int = field(init=False)
    s: float = field(init=False)

    def __post_init__(self):
        if self.scale_k < 1:
            raise ValueError("scale factor k must be >= 1")
        self.r = self.scale_k * self.r_base
        self.s = 1.0 - 1.0 / self.scale_k


def large_sparse_config(r_base: int, k: int) -> LargeSparseConfig:
    """Scale the bottleneck by k and raise sparsity to 1 - 1/k to hold the budget."""
    return LargeSparseConfig(r_base=r_base, scale_k=k)


class BottleneckAdapter:
    """Residual bottleneck: x + W_up . gelu(W_down . x + b_down) + b_up.

    ``parallel`` sites contribute only the delta term, scaled like LoRA by
    alpha/r, and are combined with the FFN output by the caller.
    """

    def __init__(self, down_w: Tensor, down_b: Tensor, up_w: Tensor, up_b: Tensor,
                 parallel: bool = False, scale: float = 1.0):
        self.down_w = down_w
        self.down_b = down_b
        self.up_w = up_w
        self.up_b = up_b
        self.parallel = parallel
        self.scale = scale

    def delta(self, x: Tensor) -> Tensor:
        hidden = ad.gelu(ad.affine(x, self.down_w, self.down_b))
        out = ad.affine(hidden, self.up_w, self.up_b)
        return out if self.scale == 1.0 else ad.scale(out, self.scale)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(x, self.delta(x))


class LoraProjection:
    """base_proj(x) + (alpha/r) * x @ A @ B wrapping one attention projection."""

    def __init__(self, base_w: Tensor, base_b: Tensor, a: Tensor, b: Tensor,
                 alpha: float, r: int):
        self.base_w = base_w
        self.base_b = base_b
        self.a = a
        self.b = b
        self.scaling = alpha / r

    def delta(self, x: Tensor) -> Tensor:
        return ad.scale(ad.matmul(ad.matmul(x, self.a), self.b), self.scaling)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.affine(x, self.base_w, self.base_b), self.delta(x))


class PrefixSite:
    """Learned prefix key/value rows prepended to a layer's attention."""

    def __init__(self, key: Tensor, value: Tensor, n_heads: int, d_model: int):
        self.key = key
        self.value = value
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.prefix_len = key.shape[0]

    def _heads(self, t: Tensor, bsz: int) -> Tensor:
        p = ad.permute(ad.reshape(t, (self.prefix_len, self.n_heads, self.d_head)),
                       (1, 0, 2))
        return ad.broadcast_to(ad.reshape(p, (1, self.n_heads, self.prefix_len,
                                              self.d_head)),
                               (bsz, self.n_heads, self.prefix_len, self.d_head))

    def key_heads(self, bsz: int) -> Tensor:
        return self._heads(self.key, bsz)

    def value_heads(self, bsz: int) -> Tensor:
        return self._heads(self.value, bsz)


def adapter_forward(x: Tensor, adapter) -> Tensor:
    """Apply one adapter site to an activation (residual/bottleneck contract)."""
    return adapter(x)


def _add_bottleneck(model: Model, rng: np.random.Generator, site: str,
                    spec: AdapterSpec, parallel: bool = False,
                    scale: float = 1.0) -> None:
    d, r = model.cfg.d_model, spec.r
    dw = model.add_group(f"{site}.down.weight",
                         rng.normal(0.0, spec.gaussian_std, (d, r)),
                         prunable=True, adapter=True)
    db = model.add_group(f"{site}.down.bias", np.zeros(r), adapter=True)
    uw = model.add_group(f"{site}.up.weight",
                         rng.normal(0.0, spec.gaussian_std, (r, d)),
                         prunable=True, adapter=True)
    ub = model.add_group(f"{site}.up.bias", np.zeros(d), adapter=True)
    model.adapter_sites[site] = BottleneckAdapter(
        dw.tensor, db.tensor, uw.tensor, ub.tensor, parallel=parallel, scale=scale)


def _add_lora(model: Model, rng: np.random.Generator, proj: str,
              spec: AdapterSpec) -> None:
    d, r = model.cfg.d_model, spec.r
    a = model.add_group(f"{proj}.lora.A", rng.normal(0.0, spec.gaussian_std, (d, r)),
                        prunable=True, adapter=True)
    b_init = np.zeros((r, d)) if spec.lora_zero_b else \
        rng.normal(0.0, spec.gaussian_std, (r, d))
    b = model.add_group(f"{proj}.lora.B", b_init, prunable=True, adapter=True)
    model.adapter_sites[f"{proj}.lora"] = LoraProjection(
        model.param(f"{proj}.weight"), model.param(f"{proj}.bias"),
        a.tensor, b.tensor, spec.lora_alpha, r)


def insert_adapters(model: Model, spec: AdapterSpec, seed: int) -> None:
    """Register adapter parameter groups and wire them into the forward pass."""
    spec.validate()
    if model.adapter_spec is not None:
        raise ValueError("model already has adapters")
    if spec.r >= model.cfg.d_model:
        raise ValueError(f"bottleneck r={spec.r} must be < d_model={model.cfg.d_model}")

    rng = np.random.default_rng(seed)
    for i in range(model.cfg.n_layers):
        pre = f"layer{i}"
        if spec.variant == "houlsby":
            _add_bottleneck(model, rng, f"{pre}.attn.adapter", spec)
            _add_bottleneck(model, rng, f"{pre}.ffn.adapter", spec)
        elif spec.variant == "pfeiffer":
            _add_bottleneck(model, rng, f"{pre}.ffn.adapter", spec)
        elif spec.variant == "lora":
            _add_lora(model, rng, f"{pre}.attn.q", spec)
            _add_lora(model, rng, f"{pre}.attn.v", spec)
        elif spec.variant == "mam":
            _add_bottleneck(model, rng, f"{pre}.ffn.adapter", spec, parallel=True,
                            scale=spec.lora_alpha / spec.r)
            key = model.add_group(f"{pre}.attn.prefix.key",
                                  rng.normal(0.0, PREFIX_INIT_STD,
                                             (spec.prefix_len, model.cfg.d_model)),
                                  adapter=True)
            val = model.add_group(f"{pre}.attn.prefix.value",
                                  rng.normal(0.0, PREFIX_INIT_STD,
                                             (spec.prefix_len, model.cfg.d_model)),
                                  adapter=True)
            model.adapter_sites[f"{pre}.attn.prefix"] = PrefixSite(
                key.tensor, val.tensor, model.cfg.n_heads, model.cfg.d_model)
    model.adapter_spec = spec


def trainable_param_report(model: Model, mask=None) -> dict[str, float]:
    """Parameter budget broken down the way the result tables count it.

    ``adapter_kept`` counts adapter parameters surviving the mask (biases and
    prefix vectors are never masked, so they always count); with no mask it
    equals ``adapter_total``.
    """
    total_backbone = sum(model.groups[n].tensor.size
                         for n in model.backbone_group_names())
    head = sum(model.groups[n].tensor.size for n in model.head_group_names)
    adapter_total = 0
    adapter_kept = 0
    for name in sorted(model.adapter_group_names):
        size = model.groups[name].tensor.size
        adapter_total += size
        if mask is not None and name in mask.masks:
            adapter_kept += int(np.count_nonzero(mask.masks[name]))
        else:
            adapter_kept += size
    denom = total_backbone + adapter_total + head
    return {
        "total_backbone": total_backbone,
        "adapter_total": adapter_total,
        "adapter_kept": adapter_kept,
        "head": head,
        "fraction_kept": adapter_kept / denom if denom else 0.0,
    }
