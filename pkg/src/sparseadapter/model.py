"""Miniature transformer encoder with named, freezable parameter groups.

The encoder is a pre-layer-norm classifier stand-in for a big pretrained
backbone: token + position embeddings, a stack of attention/FFN blocks, a
final norm, mean pooling, and a linear head. Adapter machinery hooks in at
three points per layer (attention q/v projections, post-attention output,
post-FFN output) through ``adapter_sites``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"SACP"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    """Shape of the frozen backbone. Defaults are the desk-scale setup."""

    vocab_size: int = 1000
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 256
    n_layers: int = 4
    max_seq_len: int = 64
    n_classes: int = 4

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_heads", "d_ff", "n_layers",
                     "max_seq_len", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"EncoderConfig.{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")


@dataclass
class ParamGroup:
    """One named weight tensor plus its training/pruning flags."""

    name: str
    tensor: Tensor
    trainable: bool
    prunable: bool
    n_in: int
    n_out: int

    def __post_init__(self):
        if self.prunable and not self.trainable:
            raise ValueError(f"group '{self.name}': prunable implies trainable")
        if self.tensor.ndim == 2 and self.n_in * self.n_out != self.tensor.size:
            raise ValueError(f"group '{self.name}': n_in*n_out != element count")


class Model:
    """Parameter registry plus the encoder forward pass."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        self.groups: dict[str, ParamGroup] = {}
        self.adapter_group_names: set[str] = set()
        self.head_group_names: set[str] = set()
        self.adapter_spec = None          # set by insert_adapters
        self.adapter_sites: dict[str, object] = {}
        self.mask = None                  # set by apply_mask

    # -- registry ----------------------------------------------------------

    def add_group(self, name: str, data: np.ndarray, *, trainable: bool = True,
                  prunable: bool = False, n_in: int | None = None,
                  n_out: int | None = None, adapter: bool = False,
                  head: bool = False) -> ParamGroup:
        if name in self.groups:
            raise ValueError(f"duplicate parameter group '{name}'")
        if n_in is None or n_out is None:
            if data.ndim == 2:
                n_in, n_out = data.shape
            else:
                n_in, n_out = 1, data.size
        pg = ParamGroup(name, Tensor(data, requires_grad=trainable),
                        trainable, prunable, n_in, n_out)
        self.groups[name] = pg
        if adapter:
            self.adapter_group_names.add(name)
        if head:
            self.head_group_names.add(name)
        return pg

    def param(self, name: str) -> Tensor:
        return self.groups[name].tensor

    def set_trainable(self, name: str, trainable: bool) -> None:
        pg = self.groups[name]
        pg.trainable = trainable
        pg.tensor.requires_grad = trainable

    def trainable_groups(self) -> dict[str, ParamGroup]:
        return {n: g for n, g in self.groups.items() if g.trainable}

    def prunable_groups(self) -> dict[str, ParamGroup]:
        return {n: g for n, g in self.groups.items() if g.prunable}

    def backbone_group_names(self) -> list[str]:
        skip = self.adapter_group_names | self.head_group_names
        return [n for n in self.groups if n not in skip]

    def backbone_bytes(self) -> bytes:
        return b"".join(self.groups[n].tensor.data.tobytes()
                        for n in self.backbone_group_names())

    # -- forward -----------------------------------------------------------

    def forward(self, tokens: np.ndarray) -> Tensor:
        """Logits of shape (batch, n_classes) for an int token batch (batch, seq)."""
        cfg = self.cfg
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"token batch must be 2-D, got shape {tokens.shape}")
        bsz, seq = tokens.shape
        if seq > cfg.max_seq_len:
            raise ValueError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError("token id outside [0, vocab_size)")

        d, heads = cfg.d_model, cfg.n_heads
        dh = d // heads
        rows = bsz * seq

        w_tok = self.param("embed.tokens")
        w_pos = self.param("embed.positions")
        if w_tok.requires_grad or w_pos.requires_grad:
            # One-hot matmuls keep the lookup on the double-differentiable
            # primitive set while the embeddings are trainable.
            tok_oh = np.zeros((rows, cfg.vocab_size))
            tok_oh[np.arange(rows), tokens.reshape(-1)] = 1.0
            pos_oh = np.zeros((seq, cfg.max_seq_len))
            pos_oh[np.arange(seq), np.arange(seq)] = 1.0
            x2 = ad.matmul(Tensor(tok_oh), w_tok)
            pos = ad.matmul(Tensor(pos_oh), w_pos)
            x3 = ad.add(ad.reshape(x2, (bsz, seq, d)),
                        ad.broadcast_to(ad.reshape(pos, (1, seq, d)), (bsz, seq, d)))
        else:
            # Frozen embeddings enter the graph as one constant activation.
            x3 = Tensor(w_tok.data[tokens.reshape(-1)].reshape(bsz, seq, d)
                        + w_pos.data[:seq][None, :, :])

        for i in range(cfg.n_layers):
            pre = f"layer{i}"
            h2 = ad.reshape(x3, (rows, d))
            ln1 = ad.layer_norm(h2, self.param(f"{pre}.attn.ln.gamma"),
                                self.param(f"{pre}.attn.ln.beta"))

            q = self._project(ln1, f"{pre}.attn.q")
            k = self._project(ln1, f"{pre}.attn.k")
            v = self._project(ln1, f"{pre}.attn.v")

            q4 = ad.permute(ad.reshape(q, (bsz, seq, heads, dh)), (0, 2, 1, 3))
            k4 = ad.permute(ad.reshape(k, (bsz, seq, heads, dh)), (0, 2, 1, 3))
            v4 = ad.permute(ad.reshape(v, (bsz, seq, heads, dh)), (0, 2, 1, 3))

            prefix = self.adapter_sites.get(f"{pre}.attn.prefix")
            if prefix is not None:
                k4 = ad.concat([prefix.key_heads(bsz), k4], axis=2)
                v4 = ad.concat([prefix.value_heads(bsz), v4], axis=2)

            scores = ad.scale(ad.matmul(q4, ad.swap_last2(k4)), 1.0 / math.sqrt(dh))
            ctx = ad.matmul(ad.softmax_last(scores), v4)
            ctx2 = ad.reshape(ad.permute(ctx, (0, 2, 1, 3)), (rows, d))
            attn_out = ad.affine(ctx2, self.param(f"{pre}.attn.o.weight"),
                                 self.param(f"{pre}.attn.o.bias"))

            site = self.adapter_sites.get(f"{pre}.attn.adapter")
            if site is not None:
                attn_out = site(attn_out)
            x3 = ad.add(x3, ad.reshape(attn_out, (bsz, seq, d)))

            h2 = ad.reshape(x3, (rows, d))
            ln2 = ad.layer_norm(h2, self.param(f"{pre}.ffn.ln.gamma"),
                                self.param(f"{pre}.ffn.ln.beta"))
            ffn = ad.affine(ad.gelu(ad.affine(ln2, self.param(f"{pre}.ffn.fc1.weight"),
                                              self.param(f"{pre}.ffn.fc1.bias"))),
                            self.param(f"{pre}.ffn.fc2.weight"),
                            self.param(f"{pre}.ffn.fc2.bias"))

            site = self.adapter_sites.get(f"{pre}.ffn.adapter")
            if site is None:
                out = ffn
            elif getattr(site, "parallel", False):
                out = ad.add(ffn, site.delta(ln2))
            else:
                out = site(ffn)
            x3 = ad.add(x3, ad.reshape(out, (bsz, seq, d)))

        hf = ad.layer_norm(ad.reshape(x3, (rows, d)),
                           self.param("final_ln.gamma"), self.param("final_ln.beta"))
        pooled = ad.scale(ad.tsum(ad.reshape(hf, (bsz, seq, d)), axes=(1,)), 1.0 / seq)
        return ad.affine(pooled, self.param("head.weight"), self.param("head.bias"))

    def _project(self, x2: Tensor, name: str) -> Tensor:
        lora = self.adapter_sites.get(f"{name}.lora")
        if lora is not None:
            return lora(x2)
        return ad.affine(x2, self.param(f"{name}.weight"), self.param(f"{name}.bias"))

    def loss(self, tokens: np.ndarray, labels: np.ndarray) -> Tensor:
        return ad.cross_entropy_logits(self.forward(tokens), labels)


def _xavier(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))


def build_encoder(cfg: EncoderConfig, seed: int) -> Model:
    """Deterministically initialized encoder; every backbone group starts trainable."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    m = Model(cfg)
    d = cfg.d_model

    m.add_group("embed.tokens", _xavier(rng, cfg.vocab_size, d))
    m.add_group("embed.positions", _xavier(rng, cfg.max_seq_len, d))
    for i in range(cfg.n_layers):
        pre = f"layer{i}"
        for sub in ("attn", "ffn"):
            m.add_group(f"{pre}.{sub}.ln.gamma", np.ones(d))
            m.add_group(f"{pre}.{sub}.ln.beta", np.zeros(d))
        for proj in ("q", "k", "v", "o"):
            m.add_group(f"{pre}.attn.{proj}.weight", _xavier(rng, d, d))
            m.add_group(f"{pre}.attn.{proj}.bias", np.zeros(d))
        m.add_group(f"{pre}.ffn.fc1.weight", _xavier(rng, d, cfg.d_ff))
        m.add_group(f"{pre}.ffn.fc1.bias", np.zeros(cfg.d_ff))
        m.add_group(f"{pre}.ffn.fc2.weight", _xavier(rng, cfg.d_ff, d))
        m.add_group(f"{pre}.ffn.fc2.bias", np.zeros(d))
    m.add_group("final_ln.gamma", np.ones(d))
    m.add_group("final_ln.beta", np.zeros(d))
    m.add_group("head.weight", _xavier(rng, d, cfg.n_classes), head=True)
    m.add_group("head.bias", np.zeros(cfg.n_classes), head=True)
    return m


def freeze_backbone(model: Model) -> None:
    """Mark every non-adapter, non-head group untrainable; adapters/head untouched."""
    for name in model.backbone_group_names():
        model.set_trainable(name, False)


# ---------------------------------------------------------------------------
# Checkpoint file: "SACP" magic, version byte, then per group its name, shape,
# trainable flag, and raw little-endian float64 data.
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path: str) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(model.groups)))
        for name, pg in model.groups.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", pg.tensor.ndim))
            for dim in pg.tensor.shape:
                f.write(struct.pack("<I", dim))
            f.write(struct.pack("<B", 1 if pg.trainable else 0))
            f.write(pg.tensor.data.astype("<f8").tobytes())


def read_checkpoint(path: str) -> dict[str, tuple[np.ndarray, bool]]:
    """Parse a checkpoint into {name: (array, trainable)}."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}")
    if blob[4] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob[4]}")
    off = 5
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    out: dict[str, tuple[np.ndarray, bool]] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        ndim = blob[off]
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        trainable = bool(blob[off])
        off += 1
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
        out[name] = (arr, trainable)
    if off != len(blob):
        raise ValueError(f"trailing bytes in checkpoint: expected {off}, file has {len(blob)}")
    return out


def load_checkpoint(model: Model, path: str) -> None:
    """Load a checkpoint into a structurally identical model."""
    entries = read_checkpoint(path)
    if set(entries) != set(model.groups):
        missing = set(model.groups) - set(entries)
        extra = set(entries) - set(model.groups)
        raise ValueError(f"checkpoint/model group mismatch (missing={sorted(missing)}, "
                         f"extra={sorted(extra)})")
    for name, (arr, trainable) in entries.items():
        pg = model.groups[name]
        if arr.shape != pg.tensor.shape:
            raise ValueError(f"group '{name}': checkpoint shape {arr.shape} != "
                             f"model shape {pg.tensor.shape}")
        pg.tensor.data[...] = arr
        model.set_trainable(name, trainable)
