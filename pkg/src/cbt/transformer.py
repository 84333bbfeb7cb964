"""Bidirectional context encoder: masking, positions, stacked self-attention.

The encoder replaces masked rows with a learned mask vector, adds learned
positional embeddings, and runs pre-norm transformer layers. There is no
causal mask anywhere -- every non-padded position attends to every other
non-padded position, which is what makes the contextual prediction at a
masked slot use both directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensorkit as tk
from .tensorkit import Tensor

# Additive logit bias for excluded keys. exp(-1e9 - rowmax) underflows to
# exactly zero, so masked keys carry no weight and no gradient.
KEY_MASK_BIAS = -1e9

LAYER_NORM_EPS = 1e-6


@dataclass(frozen=True)
class MaskPattern:
    """Sorted positions hidden from the encoder during masked prediction."""

    masked: tuple
    sequence_length: int

    def __post_init__(self):
        masked = tuple(sorted(int(i) for i in self.masked))
        object.__setattr__(self, "masked", masked)
        if len(set(masked)) != len(masked):
            raise ValueError(f"duplicate masked positions: {masked}")
        if masked and not (0 <= masked[0] and masked[-1] < self.sequence_length):
            raise ValueError(
                f"masked positions {masked} out of range for length {self.sequence_length}"
            )

    @classmethod
    def empty(cls, sequence_length: int) -> "MaskPattern":
        return cls((), sequence_length)

    @property
    def count(self) -> int:
        return len(self.masked)


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ff_width: int = 256
    max_positions: int = 64

    def __post_init__(self):
        if self.layers < 0 or self.heads < 1 or self.hidden < 1:
            raise ValueError(f"invalid transformer config: {self}")
        if self.hidden % self.heads:
            raise ValueError(
                f"hidden size {self.hidden} not divisible by {self.heads} heads"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def init_transformer_params(store, prefix: str, cfg: TransformerConfig, init,
                            with_mask_vec: bool = True) -> None:
    """Register positional table, optional mask vector, and L layers of weights."""
    d, f = cfg.hidden, cfg.ff_width
    store.add(f"{prefix}/pos", init((cfg.max_positions, d)))
    if with_mask_vec:
        store.add(f"{prefix}/mask_vec", init((d,)))
    for i in range(cfg.layers):
        p = f"{prefix}/layer{i}"
        store.add(f"{p}/ln1/gain", np.ones(d))
        store.add(f"{p}/ln1/bias", np.zeros(d))
        for name in ("wq", "wk", "wv", "wo"):
            store.add(f"{p}/attn/{name}", init((d, d)))
        for name in ("bq", "bk", "bv", "bo"):
            store.add(f"{p}/attn/{name}", np.zeros(d))
        store.add(f"{p}/ln2/gain", np.ones(d))
        store.add(f"{p}/ln2/bias", np.zeros(d))
        store.add(f"{p}/ff/w1", init((d, f)))
        store.add(f"{p}/ff/b1", np.zeros(f))
        store.add(f"{p}/ff/w2", init((f, d)))
        store.add(f"{p}/ff/b2", np.zeros(d))


def apply_mask(e: Tensor, m: MaskPattern, mask_vec: Tensor,
               pad_mask: Optional[np.ndarray] = None) -> Tensor:
    """Replace the rows in ``m`` by the learned mask vector, leave the rest.

    The replaced rows receive no gradient from downstream, which is the
    mechanism behind the exact no-leakage guarantee of masked prediction.
    """
    t_len, d = e.shape
    if m.sequence_length != t_len:
        raise tk.ShapeError(
            f"mask pattern length {m.sequence_length} != sequence length {t_len}"
        )
    if pad_mask is not None:
        for i in m.masked:
            if not pad_mask[i]:
                raise ValueError(f"masked index {i} points at a padded position")
    if not m.masked:
        return e
    keep = np.ones((t_len, d), dtype=e.data.dtype)
    keep[list(m.masked)] = 0.0
    kept = tk.mul_const(e, keep)
    # outer product (T,1)x(1,D) places mask_vec exactly on the masked rows
    indicator = Tensor(1.0 - keep[:, :1])
    fill = tk.matmul(indicator, tk.as_row(mask_vec))
    return tk.add(kept, fill)


def multi_head_attention(h: Tensor, pad_mask: np.ndarray, cfg: TransformerConfig,
                         store, prefix: str) -> Tensor:
    """Scaled dot-product attention over non-padded keys, heads in parallel.

    Padded key positions receive a large negative logit bias before the row
    softmax; outputs at padded query positions are zeroed afterwards.
    """
    t_len, d = h.shape
    if d != cfg.hidden:
        raise tk.ShapeError(f"input width {d} != configured hidden {cfg.hidden}")
    q = tk.add_bias(tk.matmul(h, store[f"{prefix}/attn/wq"]), store[f"{prefix}/attn/bq"])
    k = tk.add_bias(tk.matmul(h, store[f"{prefix}/attn/wk"]), store[f"{prefix}/attn/bk"])
    v = tk.add_bias(tk.matmul(h, store[f"{prefix}/attn/wv"]), store[f"{prefix}/attn/bv"])

    key_bias = np.where(pad_mask[None, :], 0.0, KEY_MASK_BIAS)
    key_bias = np.repeat(key_bias, t_len, axis=0)

    dh = cfg.head_dim
    head_outputs = []
    for a in range(cfg.heads):
        qa = tk.slice_cols(q, a * dh, (a + 1) * dh)
        ka = tk.slice_cols(k, a * dh, (a + 1) * dh)
        va = tk.slice_cols(v, a * dh, (a + 1) * dh)
        logits = tk.scale(tk.matmul(qa, tk.transpose(ka)), 1.0 / math.sqrt(dh))
        weights = tk.row_softmax(tk.add_const(logits, key_bias))
        head_outputs.append(tk.matmul(weights, va))
    ctx = tk.concat_cols(head_outputs) if len(head_outputs) > 1 else head_outputs[0]
    out = tk.add_bias(tk.matmul(ctx, store[f"{prefix}/attn/wo"]), store[f"{prefix}/attn/bo"])
    return _zero_rows(out, pad_mask)


def feed_forward(h: Tensor, store, prefix: str) -> Tensor:
    inner = tk.gelu(tk.add_bias(tk.matmul(h, store[f"{prefix}/ff/w1"]),
                                store[f"{prefix}/ff/b1"]))
    return tk.add_bias(tk.matmul(inner, store[f"{prefix}/ff/w2"]),
                       store[f"{prefix}/ff/b2"])


def run_layers(h: Tensor, pad_mask: np.ndarray, cfg: TransformerConfig,
               store, prefix: str) -> Tensor:
    """Stack of pre-norm residual blocks: attention then position-wise FF."""
    for i in range(cfg.layers):
        p = f"{prefix}/layer{i}"
        u = tk.layer_norm(h, store[f"{p}/ln1/gain"], store[f"{p}/ln1/bias"],
                          LAYER_NORM_EPS)
        h = tk.add(h, multi_head_attention(u, pad_mask, cfg, store, p))
        u = tk.layer_norm(h, store[f"{p}/ln2/gain"], store[f"{p}/ln2/bias"],
                          LAYER_NORM_EPS)
        h = tk.add(h, _zero_rows(feed_forward(u, store, p), pad_mask))
    return h


def encode_context(e: Tensor, m: MaskPattern, pad_mask: np.ndarray,
                   cfg: TransformerConfig, store, prefix: str) -> Tensor:
    """Masked embeddings + positions through L bidirectional layers.

    Returns the full contextual sequence h; the prediction for a masked
    position t is simply row t of the result.
    """
    t_len = e.shape[0]
    if t_len > cfg.max_positions:
        raise tk.ShapeError(
            f"sequence length {t_len} exceeds max_positions {cfg.max_positions}"
        )
    pad_mask = np.asarray(pad_mask, dtype=bool)
    h = apply_mask(e, m, store[f"{prefix}/mask_vec"], pad_mask)
    pos = tk.take_rows(store[f"{prefix}/pos"], np.arange(t_len))
    h = _zero_rows(tk.add(h, pos), pad_mask)
    return run_layers(h, pad_mask, cfg, store, prefix)


def _zero_rows(t: Tensor, pad_mask: np.ndarray) -> Tensor:
    if pad_mask.all():
        return t
    mask = np.repeat(pad_mask[:, None].astype(t.data.dtype), t.shape[1], axis=1)
    return tk.mul_const(t, mask)
