"""Sequence-level cross-modal scoring and its contrastive objective.

The two unimodal contextual sequences are concatenated behind a learned
aggregate slot, tagged with per-modality type embeddings, run through a
shallow transformer, and reduced to one unbounded real score by a small
MLP head. Exponentiating that score gives the positive quantity whose
softmax ratio against mismatched candidates forms the training loss, so
the cross-modal loss has exactly the same shape as the frame-level NCE.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import tensorkit as tk
from .encoders import FeatureSequence, TokenSequence
from .tensorkit import Tensor
from .transformer import TransformerConfig, run_layers

AGGREGATE_MODES = ("slot0", "avgpool")


@dataclass(frozen=True)
class CrossModalConfig:
    """Shape of the cross-modal transformer and its score head."""

    layers: int = 1
    heads: int = 4
    hidden: int = 64
    ff_width: int = 256
    max_positions: int = 160
    aggregate: str = "slot0"

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"cross-modal transformer needs >= 1 layer, got {self.layers}")
        if self.hidden % self.heads:
            raise ValueError(
                f"hidden size {self.hidden} not divisible by {self.heads} heads"
            )
        if self.aggregate not in AGGREGATE_MODES:
            raise ValueError(f"aggregate must be one of {AGGREGATE_MODES}")

    def layer_config(self) -> TransformerConfig:
        return TransformerConfig(layers=self.layers, heads=self.heads,
                                 hidden=self.hidden, ff_width=self.ff_width,
                                 max_positions=self.max_positions)


@dataclass(frozen=True)
class PairedExample:
    """One aligned (feature sequence, token sequence) pair."""

    x: FeatureSequence
    y: TokenSequence
    aligned: bool = True

    def __post_init__(self):
        if self.x.num_real == 0 or self.y.num_real == 0:
            raise ValueError("both streams of a paired example must be non-empty")


def init_crossmodal_params(store, cfg: CrossModalConfig, init,
                           prefix: str = "cross") -> None:
    """Register the aggregate slot, type embeddings, layers, and MLP head."""
    from .transformer import init_transformer_params

    d = cfg.hidden
    init_transformer_params(store, prefix, cfg.layer_config(), init,
                            with_mask_vec=False)
    store.add(f"{prefix}/agg", init((d,)))
    store.add(f"{prefix}/type_features", init((d,)))
    store.add(f"{prefix}/type_tokens", init((d,)))
    store.add(f"{prefix}/mlp/w1", init((d, d)))
    store.add(f"{prefix}/mlp/b1", np.zeros(d))
    store.add(f"{prefix}/mlp/w2", init((d, 1)))
    store.add(f"{prefix}/mlp/b2", np.zeros(1))


def mi_score(hx: Tensor, hy: Tensor, pad_x: np.ndarray, pad_y: np.ndarray,
             cfg: CrossModalConfig, store, prefix: str = "cross") -> Tensor:
    """Unbounded correspondence score of a (features, tokens) pair -> (1, 1).

    Layout: [aggregate slot | feature rows + type | token rows + type], with
    one positional table indexed continuously across the concatenation.
    """
    t_x, t_y = hx.shape[0], hy.shape[0]
    total = 1 + t_x + t_y
    if total > cfg.max_positions:
        raise tk.ShapeError(
            f"combined length {total} exceeds max_positions {cfg.max_positions}"
        )
    pad_x = np.asarray(pad_x, dtype=bool)
    pad_y = np.asarray(pad_y, dtype=bool)
    d = cfg.hidden

    agg = tk.as_row(store[f"{prefix}/agg"])
    type_x = tk.matmul(Tensor(np.ones((t_x, 1))), tk.as_row(store[f"{prefix}/type_features"]))
    type_y = tk.matmul(Tensor(np.ones((t_y, 1))), tk.as_row(store[f"{prefix}/type_tokens"]))
    rows = tk.concat_rows([agg, tk.add(hx, type_x), tk.add(hy, type_y)])

    pos = tk.take_rows(store[f"{prefix}/pos"], np.arange(total))
    pad = np.concatenate([[True], pad_x, pad_y])
    h = tk.add(rows, pos)
    if not pad.all():
        h = tk.mul_const(h, np.repeat(pad[:, None].astype(h.data.dtype), d, axis=1))
    h = run_layers(h, pad, cfg.layer_config(), store, prefix)

    if cfg.aggregate == "slot0":
        summary = tk.take_rows(h, np.array([0]))
    else:
        content = tk.take_rows(h, np.nonzero(pad)[0][1:])
        summary = tk.mean_rows(content)
    inner = tk.gelu(tk.add_bias(tk.matmul(summary, store[f"{prefix}/mlp/w1"]),
                                store[f"{prefix}/mlp/b1"]))
    return tk.add_bias(tk.matmul(inner, store[f"{prefix}/mlp/w2"]),
                       store[f"{prefix}/mlp/b2"])


def nce_from_scores(pos_score: Tensor, neg_scores: Sequence[Tensor]) -> Tensor:
    """-log of the softmax ratio of the positive score against a slate."""
    if not neg_scores:
        raise ValueError("cross-modal NCE requires at least one negative candidate")
    slate = tk.concat_cols([_as_cell(pos_score)] + [_as_cell(s) for s in neg_scores])
    denom = tk.row_logsumexp(slate)
    pos = tk.select_columns(slate, np.array([0]))
    return tk.sum_all(tk.sub(denom, pos))


def _as_cell(s) -> Tensor:
    if not isinstance(s, Tensor):
        s = Tensor(np.asarray(float(s), dtype=np.float64).reshape(1, 1))
    if s.shape != (1, 1):
        raise tk.ShapeError(f"scores must be (1, 1) tensors, got {s.shape}")
    return s


def build_cross_batch(batch_size: int) -> List[np.ndarray]:
    """In-batch candidate sets: example i is scored against all j != i."""
    if batch_size < 2:
        raise ValueError(f"cross-modal training needs batch size >= 2, got {batch_size}")
    return [np.setdiff1d(np.arange(batch_size), [i]) for i in range(batch_size)]


def cross_modal_nce(hxs: Sequence[Tensor], hys: Sequence[Tensor],
                    pads_x: Sequence[np.ndarray], pads_y: Sequence[np.ndarray],
                    cfg: CrossModalConfig, store, prefix: str = "cross") -> Tensor:
    """Mean in-batch sequence NCE: each pair against every mismatched pairing."""
    b = len(hxs)
    candidates = build_cross_batch(b)
    scores = [[None] * b for _ in range(b)]
    for i in range(b):
        for j in ([i] + list(candidates[i])):
            if scores[i][j] is None:
                scores[i][j] = mi_score(hxs[i], hys[j], pads_x[i], pads_y[j],
                                        cfg, store, prefix)
    per_example = []
    for i in range(b):
        per_example.append(nce_from_scores(scores[i][i],
                                           [scores[i][j] for j in candidates[i]]))
    total = per_example[0]
    for term in per_example[1:]:
        total = tk.add(total, term)
    return tk.scale(total, 1.0 / b)
