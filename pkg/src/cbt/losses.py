"""Training objectives: masked token pseudo-NLL, frame-level softmax NCE
over in-batch negatives, and their weighted combination.

Both contrastive losses share one softmax-ratio form: the positive logit
against the positive plus its negatives, evaluated through a stable
log-sum-exp. The frame loss scores local frame embeddings e_t against the
contextual prediction at the masked slot; every other non-padded frame of
the minibatch serves as a negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensorkit as tk
from .encoders import MASK_ID, NUM_RESERVED_IDS, PAD_ID, EmbeddingTable, TokenSequence
from .tensorkit import Tensor
from .transformer import MaskPattern


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights of the combined objective; at least one positive."""

    bert: float = 0.0
    visual: float = 1.0
    cross: float = 0.0

    def __post_init__(self):
        w = (self.bert, self.visual, self.cross)
        if any(x < 0 for x in w):
            raise ValueError(f"loss weights must be non-negative, got {w}")
        if not any(x > 0 for x in w):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class NceBatchView:
    """Anchors, pooled frame embeddings, and per-anchor negative index sets.

    ``anchors`` holds the contextual prediction rows (one per masked
    position in the batch); ``pooled`` holds every non-padded frame
    embedding of the batch. ``positive_index[i]`` is the pooled column of
    anchor i's true frame, and ``neg_indices[i]`` never contains it.
    """

    anchors: Tensor
    pooled: Tensor
    positive_index: np.ndarray
    neg_indices: List[np.ndarray]

    def __post_init__(self):
        self.positive_index = np.asarray(self.positive_index, dtype=np.intp)
        self.neg_indices = [np.asarray(n, dtype=np.intp) for n in self.neg_indices]
        m = self.anchors.shape[0]
        if not (len(self.neg_indices) == m == self.positive_index.shape[0]):
            raise ValueError("one positive and one negative set required per anchor")
        for i, neg in enumerate(self.neg_indices):
            if self.positive_index[i] in neg:
                raise ValueError(f"anchor {i} lists its own position as a negative")

    @property
    def num_anchors(self) -> int:
        return self.anchors.shape[0]

    def negative_counts(self) -> List[int]:
        return [len(n) for n in self.neg_indices]


def build_batch_view(encoded: Sequence[Tuple[Tensor, Tensor, MaskPattern, np.ndarray]],
                     ) -> NceBatchView:
    """Pool frames across the batch and wire each masked position's negatives.

    ``encoded`` holds per-sequence tuples (e, h, mask_pattern, pad_mask).
    Negatives for an anchor are all other non-padded frames of the batch,
    including frames from the anchor's own sequence.
    """
    if not encoded:
        raise ValueError("empty batch")
    pooled_parts, anchor_parts = [], []
    positive_cols: List[int] = []
    col_offset = 0
    for e, h, m, pad_mask in encoded:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        real_idx = np.nonzero(pad_mask)[0]
        pooled_parts.append(tk.take_rows(e, real_idx))
        col_of_pos = {int(p): col_offset + j for j, p in enumerate(real_idx)}
        if m.count:
            anchor_parts.append(tk.take_rows(h, np.asarray(m.masked)))
            positive_cols.extend(col_of_pos[t] for t in m.masked)
        col_offset += len(real_idx)
    if not positive_cols:
        raise ValueError("batch contains no masked positions")
    pooled = tk.concat_rows(pooled_parts)
    anchors = tk.concat_rows(anchor_parts)
    positive_index = np.asarray(positive_cols, dtype=np.intp)
    total = pooled.shape[0]
    neg_indices = [np.setdiff1d(np.arange(total), [p]) for p in positive_index]
    return NceBatchView(anchors, pooled, positive_index, neg_indices)


def visual_nce(view: NceBatchView, temperature: float = 1.0,
               normalize: bool = False) -> Tensor:
    """Mean over anchors of -log softmax-NCE(positive | positive + negatives).

    With zero negatives the ratio is 1 and the loss is exactly 0; with all
    logits equal and N negatives it is ln(N + 1).
    """
    if view.num_anchors == 0:
        raise ValueError("visual_nce requires at least one anchor")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    anchors, pooled = view.anchors, view.pooled
    if normalize:
        anchors = tk.row_l2_normalize(anchors)
        pooled = tk.row_l2_normalize(pooled)
    logits = tk.matmul(anchors, tk.transpose(pooled))
    if temperature != 1.0:
        logits = tk.scale(logits, 1.0 / temperature)
    m, total = logits.shape
    keep = np.zeros((m, total), dtype=bool)
    rows = np.arange(m)
    keep[rows, view.positive_index] = True
    for i, neg in enumerate(view.neg_indices):
        keep[i, neg] = True
    denom = tk.row_logsumexp(logits, keep)
    pos = tk.select_columns(logits, view.positive_index)
    return tk.mean_all(tk.sub(denom, pos))


def bert_pseudo_nll(h: Tensor, targets: TokenSequence, m: MaskPattern,
                    table: EmbeddingTable) -> Tensor:
    """Mean over masked positions of -log p(true token | context).

    The softmax denominator runs over the full vocabulary excluding the
    reserved PAD and MASK rows; logits are dot products against the same
    embedding table used on the input side.
    """
    if m.count == 0:
        raise ValueError("bert_pseudo_nll requires at least one masked position")
    idx = np.asarray(m.masked)
    target_ids = targets.ids[idx]
    bad = target_ids < NUM_RESERVED_IDS
    if bad.any():
        pos = int(idx[np.nonzero(bad)[0][0]])
        raise ValueError(
            f"masked position {pos} targets reserved id {int(targets.ids[pos])} "
            f"(PAD={PAD_ID}, MASK={MASK_ID})"
        )
    h_masked = tk.take_rows(h, idx)
    candidates = tk.take_rows(table.table, np.arange(NUM_RESERVED_IDS, table.vocab))
    logits = tk.matmul(h_masked, tk.transpose(candidates))
    denom = tk.row_logsumexp(logits)
    pos = tk.select_columns(logits, target_ids - NUM_RESERVED_IDS)
    return tk.mean_all(tk.sub(denom, pos))


def combined_loss(l_bert, l_visual, l_cross, w: LossWeights) -> Tensor:
    """Weighted sum w_bert*L_bert + w_visual*L_visual + w_cross*L_cross.

    A zero weight multiplies that branch by exactly 0.0, so it contributes
    an exactly-zero gradient to every parameter beneath it.
    """
    terms = []
    for loss, weight in ((l_bert, w.bert), (l_visual, w.visual), (l_cross, w.cross)):
        t = loss if isinstance(loss, Tensor) else Tensor(np.asarray(float(loss)))
        if t.size != 1:
            raise tk.ShapeError(f"component losses must be scalar, got {t.shape}")
        if t.shape != ():
            t = tk.sum_all(t)
        terms.append(tk.scale(t, weight))
    total = tk.add(terms[0], terms[1])
    return tk.add(total, terms[2])
