"""Input encoders: per-position feature embedding and token lookup.

The feature encoder maps each real-valued frame independently through a
two-layer feed-forward network; the token path is a plain embedding lookup
with reserved PAD (0) and MASK (1) ids. Both zero out padded positions so
no value or gradient ever touches padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorkit as tk
from .tensorkit import Tensor

PAD_ID = 0
MASK_ID = 1
NUM_RESERVED_IDS = 2


@dataclass(frozen=True)
class FeatureSequence:
    """T x D_in real-valued frames with right padding.

    ``pad_mask[t]`` is True at real content. Padded rows must be all zero
    and padding must be a suffix.
    """

    values: np.ndarray
    pad_mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        pad = np.asarray(self.pad_mask, dtype=bool)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "pad_mask", pad)
        if values.ndim != 2 or pad.shape != (values.shape[0],):
            raise ValueError(
                f"feature sequence shape {values.shape} / pad {pad.shape} mismatch"
            )
        n_real = int(pad.sum())
        if not np.array_equal(pad, np.arange(len(pad)) < n_real):
            raise ValueError("pad_mask must be a prefix of True followed by False")
        if n_real < len(pad) and np.any(values[n_real:]):
            raise ValueError("padded positions must contain all-zero rows")

    @classmethod
    def from_values(cls, values) -> "FeatureSequence":
        values = np.asarray(values)
        return cls(values, np.ones(values.shape[0], dtype=bool))

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def num_real(self) -> int:
        return int(self.pad_mask.sum())

    def truncated(self, window: int) -> "FeatureSequence":
        """Keep only the first ``window`` real positions, zero-padding the rest."""
        if window < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        n_real = min(self.num_real, window)
        values = np.zeros_like(self.values)
        values[:n_real] = self.values[:n_real]
        return FeatureSequence(values, np.arange(self.length) < n_real)


@dataclass(frozen=True)
class TokenSequence:
    """Length-T' integer token ids with right padding; PAD id at padded slots."""

    ids: np.ndarray
    pad_mask: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        pad = np.asarray(self.pad_mask, dtype=bool)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "pad_mask", pad)
        if ids.ndim != 1 or pad.shape != ids.shape:
            raise ValueError(f"token sequence shape {ids.shape} / pad {pad.shape} mismatch")
        n_real = int(pad.sum())
        if not np.array_equal(pad, np.arange(len(pad)) < n_real):
            raise ValueError("pad_mask must be a prefix of True followed by False")
        if np.any(ids < 0):
            raise ValueError("token ids must be non-negative")
        if n_real < len(pad) and np.any(ids[n_real:] != PAD_ID):
            raise ValueError("padded positions must hold the PAD id")

    @classmethod
    def from_ids(cls, ids) -> "TokenSequence":
        ids = np.asarray(ids, dtype=np.int64)
        return cls(ids, np.ones(ids.shape[0], dtype=bool))

    @property
    def length(self) -> int:
        return self.ids.shape[0]

    @property
    def num_real(self) -> int:
        return int(self.pad_mask.sum())


@dataclass(frozen=True)
class EmbeddingTable:
    """V x D lookup table; row 0 is the PAD row and stays pinned at zero."""

    table: Tensor

    def __post_init__(self):
        if self.table.ndim != 2:
            raise ValueError(f"embedding table must be 2-d, got shape {self.table.shape}")
        if self.table.shape[0] < NUM_RESERVED_IDS + 1:
            raise ValueError("vocabulary must hold PAD, MASK and at least one real id")

    @property
    def vocab(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]


@dataclass(frozen=True)
class EncoderConfig:
    """Widths of the two-layer position-wise feature encoder."""

    input_dim: int = 16
    hidden_dim: int = 64
    output_dim: int = 64

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ValueError(f"encoder widths must be positive: {self}")


def init_encoder_params(store, cfg: EncoderConfig, init) -> None:
    """Register feature-encoder weights under the ``feature_encoder`` group."""
    store.add("feature_encoder/w1", init((cfg.input_dim, cfg.hidden_dim)))
    store.add("feature_encoder/b1", np.zeros(cfg.hidden_dim))
    store.add("feature_encoder/w2", init((cfg.hidden_dim, cfg.output_dim)))
    store.add("feature_encoder/b2", np.zeros(cfg.output_dim))


def init_embedding_params(store, vocab: int, dim: int, init, prefix: str = "text") -> None:
    """Register the token embedding table; the PAD row starts and stays zero."""
    table = init((vocab, dim))
    table[PAD_ID] = 0.0
    store.add(f"{prefix}/embed", table, pinned_rows=(PAD_ID,))


def encode_features(x: FeatureSequence, store, cfg: EncoderConfig) -> Tensor:
    """Position-wise two-layer map of each frame; padded rows map to zero.

    Output row t depends only on input row t, which is what lets the masked
    objective treat the table of frame embeddings as ground truth targets.
    """
    if x.values.shape[1] != cfg.input_dim:
        raise tk.ShapeError(
            f"feature width {x.values.shape[1]} does not match encoder input "
            f"width {cfg.input_dim}"
        )
    v = Tensor(x.values)
    h = tk.add_bias(tk.matmul(v, store["feature_encoder/w1"]), store["feature_encoder/b1"])
    h = tk.gelu(h)
    e = tk.add_bias(tk.matmul(h, store["feature_encoder/w2"]), store["feature_encoder/b2"])
    return _zero_padded_rows(e, x.pad_mask)


def embed_tokens(y: TokenSequence, table: EmbeddingTable) -> Tensor:
    """Look up one embedding row per token; PAD positions come out all zero."""
    bad = np.nonzero(y.ids >= table.vocab)[0]
    if bad.size:
        pos = int(bad[0])
        raise IndexError(
            f"token id {int(y.ids[pos])} at position {pos} exceeds vocabulary "
            f"size {table.vocab}"
        )
    e = tk.take_rows(table.table, y.ids)
    return _zero_padded_rows(e, y.pad_mask)


def _zero_padded_rows(t: Tensor, pad_mask: np.ndarray) -> Tensor:
    if pad_mask.all():
        return t
    mask = np.repeat(pad_mask[:, None].astype(t.data.dtype), t.shape[1], axis=1)
    return tk.mul_const(t, mask)
