"""Parameter store, optimizer, pretraining loop, and checkpointing.

Training is deterministic: every step derives its own RNG stream from
(seed, phase, step), so a run resumed from a checkpoint replays exactly
the batches and masks of an uninterrupted run. Frozen parameter groups are
skipped entirely by the optimizer and stay byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensorkit as tk
from .crossmodal import CrossModalConfig, cross_modal_nce, init_crossmodal_params
from .encoders import (EmbeddingTable, EncoderConfig, encode_features,
                       embed_tokens, init_embedding_params, init_encoder_params)
from .losses import (LossWeights, bert_pseudo_nll, build_batch_view,
                     combined_loss, visual_nce)
from .synthdata import sample_masks
from .tensorkit import Tensor
from .transformer import MaskPattern, TransformerConfig, encode_context, init_transformer_params

CHECKPOINT_MAGIC = b"CBTK"
CHECKPOINT_VERSION = 1
ARTIFACT_VERSION = "0.1.0"

_OPT_M_PREFIX = "~opt/m/"
_OPT_V_PREFIX = "~opt/v/"

# seed-stream tags
_INIT_STREAM = 3
_WARMUP_STREAM = 4
_TRAIN_STREAM = 5

# Sampling std for a symmetric truncation at two base deviations works out
# to 0.8796 of the base, so widen the base to land the requested std.
_TRUNC_STD_FACTOR = 0.8796256610342398


class TrainingError(RuntimeError):
    """A loss component became non-finite during training.

    ``store`` carries the parameters at failure time so callers can write
    a diagnostic checkpoint.
    """

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component
        self.store: Optional["ParamStore"] = None
        self.step: Optional[int] = None


class ParamStore:
    """Ordered name -> tensor map; the unit of checkpointing and updates.

    Names are slash-separated paths; the first segment is the parameter
    group ("visual", "text", ...) used for freeze flags. Shapes are
    immutable after creation. ``pinned_rows`` marks rows that never receive
    gradient updates (the PAD embedding row).
    """

    def __init__(self):
        self._tensors: Dict[str, Tensor] = {}
        self._frozen: set = set()
        self._pinned: Dict[str, tuple] = {}

    @staticmethod
    def group_of(name: str) -> str:
        return name.split("/", 1)[0]

    def add(self, name: str, array, pinned_rows: tuple = ()) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        data = np.array(array, dtype=tk.default_dtype())
        t = Tensor(data, requires_grad=self.group_of(name) not in self._frozen,
                   name=name)
        self._tensors[name] = t
        if pinned_rows:
            self._pinned[name] = tuple(int(r) for r in pinned_rows)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def groups(self) -> List[str]:
        seen = dict.fromkeys(self.group_of(n) for n in self._tensors)
        return list(seen)

    def pinned_rows(self, name: str) -> tuple:
        return self._pinned.get(name, ())

    def freeze(self, group: str) -> None:
        if group not in self.groups():
            raise KeyError(f"unknown parameter group {group!r}")
        self._frozen.add(group)
        for name, t in self._tensors.items():
            if self.group_of(name) == group:
                t.requires_grad = False

    def unfreeze(self, group: str) -> None:
        self._frozen.discard(group)
        for name, t in self._tensors.items():
            if self.group_of(name) == group:
                t.requires_grad = True

    def frozen_groups(self) -> List[str]:
        return sorted(self._frozen)

    def is_trainable(self, name: str) -> bool:
        return self.group_of(name) not in self._frozen

    def trainable_items(self):
        return ((n, t) for n, t in self._tensors.items() if self.is_trainable(n))

    def replace(self, name: str, array: np.ndarray) -> None:
        old = self._tensors[name]
        if array.shape != old.shape:
            raise tk.ShapeError(
                f"parameter {name!r} shape is immutable: {old.shape} vs {array.shape}"
            )
        t = Tensor(array, requires_grad=old.requires_grad, name=name)
        self._tensors[name] = t

    def clone(self) -> "ParamStore":
        out = ParamStore()
        out._frozen = set(self._frozen)
        out._pinned = dict(self._pinned)
        for name, t in self._tensors.items():
            clone = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name)
            out._tensors[name] = clone
        return out

    def arrays(self) -> Dict[str, np.ndarray]:
        return {n: t.data for n, t in self._tensors.items()}


@dataclass(frozen=True)
class ModelConfig:
    """All architecture hyperparameters of the pretraining model."""

    encoder: EncoderConfig = EncoderConfig()
    visual: TransformerConfig = TransformerConfig()
    text: TransformerConfig = TransformerConfig()
    cross: CrossModalConfig = CrossModalConfig()
    vocab: int = 64
    nce_temperature: float = 1.0
    normalize_embeddings: bool = False

    def __post_init__(self):
        d = self.visual.hidden
        if self.encoder.output_dim != d or self.text.hidden != d or self.cross.hidden != d:
            raise ValueError(
                "encoder output, visual, text and cross hidden sizes must agree: "
                f"{self.encoder.output_dim}/{d}/{self.text.hidden}/{self.cross.hidden}"
            )
        if self.vocab < 3:
            raise ValueError("vocabulary must hold the reserved ids plus content")
        if self.nce_temperature <= 0:
            raise ValueError(f"nce_temperature must be positive, got {self.nce_temperature}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    steps: int = 400
    learning_rate: float = 1e-3
    lr_decay_to: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    mask_count: int = 6
    text_warmup_steps: int = 100
    grad_clip_norm: Optional[float] = None
    precision: str = "float64"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError(f"invalid training budget: {self}")
        if self.weights.cross > 0 and self.batch_size < 2:
            raise ValueError("cross-modal loss needs batch_size >= 2 for negatives")
        if self.mask_count < 1:
            raise ValueError("mask_count must be >= 1")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision!r}")
        if not 0.0 <= self.lr_decay_to <= 1.0:
            raise ValueError("lr_decay_to is a fraction of the initial rate")


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws truncated at two (base) deviations, rescaled so the
    resulting distribution has the requested std."""
    base = std / _TRUNC_STD_FACTOR
    out = rng.normal(0.0, base, size=shape)
    bound = 2.0 * base
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, base, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def init_params(model_cfg: ModelConfig, seed: int) -> ParamStore:
    """Fresh parameter store: truncated-normal affine weights (std 0.02),
    zero biases, unit layer-norm gains, zero PAD embedding row."""
    rng = np.random.default_rng([seed, _INIT_STREAM])

    def init(shape):
        return truncated_normal(rng, shape)

    store = ParamStore()
    init_encoder_params(store, model_cfg.encoder, init)
    init_transformer_params(store, "visual", model_cfg.visual, init)
    init_embedding_params(store, model_cfg.vocab, model_cfg.text.hidden, init,
                          prefix="text")
    init_transformer_params(store, "text", model_cfg.text, init)
    init_crossmodal_params(store, model_cfg.cross, init)
    return store


class Adam:
    """Adam with a linear learning-rate decay over the configured budget.

    Parameters without a gradient entry this step are skipped outright;
    pinned rows have their gradient zeroed so their moments never move.
    """

    def __init__(self, learning_rate: float, total_steps: int, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, lr_decay_to: float = 0.0,
                 grad_clip_norm: Optional[float] = None):
        self.learning_rate = learning_rate
        self.total_steps = max(1, total_steps)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lr_decay_to = lr_decay_to
        self.grad_clip_norm = grad_clip_norm
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, tc: TrainConfig, total_steps: Optional[int] = None) -> "Adam":
        return cls(tc.learning_rate, tc.steps if total_steps is None else total_steps,
                   tc.beta1, tc.beta2, tc.eps, tc.lr_decay_to, tc.grad_clip_norm)

    def current_lr(self) -> float:
        frac = min(1.0, self.step_count / self.total_steps)
        return self.learning_rate * (1.0 - (1.0 - self.lr_decay_to) * frac)

    def update(self, store: ParamStore, grads: tk.Gradients) -> float:
        lr_t = self.current_lr()
        self.step_count += 1
        updates: List[Tuple[str, Tensor, np.ndarray]] = []
        for name, tensor in store.trainable_items():
            g = grads.get(tensor)
            if g is None:
                continue
            pins = store.pinned_rows(name)
            if pins:
                g = g.copy()
                g[list(pins)] = 0.0
            updates.append((name, tensor, g))
        if self.grad_clip_norm is not None and updates:
            total = np.sqrt(sum(float((g * g).sum()) for _, _, g in updates))
            if total > self.grad_clip_norm:
                scale = self.grad_clip_norm / total
                updates = [(n, t, g * scale) for n, t, g in updates]
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, tensor, g in updates:
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(tensor.data)
                self.m[name] = m
                self.v[name] = np.zeros_like(tensor.data)
            v = self.v[name]
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * (g * g)
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            store.replace(name, tensor.data - lr_t * mhat / (np.sqrt(vhat) + self.eps))
        return lr_t


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------

def compute_losses(batch: Sequence, masks_x: Sequence[MaskPattern],
                   masks_y: Sequence[MaskPattern], store: ParamStore,
                   mc: ModelConfig, weights: LossWeights,
                   ) -> Tuple[Tensor, Dict[str, float]]:
    """Build the weighted training objective for one batch.

    ``batch`` elements carry a feature stream ``.x`` and a token stream
    ``.y``. Components with zero weight are skipped (reported as 0.0) and
    contribute no graph nodes at all.
    """
    features = None
    if weights.visual > 0 or weights.cross > 0:
        features = [encode_features(ex.x, store, mc.encoder) for ex in batch]

    l_bert: object = 0.0
    l_visual: object = 0.0
    l_cross: object = 0.0

    if weights.visual > 0:
        encoded = []
        for ex, e, m in zip(batch, features, masks_x):
            h = encode_context(e, m, ex.x.pad_mask, mc.visual, store, "visual")
            encoded.append((e, h, m, ex.x.pad_mask))
        view = build_batch_view(encoded)
        l_visual = visual_nce(view, mc.nce_temperature, mc.normalize_embeddings)

    if weights.bert > 0:
        table = EmbeddingTable(store["text/embed"])
        per_seq, counts = [], []
        for ex, m in zip(batch, masks_y):
            emb = embed_tokens(ex.y, table)
            h = encode_context(emb, m, ex.y.pad_mask, mc.text, store, "text")
            per_seq.append(bert_pseudo_nll(h, ex.y, m, table))
            counts.append(m.count)
        total_masked = sum(counts)
        weighted = [tk.scale(loss, c / total_masked) for loss, c in zip(per_seq, counts)]
        l_bert = weighted[0]
        for term in weighted[1:]:
            l_bert = tk.add(l_bert, term)

    if weights.cross > 0:
        table = EmbeddingTable(store["text/embed"])
        hxs, hys, pads_x, pads_y = [], [], [], []
        for ex, e in zip(batch, features):
            empty_x = MaskPattern.empty(ex.x.length)
            hxs.append(encode_context(e, empty_x, ex.x.pad_mask, mc.visual,
                                      store, "visual"))
            pads_x.append(ex.x.pad_mask)
            emb = embed_tokens(ex.y, table)
            empty_y = MaskPattern.empty(ex.y.length)
            hys.append(encode_context(emb, empty_y, ex.y.pad_mask, mc.text,
                                      store, "text"))
            pads_y.append(ex.y.pad_mask)
        l_cross = cross_modal_nce(hxs, hys, pads_x, pads_y, mc.cross, store)

    total = combined_loss(l_bert, l_visual, l_cross, weights)
    components = {
        "l_bert": _scalar(l_bert),
        "l_visual": _scalar(l_visual),
        "l_cross": _scalar(l_cross),
        "l_total": _scalar(total),
    }
    return total, components


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def train_step(batch: Sequence, masks_x: Sequence[MaskPattern],
               masks_y: Sequence[MaskPattern], store: ParamStore, optimizer: Adam,
               mc: ModelConfig, weights: LossWeights) -> Dict[str, float]:
    """One forward/backward/update; returns the loss components and rate."""
    total, components = compute_losses(batch, masks_x, masks_y, store, mc, weights)
    for name, value in components.items():
        if not np.isfinite(value):
            raise TrainingError(name, value)
    grads = tk.backward(total)
    lr_t = optimizer.update(store, grads)
    components["learning_rate"] = lr_t
    return components


def training_batch(corpus: Sequence, tc: TrainConfig, step: int,
                   phase: str = "train"):
    """Deterministic batch + mask draw for a step: stateless in the step
    index, which is what makes resumed runs replay uninterrupted ones."""
    stream = _WARMUP_STREAM if phase == "warmup" else _TRAIN_STREAM
    rng = np.random.default_rng([tc.seed, stream, step])
    n = len(corpus)
    take = min(tc.batch_size, n)
    idx = rng.choice(n, size=take, replace=False)
    batch = [corpus[i] for i in idx]
    masks_x = [sample_masks(ex.x.num_real, min(tc.mask_count, ex.x.num_real), rng)
               for ex in batch]
    masks_y = [sample_masks(ex.y.num_real, min(tc.mask_count, ex.y.num_real), rng)
               for ex in batch]
    return batch, masks_x, masks_y


def pretrain(corpus: Sequence, mc: ModelConfig, tc: TrainConfig,
             store: Optional[ParamStore] = None, optimizer: Optional[Adam] = None,
             start_step: int = 0, metrics_path=None, checkpoint_dir=None,
             progress=None) -> Tuple[ParamStore, Adam, List[dict]]:
    """Run the pretraining recipe and return (params, optimizer, metrics).

    With cross-modal training enabled, the text transformer is first warmed
    up on the token pseudo-NLL alone and then frozen, standing in for a
    pre-trained language model whose weights stay fixed.
    """
    tk.set_default_dtype(tc.precision)
    if store is None:
        store = init_params(mc, tc.seed)

    warmup = tc.text_warmup_steps if tc.weights.cross > 0 else 0
    if warmup > 0 and start_step == 0 and "text" not in store.frozen_groups():
        warm_opt = Adam.from_config(tc, total_steps=warmup)
        warm_weights = LossWeights(bert=1.0, visual=0.0, cross=0.0)
        for step in range(warmup):
            batch, masks_x, masks_y = training_batch(corpus, tc, step, "warmup")
            train_step(batch, masks_x, masks_y, store, warm_opt, mc, warm_weights)
        store.freeze("text")
    elif tc.weights.cross > 0 and "text" not in store.frozen_groups():
        store.freeze("text")

    if optimizer is None:
        optimizer = Adam.from_config(tc)
        optimizer.step_count = start_step

    metrics: List[dict] = []
    log_fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        for step in range(start_step, tc.steps):
            t0 = time.perf_counter()
            batch, masks_x, masks_y = training_batch(corpus, tc, step)
            try:
                components = train_step(batch, masks_x, masks_y, store, optimizer,
                                        mc, tc.weights)
            except TrainingError as exc:
                exc.store = store
                exc.step = step
                raise
            row = {"step": step, **components,
                   "wall_ms": (time.perf_counter() - t0) * 1e3}
            metrics.append(row)
            if log_fh:
                log_fh.write(json.dumps(row, sort_keys=True) + "\n")
            if progress:
                progress(row)
            if checkpoint_dir and tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
                path = f"{checkpoint_dir}/step{step + 1:06d}.ckpt"
                save_checkpoint(path, store, run_metadata(mc, tc, step + 1), optimizer)
    finally:
        if log_fh:
            log_fh.close()
    return store, optimizer, metrics


def run_metadata(mc: ModelConfig, tc: TrainConfig, step: int) -> dict:
    return {
        "model": dataclasses.asdict(mc),
        "train": dataclasses.asdict(tc),
        "seed": tc.seed,
        "step": step,
    }


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

class CheckpointError(RuntimeError):
    """Base class for checkpoint read/write failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    metadata: dict
    opt_m: Dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: Dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: int = 0


def save_checkpoint(path, store: ParamStore, metadata: dict,
                    optimizer: Optional[Adam] = None) -> None:
    """Binary layout: magic "CBTK", u32 format version, length-prefixed
    canonical-JSON metadata, then per-tensor records (u32 name length,
    name bytes, u32 rank, u64 extents, float64 little-endian data)."""
    meta = dict(metadata)
    meta.setdefault("artifact_version", ARTIFACT_VERSION)
    meta["frozen_groups"] = store.frozen_groups()
    meta["pinned_rows"] = {n: list(store.pinned_rows(n)) for n in store.names()
                           if store.pinned_rows(n)}
    records: List[Tuple[str, np.ndarray]] = list(store.arrays().items())
    if optimizer is not None:
        meta["optimizer_step"] = optimizer.step_count
        records += [(_OPT_M_PREFIX + n, a) for n, a in optimizer.m.items()]
        records += [(_OPT_V_PREFIX + n, a) for n, a in optimizer.v.items()]

    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(
            f"checkpoint ends early: wanted {n} bytes, got {len(data)}"
        )
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint format version {version} unsupported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        metadata = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            if rank > 8:
                raise CheckpointShapeError(f"tensor {name!r} has absurd rank {rank}")
            shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank))
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 8 * n_items), dtype="<f8")
            tensors[name] = data.reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after final tensor record")

    ckpt = Checkpoint(tensors={}, metadata=metadata,
                      opt_step=int(metadata.get("optimizer_step", 0)))
    for name, arr in tensors.items():
        if name.startswith(_OPT_M_PREFIX):
            ckpt.opt_m[name[len(_OPT_M_PREFIX):]] = arr
        elif name.startswith(_OPT_V_PREFIX):
            ckpt.opt_v[name[len(_OPT_V_PREFIX):]] = arr
        else:
            ckpt.tensors[name] = arr
    return ckpt


def params_from_checkpoint(ckpt: Checkpoint) -> ParamStore:
    """Rebuild a ParamStore (including freeze flags and pinned rows)."""
    store = ParamStore()
    pinned = ckpt.metadata.get("pinned_rows", {})
    for name, arr in ckpt.tensors.items():
        store.add(name, arr, pinned_rows=tuple(pinned.get(name, ())))
    for group in ckpt.metadata.get("frozen_groups", []):
        store.freeze(group)
    return store


def optimizer_from_checkpoint(ckpt: Checkpoint, tc: TrainConfig) -> Adam:
    opt = Adam.from_config(tc)
    opt.step_count = ckpt.opt_step
    opt.m = {n: a.copy() for n, a in ckpt.opt_m.items()}
    opt.v = {n: a.copy() for n, a in ckpt.opt_v.items()}
    return opt


def check_shapes(ckpt: Checkpoint, store: ParamStore) -> None:
    """Raise CheckpointShapeError unless the checkpoint matches the store."""
    expected = {n: t.shape for n, t in store.items()}
    actual = {n: a.shape for n, a in ckpt.tensors.items()}
    if expected != actual:
        missing = sorted(set(expected) - set(actual))
        extra = sorted(set(actual) - set(expected))
        wrong = sorted(n for n in set(expected) & set(actual)
                       if expected[n] != actual[n])
        raise CheckpointShapeError(
            f"checkpoint/config mismatch: missing={missing} extra={extra} "
            f"shape-mismatch={wrong}"
        )
