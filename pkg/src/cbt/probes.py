"""Downstream evaluation: linear probes over pretrained representations.

Three tasks share one protocol. Sequence classification pools the
contextual outputs over time; anticipation reads the output at the last
non-padded position and predicts the held-out continuation label; dense
labeling applies one shared linear head at every position. Probes run
either frozen (encoder untouched, features precomputed once) or
fine-tuned (encoder groups updated jointly at a 10x smaller rate).
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensorkit as tk
from .encoders import FeatureSequence, encode_features
from .synthdata import LabeledSequence
from .tensorkit import Tensor
from .trainer import Adam, ModelConfig, ParamStore
from .transformer import MaskPattern, encode_context

TASKS = ("seq-class", "anticipation", "dense-label")
MODES = ("frozen", "fine-tuned")

# fine-tuned mode: encoder groups move 10x slower than the probe head
ENCODER_LR_SCALE = 0.1

_PROBE_STREAM = 6


@dataclass(frozen=True)
class ProbeConfig:
    mode: str = "frozen"
    task: str = "seq-class"
    observed_window: Optional[int] = None
    epochs: int = 40
    learning_rate: float = 0.05
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.observed_window is not None and self.observed_window < 1:
            raise ValueError("observed_window must be >= 1")
        if self.epochs < 1 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError(f"invalid probe training budget: {self}")


@dataclass(frozen=True)
class ProbeReport:
    accuracy: float
    per_class_accuracy: List[float]
    num_examples: int
    seed: int
    task: str
    mode: str
    window: Optional[int] = None
    method: str = "cbt"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True,
                          separators=(",", ":"))


def avgpool_features(h: Tensor, pad_mask: np.ndarray) -> Tensor:
    """Mean over the non-padded rows -> (1, D)."""
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if not pad_mask.any():
        raise ValueError("cannot pool an all-padded sequence")
    return tk.mean_rows(tk.take_rows(h, np.nonzero(pad_mask)[0]))


def anticipation_feature(h: Tensor, pad_mask: np.ndarray) -> Tensor:
    """Row at the last non-padded position -> (1, D)."""
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if not pad_mask.any():
        raise ValueError("cannot read an all-padded sequence")
    last = int(np.nonzero(pad_mask)[0][-1])
    return tk.take_rows(h, np.array([last]))


def _contextual(ex: LabeledSequence, store: ParamStore, mc: ModelConfig,
                window: Optional[int]) -> Tuple[Tensor, np.ndarray]:
    x = ex.x if window is None else ex.x.truncated(window)
    e = encode_features(x, store, mc.encoder)
    h = encode_context(e, MaskPattern.empty(x.length), x.pad_mask,
                       mc.visual, store, "visual")
    return h, x.pad_mask


def _sequence_feature(ex: LabeledSequence, store: ParamStore, mc: ModelConfig,
                      task: str, window: Optional[int], method: str) -> Tensor:
    if method == "avgpool":
        x = ex.x if window is None else ex.x.truncated(window)
        return avgpool_features(Tensor(x.values), x.pad_mask)
    h, pad = _contextual(ex, store, mc, window)
    if task == "anticipation":
        return anticipation_feature(h, pad)
    return avgpool_features(h, pad)


def _labels_of(ex: LabeledSequence, task: str) -> int:
    return ex.next_label if task == "anticipation" else ex.seq_label


def extract_features(corpus: Sequence[LabeledSequence], store: ParamStore,
                     mc: ModelConfig, cfg: ProbeConfig, method: str = "cbt",
                     ) -> Tuple[np.ndarray, np.ndarray]:
    """Frozen-path feature matrix and labels for a whole corpus."""
    feats, labels = [], []
    with tk.no_grad():
        if cfg.task == "dense-label":
            for ex in corpus:
                h, pad = _contextual(ex, store, mc, cfg.observed_window)
                real = np.nonzero(pad)[0]
                feats.append(h.data[real])
                labels.append(ex.latents[real])
        else:
            for ex in corpus:
                f = _sequence_feature(ex, store, mc, cfg.task,
                                      cfg.observed_window, method)
                feats.append(f.data)
                labels.append([_labels_of(ex, cfg.task)])
    return np.vstack(feats), np.concatenate(labels).astype(np.int64)


def _softmax_xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    denom = tk.row_logsumexp(logits)
    pos = tk.select_columns(logits, labels)
    return tk.mean_all(tk.sub(denom, pos))


class LinearHead:
    """Zero-initialised linear classifier plus the feature standardisation
    fitted on its training set (probes must be insensitive to the raw scale
    of whatever representation they read)."""

    def __init__(self, store: ParamStore, mean: np.ndarray, scale: np.ndarray):
        self.store = store
        self.mean = mean
        self.scale = scale

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.scale

    def logits(self, features: np.ndarray) -> np.ndarray:
        z = self.standardize(features)
        return z @ self.store["head/w"].data + self.store["head/b"].data[None, :]


def train_linear_head(features: np.ndarray, labels: np.ndarray, num_classes: int,
                      cfg: ProbeConfig) -> LinearHead:
    """Train a zero-initialised linear classifier with minibatch Adam."""
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"label outside [0, {num_classes}): {int(labels.min())}..{int(labels.max())}"
        )
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale = np.where(scale < 1e-12, 1.0, scale)
    feats = (features - mean) / scale
    d = feats.shape[1]
    store = ParamStore()
    store.add("head/w", np.zeros((d, num_classes)))
    store.add("head/b", np.zeros(num_classes))
    n = feats.shape[0]
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    opt = Adam(cfg.learning_rate, total_steps=cfg.epochs * steps_per_epoch)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, _PROBE_STREAM, epoch])
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            take = order[start:start + cfg.batch_size]
            logits = tk.add_bias(tk.matmul(Tensor(feats[take]), store["head/w"]),
                                 store["head/b"])
            loss = _softmax_xent(logits, labels[take])
            opt.update(store, tk.backward(loss))
    return LinearHead(store, mean, scale)


def _head_accuracy(head: LinearHead, features: np.ndarray, labels: np.ndarray,
                   num_classes: int) -> Tuple[float, List[float]]:
    pred = head.logits(features).argmax(axis=1)
    correct = pred == labels
    per_class = []
    for c in range(num_classes):
        sel = labels == c
        per_class.append(float(correct[sel].mean()) if sel.any() else 0.0)
    return float(correct.mean()), per_class


def train_probe(train_corpus: Sequence[LabeledSequence],
                test_corpus: Sequence[LabeledSequence], store: ParamStore,
                mc: ModelConfig, cfg: ProbeConfig, num_classes: int,
                method: str = "cbt") -> Tuple[LinearHead, ProbeReport]:
    """Fit the probe head (optionally fine-tuning encoder groups) and report
    test accuracy. In frozen mode ``store`` is never modified."""
    if cfg.mode == "frozen" or method == "avgpool":
        feats, labels = extract_features(train_corpus, store, mc, cfg, method)
        head = train_linear_head(feats, labels, num_classes, cfg)
    else:
        head = _finetune(train_corpus, store, mc, cfg, num_classes)
    test_feats, test_labels = extract_features(test_corpus, store, mc, cfg, method)
    acc, per_class = _head_accuracy(head, test_feats, test_labels, num_classes)
    report = ProbeReport(accuracy=acc, per_class_accuracy=per_class,
                         num_examples=len(test_labels), seed=cfg.seed,
                         task=cfg.task, mode=cfg.mode,
                         window=cfg.observed_window, method=method)
    return head, report


def _finetune(train_corpus: Sequence[LabeledSequence], store: ParamStore,
              mc: ModelConfig, cfg: ProbeConfig, num_classes: int) -> LinearHead:
    """Joint head + encoder updates; text and cross-modal groups untouched.

    No feature standardisation here: the representation moves while the
    head trains, so the head sees raw features."""
    d = mc.visual.hidden
    head_store = ParamStore()
    head_store.add("head/w", np.zeros((d, num_classes)))
    head_store.add("head/b", np.zeros(num_classes))
    head = LinearHead(head_store, np.zeros(d), np.ones(d))
    n = len(train_corpus)
    batch = min(cfg.batch_size, 16)
    steps_per_epoch = max(1, (n + batch - 1) // batch)
    total = cfg.epochs * steps_per_epoch
    head_opt = Adam(cfg.learning_rate, total_steps=total)
    enc_opt = Adam(cfg.learning_rate * ENCODER_LR_SCALE, total_steps=total)
    enc_groups = {"feature_encoder", "visual"}
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, _PROBE_STREAM, epoch])
        order = rng.permutation(n)
        for start in range(0, n, batch):
            take = order[start:start + batch]
            rows, labels = [], []
            if cfg.task == "dense-label":
                for i in take:
                    ex = train_corpus[i]
                    h, pad = _contextual(ex, store, mc, cfg.observed_window)
                    real = np.nonzero(pad)[0]
                    rows.append(tk.take_rows(h, real))
                    labels.extend(ex.latents[real])
            else:
                for i in take:
                    ex = train_corpus[i]
                    rows.append(_sequence_feature(ex, store, mc, cfg.task,
                                                  cfg.observed_window, "cbt"))
                    labels.append(_labels_of(ex, cfg.task))
            feats = tk.concat_rows(rows) if len(rows) > 1 else rows[0]
            logits = tk.add_bias(tk.matmul(feats, head_store["head/w"]),
                                 head_store["head/b"])
            loss = _softmax_xent(logits, np.asarray(labels))
            grads = tk.backward(loss)
            head_opt.update(head_store, grads)
            _update_groups(enc_opt, store, grads, enc_groups)
    return head


def _update_groups(opt: Adam, store: ParamStore, grads: tk.Gradients,
                   groups: set) -> None:
    lr_t = opt.current_lr()
    opt.step_count += 1
    t = opt.step_count
    b1, b2 = opt.beta1, opt.beta2
    for name, tensor in store.trainable_items():
        if ParamStore.group_of(name) not in groups:
            continue
        g = grads.get(tensor)
        if g is None:
            continue
        pins = store.pinned_rows(name)
        if pins:
            g = g.copy()
            g[list(pins)] = 0.0
        m = opt.m.setdefault(name, np.zeros_like(tensor.data))
        v = opt.v.setdefault(name, np.zeros_like(tensor.data))
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * (g * g)
        store.replace(name, tensor.data - lr_t * (m / (1 - b1**t))
                      / (np.sqrt(v / (1 - b2**t)) + opt.eps))


def dense_label_probe(train_corpus, test_corpus, store, mc: ModelConfig,
                      cfg: ProbeConfig, num_classes: int):
    """Per-position labeling with one shared linear head (frame accuracy)."""
    if cfg.task != "dense-label":
        cfg = dataclasses.replace(cfg, task="dense-label")
    return train_probe(train_corpus, test_corpus, store, mc, cfg, num_classes)


def window_ablation(train_corpus, test_corpus, store, mc: ModelConfig,
                    windows: Sequence[int], cfg: ProbeConfig, num_classes: int,
                    ) -> List[ProbeReport]:
    """Anticipation probes for contextual features and the input-average
    baseline at each observation window length."""
    windows = list(windows)
    if sorted(windows) != windows:
        raise ValueError(f"windows must be sorted ascending, got {windows}")
    if any(w < 1 for w in windows):
        raise ValueError("observation window of zero positions")
    reports = []
    for window in windows:
        wcfg = dataclasses.replace(cfg, task="anticipation", observed_window=window)
        for method in ("cbt", "avgpool"):
            _, report = train_probe(train_corpus, test_corpus, store, mc, wcfg,
                                    num_classes, method=method)
            reports.append(report)
    return reports


def reports_to_csv(reports: Sequence[ProbeReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "window", "accuracy", "seed"])
        for r in reports:
            writer.writerow([r.method, r.window if r.window is not None else "",
                             f"{r.accuracy:.6f}", r.seed])
