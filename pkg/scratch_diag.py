import sys
import time

import numpy as np

from cbt import tensorkit as tk
from cbt.encoders import FeatureSequence, encode_features
from cbt.synthdata import CorpusSpec, class_means, generate
from cbt.trainer import Adam, ModelConfig, TrainConfig, init_params, training_batch
from cbt.transformer import TransformerConfig, encode_context

spec = CorpusSpec(num_sequences=768, seed=10)
corpus = generate(spec)
means = class_means(spec)


def supervised_run(tag, mc, lr, steps, pos_std=None, freeze_enc=True, seed=0):
    store = init_params(mc, seed)
    if freeze_enc:
        store.freeze("feature_encoder")
    if pos_std is not None:
        rng = np.random.default_rng(123)
        store.replace("visual/pos",
                      rng.normal(0, pos_std, store["visual/pos"].shape))
    opt = Adam(lr, total_steps=steps, lr_decay_to=1.0)
    with tk.no_grad():
        me = encode_features(FeatureSequence.from_values(means.astype(np.float32)),
                             store, mc.encoder)
        M = me.data / np.linalg.norm(me.data, axis=1, keepdims=True)
    tc = TrainConfig(batch_size=8, steps=1, seed=seed)
    losses = []
    t0 = time.perf_counter()
    for step in range(steps):
        batch, mx, _ = training_batch(corpus, tc, step)
        terms = []
        for ex, m in zip(batch, mx):
            e = encode_features(ex.x, store, mc.encoder)
            h = encode_context(e, m, ex.x.pad_mask, mc.visual, store, "visual")
            anchors = tk.row_l2_normalize(tk.take_rows(h, np.asarray(m.masked)))
            targets = M[ex.latents[np.asarray(m.masked)]]
            terms.append(tk.sum_all(tk.mul_const(anchors, -targets)))
        loss = terms[0]
        for t in terms[1:]:
            loss = tk.add(loss, t)
        loss = tk.scale(loss, 1.0 / (8 * 6))
        losses.append(loss.item())
        opt.update(store, tk.backward(loss))
    traj = [round(float(np.median(losses[max(0, i - 50):i + 1])), 3)
            for i in range(steps // 6, steps + 1, steps // 6)]
    print(f"{tag}: {traj} ({time.perf_counter()-t0:.0f}s)", flush=True)
    return store


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "all"
    if which in ("A", "all"):
        supervised_run("A pos0.3 lr1e-2 2000", ModelConfig(), 1e-2, 2000,
                       pos_std=0.3)
    if which in ("B", "all"):
        supervised_run("B plain lr1e-2 3000", ModelConfig(), 1e-2, 3000)
    if which in ("D", "all"):
        mc = ModelConfig(visual=TransformerConfig(layers=1))
        supervised_run("D L1 lr1e-2 2000", mc, 1e-2, 2000)
