import time

import numpy as np

from cbt.losses import LossWeights
from cbt.probes import ProbeConfig, train_probe
from cbt.synthdata import CorpusSpec, generate
from cbt.trainer import ModelConfig, TrainConfig, init_params, pretrain

t0 = time.perf_counter()
train_spec = CorpusSpec(num_sequences=768, seed=10)
test_spec = CorpusSpec(num_sequences=2048, seed=11)
train_corpus = generate(train_spec)
test_corpus = generate(test_spec)
print(f"corpora: {time.perf_counter()-t0:.1f}s")

mc = ModelConfig()
tc = TrainConfig(batch_size=8, steps=300, learning_rate=1e-3, seed=0,
                 weights=LossWeights(0.0, 1.0, 0.0), mask_count=6)

t0 = time.perf_counter()
store, opt, metrics = pretrain(train_corpus, mc, tc)
dt = time.perf_counter() - t0
l0 = metrics[0]["l_visual"]
l_last = np.median([m["l_visual"] for m in metrics[-20:]])
print(f"pretrain 300 steps: {dt:.1f}s ({dt/300*1e3:.0f} ms/step) "
      f"loss {l0:.3f} -> {l_last:.3f}")

rand_store = init_params(mc, seed=0)
pc = ProbeConfig(task="seq-class", mode="frozen", epochs=40, seed=0)

for name, st in (("pretrained", store), ("random", rand_store)):
    t0 = time.perf_counter()
    _, report = train_probe(train_corpus, test_corpus, st, mc, pc,
                            train_spec.num_latent_classes)
    print(f"{name}: seq-class frozen acc={report.accuracy:.4f} "
          f"({time.perf_counter()-t0:.1f}s)")

pc_ant = ProbeConfig(task="anticipation", mode="frozen", epochs=40, seed=0)
for name, st in (("pretrained", store), ("random", rand_store)):
    _, report = train_probe(train_corpus, test_corpus, st, mc, pc_ant,
                            train_spec.num_latent_classes)
    print(f"{name}: anticipation frozen acc={report.accuracy:.4f}")
