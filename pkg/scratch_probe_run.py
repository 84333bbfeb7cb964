import sys
import time

import numpy as np

from cbt.losses import LossWeights
from cbt.probes import ProbeConfig, train_probe
from cbt.synthdata import CorpusSpec, generate
from cbt.trainer import ModelConfig, TrainConfig, init_params, pretrain

lr = float(sys.argv[1])
tau = float(sys.argv[2])
bs = int(sys.argv[3])
steps = int(sys.argv[4])
seed = int(sys.argv[5]) if len(sys.argv) > 5 else 0

spec = CorpusSpec(num_sequences=2816, seed=10)
corpus = generate(spec)
train_corpus, test_corpus = corpus[:768], corpus[768:]

mc = ModelConfig(normalize_embeddings=True, nce_temperature=tau)
tc = TrainConfig(batch_size=bs, steps=steps, learning_rate=lr, lr_decay_to=1.0,
                 seed=seed, weights=LossWeights(0, 1, 0))
store = init_params(mc, tc.seed)
store.freeze("feature_encoder")
t0 = time.perf_counter()
store, opt, metrics = pretrain(train_corpus, mc, tc, store=store)
dt = time.perf_counter() - t0
ls = [m["l_visual"] for m in metrics]
traj = [round(float(np.median(ls[max(0, i - 60):i + 1])), 3)
        for i in range(steps // 5, steps + 1, steps // 5)]

pc = ProbeConfig(task="seq-class", mode="frozen", epochs=40, seed=seed)
_, rep_pre = train_probe(train_corpus, test_corpus, store, mc, pc, 8)
rand = init_params(mc, tc.seed)
_, rep_rand = train_probe(train_corpus, test_corpus, rand, mc, pc, 8)

pc_ant = ProbeConfig(task="anticipation", mode="frozen", epochs=40, seed=seed)
_, ant_pre = train_probe(train_corpus, test_corpus, store, mc, pc_ant, 8)
_, ant_rand = train_probe(train_corpus, test_corpus, rand, mc, pc_ant, 8)

print(f"lr={lr} tau={tau} bs={bs} steps={steps} seed={seed}: loss {traj} "
      f"({dt:.0f}s)\n  seq-class pre={rep_pre.accuracy:.3f} "
      f"rand={rep_rand.accuracy:.3f} margin={rep_pre.accuracy-rep_rand.accuracy:+.3f}\n"
      f"  anticipation pre={ant_pre.accuracy:.3f} rand={ant_rand.accuracy:.3f}",
      flush=True)
