"""Rank block-DCT components by corpus energy and split a frame in two.

Run:  python3 demos/frequency_partition.py
"""
import numpy as np

from privatar import (CorpusSpec, block_dct, block_idct, dataset_mean, energy_rank,
                      generate, make_plan, merge, split)

corpus = generate(CorpusSpec(seed=0))
mean = dataset_mean(corpus)
ranking = energy_rank([block_dct(t, mean) for t in corpus.textures])
share = ranking.share()

print("top components by variance share (u, v) -> share")
for idx in np.argsort(-share, kind="stable")[:6]:
    print(f"  ({idx // 4}, {idx % 4})  {share[idx]:.3f}")

plan = make_plan(ranking, m=14)
print(f"\nm=14: local ids {plan.local_ids}, offloaded ids {plan.offloaded_ids}")

tex = corpus.textures[0]
comps = block_dct(tex, mean, plan.B)
local, offloaded = split(comps, plan)
back = block_idct(merge(local, offloaded, plan), mean)
print(f"split + merge round-trip max error: {np.abs(back - tex).max():.2e}")

# how much of the frame survives on the device alone
zeros = type(offloaded)(offloaded.B, offloaded.ids, np.zeros_like(offloaded.planes),
                        offloaded.height, offloaded.width)
local_only = block_idct(merge(local, zeros, plan), mean)
print(f"local-only reconstruction MSE: {np.mean((local_only - tex) ** 2):.5f}")
