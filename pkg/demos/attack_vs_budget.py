"""Attack the offloaded path with and without calibrated noise.

Run:  python3 demos/attack_vs_budget.py      (about ten seconds)
"""
from privatar import (CorpusSpec, PartitionPlan, block_dct, dataset_mean, energy_rank, generate,
                      make_plan, psr_from_mi)
from privatar.experiments import run_attack

corpus = generate(CorpusSpec(seed=0))
mean = dataset_mean(corpus)
ranking = energy_rank([block_dct(t, mean) for t in corpus.textures])
chance = 1 / 65

for m, v in ((16, None), (14, None), (14, 1.0), (14, 0.1)):
    # m=16: every component, including the base, leaves the device
    plan = PartitionPlan.full_offload(4) if m == 16 else make_plan(ranking, m=m)
    res = run_attack(corpus, plan, v, seed=0, trials=500)
    c = res.combined
    lo, hi = c.ci
    bound = "-" if v is None else f"{psr_from_mi(v, chance):.4f}"
    print(f"m={m:2d} v={str(v):<5} e-PSR {c.e_psr:.4f} [{lo:.4f}, {hi:.4f}]  "
          f"bound {bound}  chance {chance:.4f}")
