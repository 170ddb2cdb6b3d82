"""Serve the offloaded decoder on localhost and stream frames through it.

Run:  python3 demos/loopback_offload.py
"""
import numpy as np

from privatar import CorpusSpec, RngStream, block_dct, dataset_mean, energy_rank, generate, make_plan
from privatar.net import client_session, serve
from privatar.pipeline import profile_calibration, reconstruct, train_system

corpus = generate(CorpusSpec(seed=0))
mean = dataset_mean(corpus)
plan = make_plan(energy_rank([block_dct(t, mean) for t in corpus.textures]), m=14)
system = train_system(corpus.textures, mean, plan)
system = system.with_calibration(profile_calibration(system, corpus.textures, 0.1))

frames = corpus.textures[:20]
seen = []
with serve(("127.0.0.1", 0), [system.offload_codec], recorder=seen.append) as host:
    outputs, log = client_session(host.address, frames, system, RngStream(0, b"demo"))

local = [reconstruct(system, f, i, RngStream(0, b"demo")) for i, f in enumerate(frames)]
same = all(np.array_equal(a, b) for a, b in zip(outputs, local))
rt = np.array([e.roundtrip_s for e in log]) * 1e3
print(f"{len(outputs)} frames, host saw {len(seen)} envelopes")
print(f"networked == in-process reconstruction: {same}")
print(f"round trip ms: median {np.median(rt):.2f}, max {rt.max():.2f}")
print(f"noisy reconstruction MSE: {np.mean((np.array(outputs) - frames) ** 2):.4f}")
