"""
Long-context layers
===================

How far information travels in a sliding window, a segment-recurrent stack
and a selective state-space scan.
"""

import numpy as np

from longscore import autograd as ag
from longscore.attention import AttentionConfig, LlamaBlock, build_mask, receptive_field_bound, segment_forward
from longscore.ssm import SSMParams, ssm_scan_chunked, ssm_scan_sequential

rng = np.random.default_rng(1)
T, d = 16, 8

# window of radius 2 plus one global token at position 0
cfg = AttentionConfig(d, 2, window_radius=2, global_token_ids={0}, causal=False)
print(build_mask(T, cfg).astype(int))

# perturb token 10 and see which outputs move
block = LlamaBlock(cfg, 16, rng)
x = rng.normal(size=(T, d))
x2 = x.copy()
x2[10] += 1.0
moved = np.abs(block(ag.Tensor(x2), mask=build_mask(T, cfg)).data
               - block(ag.Tensor(x), mask=build_mask(T, cfg)).data).max(axis=1) > 0
print("outputs touched by token 10:", np.flatnonzero(moved))

# segment recurrence: depth D and segment length L reach L*D tokens back
L, D = 4, 3
layers = [LlamaBlock(AttentionConfig(d, 2, causal=True), 16, rng) for _ in range(D)]
print("reach bound", receptive_field_bound(L, D))


def run(inp):
    segs = [ag.Tensor(inp[s:s + L]) for s in range(0, len(inp), L)]
    return np.concatenate([o.data for o in segment_forward(segs, layers, L)])


x = rng.normal(size=(32, d))
x2 = x.copy()
x2[0] += 1.0
moved = np.abs(run(x2) - run(x)).max(axis=1) > 0
print("outputs touched by token 0:", np.flatnonzero(moved))

# the scan has no window at all; the chunked form matches the sequential one
p = SSMParams.random(4, 8, rng)
u = ag.Tensor(rng.normal(size=(300, 4)))
gap = np.abs(ssm_scan_chunked(p, u, 64).data - ssm_scan_sequential(p, u).data).max()
print("chunked vs sequential", gap)
