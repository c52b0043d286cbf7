"""The bounded attention map and the memory savings of compression.

Runs the attention sublayer with a trace, verifies the Frobenius-norm
bound on the attention map and the induced bound on the output features,
and counts logit elements with and without compression.
"""

import numpy as np

from dpdenoise import Tensor
from dpdenoise.attention import (
    AttentionConfig,
    AttentionTrace,
    attention_logit_counts,
    compressed_length,
    init_attention_weights,
    mce_msa,
)

rng = np.random.default_rng(7)
cfg = AttentionConfig(d=16, heads=4)
weights = init_attention_weights(cfg, max_len=64, rng=rng, std=0.3)
weights.bias.data = 0.3 * rng.normal(size=weights.bias.shape)

y = Tensor(rng.normal(size=(30, 16)))
trace = AttentionTrace()
out = mce_msa(y, weights, cfg, trace)
print("input shape         ->", y.shape, " output ->", out.shape)

print("\nper-head norms (map is clamped to Frobenius norm <= 1):")
for i, (soft, a, feat) in enumerate(zip(trace.weights, trace.explainable, trace.features)):
    a_norm = np.sqrt((a**2).sum())
    p_norm = np.sqrt((feat**2).sum())
    row_sums = soft.sum(axis=-1)
    print(
        f"  head {i}: |A|_F = {a_norm:.6f}   |P|_F = {p_norm:.3f}   "
        f"softmax row sums in [{row_sums.min():.12f}, {row_sums.max():.12f}]"
    )

# Strided-conv compression shortens keys/values 3x, so the logit matrix
# shrinks from l^2 to l * l/3.
print("\nlogit element counts per head:")
print(f"{'l':>6} {'full':>10} {'compressed':>11} {'ratio':>7}")
for l in (30, 300, 3000):
    full, comp = attention_logit_counts(l, cfg)
    print(f"{l:>6} {full:>10} {comp:>11} {comp / full:>7.3f}")

print("\ncompressed_length(300) =", compressed_length(300, cfg))
