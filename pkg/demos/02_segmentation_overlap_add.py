"""Chunking a sequence and putting it back together.

Shows the chunk/hop geometry, the exact round trip for non-overlapping
chunks, the summing behavior for overlapping ones, and why the auto
chunk size keeps both attention sequence lengths near sqrt(L).
"""

import numpy as np

from dpdenoise import Tensor
from dpdenoise.segmentation import (
    ChunkConfig,
    auto_chunk_lengths,
    choose_chunk_size,
    overlap_add,
    segment,
)

# 12 frames into chunks of 5: three chunks, tail padded with 3 zeros.
x = Tensor(np.arange(12.0).reshape(1, 12))
seg = segment(x, ChunkConfig(5))
print("chunks (columns):")
print(seg.data.data[0])
print("pad length          ->", seg.pad_length)

# The inverse trims the padding and reproduces the input exactly.
back = overlap_add(seg, ChunkConfig(5))
print("round-trip exact    ->", bool(np.array_equal(back.data, x.data)))

# With hop < chunk length, overlapped samples sum.
cfg = ChunkConfig(2, hop=1)
ones = Tensor(np.ones((1, 3)))
print("K=2, P=1 on [1,1,1] ->", overlap_add(segment(ones, cfg), cfg).data[0])

# The auto chunk size targets K ~ sqrt(5 L); both K and the chunk count M
# then grow like sqrt(L), which is what keeps attention affordable.
print(f"\n{'L':>9}  {'K':>6}  {'M':>6}  {'3*sqrt(L)':>10}")
for length in (1_000, 10_000, 100_000, 1_000_000):
    k, m = auto_chunk_lengths(length)
    print(f"{length:>9}  {k:>6}  {m:>6}  {3 * np.sqrt(length):>10.0f}")

print("\nchoose_chunk_size(2000) =", choose_chunk_size(2000))
