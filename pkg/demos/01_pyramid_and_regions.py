"""
Multi-scale features and the region map
========================================

The toy encoder turns an image into a pyramid of token grids.  The fusion
step then assigns every cell of a small query grid the block of tokens at
each scale that covers the same patch of image.
"""

# %%
import numpy as np

from aquila.pyramid import PyramidConfig, extract_pyramid, init_encoder, total_tokens
from aquila.scenes import SceneObject, render
from aquila.sfi import build_region_map, positional_table

# %%
# A toy scene: one red triangle in the third row, second column of a 4x4 grid.
image = render((SceneObject("triangle", "red", 2, 1),), resolution=64)
print("image", image.shape, image.dtype)

# %%
# Three scales.  Spatial sides halve from scale to scale while channels grow.
cfg = PyramidConfig(resolution=64, channels=(16, 32, 64))
weights = init_encoder(cfg, np.random.default_rng(0))
feats = extract_pyramid(image / 255.0, cfg, weights)
for side, grid in zip(feats.sides, feats.grids):
    print(f"side {side:2d}: {grid.shape[0]:3d} tokens x {grid.shape[1]} channels")

# %%
# The full-size configuration only needs its shapes, not its compute.
ref = PyramidConfig.reference()
print("reference sides", ref.sides, "channels", ref.channels, "tokens", total_tokens(ref.sides))

# %%
# Region map for a 4x4 query grid.  Query 9 is cell (2, 1), where the triangle sits.
rm = build_region_map(4, feats.sides)
print("ratios k_s =", rm.ratios, " keys per query =", rm.kv_count)
for s, side in enumerate(feats.sides):
    rows, cols = np.divmod(rm.region(9, s), side)
    print(f"scale {s}: rows {sorted(set(rows))} cols {sorted(set(cols))}")

# %%
# Every scale is partitioned exactly: the blocks of all queries cover each token once.
for s, side in enumerate(feats.sides):
    covered = np.sort(np.concatenate([rm.region(i, s) for i in range(rm.num_queries)]))
    assert np.array_equal(covered, np.arange(side * side))

# %%
# At full size the same rule gives 64 + 16 + 4 + 1 = 85 keys per query.
big = build_region_map(32, ref.sides)
print("reference ratios", big.ratios, "keys per query", big.kv_count)

# %%
# Fixed sinusoidal positions: the first half of the width encodes the row,
# the second half the column.
table = positional_table(4, 8)
print(np.round(table[[0, 1, 4]], 3))
