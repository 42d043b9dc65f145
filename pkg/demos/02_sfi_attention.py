"""
Region-restricted attention and its loop oracle
================================================

``sfi_attend`` is the vectorized fusion used by the model.  ``sfi_reference``
recomputes the same thing one scalar at a time; the two should agree to
rounding error.
"""

# %%
import numpy as np

from aquila import numerics as nx
from aquila.pyramid import MultiScaleFeatures
from aquila.sfi import SFIParams, build_region_map, sfi_attend, sfi_reference

rng = np.random.default_rng(3)
L, sides, D = 2, (8, 4, 2), 8
rm = build_region_map(L, sides)
params = SFIParams.init(rng, L, D, len(sides))
params.query.data = rng.standard_normal(params.query.dims)
feats = MultiScaleFeatures([nx.Tensor(rng.standard_normal((s * s, D))) for s in sides], sides, True, True)

# %%
fast, weights = sfi_attend(params, feats, rm, return_weights=True)
slow = sfi_reference(params, feats, rm)
print("max |fast - slow| =", np.abs(fast.data - slow).max())
print("weights per query:", weights.shape, " row sums:", np.round(weights.sum(-1), 12))

# %%
# Locality: nudging a token outside query 0's block leaves row 0 untouched.
outside = next(t for t in range(64) if t not in set(rm.region(0, 0)))
feats.grids[0].data[outside] += 10.0
moved = sfi_attend(params, feats, rm).data
print("row 0 unchanged:", np.array_equal(moved[0], fast.data[0]))
print("rows that moved:", [i for i in range(L * L) if not np.array_equal(moved[i], fast.data[i])])

# %%
# With every value map at zero only the residual (the projected query) is left.
for w in params.w_v:
    w.data[...] = 0.0
residual = sfi_attend(params, feats, rm).data
print("residual only:", np.allclose(residual, params.query.data @ params.w_q.data.T))

# %%
# The concatenation baseline resamples every scale to the query grid instead.
from aquila.sfi import concat_fusion

mix = rng.standard_normal((D, D * len(sides))) / np.sqrt(D * len(sides))
print("concat fusion output", concat_fusion(feats, L, mix).dims)
