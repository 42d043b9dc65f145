"""Region-restricted cross-attention from a learnable query grid.

Query token ``i`` at grid cell (r, c) of an L x L grid may only look at the
k_s x k_s block of scale ``s`` that covers the same image area, where
``k_s = L_s / L``.  Keys and values from all scales are stacked scale by
scale (row-major inside each block) and attended jointly:

    out_i = q_i + softmax(q_i K_i^T / sqrt(D)) V_i,    q_i = W_Q x_q(i)

The vectorized :func:`sfi_attend` is what models use; :func:`sfi_reference`
recomputes the same quantity with scalar loops and serves as its oracle.
:func:`concat_fusion` is the resample-and-concatenate baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, ShapeError
from .pyramid import MultiScaleFeatures


@dataclass(frozen=True)
class RegionMap:
    query_side: int
    scale_sides: tuple[int, ...]
    ratios: tuple[int, ...]
    regions: tuple[np.ndarray, ...]  # per scale: (L*L, k*k) token indices

    @property
    def num_queries(self) -> int:
        return self.query_side**2

    @property
    def kv_count(self) -> int:
        return sum(k * k for k in self.ratios)

    def region(self, i: int, s: int) -> np.ndarray:
        return self.regions[s][i]


def build_region_map(query_side: int, scale_sides: Sequence[int]) -> RegionMap:
    L = int(query_side)
    sides = tuple(int(s) for s in scale_sides)
    if L <= 0:
        raise ConfigurationError("query side must be positive")
    ratios = []
    regions = []
    for side in sides:
        if side <= 0 or side % L:
            raise ConfigurationError(f"scale side {side} is not a positive multiple of query side {L}")
        k = side // L
        r, c = np.divmod(np.arange(L * L), L)
        a, b = np.divmod(np.arange(k * k), k)
        idx = (r[:, None] * k + a[None, :]) * side + (c[:, None] * k + b[None, :])
        idx.setflags(write=False)
        ratios.append(k)
        regions.append(idx)
    return RegionMap(L, sides, tuple(ratios), tuple(regions))


@lru_cache(maxsize=64)
def _table(side: int, dim: int, dtype_str: str) -> np.ndarray:
    half = dim // 2
    freqs = 1.0 / 10000.0 ** (np.arange(half // 2) * 2.0 / half)
    pos = np.arange(side, dtype=np.float64)[:, None] * freqs[None, :]
    enc = np.empty((side, half))
    enc[:, 0::2] = np.sin(pos)
    enc[:, 1::2] = np.cos(pos)
    rows = np.repeat(enc, side, axis=0)  # token r*side+c gets row r
    cols = np.tile(enc, (side, 1))  # ... and column c
    table = np.concatenate([rows, cols], axis=1).astype(dtype_str)
    table.setflags(write=False)
    return table


def positional_table(side: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Fixed 2-D sinusoidal table, (side**2, dim); first half rows, second half columns."""
    if dim <= 0 or dim % 4:
        raise ConfigurationError(f"positional dim must be a positive multiple of 4, got {dim}")
    return _table(int(side), int(dim), np.dtype(dtype).str)


def add_positional(tokens, side: int):
    """Add the positional table to a (..., side**2, D) grid."""
    t = nx.as_tensor(tokens)
    if t.dims[-2] != side * side:
        raise ShapeError(f"{t.dims[-2]} tokens cannot form a {side}x{side} grid")
    return nx.add(t, positional_table(side, t.dims[-1], t.dtype))


def encode_features(features: MultiScaleFeatures) -> MultiScaleFeatures:
    if not features.projected:
        raise ShapeError("positional encoding applies to projected features")
    grids = [add_positional(g, side) for g, side in zip(features.grids, features.sides)]
    return MultiScaleFeatures(grids, features.sides, projected=True, encoded=True)


@dataclass
class SFIParams:
    query: nx.Tensor | None  # (L*L, D); None when queries come from elsewhere
    w_q: nx.Tensor
    w_k: list
    w_v: list

    @classmethod
    def init(cls, rng, query_side: int, dim: int, num_scales: int, *, with_query=True, dtype=np.float64):
        def mat():
            return nx.Tensor((rng.standard_normal((dim, dim)) / math.sqrt(dim)).astype(dtype), requires_grad=True)

        query = None
        if with_query:
            query = nx.Tensor((0.02 * rng.standard_normal((query_side**2, dim))).astype(dtype), requires_grad=True)
        w_q = mat()
        w_k = [mat() for _ in range(num_scales)]
        w_v = [mat() for _ in range(num_scales)]
        return cls(query, w_q, w_k, w_v)

    def named(self, prefix: str) -> dict[str, nx.Tensor]:
        out = {}
        if self.query is not None:
            out[f"{prefix}.query"] = self.query
        out[f"{prefix}.w_q"] = self.w_q
        for s, (k, v) in enumerate(zip(self.w_k, self.w_v)):
            out[f"{prefix}.w_k.{s}"] = k
            out[f"{prefix}.w_v.{s}"] = v
        return out

    @classmethod
    def from_named(cls, params: dict, prefix: str, num_scales: int) -> "SFIParams":
        return cls(
            params.get(f"{prefix}.query"),
            params[f"{prefix}.w_q"],
            [params[f"{prefix}.w_k.{s}"] for s in range(num_scales)],
            [params[f"{prefix}.w_v.{s}"] for s in range(num_scales)],
        )

    @property
    def dim(self) -> int:
        return self.w_q.dims[0]


def _check(params: SFIParams, features: MultiScaleFeatures, region_map: RegionMap, queries) -> None:
    if tuple(features.sides) != tuple(region_map.scale_sides):
        raise ShapeError(f"feature sides {features.sides} do not match region map {region_map.scale_sides}")
    if len(params.w_k) != features.num_scales or len(params.w_v) != features.num_scales:
        raise ShapeError("one key/value projection per scale required")
    d = params.dim
    if any(w != d for w in features.widths):
        raise ShapeError(f"features must be projected to width {d}, got {features.widths}")
    if queries is None:
        raise ShapeError("no query grid supplied")
    if queries.dims[-2:] != (region_map.num_queries, d):
        raise ShapeError(f"query grid {queries.dims} does not match {region_map.num_queries}x{d}")


def sfi_attend(params: SFIParams, features: MultiScaleFeatures, region_map: RegionMap, queries=None,
               return_weights: bool = False):
    """Region-restricted multi-scale cross-attention.

    ``queries`` defaults to ``params.query``; any leading batch axes on the
    queries or the feature grids broadcast against each other.
    """
    queries = params.query if queries is None else nx.as_tensor(queries)
    _check(params, features, region_map, queries)
    d = params.dim
    q = nx.linear(queries, params.w_q)
    keys, values = [], []
    for s, grid in enumerate(features.grids):
        keys.append(nx.take(nx.linear(grid, params.w_k[s]), region_map.regions[s], axis=-2))
        values.append(nx.take(nx.linear(grid, params.w_v[s]), region_map.regions[s], axis=-2))
    k_all = nx.concat(keys, axis=-2)  # (..., L*L, N, D)
    v_all = nx.concat(values, axis=-2)
    q_row = nx.reshape(q, q.dims[:-1] + (1, d))
    scores = nx.scale(nx.matmul(q_row, nx.transpose(k_all)), 1.0 / math.sqrt(d))
    weights = nx.softmax_rows(scores)
    ctx = nx.matmul(weights, v_all)
    out = nx.add(q, nx.reshape(ctx, ctx.dims[:-2] + (d,)))
    if return_weights:
        return out, weights.data[..., 0, :]
    return out


def sfi_reference(params: SFIParams, features: MultiScaleFeatures, region_map: RegionMap, queries=None) -> np.ndarray:
    """Scalar-loop evaluation of the same attention for one unbatched instance."""
    queries = params.query if queries is None else nx.as_tensor(queries)
    _check(params, features, region_map, queries)
    xq = queries.data
    wq = params.w_q.data
    d = params.dim
    L = region_map.query_side
    grids = [nx.as_tensor(g).data for g in features.grids]
    out = np.zeros((L * L, d))
    for i in range(L * L):
        r, c = divmod(i, L)
        q = [sum(wq[a, b] * xq[i, b] for b in range(d)) for a in range(d)]
        keys, vals = [], []
        for s, side in enumerate(features.sides):
            k = side // L
            wk, wv = params.w_k[s].data, params.w_v[s].data
            for rr in range(r * k, (r + 1) * k):
                for cc in range(c * k, (c + 1) * k):
                    x = grids[s][rr * side + cc]
                    keys.append([sum(wk[a, b] * x[b] for b in range(d)) for a in range(d)])
                    vals.append([sum(wv[a, b] * x[b] for b in range(d)) for a in range(d)])
        logits = [sum(q[a] * key[a] for a in range(d)) / math.sqrt(d) for key in keys]
        top = max(logits)
        expd = [math.exp(z - top) for z in logits]
        total = sum(expd)
        for a in range(d):
            out[i, a] = q[a] + sum(e / total * v[a] for e, v in zip(expd, vals))
    return out


def _interp_1d(src: int, dst: int) -> np.ndarray:
    m = np.zeros((dst, src))
    for i in range(dst):
        x = min(max((i + 0.5) * src / dst - 0.5, 0.0), src - 1.0)
        i0 = int(math.floor(x))
        i1 = min(i0 + 1, src - 1)
        w = x - i0
        m[i, i0] += 1.0 - w
        m[i, i1] += w
    return m


@lru_cache(maxsize=64)
def bilinear_matrix(src_side: int, dst_side: int) -> np.ndarray:
    """Linear operator resampling a row-major src grid onto a dst grid (half-pixel centers)."""
    m1 = _interp_1d(src_side, dst_side)
    m = np.kron(m1, m1)
    m.setflags(write=False)
    return m


def concat_fusion(features: MultiScaleFeatures, target_side: int, mix_weight, mix_bias=None):
    """Resample every scale to ``target_side``, stack channels, mix back to D with a 1x1 map."""
    if not features.projected:
        raise ShapeError("concat fusion expects projected features")
    resampled = []
    for grid, side in zip(features.grids, features.sides):
        op = bilinear_matrix(side, target_side).astype(nx.as_tensor(grid).dtype)
        resampled.append(nx.matmul(op, grid))
    stacked = nx.concat(resampled, axis=-1)
    mix_weight = nx.as_tensor(mix_weight)
    if mix_weight.dims[1] != stacked.dims[-1]:
        raise ShapeError(f"mix map expects {mix_weight.dims[1]} channels, got {stacked.dims[-1]}")
    return nx.linear(stacked, mix_weight, mix_bias)
