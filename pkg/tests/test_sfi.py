import itertools

import numpy as np
import pytest

from aquila import numerics as nx
from aquila.errors import ConfigurationError, ShapeError
from aquila.pyramid import MultiScaleFeatures
from aquila.sfi import (
    SFIParams,
    add_positional,
    bilinear_matrix,
    build_region_map,
    concat_fusion,
    positional_table,
    sfi_attend,
    sfi_reference,
)


def random_instance(rng, L, sides, d):
    params = SFIParams.init(rng, L, d, len(sides))
    params.query.data = rng.standard_normal(params.query.dims)
    grids = [nx.Tensor(rng.standard_normal((s * s, d))) for s in sides]
    return params, MultiScaleFeatures(grids, tuple(sides), projected=True, encoded=True), build_region_map(L, sides)


# region map ---------------------------------------------------------------


def block_oracle(L, side, i):
    """Indices of the scale tokens under query i, enumerated from the grid geometry."""
    k = side // L
    r, c = divmod(i, L)
    return [rr * side + cc for rr in range(r * k, (r + 1) * k) for cc in range(c * k, (c + 1) * k)]


def test_reference_region_map():
    rm = build_region_map(32, (256, 128, 64, 32))
    assert rm.ratios == (8, 4, 2, 1)
    counts = {sum(len(rm.region(i, s)) for s in range(4)) for i in range(rm.num_queries)}
    assert counts == {85} and rm.kv_count == 85


def test_small_region_is_row_major():
    rm = build_region_map(2, (4,))
    assert list(rm.region(0, 0)) == [0, 1, 4, 5]
    assert list(rm.region(3, 0)) == [10, 11, 14, 15]


def test_indivisible_side_is_rejected():
    with pytest.raises(ConfigurationError):
        build_region_map(3, (4,))


@pytest.mark.parametrize("L, k", list(itertools.product((1, 2, 4, 8), repeat=2)))
def test_regions_partition_every_scale(L, k):
    side = L * k
    rm = build_region_map(L, (side,))
    regions = [list(rm.region(i, 0)) for i in range(L * L)]
    flat = sorted(itertools.chain.from_iterable(regions))
    assert flat == list(range(side * side))
    assert all(r == block_oracle(L, side, i) for i, r in enumerate(regions))


# positional encodings ----------------------------------------------------------


def test_positional_origin_sines_are_zero():
    table = positional_table(4, 16)
    half = 8
    assert np.all(table[0, 0:half:2] == 0.0) and np.all(table[0, half::2] == 0.0)
    assert np.all(table[0, 1:half:2] == 1.0)


def test_positional_table_is_deterministic_and_read_only():
    a, b = positional_table(8, 16), positional_table(8, 16)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        a[0, 0] = 1.0


@pytest.mark.parametrize("side, dim", [(8, 8), (16, 8), (64, 8), (64, 16)])
def test_positions_are_distinct(side, dim):
    table = positional_table(side, dim)
    diff = table[:, None, :] - table[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    assert dist.min() > 1e-9


def test_positional_row_and_column_halves():
    table = positional_table(4, 8)
    # tokens sharing a row share the first half; tokens sharing a column share the second
    np.testing.assert_array_equal(table[4, :4], table[7, :4])
    np.testing.assert_array_equal(table[1, 4:], table[13, 4:])


def test_add_positional_count_mismatch():
    with pytest.raises(ShapeError):
        add_positional(np.zeros((5, 8)), 2)


def test_positional_dim_must_divide_by_four():
    with pytest.raises(ConfigurationError):
        positional_table(4, 6)


# attention -------------------------------------------------------------------


def test_matches_reference_small_instance():
    params, feats, rm = random_instance(np.random.default_rng(3), 2, (8, 4), 6)
    np.testing.assert_allclose(sfi_attend(params, feats, rm).data, sfi_reference(params, feats, rm), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_matches_reference_random_seeds(seed):
    rng = np.random.default_rng(seed)
    L = int(rng.choice([1, 2]))
    sides = tuple(L * int(k) for k in rng.choice([1, 2, 4], size=int(rng.integers(1, 3))))
    params, feats, rm = random_instance(rng, L, sides, 4)
    np.testing.assert_allclose(sfi_attend(params, feats, rm).data, sfi_reference(params, feats, rm), rtol=0, atol=1e-10)


def test_zero_values_leave_projected_query(rng):
    params, feats, rm = random_instance(rng, 2, (4, 2), 4)
    for w in params.w_v:
        w.data[...] = 0.0
    want = params.query.data @ params.w_q.data.T
    np.testing.assert_allclose(sfi_attend(params, feats, rm).data, want, atol=1e-14)
    np.testing.assert_allclose(sfi_reference(params, feats, rm), want, atol=1e-14)


def test_identical_keys_give_uniform_weights(rng):
    params, feats, rm = random_instance(rng, 2, (8, 4, 2), 4)
    const = rng.standard_normal(4)
    feats = MultiScaleFeatures([nx.Tensor(np.tile(const, (g.dims[0], 1))) for g in feats.grids], feats.sides, True, True)
    for s in range(1, 3):
        params.w_k[s].data = params.w_k[0].data.copy()
    out, weights = sfi_attend(params, feats, rm, return_weights=True)
    np.testing.assert_allclose(weights, 1.0 / rm.kv_count, atol=1e-14)
    values = np.mean([const @ params.w_v[s].data.T for s in range(3) for _ in range(rm.ratios[s] ** 2)], axis=0)
    np.testing.assert_allclose(out.data, params.query.data @ params.w_q.data.T + values, atol=1e-12)


def test_single_key_degenerate_case(rng):
    params, feats, rm = random_instance(rng, 1, (1,), 4)
    q = params.query.data @ params.w_q.data.T
    want = q + feats.grids[0].data @ params.w_v[0].data.T
    np.testing.assert_allclose(sfi_attend(params, feats, rm).data, want, atol=1e-14)


def test_attention_rows_sum_to_one(rng):
    params, feats, rm = random_instance(rng, 2, (8, 4, 2), 8)
    _, weights = sfi_attend(params, feats, rm, return_weights=True)
    np.testing.assert_allclose(weights.sum(-1), 1.0, atol=1e-12)


def test_locality(rng):
    params, feats, rm = random_instance(rng, 2, (8, 4), 4)
    base = sfi_attend(params, feats, rm).data
    inside = set(rm.region(0, 0))
    outside = next(t for t in range(64) if t not in inside)
    feats.grids[0].data[outside] += 5.0
    moved = sfi_attend(params, feats, rm).data
    np.testing.assert_array_equal(moved[0], base[0])
    assert not np.array_equal(moved, base)


def test_permutation_equivariance(rng):
    """Swapping two queries together with their image blocks swaps the output rows."""
    L, side, d = 2, 4, 4
    params, feats, rm = random_instance(rng, L, (side,), d)
    base = sfi_attend(params, feats, rm).data
    perm = np.array([1, 0, 2, 3])
    params.query.data = params.query.data[perm]
    grid = feats.grids[0].data.reshape(L, 2, L, 2, d).transpose(0, 2, 1, 3, 4).reshape(L * L, 4, d)
    grid = grid[perm].reshape(L, L, 2, 2, d).transpose(0, 2, 1, 3, 4).reshape(side * side, d)
    feats = MultiScaleFeatures([nx.Tensor(grid)], (side,), True, True)
    np.testing.assert_allclose(sfi_attend(params, feats, rm).data, base[perm], atol=1e-14)


def test_batched_features_broadcast(rng):
    params, feats, rm = random_instance(rng, 2, (4, 2), 4)
    stacked = MultiScaleFeatures([nx.Tensor(np.stack([g.data, 2 * g.data])) for g in feats.grids], feats.sides, True, True)
    out = sfi_attend(params, stacked, rm).data
    np.testing.assert_allclose(out[0], sfi_attend(params, feats, rm).data, atol=1e-14)


def test_side_mismatch_is_a_shape_error(rng):
    params, feats, _ = random_instance(rng, 2, (4, 2), 4)
    with pytest.raises(ShapeError):
        sfi_attend(params, feats, build_region_map(2, (8, 2)))


def test_gradients_match_finite_differences(rng):
    params, feats, rm = random_instance(rng, 2, (4, 2), 4)
    weights = rng.standard_normal((4, 4))
    tensors = [params.query, params.w_q, *params.w_k, *params.w_v, *feats.grids]
    for t in tensors:
        t.requires_grad = True

    def loss():
        return nx.sum_all(nx.mul(sfi_attend(params, feats, rm), weights))

    loss().backward()
    for t in tensors:
        numeric = nx.finite_diff_grad(lambda _: float(loss().data), t.data)
        assert nx.relative_error(t.grad, numeric) <= 1e-5


# concat baseline ------------------------------------------------------------------


def test_concat_output_shape(rng):
    d = 4
    feats = MultiScaleFeatures([nx.Tensor(rng.standard_normal((s * s, d))) for s in (8, 4, 2)], (8, 4, 2), True)
    out = concat_fusion(feats, 4, rng.standard_normal((d, 3 * d)))
    assert out.dims == (16, d)


def test_concat_selects_constant_scale(rng):
    d = 3
    consts = [rng.standard_normal(d) for _ in range(2)]
    feats = MultiScaleFeatures([nx.Tensor(np.tile(c, (s * s, 1))) for c, s in zip(consts, (8, 4))], (8, 4), True)
    mix = np.concatenate([np.zeros((d, d)), np.eye(d)], axis=1)
    np.testing.assert_allclose(concat_fusion(feats, 2, mix).data, np.tile(consts[1], (4, 1)), atol=1e-14)


def test_bilinear_same_side_is_identity():
    np.testing.assert_array_equal(bilinear_matrix(4, 4), np.eye(16))


def test_bilinear_rows_are_averaging_weights():
    m = bilinear_matrix(8, 2)
    np.testing.assert_allclose(m.sum(1), 1.0, atol=1e-14)
    assert np.all(m >= 0.0)
