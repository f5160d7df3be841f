import numpy as np
import pytest
from hypothesis import given, strategies as st

from fernnet import fern
from fernnet.errors import ConfigError, DataError
from fernnet.fern import (FernLayer, IndexPattern, PatternSet, builtin_pattern, compute_index,
                          compute_indices, format_patterns, parse_patterns, predicted_ops)
from fernnet.gradcheck import check_fern
from fernnet.tensor import Tensor, zero_pad

import oracles

TI1 = builtin_pattern("TI1")


def _layer(z, L, ps, rng, dtype=np.float32, **kw):
    layer = FernLayer.create(z, L, ps, rng, dtype=dtype, **kw)
    layer.bias[...] = rng.uniform(-1, 1, size=L)
    return layer


@st.composite
def pattern_sets(draw, max_radius=2, max_branches=3, max_bits=6):
    window = [(dy, dx) for dy in range(-max_radius, max_radius + 1)
              for dx in range(-max_radius, max_radius + 1) if (dy, dx) != (0, 0)]
    branches = []
    for _ in range(draw(st.integers(1, max_branches))):
        offs = draw(st.lists(st.sampled_from(window), min_size=1, max_size=max_bits,
                             unique=True))
        branches.append(IndexPattern(tuple(offs)))
    return PatternSet(tuple(branches))


# ---------------------------------------------------------------- patterns

def test_builtin_shapes():
    assert [len(p) for p in builtin_pattern("TI1").patterns] == [4]
    assert [len(p) for p in builtin_pattern("TI2").patterns] == [8]
    assert [len(p) for p in builtin_pattern("TI3").patterns] == [4] * 6
    assert builtin_pattern("TI3").radius == 2
    ring = {o for p in builtin_pattern("TI3").patterns for o in p.offsets}
    assert len(ring) == 24


def test_unknown_builtin():
    with pytest.raises(ConfigError):
        builtin_pattern("TI9")


@pytest.mark.parametrize("offsets", [(), ((0, 0),), ((1, 0), (1, 0)),
                                     tuple((1, k) for k in range(17))])
def test_invalid_pattern(offsets):
    with pytest.raises(ConfigError):
        IndexPattern(offsets)


def test_pattern_file_round_trip():
    for name in ("TI1", "TI2", "TI3"):
        ps = builtin_pattern(name)
        assert parse_patterns(format_patterns(ps)).patterns == ps.patterns


def test_pattern_file_comments_and_blank_lines():
    ps = parse_patterns("# cross\n\n-1,0; 0,-1 # two\n0,1;1,0\n")
    assert ps.width == 2
    assert ps.patterns[1].offsets == ((0, 1), (1, 0))


@pytest.mark.parametrize("text", ["", "# only comments\n", "1,2,3\n", "a,b\n", "0,0\n",
                                  "1,0;1,0\n"])
def test_pattern_file_errors(text):
    with pytest.raises(ConfigError):
        parse_patterns(text)


def test_missing_pattern_file(tmp_path):
    with pytest.raises(DataError):
        fern.load_patterns(tmp_path / "nope.txt")


# ---------------------------------------------------------------- indices

def test_index_all_equal_is_zero():
    t = Tensor(np.full((1, 1, 3, 3), 0.5, dtype=np.float32))
    assert compute_index(t, 0, 0, 1, 1, builtin_pattern("TI2").patterns[0]) == 0


def test_index_center_greater_sets_all_bits():
    x = np.zeros((1, 1, 3, 3), dtype=np.float32)
    x[0, 0, 1, 1] = 1.0
    assert compute_index(Tensor(x), 0, 0, 1, 1, builtin_pattern("TI2").patterns[0]) == 255


def test_index_worked_example():
    x = np.zeros((1, 1, 3, 3), dtype=np.float32)
    x[0, 0, 1, 1] = 5
    x[0, 0, 0, 1] = 3  # up
    x[0, 0, 1, 0] = 7  # left
    x[0, 0, 1, 2] = 2  # right
    x[0, 0, 2, 1] = 7  # down
    assert compute_index(Tensor(x), 0, 0, 1, 1, TI1.patterns[0]) == 5


def test_index_ties_give_zero_bit():
    x = np.full((1, 1, 3, 3), 2.0, dtype=np.float32)
    x[0, 0, 0, 1] = 1.0
    assert compute_index(Tensor(x), 0, 0, 1, 1, TI1.patterns[0]) == 1


@given(pattern_sets(), st.integers(0, 2**31 - 1))
def test_indices_in_range_and_match_reference(ps, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 3, size=(2, 2, 4, 5)).astype(np.float32)
    idx = compute_indices(x, ps)
    t = Tensor(x)
    for k, p in enumerate(ps.patterns):
        assert idx[:, :, k].min() >= 0 and idx[:, :, k].max() < p.distribution_size
        for n in range(2):
            for i in range(2):
                for y in range(4):
                    for xx in range(5):
                        assert idx[n, i, k, y, xx] == compute_index(t, n, i, y, xx, p)


# ---------------------------------------------------------------- forward

def test_single_pixel_selects_top_bin():
    layer = FernLayer(1, 1, TI1)
    layer.weights[0, 0, :] = np.arange(16, dtype=np.float32) / 10
    layer.bias[0] = 0.25
    v = np.float32(2.0)
    out = layer.forward(np.full((1, 1, 1, 1), v, dtype=np.float32))
    assert out[0, 0, 0, 0] == v * np.float32(1.5) + np.float32(0.25)


def test_zero_input_gives_bias(rng):
    layer = _layer(3, 4, builtin_pattern("TI2"), rng)
    out = layer.forward(np.zeros((2, 3, 5, 5), dtype=np.float32))
    np.testing.assert_array_equal(out, np.broadcast_to(layer.bias[None, :, None, None],
                                                       out.shape))


@given(pattern_sets(), st.sampled_from(["same", "valid"]), st.integers(0, 2**31 - 1))
def test_forward_matches_naive_oracle_bit_exact(ps, padding, seed):
    rng = np.random.default_rng(seed)
    z, L = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    shape = (int(rng.integers(1, 3)), z, 2 * ps.radius + int(rng.integers(1, 4)),
             2 * ps.radius + int(rng.integers(1, 4)))
    layer = _layer(z, L, ps, rng, padding=padding)
    x = rng.standard_normal(shape).astype(np.float32)
    x[rng.random(shape) < 0.2] = 0.0  # plenty of ties
    expected = oracles.fern_forward(x, layer.weights, layer.bias,
                                    [p.offsets for p in ps.patterns], padding)
    np.testing.assert_array_equal(layer.forward(x), expected)


@given(pattern_sets(), st.integers(0, 2**31 - 1))
def test_padding_neutrality(ps, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 5, 6)).astype(np.float32)
    same = _layer(2, 3, ps, rng)
    valid = FernLayer(2, 3, ps, padding="valid", table=same.table, bias=same.bias)
    np.testing.assert_array_equal(same.forward(x), valid.forward(zero_pad(x, ps.radius)))


@given(st.sampled_from([0.5, 2.0, 4.0, -1.0]), st.integers(0, 2**31 - 1))
def test_linear_in_weights(alpha, seed):
    # powers of two keep every product and partial sum exact
    rng = np.random.default_rng(seed)
    ps = builtin_pattern("TI3")
    layer = FernLayer.create(2, 3, ps, rng)
    x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
    base = layer.forward(x)
    scaled = FernLayer(2, 3, ps, table=alpha * layer.table)
    np.testing.assert_array_equal(scaled.forward(x), np.float32(alpha) * base)


@given(pattern_sets(), st.sampled_from(["same", "valid"]), st.integers(1, 3),
       st.integers(1, 3), st.integers(1, 9), st.integers(1, 9), st.integers(1, 4))
def test_counters_match_closed_form(ps, padding, n, z, h, w, L):
    layer = FernLayer(z, L, ps, padding=padding)
    x = np.random.default_rng(0).random((n, z, h, w), dtype=np.float32)
    if padding == "valid" and min(h, w) <= 2 * ps.radius:
        return
    layer.forward(x)
    assert layer.counters.as_tuple() == predicted_ops(x.shape, L, ps, padding)


def test_predicted_ops_examples():
    ti2 = builtin_pattern("TI2")
    assert predicted_ops((1, 1, 28, 28), 6, ti2) == (4704, 4704, 6272)
    assert predicted_ops((0, 1, 28, 28), 6, ti2) == (0, 0, 0)
    assert predicted_ops((1, 1, 28, 28), 6, builtin_pattern("TI3")) == (28224, 28224, 18816)


def test_param_counts():
    assert fern.param_count(1, 6, builtin_pattern("TI2")) + \
        fern.param_count(6, 16, builtin_pattern("TI2")) == 26134
    assert fern.param_count(1, 6, builtin_pattern("TI3")) + \
        fern.param_count(6, 16, builtin_pattern("TI3")) == 9814


def test_depth_mismatch_rejected(rng):
    layer = FernLayer(2, 1, TI1)
    with pytest.raises(ConfigError):
        layer.forward(np.zeros((1, 3, 4, 4), dtype=np.float32))


# ---------------------------------------------------------------- backward

def _single_error(shape, y, x, value):
    err = np.zeros(shape, dtype=np.float32)
    err[0, 0, y, x] = value
    return err


def test_backward_central_term():
    layer = FernLayer(1, 1, TI1, heuristic=False)
    w = np.float32(0.75)
    layer.weights[...] = w
    x = np.random.default_rng(1).random((1, 1, 5, 5), dtype=np.float32)
    layer.forward(x)
    gin = layer.backward(_single_error((1, 1, 5, 5), 2, 2, 2.0))
    expected = np.zeros_like(gin)
    expected[0, 0, 2, 2] = 2.0 * w
    np.testing.assert_array_equal(gin, expected)


def test_backward_heuristic_spreads_to_neighbours():
    layer = FernLayer(1, 1, TI1, heuristic=True)
    layer.weights[...] = 0.75
    x = np.random.default_rng(1).random((1, 1, 5, 5), dtype=np.float32)
    layer.forward(x)
    gin = layer.backward(_single_error((1, 1, 5, 5), 2, 2, 2.0))
    assert gin[0, 0, 2, 2] == np.float32(1.5)
    for y, xx in [(1, 2), (2, 1), (2, 3), (3, 2)]:
        assert gin[0, 0, y, xx] == np.float32(1.5 / 4)
    assert np.count_nonzero(gin) == 5


def test_backward_heuristic_drops_padding_share():
    layer = FernLayer(1, 1, TI1, heuristic=True)
    layer.weights[...] = 1.0
    x = np.random.default_rng(1).random((1, 1, 3, 3), dtype=np.float32)
    layer.forward(x)
    gin = layer.backward(_single_error((1, 1, 3, 3), 0, 0, 1.0))
    # two of the four neighbours are in the border
    assert gin.sum() == np.float32(1.0 + 0.5)


def test_weight_gradient_example():
    layer = FernLayer(1, 1, TI1)
    x = np.array([[[[2.0], [3.0]]]], dtype=np.float32)  # (1,1,2,1): centre 2 above a 3
    layer.forward(x)
    err = np.zeros((1, 1, 2, 1), dtype=np.float32)
    err[0, 0, 0, 0] = 0.5
    layer.backward(err)
    g = layer.grad_weights[0, 0]
    assert g[7] == 1.0
    assert np.count_nonzero(g) == 1
    assert layer.grad_bias[0] == 0.5


@pytest.mark.parametrize("name", ["TI1", "TI2", "TI3"])
@pytest.mark.parametrize("padding", ["same", "valid"])
def test_finite_differences(name, padding):
    rng = np.random.default_rng(11)
    for res in check_fern(rng, builtin_pattern(name), shape=(2, 2, 6, 7), padding=padding):
        assert res.ok, res.line()


def test_cached_and_recomputed_indices_agree(rng):
    ps = builtin_pattern("TI3")
    cached = _layer(3, 4, ps, rng)
    fresh = FernLayer(3, 4, ps, cache_indices=False, table=cached.table, bias=cached.bias)
    x = rng.standard_normal((3, 3, 7, 7)).astype(np.float32)
    err = rng.standard_normal((3, 4, 7, 7)).astype(np.float32)
    cached.forward(x)
    fresh.forward(x)
    np.testing.assert_array_equal(cached.backward(err), fresh.backward(err))
    np.testing.assert_array_equal(cached.grad_table, fresh.grad_table)
    np.testing.assert_array_equal(fern.backward_input(cached, x, err), cached.backward(err))


def test_backward_before_forward():
    with pytest.raises(RuntimeError):
        FernLayer(1, 1, TI1).backward(np.zeros((1, 1, 2, 2), dtype=np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
