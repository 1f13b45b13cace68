import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqpar import nnops
from seqpar.errors import ShapeError
from seqpar.nnops import DropoutPolicy, LinearParams


def fd_error(f, x, analytic, eps=1e-5):
    """Max |central difference - analytic| normalized by the gradient scale."""
    num = np.zeros_like(x, dtype=np.float64)
    flat_x = x.reshape(-1)
    flat_num = num.reshape(-1)
    for i in range(flat_x.size):
        keep = flat_x[i]
        flat_x[i] = keep + eps
        up = f()
        flat_x[i] = keep - eps
        down = f()
        flat_x[i] = keep
        flat_num[i] = (up - down) / (2 * eps)
    scale = np.max(np.abs(analytic)) + 1e-12
    return float(np.max(np.abs(num - analytic)) / scale)


# --- linear ---


def test_linear_identity_weight():
    p = LinearParams(weight=np.eye(3), bias=np.zeros(3))
    x = np.arange(6, dtype=np.float64).reshape(2, 3)
    np.testing.assert_array_equal(nnops.linear_fwd(x, p), x)


def test_linear_known_value():
    p = LinearParams(weight=np.array([[1.0], [1.0]]), bias=np.array([3.0]))
    out = nnops.linear_fwd(np.array([[1.0, 2.0]]), p)
    np.testing.assert_array_equal(out, np.array([[6.0]]))


def test_linear_rows_independent(rng):
    p = LinearParams(weight=rng.standard_normal((4, 3)), bias=rng.standard_normal(3))
    x = rng.standard_normal((6, 4))
    whole = nnops.linear_fwd(x, p)
    split = np.concatenate([nnops.linear_fwd(x[:2], p), nnops.linear_fwd(x[2:], p)])
    np.testing.assert_allclose(whole, split, rtol=0, atol=1e-14)


def test_linear_bias_shape_validation():
    p = LinearParams(weight=np.zeros((2, 3)), bias=np.zeros(2))
    with pytest.raises(ShapeError):
        nnops.linear_fwd(np.zeros((1, 2)), p)


def test_linear_backward_matches_finite_differences(rng):
    x = rng.standard_normal((3, 4))
    p = LinearParams(weight=rng.standard_normal((4, 5)), bias=rng.standard_normal(5))
    r = rng.standard_normal((3, 5))
    gx, gw, gb = nnops.linear_bwd(x, p, r)
    assert fd_error(lambda: float(np.sum(nnops.linear_fwd(x, p) * r)), x, gx) < 1e-6
    assert fd_error(lambda: float(np.sum(nnops.linear_fwd(x, p) * r)), p.weight, gw) < 1e-6
    assert fd_error(lambda: float(np.sum(nnops.linear_fwd(x, p) * r)), p.bias, gb) < 1e-6


# --- layernorm ---


def test_layernorm_constant_row_maps_to_bias():
    gain, bias = np.ones(2), np.zeros(2)
    y, _ = nnops.layernorm_fwd(np.array([[1.0, 1.0]]), gain, bias)
    np.testing.assert_allclose(y, np.zeros((1, 2)), atol=1e-10)
    y2, _ = nnops.layernorm_fwd(np.array([[5.0, 5.0]]), gain, np.array([0.25, -0.5]))
    np.testing.assert_allclose(y2, np.array([[0.25, -0.5]]), atol=1e-10)


def test_layernorm_standardizes_known_row():
    y, _ = nnops.layernorm_fwd(np.array([[0.0, 2.0]]), np.ones(2), np.zeros(2))
    np.testing.assert_allclose(y, np.array([[-1.0, 1.0]]), atol=1e-4)


def test_layernorm_rows_standardized(rng):
    x = rng.standard_normal((6, 16)) * 3 + 1
    y, _ = nnops.layernorm_fwd(x, np.ones(16), np.zeros(16))
    np.testing.assert_allclose(np.mean(y, axis=1), np.zeros(6), atol=1e-12)
    np.testing.assert_allclose(np.std(y, axis=1), np.ones(6), atol=1e-4)


def test_layernorm_backward_matches_finite_differences(rng):
    x = rng.standard_normal((3, 8))
    gain = rng.standard_normal(8)
    bias = rng.standard_normal(8)
    r = rng.standard_normal((3, 8))

    def loss():
        y, _ = nnops.layernorm_fwd(x, gain, bias)
        return float(np.sum(y * r))

    _, cache = nnops.layernorm_fwd(x, gain, bias)
    gx, gg, gb = nnops.layernorm_bwd(cache, gain, r)
    assert fd_error(loss, x, gx) < 1e-6
    assert fd_error(loss, gain, gg) < 1e-6
    assert fd_error(loss, bias, gb) < 1e-6


# --- gelu ---


def test_gelu_fixed_points():
    assert nnops.gelu_fwd(np.array([0.0]))[0] == 0.0
    assert abs(nnops.gelu_fwd(np.array([10.0]))[0] - 10.0) < 1e-6
    assert abs(nnops.gelu_fwd(np.array([-10.0]))[0]) < 1e-6


def test_gelu_midpoint_slope():
    # at 0 the tanh form has value 0 and slope exactly 1/2
    eps = 1e-6
    y = nnops.gelu_fwd(np.array([eps, -eps]))
    np.testing.assert_allclose((y[0] - y[1]) / (2 * eps), 0.5, atol=1e-6)


def test_gelu_backward_matches_finite_differences(rng):
    x = rng.standard_normal(40) * 2
    r = rng.standard_normal(40)
    g = nnops.gelu_bwd(x, r)
    assert fd_error(lambda: float(np.sum(nnops.gelu_fwd(x) * r)), x, g) < 1e-6


# --- dropout ---


def coords(rows):
    return np.zeros(rows, dtype=np.int64), np.arange(rows, dtype=np.int64)


def test_dropout_inactive_is_identity(rng):
    x = rng.standard_normal((4, 8))
    s, p = coords(4)
    for policy in (DropoutPolicy.off(), DropoutPolicy(rate=0.0, seed=3)):
        y, mask = nnops.dropout_fwd(x, policy, 0, "embed", s, p)
        assert mask is None
        assert y is x
        assert nnops.dropout_bwd(x, policy, None) is x


def test_dropout_scales_kept_entries(rng):
    x = np.ones((16, 32))
    policy = DropoutPolicy(rate=0.25, seed=7)
    s, p = coords(16)
    y, mask = nnops.dropout_fwd(x, policy, 0, "embed", s, p)
    np.testing.assert_array_equal(y[mask], np.full(np.sum(mask), 1 / 0.75))
    np.testing.assert_array_equal(y[~mask], np.zeros(np.sum(~mask)))
    kept = np.mean(mask)
    assert 0.6 < kept < 0.9  # 512 samples at keep-rate 0.75


def test_dropout_mask_is_deterministic(rng):
    x = rng.standard_normal((8, 16))
    policy = DropoutPolicy(rate=0.5, seed=11)
    s, p = coords(8)
    y1, m1 = nnops.dropout_fwd(x, policy, 2, "ffn_hidden", s, p)
    y2, m2 = nnops.dropout_fwd(x, policy, 2, "ffn_hidden", s, p)
    np.testing.assert_array_equal(m1, m2)
    np.testing.assert_array_equal(y1, y2)


def test_dropout_mask_is_shard_invariant(rng):
    """Splitting rows across workers must not change any row's mask."""
    x = rng.standard_normal((12, 8))
    policy = DropoutPolicy(rate=0.4, seed=5)
    s, p = coords(12)
    _, whole = nnops.dropout_fwd(x, policy, 1, "attn_out", s, p)
    _, left = nnops.dropout_fwd(x[:6], policy, 1, "attn_out", s[:6], p[:6])
    _, right = nnops.dropout_fwd(x[6:], policy, 1, "attn_out", s[6:], p[6:])
    np.testing.assert_array_equal(np.concatenate([left, right]), whole)


def test_dropout_masks_differ_across_sites(rng):
    policy = DropoutPolicy(rate=0.5, seed=9)
    s, p = coords(32)
    masks = {}
    for tag in ("embed", "attn_out", "ffn_hidden", "ffn_out"):
        _, m = nnops.dropout_fwd(np.ones((32, 16)), policy, 0, tag, s, p)
        masks[tag] = m
    tags = list(masks)
    for i in range(len(tags)):
        for j in range(i + 1, len(tags)):
            assert not np.array_equal(masks[tags[i]], masks[tags[j]])
    _, other_layer = nnops.dropout_fwd(np.ones((32, 16)), policy, 1, "embed", s, p)
    assert not np.array_equal(masks["embed"], other_layer)


def test_dropout_policy_step_and_fork_decorrelate():
    base = DropoutPolicy(rate=0.5, seed=21)
    s, p = coords(32)
    x = np.ones((32, 16))
    masks = [
        nnops.dropout_fwd(x, policy, 0, "embed", s, p)[1]
        for policy in (base.at_step(0), base.at_step(1), base.fork(0), base.fork(1))
    ]
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            assert not np.array_equal(masks[i], masks[j])
    # deriving twice from the same coordinates is stable
    assert base.at_step(3).seed == base.at_step(3).seed
    assert base.fork(2).seed == base.fork(2).seed


def test_dropout_validation():
    with pytest.raises(ValueError):
        DropoutPolicy(rate=1.0)
    with pytest.raises(ValueError):
        DropoutPolicy(rate=-0.1)
    s, p = coords(3)
    with pytest.raises(ShapeError):
        nnops.dropout_fwd(np.zeros((3, 2, 2)), DropoutPolicy(rate=0.5), 0, "embed", s, p)
    with pytest.raises(ShapeError):
        nnops.dropout_fwd(np.zeros((4, 2)), DropoutPolicy(rate=0.5), 0, "embed", s, p)
    with pytest.raises(ValueError):
        nnops.dropout_fwd(np.zeros((3, 2)), DropoutPolicy(rate=0.5), 0, "no_such_site", s, p)


def test_dropout_backward_reuses_mask(rng):
    x = rng.standard_normal((6, 10))
    g = rng.standard_normal((6, 10))
    policy = DropoutPolicy(rate=0.3, seed=2)
    s, p = coords(6)
    _, mask = nnops.dropout_fwd(x, policy, 0, "embed", s, p)
    gx = nnops.dropout_bwd(g, policy, mask)
    np.testing.assert_array_equal(gx[~mask], np.zeros(np.sum(~mask)))
    np.testing.assert_allclose(gx[mask], g[mask] / 0.7, rtol=1e-15)


# --- counter-based PRF ---


def test_mix_key_is_pure_and_sensitive():
    assert nnops.mix_key(1, 2) == nnops.mix_key(1, 2)
    assert nnops.mix_key(1, 2) != nnops.mix_key(1, 3)
    assert nnops.mix_key(1, 2) != nnops.mix_key(2, 2)
    assert 0 <= nnops.mix_key(2**64 - 1, 2**63) < 2**64


def test_mix_array_matches_scalar_mix():
    h = 0xDEADBEEF
    words = np.array([0, 1, 2, 500, 2**40], dtype=np.uint64)
    vec = nnops._mix_array(np.full(words.shape, np.uint64(h), dtype=np.uint64), words)
    scalar = [nnops.mix_key(h, int(w)) for w in words]
    assert [int(v) for v in vec] == scalar


def test_keep_mask_rate_zero_keeps_everything():
    keys = nnops.token_row_keys(
        DropoutPolicy(rate=0.0, seed=1), 0, "embed",
        np.zeros(4, dtype=np.int64), np.arange(4, dtype=np.int64),
    )
    mask = nnops.keep_mask(DropoutPolicy(rate=0.0, seed=1), keys, 8)
    assert mask.all()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32), rate=st.floats(0.05, 0.9))
def test_keep_mask_hits_rate_in_expectation(seed, rate):
    policy = DropoutPolicy(rate=rate, seed=seed)
    keys = nnops.token_row_keys(
        policy, 0, "embed", np.zeros(64, dtype=np.int64), np.arange(64, dtype=np.int64)
    )
    mask = nnops.keep_mask(policy, keys, 64)
    assert abs(np.mean(mask) - (1 - rate)) < 0.08


# --- embeddings ---


def test_embed_tokens_gathers_rows():
    table = np.arange(12, dtype=np.float64).reshape(4, 3)
    ids = np.array([[3, 0], [1, 1]])
    out = nnops.embed_tokens(table, ids)
    assert out.shape == (2, 2, 3)
    np.testing.assert_array_equal(out[0, 0], table[3])
    np.testing.assert_array_equal(out[1, 1], table[1])


def test_embed_tokens_range_validation():
    table = np.zeros((4, 3))
    with pytest.raises(ValueError):
        nnops.embed_tokens(table, np.array([4]))
    with pytest.raises(ValueError):
        nnops.embed_tokens(table, np.array([-1]))


def test_embed_tokens_bwd_accumulates_duplicates():
    ids = np.array([[1, 1, 2]])
    grad_rows = np.ones((1, 3, 2))
    g = nnops.embed_tokens_bwd((4, 2), ids, grad_rows)
    np.testing.assert_array_equal(g[1], np.array([2.0, 2.0]))
    np.testing.assert_array_equal(g[2], np.array([1.0, 1.0]))
    np.testing.assert_array_equal(g[0], np.zeros(2))


def test_embed_positions_slice_and_bounds():
    pe = np.arange(10, dtype=np.float64).reshape(5, 2)
    np.testing.assert_array_equal(nnops.embed_positions(pe, 1, 3), pe[1:4])
    with pytest.raises(ValueError):
        nnops.embed_positions(pe, 3, 3)
    with pytest.raises(ValueError):
        nnops.embed_positions(pe, -1, 2)


# --- cross entropy ---


def test_cross_entropy_uniform_logits_give_log_vocab():
    logits = np.zeros((5, 17))
    targets = np.arange(5) % 17
    loss, _ = nnops.cross_entropy(logits, targets)
    assert abs(loss - math.log(17)) < 1e-12


def test_cross_entropy_gradient_closed_form(rng):
    logits = rng.standard_normal((4, 6))
    targets = np.array([0, 5, 2, 2])
    _, grad = nnops.cross_entropy(logits, targets)
    e = np.exp(logits - np.max(logits, axis=1, keepdims=True))
    soft = e / np.sum(e, axis=1, keepdims=True)
    onehot = np.zeros_like(soft)
    onehot[np.arange(4), targets] = 1.0
    np.testing.assert_allclose(grad, (soft - onehot) / 4, rtol=1e-12, atol=1e-15)


def test_cross_entropy_is_mean_of_per_row_losses(rng):
    logits = rng.standard_normal((6, 9))
    targets = rng.integers(0, 9, size=6)
    whole, _ = nnops.cross_entropy(logits, targets)
    per_row = [
        nnops.cross_entropy(logits[i : i + 1], targets[i : i + 1])[0] for i in range(6)
    ]
    assert abs(whole - np.mean(per_row)) < 1e-12


def test_cross_entropy_partial_means_recombine(rng):
    """Mean over equal-size shards averages back to the full loss."""
    logits = rng.standard_normal((8, 5))
    targets = rng.integers(0, 5, size=8)
    whole, _ = nnops.cross_entropy(logits, targets)
    first, _ = nnops.cross_entropy(logits[:4], targets[:4])
    second, _ = nnops.cross_entropy(logits[4:], targets[4:])
    assert abs(whole - (first + second) / 2) < 1e-12


def test_cross_entropy_matches_finite_differences(rng):
    logits = rng.standard_normal((3, 5))
    targets = np.array([1, 4, 0])
    _, grad = nnops.cross_entropy(logits, targets)
    err = fd_error(lambda: nnops.cross_entropy(logits, targets)[0], logits, grad)
    assert err < 1e-6


def test_cross_entropy_validation():
    with pytest.raises(ShapeError):
        nnops.cross_entropy(np.zeros(4), np.zeros(4, dtype=int))
    with pytest.raises(ShapeError):
        nnops.cross_entropy(np.zeros((2, 3)), np.zeros(3, dtype=int))
    with pytest.raises(ValueError):
        nnops.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        nnops.cross_entropy(np.zeros((2, 3)), np.array([0, -1]))
