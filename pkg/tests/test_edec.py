import numpy as np
import pytest

from edenn import edec
from edenn import tensor as tn
from edenn.edec import EdecLayer, StreamState
from edenn.tensor import ShapeError, Tensor

from conftest import check_grads


def make_layer(rng, cin, cout, k=3, stride=1, mode="streaming", gamma=None, positive=False):
    kern = rng.uniform(0.1, 1.0, (k, k, cin, cout)) if positive else rng.normal(size=(k, k, cin, cout))
    g = rng.uniform(-0.95, 0.95, cout) if gamma is None else np.broadcast_to(np.asarray(gamma, float), (cout,))
    return EdecLayer(tn.parameter(kern), tn.parameter(np.arctanh(g)), stride=stride, mode=mode)


def stream_all(layer, vol):
    """Fold the streaming step over a ``[W, H, C, T]`` volume; returns ``[W', H', Cout, T]``."""
    state = StreamState.zeros(layer, vol.shape[0], vol.shape[1])
    outs = []
    for t in range(vol.shape[-1]):
        out, state = edec.forward_streaming_step(vol[..., t], state, layer)
        outs.append(out.data)
    return np.stack(outs, axis=-1)


def ones_state(layer, W, H, value=None):
    wo, ho = layer.output_geometry(W, H)
    prev = np.zeros((wo, ho, layer.cout)) if value is None else value
    return StreamState(Tensor(prev), np.ones((wo, ho)))


# -- decay and kernel ------------------------------------------------------


def test_effective_gamma():
    layer = EdecLayer(tn.parameter(np.ones((1, 1, 1, 3))), tn.parameter([0.0, 0.5, 40.0]))
    g = edec.effective_gamma(layer).data
    assert g[0] == 0.0
    # odd power series of tanh, independent of numpy's tanh
    series = sum(c * 0.5**p for c, p in [(1, 1), (-1 / 3, 3), (2 / 15, 5), (-17 / 315, 7), (62 / 2835, 9), (-1382 / 155925, 11)])
    assert abs(g[1] - series) < 1e-6
    assert g[2] == pytest.approx(1.0)


def test_materialize_kernel_taps():
    layer = EdecLayer(tn.parameter(np.full((1, 1, 1, 1), 2.0)), tn.parameter([np.arctanh(0.5)]))
    taps = edec.materialize_kernel(layer, 3).data.reshape(3)
    np.testing.assert_allclose(taps, [0.5, 1.0, 2.0], atol=1e-15)


def test_materialize_kernel_gamma_limits(rng):
    k = rng.normal(size=(3, 3, 2, 1))
    zero = EdecLayer(tn.parameter(k), tn.parameter([0.0]))
    khat = edec.materialize_kernel(zero, 4).data
    assert np.all(khat[..., :3] == 0.0)
    np.testing.assert_array_equal(khat[..., 3], k)
    one = EdecLayer(tn.parameter(k), tn.parameter([30.0]))
    np.testing.assert_allclose(edec.materialize_kernel(one, 4).data, np.repeat(k[..., None], 4, -1), rtol=1e-12)
    with pytest.raises(ValueError):
        edec.materialize_kernel(one, 0)


# -- dense reference ---------------------------------------------------------


def test_dense_zero_volume(rng):
    layer = make_layer(rng, 2, 3)
    assert np.all(edec.forward_dense(np.zeros((5, 4, 2, 6)), layer).data == 0.0)


def test_dense_gamma_zero_is_per_slice_conv(rng):
    layer = make_layer(rng, 2, 3, stride=2, gamma=0.0)
    vol = rng.normal(size=(7, 5, 2, 4))
    out = edec.forward_dense(vol, layer).data
    for t in range(4):
        np.testing.assert_allclose(out[..., t], tn.conv2d_array(vol[..., t], layer.kernel.data, 2), atol=1e-13)


def test_dense_impulse_response():
    layer = EdecLayer(tn.parameter(np.full((1, 1, 1, 1), 1.5)), tn.parameter([np.arctanh(-0.7)]))
    vol = np.zeros((3, 3, 1, 8))
    vol[1, 2, 0, 0] = 1.0
    out = edec.forward_dense(vol, layer).data
    np.testing.assert_allclose(out[1, 2, 0], 1.5 * (-0.7) ** np.arange(8), atol=1e-14)
    assert np.count_nonzero(out[..., 0, :].sum(-1)) == 1


def test_dense_is_causal(rng):
    layer = make_layer(rng, 2, 2)
    vol = rng.normal(size=(5, 5, 2, 9))
    changed = vol.copy()
    changed[..., 6:] = rng.normal(size=changed[..., 6:].shape)
    a = edec.forward_dense(vol, layer).data
    b = edec.forward_dense(changed, layer).data
    np.testing.assert_array_equal(a[..., :6], b[..., :6])
    assert not np.allclose(a[..., 6:], b[..., 6:])


def test_stream_equals_dense_200_configs():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(200):
        W, H = rng.integers(1, 11, 2)
        cin, cout = rng.integers(1, 4, 2)
        T = int(rng.integers(1, 13))
        layer = make_layer(rng, cin, cout, k=int(rng.choice([1, 3, 5])), stride=int(rng.integers(1, 3)))
        vol = (rng.random((W, H, cin, T)) < 0.3) * rng.normal(size=(W, H, cin, T))
        dense = edec.forward_dense(vol, layer).data
        worst = max(worst, float(np.max(np.abs(stream_all(layer, vol) - dense))))
    assert worst < 1e-9


def test_sequence_matches_dense(rng):
    layer = make_layer(rng, 2, 3, stride=2)
    vols = rng.normal(size=(3, 6, 7, 5, 2))  # [N, T, W, H, C]
    out, masks = edec.forward_sequence(Tensor(vols), layer)
    for n in range(3):
        dense = edec.forward_dense(np.transpose(vols[n], (1, 2, 3, 0)), layer).data
        np.testing.assert_allclose(np.transpose(out.data[n], (1, 2, 3, 0)), dense, atol=1e-12)
    assert masks.shape == (3, 6, 4, 3) and np.all(masks == 1.0)


def test_streaming_first_slice_zero_input(rng):
    layer = make_layer(rng, 2, 2)
    out, state = edec.forward_streaming_step(np.zeros((4, 4, 2)), StreamState.zeros(layer, 4, 4), layer)
    assert np.all(out.data == 0.0) and state.initialized


def test_streaming_gamma_zero_forgets(rng):
    layer = make_layer(rng, 1, 2, gamma=0.0)
    x = rng.normal(size=(4, 4, 1))
    warm = StreamState(Tensor(rng.normal(size=(4, 4, 2))), np.ones((4, 4)))
    a, _ = edec.forward_streaming_step(x, warm, layer)
    b, _ = edec.forward_streaming_step(x, StreamState.zeros(layer, 4, 4), layer)
    np.testing.assert_array_equal(a.data, b.data)


def test_streaming_geometry_mismatch(rng):
    layer = make_layer(rng, 1, 2, stride=2)
    with pytest.raises(ShapeError, match="stream state"):
        edec.forward_streaming_step(np.zeros((6, 6, 1)), StreamState.zeros(layer, 8, 8), layer)


def test_layer_validation(rng):
    with pytest.raises(ShapeError):
        EdecLayer(tn.parameter(np.ones((2, 3, 1, 1))), tn.parameter([0.0]))
    with pytest.raises(ShapeError):
        EdecLayer(tn.parameter(np.ones((3, 3, 1, 2))), tn.parameter([0.0]))
    with pytest.raises(ValueError):
        EdecLayer(tn.parameter(np.ones((3, 3, 1, 1))), tn.parameter([0.0]), mode="spiking")


def test_markov_state_summarises_history(rng):
    layer = make_layer(rng, 2, 2)
    vol = rng.normal(size=(5, 5, 2, 6))
    dense = edec.forward_dense(vol, layer).data
    # given the output at t-1 as state, slice t alone reproduces the output at t
    state = StreamState(Tensor(dense[..., 4]), np.ones((5, 5)))
    out, _ = edec.forward_streaming_step(vol[..., 5], state, layer)
    np.testing.assert_allclose(out.data, dense[..., 5], atol=1e-12)
    # rewriting older raw slices has no path to the output once the state is fixed
    other = vol.copy()
    other[..., :4] = rng.normal(size=other[..., :4].shape)
    out2, _ = edec.forward_streaming_step(other[..., 5], state, layer)
    np.testing.assert_array_equal(out.data, out2.data)


# -- partial modes -----------------------------------------------------------


def brute_partial(x, m, prev, pm, kernel, gamma, stride, weighted):
    kw, kh, cin, cout = kernel.shape
    W, H = m.shape
    Wo, Ho = pm.shape
    pw, ph = (kw - 1) // 2, (kh - 1) // 2
    out = np.zeros((Wo, Ho, cout))
    for i in range(Wo):
        for j in range(Ho):
            for o in range(cout):
                conv = kin = kall = 0.0
                seen_in = all_in = 0
                for u in range(kw):
                    for v in range(kh):
                        xi, yj = i * stride + u - pw, j * stride + v - ph
                        if 0 <= xi < W and 0 <= yj < H:
                            all_in += 1
                            seen_in += m[xi, yj]
                            for c in range(cin):
                                conv += kernel[u, v, c, o] * x[xi, yj, c] * m[xi, yj]
                                kin += kernel[u, v, c, o] * m[xi, yj]
                                kall += kernel[u, v, c, o]
                seen_st = all_st = 0
                for u in range(kw):
                    for v in range(kh):
                        si, sj = i + u - pw, j + v - ph
                        if 0 <= si < Wo and 0 <= sj < Ho:
                            all_st += 1
                            seen_st += pm[si, sj]
                if weighted:
                    den = kin + gamma[o] * cin * seen_st
                    alpha = 0.0 if abs(den) <= 1e-12 else (kall + gamma[o] * cin * all_st) / den
                else:
                    den = seen_in + seen_st
                    alpha = 0.0 if den == 0 else (all_in + all_st) / den
                out[i, j, o] = alpha * (conv + gamma[o] * prev[i, j, o] * pm[i, j])
    return out


@pytest.mark.parametrize("weighted", [False, True])
def test_partial_step_matches_loop_oracle(weighted):
    rng = np.random.default_rng(7)
    for _ in range(25):
        W, H = rng.integers(2, 8, 2)
        cin, cout = rng.integers(1, 4, 2)
        stride = int(rng.integers(1, 3))
        layer = make_layer(rng, cin, cout, k=int(rng.choice([1, 3])), stride=stride, positive=weighted)
        wo, ho = layer.output_geometry(W, H)
        x = rng.normal(size=(W, H, cin))
        m = (rng.random((W, H)) < 0.5).astype(float)
        prev = rng.normal(size=(wo, ho, cout))
        pm = (rng.random((wo, ho)) < 0.5).astype(float)
        out, out_mask, state = edec.forward_partial_step(
            x, m, StreamState(Tensor(prev), pm), layer, "weighted" if weighted else "original"
        )
        gamma = np.tanh(layer.theta.data)
        want = brute_partial(x, m, prev, pm, layer.kernel.data, gamma, stride, weighted)
        np.testing.assert_allclose(out.data, want, atol=1e-12)
        assert state.prev_mask is out_mask and state.prev_output is out


@pytest.mark.parametrize("mode", ["partial_original", "partial_weighted"])
def test_all_ones_masks_reproduce_streaming(rng, mode):
    layer = make_layer(rng, 2, 3, stride=2, mode=mode)
    plain = make_layer(rng, 2, 3, stride=2)
    plain.kernel, plain.theta = layer.kernel, layer.theta
    x = rng.normal(size=(7, 6, 2))
    prev = rng.normal(size=(4, 3, 3))
    a, mask_out, _ = edec.step(layer, x, np.ones((7, 6)), ones_state(layer, 7, 6, prev))
    b, _ = edec.forward_streaming_step(x, StreamState(Tensor(prev), np.ones((4, 3))), plain)
    np.testing.assert_array_equal(a.data, b.data)
    assert np.all(mask_out == 1.0)


@pytest.mark.parametrize("alpha_mode", ["original", "weighted"])
def test_all_masked_gives_zero(rng, alpha_mode):
    layer = make_layer(rng, 2, 2, positive=True)
    out, mask, state = edec.forward_partial_step(
        rng.normal(size=(5, 5, 2)), np.zeros((5, 5)), StreamState.zeros(layer, 5, 5), layer, alpha_mode
    )
    assert np.all(out.data == 0.0) and np.all(mask == 0.0)


def test_alpha_original_boundaries():
    ones, zeros = np.ones((6, 6)), np.zeros((6, 6))
    assert np.all(edec.alpha_original(ones, ones, (3, 3)).values.data == 1.0)
    assert np.all(edec.alpha_original(zeros, zeros, (3, 3)).values.data == 0.0)


def test_alpha_original_spot_value():
    m_in = np.zeros((5, 5))
    m_st = np.zeros((5, 5))
    for dx, dy in [(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)]:
        m_in[1 + dx, 1 + dy] = 1.0
    for dx, dy in [(0, 2), (2, 0), (2, 1), (1, 2)]:
        m_st[1 + dx, 1 + dy] = 1.0
    alpha = edec.alpha_original(m_in, m_st, (3, 3)).values.data
    assert alpha[2, 2] == 2.0  # 2 * 9 / (5 + 4)


def test_alpha_weighted_boundaries(rng):
    layer = make_layer(rng, 3, 4, positive=True)
    ones, zeros = np.ones((6, 5)), np.zeros((6, 5))
    full = edec.alpha_weighted(layer, ones, ones)
    assert full.per_channel and np.all(full.values.data == 1.0)
    assert np.all(edec.alpha_weighted(layer, zeros, zeros).values.data == 0.0)
    # signed kernels too: the fully observed ratio is exactly 1
    signed = make_layer(rng, 3, 4)
    assert np.all(edec.alpha_weighted(signed, ones, ones).values.data == 1.0)


def test_alpha_weighted_vanishing_denominator():
    k = np.zeros((3, 3, 1, 1))
    k[1, 1] = 1.0
    k[1, 2] = -1.0
    layer = EdecLayer(tn.parameter(k), tn.parameter([0.0]))
    m = np.zeros((3, 3))
    m[1, 1] = m[1, 2] = 1.0
    alpha = edec.alpha_weighted(layer, m, np.zeros((3, 3))).values.data
    assert alpha[1, 1, 0] == 0.0


def test_propagate_mask():
    assert np.all(edec.propagate_mask(edec.AlphaMap(Tensor(np.zeros((3, 3))))) == 0.0)
    assert np.all(edec.propagate_mask(edec.AlphaMap(Tensor(np.ones((3, 3))))) == 1.0)
    a = np.zeros((2, 2, 2))
    a[0, 1, 1] = 0.3
    np.testing.assert_array_equal(edec.propagate_mask(edec.AlphaMap(Tensor(a), per_channel=True)), [[0, 1], [0, 0]])


def test_partial_mask_shape_mismatch(rng):
    layer = make_layer(rng, 2, 2, mode="partial_weighted")
    with pytest.raises(ShapeError, match="mask"):
        edec.forward_partial_step(np.zeros((4, 4, 2)), np.ones((3, 4)), StreamState.zeros(layer, 4, 4), layer)


def zero_weight_instance(rng):
    k = rng.uniform(0.2, 1.0, (3, 3, 1, 1))
    k[0, 1, 0, 0] = 0.0  # tap reading pixel (i-1, j)
    layer = EdecLayer(tn.parameter(k), tn.parameter([np.arctanh(0.6)]))
    x = rng.uniform(0.5, 1.0, (5, 5, 1))
    m = np.ones((5, 5))
    m[0, 0] = m[4, 3] = 0.0
    state = StreamState(Tensor(rng.uniform(0.5, 1.0, (5, 5, 1))), np.ones((5, 5)))
    toggled = m.copy()
    toggled[1, 2] = 0.0
    return layer, x, m, toggled, state


def test_zero_weight_toggle_weighted_vs_original(rng):
    layer, x, m, toggled, state = zero_weight_instance(rng)
    w_a, _, _ = edec.forward_partial_step(x, m, state, layer, "weighted")
    w_b, _, _ = edec.forward_partial_step(x, toggled, state, layer, "weighted")
    o_a, _, _ = edec.forward_partial_step(x, m, state, layer, "original")
    o_b, _, _ = edec.forward_partial_step(x, toggled, state, layer, "original")
    # output cell (2, 2) reads pixel (1, 2) through the zero tap only
    assert w_a.data[2, 2, 0] == pytest.approx(w_b.data[2, 2, 0], abs=1e-14)
    assert abs(o_a.data[2, 2, 0] - o_b.data[2, 2, 0]) > 1e-6


def test_zero_weight_toggle_never_changes_weighted_output():
    rng = np.random.default_rng(11)
    for _ in range(50):
        cin = int(rng.integers(1, 3))
        k = rng.uniform(0.1, 1.0, (3, 3, cin, 1))
        u, v = rng.integers(0, 3, 2)
        k[u, v] = 0.0
        layer = EdecLayer(tn.parameter(k), tn.parameter([np.arctanh(rng.uniform(0.1, 0.9))]))
        x = rng.normal(size=(6, 6, cin))
        m = (rng.random((6, 6)) < 0.7).astype(float)
        state = StreamState(Tensor(rng.normal(size=(6, 6, 1))), (rng.random((6, 6)) < 0.7).astype(float))
        i, j = rng.integers(1, 5, 2)
        px, py = i + u - 1, j + v - 1
        flipped = m.copy()
        flipped[px, py] = 1.0 - flipped[px, py]
        a, _, _ = edec.forward_partial_step(x, m, state, layer, "weighted")
        b, _, _ = edec.forward_partial_step(x, flipped, state, layer, "weighted")
        # only cells whose footprint covers (px, py) through a zero tap are guaranteed unchanged
        assert a.data[i, j, 0] == pytest.approx(b.data[i, j, 0], rel=1e-12, abs=1e-12)


def test_importance_monotonicity():
    rng = np.random.default_rng(5)
    for _ in range(50):
        k = rng.uniform(0.05, 1.0, (3, 3, 1, 1))
        layer = EdecLayer(tn.parameter(k), tn.parameter([np.arctanh(rng.uniform(0.1, 0.9))]))
        state_mask = np.ones((5, 5))
        flat = k[..., 0, 0]
        big = np.unravel_index(np.argmax(flat), (3, 3))
        small = np.unravel_index(np.argmin(flat), (3, 3))
        base = edec.alpha_weighted(layer, np.ones((5, 5)), state_mask).values.data[2, 2, 0]
        changes = []
        for u, v in (big, small):
            m = np.ones((5, 5))
            m[1 + u, 1 + v] = 0.0
            changes.append(abs(edec.alpha_weighted(layer, m, state_mask).values.data[2, 2, 0] - base))
        assert changes[0] >= changes[1]


def test_spatial_invariance_condition_one_by_one():
    # 1x1 kernel: |Omega| = 1, alpha = 2 / (m_in + m_state)
    k, gamma, prev = 0.8, 0.5, 1.2
    layer = EdecLayer(tn.parameter(np.full((1, 1, 1, 1), k)), tn.parameter([np.arctanh(gamma)]))
    state = StreamState(Tensor(np.full((1, 1, 1), prev)), np.ones((1, 1)))
    masked, _, _ = edec.forward_partial_step(np.zeros((1, 1, 1)), np.zeros((1, 1)), state, layer, "original")
    e = masked.data.item()
    assert e == pytest.approx(2 * gamma * prev)
    # an input whose contribution K*x equals E / (2|Omega|) can be unmasked without effect
    x = np.full((1, 1, 1), e / 2 / k)
    unmasked, _, _ = edec.forward_partial_step(x, np.ones((1, 1)), state, layer, "original")
    assert unmasked.data.item() == pytest.approx(e, abs=1e-14)
    # any other value changes it
    off, _, _ = edec.forward_partial_step(x * 1.5, np.ones((1, 1)), state, layer, "original")
    assert abs(off.data.item() - e) > 1e-3


def test_mask_propagates_through_sequence(rng):
    layer = make_layer(rng, 2, 2, mode="partial_original")
    x = rng.normal(size=(1, 3, 7, 7, 2))
    masks = np.zeros((1, 3, 7, 7))
    masks[0, 0, 3, 3] = 1.0
    _, out_masks = edec.forward_sequence(Tensor(x), layer, masks)
    assert out_masks[0, 0].sum() == 9  # 3x3 neighbourhood
    assert out_masks[0, 1].sum() == 25  # the state footprint grows it
    assert out_masks[0, 2].sum() == 49


# -- gradients ---------------------------------------------------------------


@pytest.mark.parametrize("mode", ["streaming", "partial_original", "partial_weighted"])
def test_gradients_through_two_layer_unroll(mode):
    rng = np.random.default_rng(3)
    l1 = make_layer(rng, 2, 3, stride=2, mode=mode, positive=mode == "partial_weighted")
    l2 = make_layer(rng, 3, 2, mode=mode, positive=mode == "partial_weighted")
    xs = rng.normal(size=(4, 6, 5, 2))
    masks = (rng.random((4, 6, 5)) < 0.7).astype(float)
    target = rng.normal(size=(4, 3, 3, 2))

    def build():
        s1, s2 = StreamState.zeros(l1, 6, 5), StreamState.zeros(l2, 3, 3)
        loss = None
        for t in range(4):
            h, m, s1 = edec.step(l1, xs[t], masks[t], s1)
            y, _, s2 = edec.step(l2, tn.tanh(h), m, s2)
            term = tn.tsum(tn.square(y - target[t]))
            loss = term if loss is None else loss + term
        return loss

    check_grads(build, [l1.kernel, l1.theta, l2.kernel, l2.theta])


def test_sequence_gradients_match_unroll(rng):
    layer = make_layer(rng, 2, 2, stride=2)
    x = rng.normal(size=(2, 5, 6, 6, 2))
    w = rng.normal(size=(2, 5, 3, 3, 2))
    check_grads(lambda: tn.tsum(edec.forward_sequence(Tensor(x), layer)[0] * w), [layer.kernel, layer.theta])
