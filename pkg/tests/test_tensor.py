import numpy as np
import pytest

from gatedunipose import tensor as T
from gatedunipose.exceptions import InvalidSpecError, ShapeError, UsageError
from gatedunipose.tensor import ConvSpec, Tensor


def naive_conv2d(x, w, b, spec):
    """Direct seven-loop cross-correlation, the reference for every conv path."""
    n, cin, h, wd = x.shape
    cout = spec.out_channels
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    dh, dw = spec.dilation
    g = spec.groups
    ho, wo = spec.output_hw(h, wd)
    xp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    cin_g, cout_g = cin // g, cout // g
    y = np.zeros((n, cout, ho, wo))
    for b_ in range(n):
        for o in range(cout):
            grp = o // cout_g
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin_g):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, c, u, v] * xp[b_, grp * cin_g + c, i * sh + u * dh, j * sw + v * dw]
                    y[b_, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return y


SPECS = [
    ConvSpec(3, 4, 3, 1, 1),
    ConvSpec(2, 2, 1, 1, 0),  # 1x1 fast path
    ConvSpec(4, 4, 3, 1, 1, groups=4),  # depthwise
    ConvSpec(4, 4, 5, 1, 4, dilation=2, groups=4),  # dilated depthwise
    ConvSpec(4, 6, 3, 2, 1, groups=2),
    ConvSpec(3, 2, (3, 1), (2, 1), (1, 0), has_bias=False),
    ConvSpec(2, 3, 4, 2, 1),
]


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"k{s.kernel}s{s.stride}d{s.dilation}g{s.groups}")
def test_conv2d_matches_naive_loops(spec, rng, f64):
    x = rng.standard_normal((2, spec.in_channels, 9, 8))
    w = rng.standard_normal(spec.weight_shape())
    b = rng.standard_normal(spec.out_channels) if spec.has_bias else None
    y = T.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b), spec)
    np.testing.assert_allclose(y.data, naive_conv2d(x, w, b, spec), atol=1e-12)


@pytest.mark.parametrize("spec", SPECS[:5])
def test_transposed_conv_is_adjoint_of_conv(spec, rng, f64):
    # <conv(x), y> == <x, conv_T(y)> with the transposed spec swapping channel roles
    x = rng.standard_normal((2, spec.in_channels, 9, 9))
    w = rng.standard_normal(spec.weight_shape())
    y_shape = (2, spec.out_channels) + spec.output_hw(9, 9)
    y = rng.standard_normal(y_shape)
    tspec = ConvSpec(spec.out_channels, spec.in_channels, spec.kernel, spec.stride, spec.padding,
                     spec.dilation, spec.groups, False)
    lhs = (T.conv2d(Tensor(x), Tensor(w), None, spec).data * y).sum()
    xt = T.transposed_conv2d(Tensor(y), Tensor(w), tspec)
    assert xt.shape == x.shape
    np.testing.assert_allclose(lhs, (x * xt.data).sum(), rtol=1e-12)


def test_conv2d_backward_matches_autograd(rng, f64):
    spec = ConvSpec(2, 3, 3, 2, 1)
    x = Tensor(rng.standard_normal((2, 2, 7, 7)), requires_grad=True)
    w = Tensor(rng.standard_normal(spec.weight_shape()), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    y = T.conv2d(x, w, b, spec)
    g = rng.standard_normal(y.shape)
    y.backward(g)
    gx, gw, gb = T.conv2d_backward(g, {"x": x, "w": w, "spec": spec})
    np.testing.assert_allclose(gx, x.grad)
    np.testing.assert_allclose(gw, w.grad)
    np.testing.assert_allclose(gb, b.grad)


def test_conv2d_backward_requires_saved_context():
    with pytest.raises(UsageError):
        T.conv2d_backward(np.zeros((1, 1, 1, 1)), {"x": None})


def test_conv_errors():
    with pytest.raises(InvalidSpecError):
        ConvSpec(3, 4, 3, groups=2)
    with pytest.raises(InvalidSpecError):
        ConvSpec(2, 2, 0)
    spec = ConvSpec(1, 1, 7)
    with pytest.raises(InvalidSpecError):
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros(spec.weight_shape())), None, spec)
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros(spec.weight_shape())), None, spec)


def test_output_geometry():
    assert ConvSpec(1, 1, 3, 2, 1).output_hw(8, 7) == (4, 4)
    assert ConvSpec(1, 1, 4, 2, 1).transposed_output_hw(8, 6) == (16, 12)
    assert ConvSpec(1, 1, 5, dilation=3).effective_kernel == (13, 13)


def test_add_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        T.hadamard(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_empty_tensors_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_backward_without_grad_is_usage_error():
    with pytest.raises(UsageError):
        Tensor(np.ones(3)).sum().backward()


def test_gradients_accumulate_across_uses(f64):
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, [3.0, 5.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.sigmoid(x)
    assert not y.requires_grad


def test_precision_switch():
    with T.precision("f64"):
        assert Tensor(np.ones(2)).dtype == np.float64
    assert T.get_precision() == "f32"
    assert Tensor(np.ones(2)).dtype == np.float32
    with pytest.raises(ValueError):
        T.set_precision("f16")


def test_conv_is_deterministic(rng):
    spec = ConvSpec(4, 4, 3, 1, 1, groups=2)
    x = Tensor(rng.standard_normal((2, 4, 8, 8)))
    w = Tensor(rng.standard_normal(spec.weight_shape()))
    a = T.conv2d(x, w, None, spec).data
    b = T.conv2d(x, w, None, spec).data
    assert a.tobytes() == b.tobytes()


def test_grid_sample_at_integer_points_gathers(rng, f64):
    x = rng.standard_normal((1, 2, 4, 5))
    xs, ys = np.meshgrid(np.arange(5.0), np.arange(4.0))
    coords = np.stack([xs, ys])[None]
    out = T.grid_sample_bilinear(Tensor(x), Tensor(coords))
    np.testing.assert_allclose(out.data, x)


def test_grid_sample_clamps_outside(f64):
    x = np.arange(6.0).reshape(1, 1, 2, 3)
    coords = np.array([[[[-3.0, 10.0]], [[0.0, 1.0]]]])  # (x, y) = (-3, 0) and (10, 1)
    out = T.grid_sample_bilinear(Tensor(x), Tensor(coords))
    np.testing.assert_allclose(out.data.ravel(), [0.0, 5.0])


def test_bilinear_upsample_preserves_constants(f64):
    x = np.full((1, 2, 3, 4), 2.5)
    np.testing.assert_allclose(T.bilinear_upsample(Tensor(x), 4).data, 2.5)


def test_mse_mask(f64):
    pred = Tensor(np.ones((1, 2, 2, 2)))
    target = Tensor(np.zeros((1, 2, 2, 2)))
    assert T.mse(pred, target, [True, False]).item() == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        T.mse(pred, target, [False, False])


def test_batch_norm_eval_uses_running_statistics(f64):
    state = T.BatchNormState(2)
    state.running_mean = np.array([1.0, -1.0])
    state.running_var = np.array([4.0, 1.0])
    x = Tensor(np.ones((1, 2, 1, 1)))
    y = T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, training=False)
    np.testing.assert_allclose(y.data.ravel(), [0.0, 2.0 / np.sqrt(1 + 1e-5)])


def test_batch_norm_training_updates_running_statistics(f64):
    state = T.BatchNormState(1, momentum=0.5)
    x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
    T.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, training=True)
    assert state.running_mean[0] == pytest.approx(1.0)
    assert state.running_var[0] == pytest.approx(0.5 + 0.5 * 2.0)  # unbiased variance 2


def test_count_and_format():
    assert T.count_parameters([Tensor(np.zeros((3, 4))), ("b", Tensor(np.zeros(5)))]) == 17
    assert T.format_millions(52_010_297) == "52.0"


def test_grid_sample_propagates_nan_positions(f64, rng):
    x = Tensor(rng.random((1, 2, 4, 4)))
    coords = rng.uniform(0, 3, (1, 2, 2, 2))
    coords[0, 0, 1, 0] = np.nan
    out = T.grid_sample_bilinear(x, Tensor(coords)).data
    assert np.isnan(out[0, :, 1, 0]).all()
    assert np.isfinite(np.delete(out.reshape(2, 4), 2, axis=1)).all()
