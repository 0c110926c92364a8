import itertools

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, strategies as st

from n4fields.cnn import (ArrayPatchData, CurveRow, TrainConfig, Velocity, augment_batch,
                          backward, default_stack, dense_apply, dihedral, forward, infer,
                          init_net, load_net, mse_loss, parse_stack, save_net, sgd_step,
                          train_regressor, write_curve)
from n4fields.cnn import layers as L
from n4fields.cnn.training import smoothed
from n4fields.errors import ConfigError, ShapeError, StateError, TrainingError
from n4fields.imagecore import PatchGeometry, extract_patch


def naive_conv(x, w, b, stride=1):
    """Valid cross-correlation by explicit loops."""
    bsz, c, h, wd = x.shape
    k = w.shape[2]
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((bsz, w.shape[0], ho, wo))
    for n in range(bsz):
        for o in range(w.shape[0]):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for a in range(k):
                            for q in range(k):
                                acc += w[o, ci, a, q] * x[n, ci, i * stride + a, j * stride + q]
                    out[n, o, i, j] = acc
    return out


# -- init and forward ---------------------------------------------------------

def test_default_stack_outputs_16():
    net = init_net(default_stack(16), (3, 34, 34), seed=0)
    out = forward(net, np.zeros((3, 34, 34)))
    assert out.shape == (1, 16) and net.output_dim == 16


def test_init_deterministic_and_bias_zero():
    a = init_net(default_stack(), (3, 34, 34), seed=5)
    b = init_net(default_stack(), (3, 34, 34), seed=5)
    for pa, pb in zip(a.params, b.params):
        if pa is not None:
            assert pa["W"].tobytes() == pb["W"].tobytes()
            assert not pa["b"].any()


def test_init_std_of_large_layer():
    net = init_net(parse_stack("fc100"), (10, 10, 10), seed=3)
    w = net.params[0]["W"]
    assert w.size == 100_000
    assert abs(w.std() / 1e-2 - 1) < 0.05


def test_fanin_scheme_keeps_output_layer_small():
    net = init_net(parse_stack("fc400,relu,fc200"), (4, 10, 10), seed=1, scheme="fanin")
    assert abs(net.params[0]["W"].std() / np.sqrt(2 / 400) - 1) < 0.05
    assert abs(net.params[2]["W"].std() / 1e-2 - 1) < 0.05
    with pytest.raises(ConfigError):
        init_net(parse_stack("fc4"), (1, 4, 4), scheme="xavier")


@pytest.mark.parametrize("stack", ["conv7x4", "conv3x4,pool2,conv3x2,pool2"])
def test_inconsistent_stack_rejected(stack):
    with pytest.raises(ConfigError):
        init_net(parse_stack(stack), (1, 6, 6))


def test_identity_convolution():
    net = init_net(parse_stack("conv1x3"), (3, 5, 5), dtype=np.float64)
    net.params[0]["W"][:] = np.eye(3)[:, :, None, None]
    x = np.random.default_rng(0).random((2, 3, 5, 5))
    npt.assert_array_equal(forward(net, x), x.reshape(2, -1))


def test_zero_parameters_give_zero_code(rng):
    net = init_net(default_stack(), (3, 34, 34), sigma=0.0)
    npt.assert_array_equal(forward(net, rng.random((4, 3, 34, 34))), 0.0)


def test_two_conv_net_matches_naive_oracle(rng):
    net = init_net(parse_stack("conv3x4,relu,conv2x3s2"), (2, 9, 9), seed=2, sigma=0.5,
                   dtype=np.float64)
    net.params[0]["b"][:] = rng.normal(size=4)
    net.params[2]["b"][:] = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 9, 9))
    h = np.maximum(naive_conv(x, net.params[0]["W"], net.params[0]["b"]), 0)
    ref = naive_conv(h, net.params[2]["W"], net.params[2]["b"], stride=2)
    assert np.max(np.abs(forward(net, x) - ref.reshape(2, -1))) <= 1e-6


def test_forward_shape_errors():
    net = init_net(default_stack(), (3, 34, 34))
    with pytest.raises(ShapeError):
        forward(net, np.zeros((1, 3, 33, 34)))
    with pytest.raises(StateError):
        forward(net, np.zeros((1, 3, 34, 34)), train=True)


# -- backward -----------------------------------------------------------------

def _random_small_net(seed):
    r = np.random.default_rng(seed)
    while True:
        net, x, t = _draw_small_net(r, seed)
        n_weight_layers = sum(p is not None for p in net.params)
        if net.n_params() <= 500 and n_weight_layers <= 3:
            return net, x, t


def _draw_small_net(r, seed):
    c, m = int(r.integers(1, 3)), int(r.integers(6, 10))
    k1 = int(r.integers(2, 4))
    toks = [f"conv{k1}x{int(r.integers(2, 4))}", "relu"]
    side = m - k1 + 1
    if side >= 4 and r.random() < 0.6:
        toks.append("pool2")
        side //= 2
    if side >= 3 and r.random() < 0.5:
        toks += ["conv2x2", "relu"]
    else:
        toks += [f"fc{int(r.integers(3, 6))}", "relu"]
        if r.random() < 0.5:
            toks.append("dropout0.5")
    toks.append(f"fc{int(r.integers(2, 4))}")
    stack = parse_stack(",".join(toks))
    net = init_net(stack, (c, m, m), seed=seed, sigma=0.4, dtype=np.float64)
    for p in net.params:
        if p is not None:
            p["b"][:] = r.normal(scale=0.1, size=p["b"].shape)
    x = r.normal(size=(3, c, m, m))
    t = r.normal(size=(3, net.output_dim))
    return net, x, t


def _pattern(cache):
    """Active units and pool winners: the linear region of the network."""
    parts = []
    for e in cache.entries:
        if isinstance(e, np.ndarray) and e.dtype == bool:
            parts.append(e.tobytes())
        elif isinstance(e, tuple) and np.asarray(e[0]).dtype.kind == "i":
            parts.append(np.asarray(e[0]).tobytes())
    return parts


def gradient_check(seed, h=1e-3):
    """Worst relative error of analytic vs central-difference gradients."""
    net, x, t = _random_small_net(seed)

    def run():
        out, cache = forward(net, x, train=True, rng=np.random.default_rng(99))
        return mse_loss(out, t)[0], cache

    _, cache = run()
    _, dout = mse_loss(forward(net, x, train=True, rng=np.random.default_rng(99))[0], t)
    grads = backward(net, cache, dout)
    base = _pattern(cache)
    checked, worst = 0, 0.0
    for k, p in enumerate(net.params):
        if p is None:
            continue
        for key, arr in p.items():
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                lp, cp = run()
                arr[idx] = old - h
                lm, cm = run()
                arr[idx] = old
                if _pattern(cp) != base or _pattern(cm) != base:
                    continue  # step crosses a ReLU or pooling kink
                fd = (lp - lm) / (2 * h)
                an = grads[k][key][idx]
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
                checked += 1
    return net, checked, worst


@pytest.mark.parametrize("seed", range(24))
def test_gradients_match_central_differences(seed):
    net, checked, worst = gradient_check(seed)
    assert checked >= 0.5 * net.n_params()
    assert worst <= 1e-4


def test_linear_net_gradient_is_least_squares_gradient(rng):
    net = init_net(parse_stack("fc4"), (1, 3, 3), seed=1, sigma=1.0, dtype=np.float64)
    x = rng.normal(size=(7, 1, 3, 3))
    t = rng.normal(size=(7, 4))
    out, cache = forward(net, x, train=True, rng=rng)
    _, dout = mse_loss(out, t)
    g = backward(net, cache, dout)[0]
    xf = x.reshape(7, -1)
    w, b = net.params[0]["W"], net.params[0]["b"]
    resid = xf @ w.T + b - t
    npt.assert_allclose(g["W"], resid.T @ xf / 7, atol=1e-12)
    npt.assert_allclose(g["b"], resid.sum(axis=0) / 7, atol=1e-12)


def test_zero_output_gradient_gives_zero_gradients(rng):
    net = init_net(default_stack(), (3, 34, 34), seed=0, sigma=0.1)
    out, cache = forward(net, rng.random((2, 3, 34, 34)), train=True, rng=rng)
    for g in backward(net, cache, np.zeros_like(out)):
        if g is not None:
            assert not g["W"].any() and not g["b"].any()


def test_stale_or_missing_cache(rng):
    net = init_net(parse_stack("fc3"), (1, 2, 2), sigma=0.1)
    out, cache = forward(net, rng.random((2, 1, 2, 2)), train=True, rng=rng)
    with pytest.raises(StateError):
        backward(net, None, out)
    grads = backward(net, cache, out)
    sgd_step(net, grads, Velocity.zeros_like(net), TrainConfig())
    with pytest.raises(StateError):
        backward(net, cache, out)


def test_mse_loss_definition():
    loss, grad = mse_loss(np.array([[1.0, 2.0], [0.0, 0.0]]), np.array([[0.0, 0.0], [0.0, 1.0]]))
    assert loss == pytest.approx(0.5 * (1 + 4 + 1) / 2)
    npt.assert_allclose(grad, [[0.5, 1.0], [0.0, -0.5]])


# -- dropout ------------------------------------------------------------------

@given(st.floats(0.1, 0.9), st.integers(0, 10_000))
def test_dropout_expectation_on_linear_net(rate, seed):
    r = np.random.default_rng(seed)
    net = init_net(parse_stack(f"fc4,dropout{rate},fc2"), (1, 2, 2), seed=seed, sigma=1.0,
                   dtype=np.float64)
    x = r.normal(size=(1, 1, 2, 2))
    hidden, _ = L.fc_forward(net.params[0], x)
    expect = np.zeros((1, 2))
    for bits in itertools.product((0, 1), repeat=4):
        keep = np.array(bits, dtype=float)
        prob = np.prod(np.where(keep > 0, 1 - rate, rate))
        out, _ = L.fc_forward(net.params[2], hidden * keep / (1 - rate))
        expect += prob * out
    npt.assert_allclose(infer(net, x), expect, atol=1e-10)
    # train mode draws one of the enumerated masks
    out, cache = forward(net, x, train=True, rng=r)
    keep = cache.entries[1]
    assert set(np.round(keep.ravel() * (1 - rate), 12)) <= {0.0, 1.0}


# -- sgd ----------------------------------------------------------------------

def _net_and_grad(rng):
    net = init_net(parse_stack("conv2x3,relu,fc2"), (1, 4, 4), seed=0, sigma=0.1,
                   dtype=np.float64)
    grads = [None if p is None else {k: rng.normal(size=v.shape) for k, v in p.items()}
             for p in net.params]
    return net, grads


def test_momentum_zero_is_gradient_descent(rng):
    net, grads = _net_and_grad(rng)
    before = net.copy()
    cfg = TrainConfig(momentum=0.0, learning_rate=0.05, max_first_layer_norm=None)
    sgd_step(net, grads, Velocity.zeros_like(net), cfg)
    for p0, p1, g in zip(before.params, net.params, grads):
        if p0 is not None:
            for key in p0:
                npt.assert_allclose(p1[key], p0[key] - 0.05 * g[key], atol=1e-15)


def test_two_momentum_steps_follow_scalar_recurrence(rng):
    net, grads = _net_and_grad(rng)
    before = net.copy()
    lr, mu = 0.1, 0.9
    cfg = TrainConfig(momentum=mu, learning_rate=lr, max_first_layer_norm=None)
    vel = Velocity.zeros_like(net)
    theta, v = 0.0, 0.0
    for _ in range(2):
        sgd_step(net, grads, vel, cfg)
        v = mu * v - lr * 1.0
        theta += v
    assert theta == pytest.approx(-lr * (1 + (1 + mu)))
    for p0, p1, g in zip(before.params, net.params, grads):
        if p0 is not None:
            for key in p0:
                npt.assert_allclose(p1[key] - p0[key], theta * g[key], atol=1e-14)


def test_oversized_filter_projected_onto_bound():
    net = init_net(parse_stack("conv2x2,fc1"), (1, 3, 3), sigma=0.0, dtype=np.float64)
    net.params[0]["W"][0] = 1.0  # norm 2 = 2 * bound
    net.params[0]["W"][1] = 0.25
    zero = [None if p is None else {k: np.zeros_like(v) for k, v in p.items()}
            for p in net.params]
    sgd_step(net, zero, Velocity.zeros_like(net), TrainConfig(max_first_layer_norm=1.0))
    w = net.params[0]["W"]
    assert np.linalg.norm(w[0]) == pytest.approx(1.0, abs=1e-15)
    npt.assert_array_equal(w[1], 0.25)


@given(st.floats(0.1, 3.0), st.integers(0, 1000))
def test_first_layer_norm_bounded_after_step(bound, seed):
    r = np.random.default_rng(seed)
    net, grads = _net_and_grad(r)
    grads = [None if g is None else {k: 20 * v for k, v in g.items()} for g in grads]
    sgd_step(net, grads, Velocity.zeros_like(net), TrainConfig(max_first_layer_norm=bound))
    w = net.params[0]["W"]
    assert np.linalg.norm(w.reshape(len(w), -1), axis=1).max() <= bound + 1e-9


def test_non_finite_gradient_rejected(rng):
    net, grads = _net_and_grad(rng)
    grads[0]["W"][0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError):
        sgd_step(net, grads, Velocity.zeros_like(net), TrainConfig())


# -- augmentation ---------------------------------------------------------------

def test_quarter_turn_matches_index_oracle():
    n = 5
    x = np.arange(n * n, dtype=float).reshape(n, n)
    got = dihedral(x, 1, False)
    for i in range(n):
        for j in range(n):
            assert got[i, j] == x[j, n - 1 - i]
    flipped = dihedral(x, 0, True)
    assert all(flipped[i, j] == x[i, n - 1 - j] for i in range(n) for j in range(n))


def test_half_turn_twice_is_identity(rng):
    x = rng.random((2, 3, 6, 6))
    npt.assert_array_equal(dihedral(dihedral(x, 2, False), 2, False), x)


def test_augment_flags_off_is_identity(rng):
    x, t = rng.random((4, 3, 6, 6)), rng.random((4, 2, 2))
    ax, at = augment_batch(x, t, rng, rotate=False, flip=False)
    npt.assert_array_equal(ax, x)
    npt.assert_array_equal(at, t)


def test_augment_applies_same_transform_to_both_sides(rng):
    b = 200
    x = np.broadcast_to(np.arange(36.0).reshape(1, 1, 6, 6), (b, 2, 6, 6)).copy()
    t = np.broadcast_to(np.arange(16.0).reshape(1, 4, 4), (b, 4, 4)).copy()
    ax, at = augment_batch(x, t, rng)
    seen = set()
    for s in range(b):
        hits = [(k, f) for k in range(4) for f in (False, True)
                if np.array_equal(ax[s], dihedral(x[s], k, f))]
        assert len(hits) == 1
        k, f = hits[0]
        npt.assert_array_equal(at[s], dihedral(t[s], k, f))
        seen.add(hits[0])
    assert len(seen) == 8
    with pytest.raises(ShapeError):
        augment_batch(np.zeros((1, 1, 4, 5)), np.zeros((1, 2, 2)), rng)


# -- training -------------------------------------------------------------------

def test_linear_toy_regression_converges(rng):
    x = rng.normal(size=(256, 1, 4, 4))
    a = rng.normal(size=(16, 3)) * 0.3
    t = x.reshape(256, -1) @ a
    lsq, *_ = np.linalg.lstsq(x.reshape(256, -1), t, rcond=None)
    assert np.sum((x.reshape(256, -1) @ lsq - t) ** 2) < 1e-18  # realisable target
    net = init_net(parse_stack("fc8,fc3"), (1, 4, 4), seed=0, sigma=0.1, dtype=np.float64)
    cfg = TrainConfig(batch_size=32, learning_rate=0.05, epochs=200, validation_fraction=0.0,
                      max_first_layer_norm=10.0)
    _, curve = train_regressor(net, ArrayPatchData(x, t), cfg)
    assert len(curve) == 200 and min(r.train_loss for r in curve) < 1e-3


def test_zero_variance_targets_fit_constant(rng):
    x = rng.normal(size=(64, 1, 4, 4))
    net = init_net(parse_stack("fc8,relu,fc3"), (1, 4, 4), seed=0, sigma=0.1, dtype=np.float64)
    cfg = TrainConfig(batch_size=16, learning_rate=0.1, epochs=300, validation_fraction=0.0)
    best, curve = train_regressor(net, ArrayPatchData(x, np.full((64, 3), 0.3)), cfg)
    assert curve[-1].train_loss < 1e-6
    assert curve[-1].train_loss < curve[0].train_loss * 1e-3
    npt.assert_allclose(infer(best, x), 0.3, atol=1e-2)


def test_training_deterministic_and_returns_best(rng):
    x = rng.normal(size=(100, 1, 5, 5))
    t = rng.normal(size=(100, 2))
    cfg = TrainConfig(batch_size=10, learning_rate=0.01, epochs=4, seed=7)
    runs = []
    for _ in range(2):
        net = init_net(parse_stack("conv3x2,relu,fc4,relu,dropout0.5,fc2"), (1, 5, 5), seed=1,
                       sigma=0.3)
        runs.append(train_regressor(net, ArrayPatchData(x, t), cfg))
    (a, ca), (b, cb) = runs
    assert ca == cb
    best = min(ca, key=lambda r: r.val_loss)
    val = np.sort(np.random.default_rng(7).permutation(100)[:10])
    assert mse_loss(infer(a, x[val]), t[val])[0] == pytest.approx(best.val_loss, rel=1e-5)
    for pa, pb in zip(a.params, b.params):
        if pa is not None:
            assert pa["W"].tobytes() == pb["W"].tobytes()


def test_plateau_anneals_learning_rate(rng):
    x = rng.normal(size=(40, 1, 3, 3))
    net = init_net(parse_stack("fc2"), (1, 3, 3), sigma=0.0)
    cfg = TrainConfig(learning_rate=1e-3, epochs=7, plateau_epochs=2, batch_size=8)
    _, curve = train_regressor(net, ArrayPatchData(x, np.zeros((40, 2))), cfg)
    # zero loss never improves after epoch 1, so annealing fires every 2 epochs
    expect = [1e-3] * 3 + [1e-4] * 2 + [1e-5] * 2  # floored at min_learning_rate
    assert [r.learning_rate for r in curve] == pytest.approx(expect)


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning", "ignore:invalid:RuntimeWarning")
def test_divergence_aborts_with_checkpoint(rng):
    x = rng.normal(size=(64, 1, 3, 3)) * 1e3
    net = init_net(parse_stack("fc8,fc2"), (1, 3, 3), sigma=1.0, dtype=np.float64)
    cfg = TrainConfig(learning_rate=10.0, epochs=50, max_first_layer_norm=None)
    with pytest.raises(TrainingError) as info:
        train_regressor(net, ArrayPatchData(x, rng.normal(size=(64, 2))), cfg)
    assert info.value.checkpoint is not None


def test_curve_csv(tmp_path):
    rows = [CurveRow(1, 0.5, 0.25, 0.1), CurveRow(2, 0.125, 0.2, 0.01)]
    write_curve(rows, tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "epoch,trainLoss,valLoss,learningRate"
    assert lines[2] == "2,0.125,0.2,0.01"


def test_smoothing_window():
    npt.assert_allclose(smoothed(np.arange(12.0), 10), [4.5, 5.5, 6.5])
    npt.assert_allclose(smoothed([3.0, 1.0], 10), [2.0])


# -- dense application ------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_dense_apply_matches_sliding_window(rng, dtype):
    net = init_net(default_stack(16), (3, 34, 34), seed=1, sigma=0.05, dtype=dtype)
    img = rng.random((3, 50, 50))
    dense = dense_apply(net, img)
    g = PatchGeometry(34, 16)
    patches = np.stack([extract_patch(img, (i, j), g).pixels
                        for i in range(50) for j in range(50)])
    ref = infer(net, patches).T.reshape(16, 50, 50)
    tol = 1e-5 if dtype == np.float64 else 1e-5 * max(1.0, np.abs(ref).max())
    assert dense.shape == (16, 50, 50)
    assert np.max(np.abs(dense - ref)) <= tol


def test_dense_apply_strided_and_odd_input(rng):
    net = init_net(parse_stack("conv3x4s2,relu,conv2x3,relu,pool2,fc5"), (2, 11, 11), seed=4,
                   sigma=0.3, dtype=np.float64)
    img = rng.random((2, 23, 19))
    g = PatchGeometry(11, 1)
    ref = infer(net, np.stack([extract_patch(img, (i, j), g).pixels
                               for i in range(23) for j in range(19)]))
    npt.assert_allclose(dense_apply(net, img), ref.T.reshape(5, 23, 19), atol=1e-10)


def test_dense_apply_constant_image():
    net = init_net(default_stack(16), (3, 34, 34), seed=2, sigma=0.05, dtype=np.float64)
    out = dense_apply(net, np.full((3, 40, 44), 0.7))
    npt.assert_allclose(out, np.broadcast_to(out[:, :1, :1], out.shape), atol=1e-12)


def test_dense_apply_errors():
    net = init_net(default_stack(16), (3, 34, 34))
    with pytest.raises(ShapeError):
        dense_apply(net, np.zeros((3, 16, 60)))
    with pytest.raises(ShapeError):
        dense_apply(net, np.zeros((1, 60, 60)))


# -- persistence ------------------------------------------------------------------

def test_net_round_trip_bit_identical(tmp_path, rng):
    net = init_net(default_stack(16), (3, 34, 34), seed=9, sigma=0.05)
    save_net(net, tmp_path / "n.n4nn")
    back = load_net(tmp_path / "n.n4nn")
    assert back.layers == net.layers and back.input_shape == net.input_shape
    for pa, pb in zip(net.params, back.params):
        if pa is not None:
            assert pa["W"].tobytes() == pb["W"].tobytes() and pa["b"].tobytes() == pb["b"].tobytes()
    x = rng.random((2, 3, 34, 34))
    assert infer(net, x).tobytes() == infer(back, x).tobytes()
    assert (tmp_path / "n.n4nn").read_bytes()[:4] == b"N4NN"
