import math

import numpy as np
import pytest

import crowdnav.neuralnet as nn
from crowdnav.neuralnet import (
    DivergenceError,
    LossPoint,
    NetworkParams,
    ParamsMagicError,
    ParamsShapeError,
    ParamsTruncatedError,
    ParamsVersionError,
    Prediction,
    ShapeError,
    TrainConfig,
    TrainData,
    batch_schedule,
    export_loss_history,
    forward,
    forward_batch,
    grad_check,
    init_params,
    load_params,
    mse,
    params_equal,
    save_params,
    train,
)


def zeroed(params: NetworkParams) -> NetworkParams:
    p = params.copy()
    for a in p.arrays():
        a[:] = 0
    return p


def reduced_params(seed, input_side=8, conv_filters=(2, 3), dense_units=(6, 2)):
    p = init_params(
        seed,
        conv_filters=conv_filters,
        kernel_size=3,
        dense_units=dense_units,
        input_side=input_side,
        dtype=np.float64,
    )
    # move biases off the ReLU kink so finite differences are well-posed
    rng = np.random.default_rng(seed + 1000)
    for b in p.conv_b + p.dense_b:
        b += rng.uniform(0.01, 0.2, b.shape)
    return p


# --- independent oracle: naive scalar convolution ------------------------------

def naive_conv(x, w, b):
    """Direct stride-2 same convolution with explicit loops."""
    bsz, c, h, wd = x.shape
    f, _, k, _ = w.shape
    p = k // 2
    oh, ow = -(-h // 2), -(-wd // 2)
    y = np.zeros((bsz, f, oh, ow))
    for n in range(bsz):
        for fo in range(f):
            for i in range(oh):
                for j in range(ow):
                    acc = b[fo]
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                src_i = 2 * i + ki - p
                                src_j = 2 * j + kj - p
                                if 0 <= src_i < h and 0 <= src_j < wd:
                                    acc += x[n, ci, src_i, src_j] * w[fo, ci, ki, kj]
                    y[n, fo, i, j] = acc
    return y


def naive_forward(params, map_in, extra):
    x = np.asarray(map_in, dtype=np.float64)[None, None]
    for w, b in zip(params.conv_w, params.conv_b):
        x = np.maximum(naive_conv(x, w, b), 0)
    # the network flattens row, column, channel (channels-last order)
    flat = x[0].transpose(1, 2, 0).reshape(-1)
    v = np.concatenate([flat, np.asarray(extra, dtype=np.float64)])
    n = len(params.dense_w)
    for i, (w, b) in enumerate(zip(params.dense_w, params.dense_b)):
        v = v @ w + b
        if i < n - 1:
            v = np.maximum(v, 0)
    return v


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(0)
    for h, wd, c, f, k in ((4, 4, 1, 1, 3), (6, 5, 2, 3, 3), (8, 8, 3, 2, 5)):
        x = rng.normal(size=(2, c, h, wd))
        w = rng.normal(size=(f, c, k, k))
        b = rng.normal(size=f)
        y, _ = nn.conv2d_forward(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), w, b)
        assert np.allclose(y.transpose(0, 3, 1, 2), naive_conv(x, w, b), atol=1e-12)


def test_tiny_network_matches_hand_unrolled():
    # 1-filter, 2-layer reduced network on a 4x4 input
    rng = np.random.default_rng(1)
    params = init_params(
        5, conv_filters=(1,), kernel_size=3, dense_units=(2,),
        input_side=4, dtype=np.float64,
    )
    map_in = rng.random((4, 4))
    extra = (0.6, 0.8)
    got = forward(params, map_in, extra)
    want = naive_forward(params, map_in, extra)
    assert got.speed == pytest.approx(want[0], rel=1e-12)
    assert got.rotation == pytest.approx(want[1], rel=1e-12)


def test_deeper_reduced_network_matches_naive():
    rng = np.random.default_rng(2)
    params = reduced_params(3)
    map_in = rng.random((8, 8))
    extra = (0.0, 1.0)
    got = forward(params, map_in, extra)
    want = naive_forward(params, map_in, extra)
    assert np.allclose((got.speed, got.rotation), want, rtol=1e-12)


# --- forward basics -------------------------------------------------------------

def test_zero_network_outputs_zero():
    p = zeroed(init_params(0))
    out = forward(p, np.zeros((64, 64)), (0.0, 1.0))
    assert out == Prediction(0.0, 0.0)


def test_dense3_bias_passthrough():
    p = zeroed(init_params(0))
    p.dense_b[-1][:] = (7.5, -2.25)
    rng = np.random.default_rng(3)
    out = forward(p, rng.random((64, 64)), (0.6, 0.8))
    assert out == Prediction(7.5, -2.25)


def test_forward_deterministic():
    p = init_params(4)
    rng = np.random.default_rng(5)
    m = rng.random((64, 64))
    a = forward(p, m, (0.6, 0.8))
    b = forward(p, m, (0.6, 0.8))
    assert a == b


def test_forward_shape_error_names_layer():
    p = init_params(0)
    with pytest.raises(ShapeError, match="dense1"):
        forward(p, np.zeros((32, 32)), (0.0, 1.0))


def test_output_layer_is_linear():
    p = init_params(6)
    rng = np.random.default_rng(7)
    m = rng.random((64, 64)).astype(np.float32)
    base = forward(p, m, (0.6, 0.8))
    scaled = p.copy()
    scaled.dense_w[-1][:] *= 3.0
    scaled.dense_b[-1][:] *= 3.0
    got = forward(scaled, m, (0.6, 0.8))
    assert got.speed == pytest.approx(3.0 * base.speed, rel=1e-4)
    assert got.rotation == pytest.approx(3.0 * base.rotation, rel=1e-4)


# --- mse -----------------------------------------------------------------------

def test_mse_zero_when_equal():
    preds = [Prediction(1.0, 2.0), Prediction(-3.0, 0.5)]
    assert mse(preds, preds) == 0.0


def test_mse_hand_value():
    pred = [(1.0, 2.0), (3.0, 0.0)]
    target = [(0.0, 0.0), (0.0, 0.0)]
    assert mse(pred, target) == pytest.approx(3.5)


def test_mse_single_scalar_residual():
    assert mse([5.0], [2.0]) == pytest.approx(9.0)


def test_mse_length_mismatch():
    with pytest.raises(ValueError):
        mse([Prediction(0, 0)], [])


# --- gradient check ---------------------------------------------------------------

def test_grad_check_random_reduced_networks():
    rng = np.random.default_rng(10)
    for seed in range(3):
        params = reduced_params(seed)
        m = rng.random((8, 8))
        extra = (math.sin(0.3), math.cos(0.3))
        target = rng.normal(size=2)
        assert grad_check(params, m, extra, target, eps=1e-5) < 1e-4


def test_grad_check_zero_input_zero_target():
    params = reduced_params(1)
    err = grad_check(params, np.zeros((8, 8)), (0.0, 0.0), (0.0, 0.0), eps=1e-5)
    assert err < 1e-4


def test_grad_check_detects_sign_flip(monkeypatch):
    orig = nn.conv2d_backward

    def corrupted(dy, cache, need_dx=True):
        dx, dw, db = orig(dy, cache, need_dx)
        return dx, -dw, db

    monkeypatch.setattr(nn, "conv2d_backward", corrupted)
    rng = np.random.default_rng(11)
    params = reduced_params(2)
    err = grad_check(params, rng.random((8, 8)), (0.6, 0.8), rng.normal(size=2))
    assert err > 1e-1


def test_grad_check_detects_dense_sign_flip(monkeypatch):
    orig = nn.dense_backward

    def corrupted(dy, cache, w):
        dx, dw, db = orig(dy, cache, w)
        return dx, -dw, db

    monkeypatch.setattr(nn, "dense_backward", corrupted)
    rng = np.random.default_rng(12)
    params = reduced_params(3)
    err = grad_check(params, rng.random((8, 8)), (0.6, 0.8), rng.normal(size=2))
    assert err > 1e-1


# --- training ---------------------------------------------------------------------

def constant_data(n, side=16, speed=20.0, rotation=-5.0):
    maps = np.zeros((n, side, side))
    maps[:, 3:6, 3:6] = 1.0
    extras = np.tile([0.0, 1.0], (n, 1))
    targets = np.tile([speed, rotation], (n, 1))
    return TrainData(maps=maps, extras=extras, targets=targets)


def small_params(seed=0, side=16):
    return init_params(
        seed, conv_filters=(4, 8), kernel_size=3, dense_units=(16, 2),
        input_side=side, dtype=np.float64,
    )


def test_train_constant_targets_reduces_loss():
    data = constant_data(8)
    cfg = TrainConfig(steps=500, batch_size=8, lr0=1e-3, decay=0.0, seed=0)
    _, history = train(small_params(), data, cfg)
    assert history[-1].loss < history[0].loss


def test_train_linear_synthetic_task():
    # targets are a fixed linear map of 4 occupied-cell indicator features
    rng = np.random.default_rng(0)
    n, side = 64, 16
    cells = [(2, 2), (5, 11), (9, 4), (13, 13)]
    a = np.array([[12.0, -7.0, 4.0, 9.0], [3.0, 8.0, -5.0, -2.0]])
    maps = np.zeros((n, side, side))
    feats = (rng.random((n, 4)) < 0.5).astype(float)
    for i in range(n):
        for f, (r, c) in zip(feats[i], cells):
            if f:
                maps[i, r, c] = 1.0
    targets = feats @ a.T
    extras = np.tile([0.0, 1.0], (n, 1))
    data = TrainData(maps=maps, extras=extras, targets=targets)
    cfg = TrainConfig(steps=2000, batch_size=16, lr0=3e-3, decay=0.0, seed=1)
    _, history = train(small_params(seed=2), data, cfg)
    assert history[-1].loss <= 0.2 * history[0].loss


def test_train_divergence_reported():
    data = constant_data(4)
    cfg = TrainConfig(steps=50, batch_size=4, lr0=1e10, decay=0.0, seed=0)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergenceError):
        train(small_params(), data, cfg)


def test_train_deterministic_histories():
    data = constant_data(6)
    cfg = TrainConfig(steps=60, batch_size=4, lr0=1e-3, decay=1e-4, seed=5)
    p1, h1 = train(small_params(seed=1), data, cfg)
    p2, h2 = train(small_params(seed=1), data, cfg)
    assert h1 == h2
    assert params_equal(p1, p2)


def test_train_single_record_monotone_after_first_step():
    for seed in range(5):
        data = constant_data(1)
        cfg = TrainConfig(steps=120, batch_size=1, lr0=1e-3, decay=0.0, seed=seed)
        _, history = train(small_params(seed=seed), data, cfg)
        losses = [pt.loss for pt in history[1:]]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_train_does_not_mutate_input_params():
    data = constant_data(4)
    p = small_params(seed=3)
    snapshot = p.copy()
    train(p, data, TrainConfig(steps=10, batch_size=4, lr0=1e-3, decay=0.0, seed=0))
    assert params_equal(p, snapshot)


def test_train_lr_schedule_inverse_time():
    data = constant_data(4)
    cfg = TrainConfig(steps=5, batch_size=4, lr0=1e-3, decay=0.5, seed=0)
    _, history = train(small_params(), data, cfg)
    for t, pt in enumerate(history):
        assert pt.lr == pytest.approx(1e-3 / (1 + 0.5 * t))


def test_train_permuted_records_with_composed_schedule():
    # permuting the records while remapping the index schedule must not
    # change the result: training depends only on the record sequence
    data = constant_data(8)
    data.targets += np.arange(8)[:, None]  # make records distinct
    cfg = TrainConfig(steps=40, batch_size=4, lr0=1e-3, decay=0.0, seed=7)
    sched = batch_schedule(8, 4, 40, seed=7)
    p1, _ = train(small_params(seed=4), data, cfg, schedule=sched)

    perm = np.random.default_rng(99).permutation(8)
    inv = np.argsort(perm)
    permuted = TrainData(
        maps=data.maps[perm], extras=data.extras[perm], targets=data.targets[perm]
    )
    remapped = [inv[idx] for idx in sched]
    p2, _ = train(small_params(seed=4), permuted, cfg, schedule=remapped)
    assert params_equal(p1, p2)


def test_on_step_callback_sees_every_step():
    seen = []
    data = constant_data(4)
    cfg = TrainConfig(steps=7, batch_size=4, lr0=1e-3, decay=0.0, seed=0)
    train(small_params(), data, cfg, on_step=lambda t, lr, loss: seen.append(t))
    assert seen == list(range(7))


def test_export_loss_history(tmp_path):
    history = [LossPoint(0, 1e-3, 5.0), LossPoint(1, 9e-4, 4.5)]
    p = tmp_path / "loss.csv"
    export_loss_history(history, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "step,lr,loss"
    assert lines[1].startswith("0,") and lines[2].startswith("1,")


# --- serialization -----------------------------------------------------------------

def test_params_round_trip(tmp_path):
    p = init_params(8)  # float32: round trip is bit-exact
    path = tmp_path / "net.params"
    save_params(p, path)
    back = load_params(path)
    assert params_equal(p, back)


def test_params_round_trip_reduced(tmp_path):
    p = init_params(1, conv_filters=(2,), kernel_size=3, dense_units=(4, 2),
                    input_side=8, dtype=np.float32)
    path = tmp_path / "net.params"
    save_params(p, path)
    assert params_equal(p, load_params(path))


def test_params_truncated(tmp_path):
    p = init_params(9)
    path = tmp_path / "net.params"
    save_params(p, path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(ParamsTruncatedError):
        load_params(path)


def test_params_bad_magic(tmp_path):
    path = tmp_path / "net.params"
    path.write_bytes(b"WRONGMAG" + b"\x00" * 20)
    with pytest.raises(ParamsMagicError):
        load_params(path)


def test_params_bad_version(tmp_path):
    p = init_params(0, conv_filters=(1,), kernel_size=3, dense_units=(2,), input_side=4)
    path = tmp_path / "net.params"
    save_params(p, path)
    blob = bytearray(path.read_bytes())
    blob[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(ParamsVersionError):
        load_params(path)


def test_params_shape_error(tmp_path):
    path = tmp_path / "net.params"
    import struct
    with open(path, "wb") as f:
        f.write(b"CRWDNN01")
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<II", 3, 2))  # rank 3 is not a legal array
        f.write(b"\x00" * 8)
    with pytest.raises(ParamsShapeError):
        load_params(path)
