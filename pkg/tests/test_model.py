import math

import numpy as np
import pytest

from amt.model import (AdamConfig, AdamState, Architecture, CheckpointError, TrainConfig,
                       adam_step, backward, bce_loss, forward, init_model, load_model,
                       loss_and_grads, predict, save_model, train)

from conftest import finite_difference_error, random_small_instance, song_frames

LN2 = math.log(2)


def test_architecture_shapes():
    arch = Architecture()
    assert arch.feature_lengths() == [216, 64, 20]
    assert arch.flat_size == 1280
    shapes = dict(arch.param_shapes())
    assert shapes["conv0.w"] == (32, 1, 25)
    assert shapes["conv1.w"] == (64, 32, 5)
    assert shapes["dense0.w"] == (1280, 256)
    assert shapes["dense1.w"] == (256, 72)
    with pytest.raises(ValueError):
        Architecture(n_input=20)


def test_init_deterministic_and_bounded():
    a, b = init_model(seed=3), init_model(seed=3)
    for name in a.tensors:
        assert np.array_equal(a[name], b[name])
    bounds = {"conv0.w": math.sqrt(6 / (25 + 32 * 25)), "conv1.w": math.sqrt(6 / (32 * 5 + 64 * 5)),
              "dense0.w": math.sqrt(6 / (1280 + 256)), "dense1.w": math.sqrt(6 / (256 + 72))}
    for name, t in a.tensors.items():
        if name.endswith(".b"):
            assert np.all(t == 0)
        else:
            assert np.all(np.abs(t) <= bounds[name] * (1 + 1e-6))
            assert np.abs(t).max() > 0.9 * bounds[name]


def _zero_model():
    params = init_model()
    for t in params.tensors.values():
        t[...] = 0
    return params


def test_forward_examples():
    x = np.random.default_rng(0).random((5, 216)).astype(np.float32)
    assert np.all(forward(_zero_model(), x) == 0.5)
    params = init_model()
    np.testing.assert_array_equal(forward(params, x), forward(params, x))
    huge = np.full((2, 216), 1e30, dtype=np.float32)
    for t in params.tensors.values():
        t *= 50
    p = forward(params, np.concatenate([x, huge]))
    assert p.shape == (7, 72) and np.all((p > 0) & (p < 1))
    with pytest.raises(ValueError):
        forward(params, np.zeros((2, 215)))


def test_train_mode_dropout_is_seeded():
    params = init_model()
    x = np.random.default_rng(0).random((8, 216)).astype(np.float32) * 0.01
    a = forward(params, x, train=True, rng=np.random.default_rng(5))
    b = forward(params, x, train=True, rng=np.random.default_rng(5))
    c = forward(params, x, train=True, rng=np.random.default_rng(6))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_bce_examples():
    y = (np.random.default_rng(0).random((4, 72)) < 0.2).astype(float)
    assert math.isclose(bce_loss(np.full((4, 72), 0.5), y), LN2, rel_tol=1e-12)
    assert bce_loss(y, y) <= 1e-6
    p = np.array([[0.9]])
    assert math.isclose(bce_loss(p, np.ones((1, 1))), 0.10536051565782628, rel_tol=1e-12)
    with pytest.raises(ValueError):
        bce_loss(np.full((2, 3), 0.5), np.zeros((3, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    params, x, y = random_small_instance(seed)
    assert finite_difference_error(params, x, y) < 1e-4


def test_dropped_units_get_zero_gradient():
    params, x, y = random_small_instance(0, batch=1)
    grads = backward(params, x, y, np.random.default_rng(11))
    keep = np.random.default_rng(11).random((1, 8)) >= 0.25
    dropped = ~keep[0]
    assert dropped.any()
    assert np.all(grads["dense1.w"][dropped] == 0)
    assert np.all(grads["dense0.w"][:, dropped] == 0)
    assert np.all(grads["dense0.b"][dropped] == 0)


def test_duplicated_batch_same_mean_gradient():
    params, x, y = random_small_instance(1)
    g1 = backward(params, x, y)
    g2 = backward(params, np.concatenate([x, x]), np.concatenate([y, y]))
    for name in g1:
        np.testing.assert_allclose(g1[name], g2[name], rtol=1e-10, atol=1e-15)


def test_adam_zero_gradient_leaves_params():
    params = init_model(seed=1)
    before = params.copy()
    state = AdamState.zeros_like(params)
    adam_step(params, {k: np.zeros_like(t) for k, t in params.tensors.items()}, state)
    for name in params.tensors:
        assert np.array_equal(params[name], before[name])
    assert state.step == 1


def test_adam_moments_decay():
    params = init_model(seed=1).astype(np.float64)
    state = AdamState.zeros_like(params)
    for t in state.m.values():
        t[...] = 1.0
    for t in state.v.values():
        t[...] = 1.0
    adam_step(params, {k: np.zeros_like(t) for k, t in params.tensors.items()}, state)
    assert np.all(state.m["dense1.b"] == 0.9)
    assert np.allclose(state.v["dense1.b"], 0.999)


def test_adam_first_step_is_lr_sign():
    params = init_model(seed=2).astype(np.float64)
    before = params.copy()
    rng = np.random.default_rng(0)
    grads = {k: rng.choice([-1.0, 1.0], t.shape) * rng.uniform(0.1, 10, t.shape)
             for k, t in params.tensors.items()}
    adam_step(params, grads, AdamState.zeros_like(params), AdamConfig(lr=1e-3))
    for name in params.tensors:
        np.testing.assert_allclose(params[name] - before[name], -1e-3 * np.sign(grads[name]),
                                   atol=1e-6)


def test_adam_decreases_convex_quadratic():
    params = init_model(seed=3).astype(np.float64)
    loss = lambda p: sum(float(np.sum(t ** 2)) for t in p.tensors.values())
    state = AdamState.zeros_like(params)
    for _ in range(3):
        before = loss(params)
        adam_step(params, {k: 2 * t for k, t in params.tensors.items()}, state, AdamConfig(lr=1e-4))
        assert loss(params) < before


def test_predict_threshold_rules():
    x = np.random.default_rng(0).random((6, 216)).astype(np.float32)
    zero = _zero_model()
    assert np.all(predict(zero, x, 0.5) == 0)
    assert np.all(predict(zero, x, 0.0) == 1)
    params = init_model()
    np.testing.assert_array_equal(predict(params, x), predict(params, x))


def _tiny_sets(n=96):
    rng = np.random.default_rng(0)
    x = rng.random((n, 216)).astype(np.float32) * 0.01
    y = np.zeros((n, 72), np.uint8)
    y[np.arange(n), rng.integers(0, 72, n)] = 1
    return (x, y), (x[:32], y[:32])


def test_train_single_epoch():
    tr, va = _tiny_sets()
    _, history = train(tr, va, TrainConfig(max_epochs=1, patience=0))
    assert len(history) == 1
    with pytest.raises(ValueError):
        train((tr[0][:0], tr[1][:0]), va)


def test_early_stopping_and_reproducibility():
    tr, va = _tiny_sets()
    cfg = TrainConfig(max_epochs=6, patience=2, seed=4)
    p1, h1 = train(tr, va, cfg)
    p2, h2 = train(tr, va, cfg)
    strip = lambda h: [(r.epoch, r.loss, r.train_acc, r.val_acc) for r in h.epochs]
    assert strip(h1) == strip(h2) and h1.initial_loss == h2.initial_loss
    for name in p1.tensors:
        assert np.array_equal(p1[name], p2[name])
    accs = [r.val_acc for r in h1.epochs]
    assert h1.best_epoch == int(np.argmax(accs)) + 1


def test_single_note_tones_are_learned(kernel_bank):
    # 12.5 s of single notes = 200 frames
    x_tr, y_tr = song_frames(kernel_bank, 100, 12.5, chords=())
    x_va, y_va = song_frames(kernel_bank, 101, 12.5, chords=())
    assert len(x_tr) == 200
    params, history = train((x_tr, y_tr), (x_va, y_va), TrainConfig(max_epochs=70, patience=70))
    assert abs(history.initial_loss - math.log(2)) < 0.15
    assert max(r.train_acc for r in history.epochs) >= 0.95


def test_checkpoint_round_trip(tmp_path):
    params = init_model(seed=9)
    state = AdamState.zeros_like(params)
    grads = {k: np.ones_like(t) for k, t in params.tensors.items()}
    adam_step(params, grads, state)
    save_model(params, tmp_path / "m.amtm", state)
    loaded, loaded_state = load_model(tmp_path / "m.amtm", with_state=True)
    assert loaded.arch == params.arch and loaded.seed == 9
    for name in params.tensors:
        assert params[name].tobytes() == loaded[name].tobytes()
        assert state.m[name].tobytes() == loaded_state.m[name].tobytes()
    assert loaded_state.step == 1
    x = np.random.default_rng(0).random((10, 216)).astype(np.float32)
    np.testing.assert_array_equal(predict(params, x), predict(loaded, x))

    raw = (tmp_path / "m.amtm").read_bytes()
    assert raw[:4] == b"AMTM"
    (tmp_path / "bad.amtm").write_bytes(b"XMTM" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_model(tmp_path / "bad.amtm")
    (tmp_path / "short.amtm").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_model(tmp_path / "short.amtm")
    (tmp_path / "ver.amtm").write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_model(tmp_path / "ver.amtm")


def test_checkpoint_without_state(tmp_path):
    params = init_model(Architecture(n_input=20, convs=((5, 2), (3, 2)), hidden=8), seed=1)
    save_model(params, tmp_path / "s.amtm")
    loaded = load_model(tmp_path / "s.amtm")
    assert loaded.arch.n_input == 20
    assert load_model(tmp_path / "s.amtm", with_state=True)[1] is None
