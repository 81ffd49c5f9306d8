import math

import numpy as np
import pytest

from cscfundus.model import (
    AdamState,
    EarlyStopping,
    ModelFormatError,
    ModelSpec,
    TrainConfig,
    adam_step,
    forward,
    gradients,
    init_params,
    load_model,
    predict,
    save_model,
    train,
)
from cscfundus.model import layers as L
from cscfundus.model import training
from gradcheck import check_instance, relative_error


# -- softmax / loss ---------------------------------------------------------------


def test_softmax_examples():
    assert L.softmax(np.array([[0.0, 0.0]])).tolist() == [[0.5, 0.5]]
    p = L.softmax(np.array([[20.0, -20.0], [1000.0, -1000.0]]))
    assert np.all(np.isfinite(p))
    assert p[0, 0] == pytest.approx(1.0) and p[0, 1] < 1e-17


def test_softmax_properties():
    rng = np.random.default_rng(0)
    z = rng.normal(0, 50, (500, 2))
    p = L.softmax(z)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-6)
    assert np.allclose(L.softmax(z + rng.normal(0, 100, (500, 1))), p, atol=1e-6)


def test_cross_entropy_examples():
    assert L.cross_entropy(np.array([[0.0, 1.0]]), [1]) == 0.0
    assert L.cross_entropy(np.array([[0.5, 0.5]]), [0]) == pytest.approx(math.log(2))
    loss = L.cross_entropy(np.array([[0.1, 0.9], [0.8, 0.2]]), [1, 0])
    assert loss == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2)
    assert loss == pytest.approx(0.16425, abs=1e-5)
    assert L.cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        L.cross_entropy(np.array([[0.5, 0.5]]), [2])


def test_softmax_ce_gradient_identity():
    p = np.array([[0.2, 0.8], [0.6, 0.4]])
    g = L.softmax_cross_entropy_backward(p, [1, 1])
    assert np.allclose(g, (p - np.array([[0, 1], [0, 1]])) / 2)


# -- layers against direct oracles -----------------------------------------------


def conv_direct(x, w, b):
    n, h, wd, c = x.shape
    out = np.zeros((n, h, wd, w.shape[3]))
    for i in range(n):
        for y in range(h):
            for xx in range(wd):
                for ky in range(3):
                    for kx in range(3):
                        sy, sx = y + ky - 1, xx + kx - 1
                        if 0 <= sy < h and 0 <= sx < wd:
                            out[i, y, xx] += x[i, sy, sx] @ w[ky, kx]
    return out + b


def test_conv_matches_direct_convolution():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out, _ = L.conv3x3_forward(x, w, b)
    assert np.allclose(out, conv_direct(x, w, b), atol=1e-12)


def test_all_ones_filter_on_constant_image():
    x = np.full((1, 4, 4, 3), 0.5)
    w = np.ones((3, 3, 3, 1))
    out, _ = L.conv3x3_forward(x, w, np.zeros(1))
    # 9 taps x 3 channels inside, fewer at borders and corners
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]]) * 3 * 0.5
    assert np.allclose(out[0, :, :, 0], expected)


def test_maxpool_floor_and_values():
    x = np.arange(1 * 5 * 5 * 1, dtype=float).reshape(1, 5, 5, 1)
    out, _ = L.maxpool2_forward(x)
    assert out[0, :, :, 0].tolist() == [[6, 8], [16, 18]]


def _layer_fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        o = x[i]
        x[i] = o + h
        lp = f()
        x[i] = o - h
        lm = f()
        x[i] = o
        g[i] = (lp - lm) / (2 * h)
    return g


def test_conv_backward_fd():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(2, 4, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    G = rng.normal(size=(2, 4, 5, 3))
    loss = lambda: float(np.sum(G * L.conv3x3_forward(x, w, b)[0]))
    _, cache = L.conv3x3_forward(x, w, b)
    dx, dw, db = L.conv3x3_backward(G, cache)
    for analytic, arr in ((dx, x), (dw, w), (db, b)):
        assert relative_error(analytic, _layer_fd(loss, arr)) < 1e-7


def test_dense_backward_fd():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
    G = rng.normal(size=(3, 5))
    loss = lambda: float(np.sum(G * L.dense_forward(x, w, b)[0]))
    dx, dw, db = L.dense_backward(G, L.dense_forward(x, w, b)[1])
    for analytic, arr in ((dx, x), (dw, w), (db, b)):
        assert relative_error(analytic, _layer_fd(loss, arr)) < 1e-7


def test_relu_and_maxpool_backward_fd():
    rng = np.random.default_rng(4)
    # values kept away from kinks and ties so central differences are valid
    x = rng.choice([-1, 1], size=(2, 4, 6, 2)) * rng.uniform(0.1, 1, (2, 4, 6, 2)) + np.arange(96).reshape(2, 4, 6, 2) * 1e-3
    G = rng.normal(size=(2, 2, 3, 2))
    loss = lambda: float(np.sum(G * L.maxpool2_forward(L.relu_forward(x)[0])[0]))
    r, rmask = L.relu_forward(x)
    _, pc = L.maxpool2_forward(r)
    analytic = L.relu_backward(L.maxpool2_backward(G, pc), rmask)
    assert relative_error(analytic, _layer_fd(loss, x)) < 1e-7


def test_softmax_ce_backward_fd():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(4, 2))
    y = np.array([0, 1, 1, 0])
    loss = lambda: L.cross_entropy(L.softmax(z), y)
    analytic = L.softmax_cross_entropy_backward(L.softmax(z), y)
    assert relative_error(analytic, _layer_fd(loss, z)) < 1e-7


# -- whole-model gradients ---------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_model_gradients_match_finite_differences(seed):
    assert check_instance(100 + seed) < 1e-4


def test_zero_model_gradients():
    spec = ModelSpec(input_size=8, conv_channels=(2, 3), hidden=4)
    params = {k: np.zeros_like(v) for k, v in init_params(spec).items()}
    x = np.zeros((3, 8, 8, 3), dtype=np.float32)
    labels = np.array([1, 0, 1])
    loss, probs, grads = gradients(params, spec, x, labels, (0, 0))
    assert loss == pytest.approx(math.log(2))
    for k, g in grads.items():
        if k.startswith("conv"):
            assert not g.any()
    onehot = np.eye(2)[labels]
    assert np.allclose(grads["fc2.b"], (probs - onehot).mean(axis=0))


def test_forward_shape_errors():
    spec = ModelSpec(input_size=8, conv_channels=(2,), hidden=4)
    with pytest.raises(ValueError):
        forward(init_params(spec), spec, np.zeros((1, 9, 9, 3), np.float32))


def test_inverted_dropout_expectation():
    rng = np.random.default_rng(6)
    h = rng.uniform(0.1, 2.0, 64)
    acc = np.zeros_like(h)
    n = 10_000
    for k in range(n):
        acc += h * L.dropout_mask(h.shape, 0.5, [7, k], dtype=np.float64)
    assert np.linalg.norm(acc / n - h) / np.linalg.norm(h) < 0.02


def test_dropout_only_in_train_mode():
    spec = ModelSpec(input_size=8, conv_channels=(2,), hidden=16)
    params = init_params(spec, 1)
    x = np.random.default_rng(0).random((2, 8, 8, 3)).astype(np.float32)
    assert np.array_equal(forward(params, spec, x), forward(params, spec, x))
    assert not np.allclose(forward(params, spec, x, (1, 2)), forward(params, spec, x))
    assert np.array_equal(forward(params, spec, x, (1, 2)), forward(params, spec, x, (1, 2)))


# -- Adam ---------------------------------------------------------------------------


def test_adam_first_step_is_lr_sign():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    grads = {"w": np.array([3.0, -0.01, 200.0])}
    cfg = TrainConfig()
    adam_step(params, grads, AdamState.zeros_like(params), cfg)
    assert np.allclose(params["w"], np.array([1.0, -2.0, 0.5]) - 1e-3 * np.sign(grads["w"]), atol=1e-9)


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, 2.0])}
    state = AdamState.zeros_like(params)
    for _ in range(10):
        adam_step(params, {"w": np.zeros(2)}, state, TrainConfig())
    assert params["w"].tolist() == [1.0, 2.0] and state.t == 10


def test_adam_two_steps_hand_trajectory():
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    params = {"w": np.array([0.25])}
    state = AdamState.zeros_like(params)
    theta, m, v = 0.25, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        adam_step(params, {"w": np.array([1.0])}, state, TrainConfig())
        assert abs(params["w"][0] - theta) < 1e-12
    assert abs(theta - (0.25 - 2 * lr / (1 + eps))) < 1e-12


# -- early stopping and training -------------------------------------------------------


def test_early_stopping_strictly_decreasing_runs_all():
    es = EarlyStopping(10)
    assert not any(es.update(e, 1.0 - 0.01 * e) for e in range(1, 51))
    assert es.best_epoch == 50


def test_early_stopping_flat_after_epoch_two():
    es = EarlyStopping(10)
    losses = [1.0, 0.9] + [0.9] * 48
    stop_at = next(e for e, v in enumerate(losses, 1) if es.update(e, v))
    assert stop_at == 12 and es.best_epoch == 2


def tiny_data(n=24, size=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    imgs = rng.integers(0, 60, (n, size, size, 3)).astype(np.uint8)
    imgs[labels == 1, 2:6, 2:6] += 150
    return imgs, labels


def test_train_returns_best_epoch_weights(monkeypatch):
    scripted = iter([1.0, 0.9] + [0.9] * 48)
    seen = []

    def fake_evaluate(params, spec, images, labels, batch_size=64):
        seen.append({k: v.copy() for k, v in params.items()})
        return next(scripted), 0.5

    monkeypatch.setattr(training, "evaluate", fake_evaluate)
    imgs, labels = tiny_data()
    spec = ModelSpec(input_size=8, conv_channels=(2,), hidden=8)
    best, history = train(spec, imgs, labels, imgs[:4], labels[:4], TrainConfig(batch_size=8, seed=3))
    assert len(history) == 12
    for k in best:
        assert np.array_equal(best[k], seen[1][k])
        assert not np.array_equal(best[k], seen[-1][k]) or k.endswith(".b")


def test_train_runs_all_epochs_when_improving(monkeypatch):
    scripted = iter([1.0 - 0.01 * e for e in range(50)])
    seen = []

    def fake_evaluate(params, spec, images, labels, batch_size=64):
        seen.append({k: v.copy() for k, v in params.items()})
        return next(scripted), 0.5

    monkeypatch.setattr(training, "evaluate", fake_evaluate)
    imgs, labels = tiny_data(8)
    spec = ModelSpec(input_size=8, conv_channels=(2,), hidden=4)
    best, history = train(spec, imgs, labels, imgs[:2], labels[:2], TrainConfig(batch_size=8), augment=None)
    assert len(history) == 50
    assert all(np.array_equal(best[k], seen[-1][k]) for k in best)


def test_train_deterministic_history():
    imgs, labels = tiny_data(20)
    spec = ModelSpec(input_size=8, conv_channels=(2,), hidden=8)
    cfg = TrainConfig(batch_size=6, max_epochs=3, patience=3, seed=5)
    p1, h1 = train(spec, imgs, labels, imgs[:6], labels[:6], cfg)
    p2, h2 = train(spec, imgs, labels, imgs[:6], labels[:6], cfg)
    assert h1 == h2
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert len(h1) == 3 and set(h1[0]) == set(training.HISTORY_FIELDS)


def test_train_rejects_empty_sets():
    imgs, labels = tiny_data(4)
    spec = ModelSpec(input_size=8, conv_channels=(2,), hidden=4)
    with pytest.raises(ValueError):
        train(spec, imgs, labels, imgs[:0], labels[:0])


def test_separable_toy_batch_200_steps():
    imgs, labels = tiny_data(32)
    spec = ModelSpec(input_size=8, conv_channels=(4,), hidden=32)
    params = init_params(spec, 0)
    state = AdamState.zeros_like(params)
    x = imgs.astype(np.float32) / 255
    for step in range(200):
        _, _, g = gradients(params, spec, x, labels, (0, step))
        adam_step(params, g, state, TrainConfig())
    assert L.cross_entropy(forward(params, spec, x), labels) < 0.01


# -- predict and serialization ----------------------------------------------------


def test_predict_zero_head_is_half():
    spec = ModelSpec(input_size=16, conv_channels=(2, 2), hidden=8)
    params = init_params(spec, 0, zero_head=True)
    img = np.random.default_rng(1).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    assert predict(params, spec, img) == 0.5
    with pytest.raises(ValueError):
        predict(params, spec, img[:8])


def test_predict_deterministic():
    spec = ModelSpec(input_size=16, conv_channels=(2,), hidden=8)
    params = init_params(spec, 3)
    img = np.random.default_rng(2).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    p = predict(params, spec, img)
    assert 0 < p < 1 and p == predict(params, spec, img)


def test_model_spec_validation():
    assert ModelSpec().paper_parity
    with pytest.raises(ValueError):
        ModelSpec(dropout=1.0)
    with pytest.raises(ValueError):
        ModelSpec(input_size=4, conv_channels=(2, 2, 2))


def test_save_load_round_trip(tmp_path):
    spec = ModelSpec(input_size=12, conv_channels=(3, 5), hidden=7, dropout=0.25)
    params = init_params(spec, 9)
    path = save_model(params, spec, tmp_path / "m.cscm")
    loaded, spec2 = load_model(path)
    assert spec2 == spec
    assert list(loaded) == list(params)
    for k in params:
        assert loaded[k].dtype == np.float32
        assert loaded[k].tobytes() == params[k].tobytes()


def test_load_uses_file_spec(tmp_path):
    spec = ModelSpec(input_size=16, conv_channels=(2,), hidden=5)
    save_model(init_params(spec), spec, tmp_path / "m.cscm")
    _, loaded_spec = load_model(tmp_path / "m.cscm")
    assert loaded_spec == spec and loaded_spec != ModelSpec()


def test_load_rejects_bad_files(tmp_path):
    spec = ModelSpec(input_size=8, conv_channels=(2,), hidden=4)
    path = save_model(init_params(spec), spec, tmp_path / "m.cscm")
    raw = path.read_bytes()
    (tmp_path / "bad.cscm").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ModelFormatError, match="unrecognized format"):
        load_model(tmp_path / "bad.cscm")
    (tmp_path / "short.cscm").write_bytes(raw[:-3])
    with pytest.raises(ModelFormatError, match="truncated"):
        load_model(tmp_path / "short.cscm")
    (tmp_path / "ver.cscm").write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(ModelFormatError, match="version"):
        load_model(tmp_path / "ver.cscm")


def test_model_file_layout(tmp_path):
    spec = ModelSpec(input_size=8, conv_channels=(1,), hidden=2)
    params = init_params(spec, 0)
    raw = save_model(params, spec, tmp_path / "m.cscm").read_bytes()
    assert raw[:4] == b"CSCM"
    assert int.from_bytes(raw[4:8], "little") == 1
    n = int.from_bytes(raw[8:12], "little")
    offset = 12 + n
    assert int.from_bytes(raw[offset : offset + 4], "little") == 4  # conv0.w rank
    dims = [int.from_bytes(raw[offset + 4 + 4 * i : offset + 8 + 4 * i], "little") for i in range(4)]
    assert dims == [3, 3, 3, 1]
    first = np.frombuffer(raw[offset + 20 : offset + 24], dtype="<f4")[0]
    assert first == params["conv0.w"].ravel()[0]
