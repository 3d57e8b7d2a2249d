import io

import numpy as np
import pytest

from fdwm import nn
from fdwm.data import Samples

from oracles import momentum_trajectory


def _samples(x, y):
    return Samples(np.asarray(x), np.asarray(y), np.arange(len(y)))


def test_init_deterministic_and_output_width():
    a = nn.init("tinycnn", 4, 7, input_shape=(16, 16, 1))
    b = nn.init("tinycnn", 4, 7, input_shape=(16, 16, 1))
    for p, q in zip(a.params, b.params):
        assert p.dtype == np.float32
        np.testing.assert_array_equal(p, q)
    assert a.forward(np.zeros((2, 16, 16, 1))).shape == (2, 4)
    assert nn.init("mlp", 11, 0, input_shape=(8, 8, 3)).params[-1].shape == (11,)


def test_tiny_mlp_parameter_count():
    m = nn.init("flatten,dense:8,relu,dense", 2, 0, input_shape=(1, 1, 4))
    assert m.n_params() == 4 * 8 + 8 + 8 * 2 + 2 == 58


def test_shipped_architectures():
    m = nn.init("tinycnn", 3, 0, input_shape=(32, 32, 1))
    assert [p.shape for p in m.params] == [(8, 1, 3, 3), (8,), (16, 8, 3, 3), (16,),
                                           (1024, 3), (3,)]
    assert m.weight_indices() == [0, 2, 4]


@pytest.mark.parametrize("text,shape", [
    ("conv:8:4,flatten,dense", (8, 8, 1)),      # even kernel
    ("flatten,dense:4", (8, 8, 1)),             # width disagrees with classes
    ("conv:4:3,maxpool:2,flatten,dense", (7, 8, 1)),
    ("dense", (8, 8, 1)),
    ("flatten,dense,relu,conv:2:3", (8, 8, 1)),
    ("flatten,softmax,dense", (8, 8, 1)),
])
def test_bad_descriptors(text, shape):
    with pytest.raises(nn.DescriptorError):
        nn.init(text, 3, 0, input_shape=shape)


def test_zero_final_layer_predicts_class_zero():
    m = nn.init("mlp", 5, 0, input_shape=(4, 4, 1))
    m.params[-2][:] = 0
    m.params[-1][:] = 0
    x = np.random.default_rng(0).random((6, 4, 4, 1))
    scores = m.forward(x)
    assert np.all(scores == scores[:, :1])
    assert np.all(m.predict(x) == 0)


def test_two_layer_linear_net_by_hand():
    m = nn.init("flatten,dense:3,dense", 2, 0, input_shape=(2, 2, 1), dtype=np.float64)
    W1 = np.arange(12, dtype=float).reshape(4, 3) / 10
    b1 = np.array([0.1, -0.2, 0.3])
    W2 = np.array([[1.0, -1.0], [0.5, 2.0], [-0.5, 0.0]])
    b2 = np.array([0.05, -0.05])
    m.params[:] = [W1, b1, W2, b2]
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    # row-major flatten of the 2x2 image: 1, 2, 3, 4
    hidden = [1 * W1[0, k] + 2 * W1[1, k] + 3 * W1[2, k] + 4 * W1[3, k] + b1[k]
              for k in range(3)]
    want = [sum(hidden[k] * W2[k, c] for k in range(3)) + b2[c] for c in range(2)]
    np.testing.assert_allclose(nn.forward(m, x[:, :, None]), want, atol=1e-12)


def test_softmax_sums_to_one():
    s = np.random.default_rng(1).normal(scale=30, size=(10, 7))
    np.testing.assert_allclose(nn.softmax(s).sum(axis=1), 1.0, atol=1e-9)


def test_momentum_step_matches_recurrence():
    theta = [np.array([1.0])]
    vel = [np.zeros(1)]
    lr, mu = 0.1, 0.9
    got = []
    for _ in range(5):
        grad = [2 * (theta[0] - 3.0)]
        nn.sgd_momentum_step(theta, grad, vel, lr, mu)
        got.append(float(theta[0][0]))
    want = momentum_trajectory(1.0, lambda t: 2 * (t - 3.0), lr, mu, 5)
    np.testing.assert_allclose(got, want, atol=1e-15)


def test_zero_lr_leaves_parameters_unchanged():
    m = nn.init("mlp", 2, 0, input_shape=(4, 4, 1))
    rng = np.random.default_rng(2)
    s = _samples(rng.random((20, 4, 4, 1)), rng.integers(0, 2, 20))
    out, hist = nn.train(m, s, None, nn.TrainConfig(lr=0.0, epochs=3, batch_size=8))
    for p, q in zip(m.params, out.params):
        np.testing.assert_array_equal(p, q)
    assert len(hist) == 3


def test_training_is_deterministic_and_learns():
    rng = np.random.default_rng(3)
    x = rng.random((200, 4, 4, 1)).astype(np.float32)
    y = (x.reshape(200, -1).mean(axis=1) > 0.5).astype(int)
    s = _samples(x, y)
    m = nn.init("mlp", 2, 0, input_shape=(4, 4, 1))
    cfg = nn.TrainConfig(lr=0.1, epochs=30, batch_size=16)
    a, hist = nn.train(m, s, s, cfg)
    b, _ = nn.train(m, s, s, cfg)
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p, q)
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]
    assert hist[-1]["val_acc"] >= 0.9


def test_train_rejects_out_of_range_labels():
    m = nn.init("mlp", 2, 0, input_shape=(4, 4, 1))
    s = _samples(np.zeros((3, 4, 4, 1)), [0, 1, 2])
    with pytest.raises(ValueError):
        nn.train(m, s)


def test_divergence_is_reported():
    m = nn.init("mlp", 2, 0, input_shape=(4, 4, 1))
    x = np.random.default_rng(6).random((8, 4, 4, 1))
    x[5, 0, 0, 0] = np.nan
    with pytest.raises(nn.TrainingDiverged, match="non-finite loss"):
        nn.train(m, _samples(x, [0, 1] * 4), None, nn.TrainConfig(epochs=1, batch_size=4))


@pytest.mark.parametrize("labels,want", [([0, 1, 0, 1], 1.0), ([1, 0, 1, 0], 0.0),
                                         ([0, 1, 0, 0], 0.75)])
def test_evaluate(labels, want):
    class Alternating(nn.Classifier):
        def predict(self, images):
            return np.arange(len(images)) % 2

    base = nn.init("mlp", 2, 0, input_shape=(2, 2, 1))
    m = Alternating(base.arch, 2, base.params)
    assert nn.evaluate(m, _samples(np.zeros((4, 2, 2, 1)), labels)) == want


def test_grad_check_linear_is_exact():
    m = nn.init("flatten,dense", 3, 0, input_shape=(3, 3, 2))
    rng = np.random.default_rng(4)
    res = nn.grad_check(m, rng.random((5, 3, 3, 2)), rng.integers(0, 3, 5))
    assert res.skipped_kinks == 0
    assert res.max_rel_error < 1e-6


def test_grad_check_smooth_cnn():
    m = nn.init("conv:3:3,tanh,maxpool:2,flatten,dense:5,tanh,dense", 3, 1,
                input_shape=(6, 6, 1))
    rng = np.random.default_rng(5)
    res = nn.grad_check(m, rng.random((4, 6, 6, 1)), rng.integers(0, 3, 4))
    assert res.max_rel_error < 1e-4


def test_grad_check_skips_relu_kinks():
    # zero input and zero biases put every hidden pre-activation exactly at 0
    m = nn.init("flatten,dense:4,relu,dense", 2, 0, input_shape=(2, 2, 1))
    res = nn.grad_check(m, np.zeros((1, 2, 2, 1)), [1])
    assert res.skipped_kinks > 0
    assert res.max_rel_error < 1e-4


def test_checkpoint_round_trip(tmp_path):
    m = nn.init("tinycnn", 4, 3, input_shape=(8, 8, 3))
    nn.save_checkpoint(tmp_path / "m.ckpt", m)
    back = nn.load_checkpoint(tmp_path / "m.ckpt")
    assert back.arch == m.arch and back.class_count == 4
    for p, q in zip(m.params, back.params):
        np.testing.assert_array_equal(p, q)
    assert nn.checkpoint_bytes(back) == (tmp_path / "m.ckpt").read_bytes()
    assert (tmp_path / "m.ckpt").read_bytes().startswith(b"FDWM-CKPT")


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        nn.read_checkpoint(io.BytesIO(b"not a checkpoint"))


def test_architecture_describe_round_trip():
    a = nn.Architecture.parse("tinycnn", (32, 32, 3))
    assert nn.Architecture.parse(a.describe()) == a
