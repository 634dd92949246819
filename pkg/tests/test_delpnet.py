import math

import numpy as np
import pytest

from defocus_restore.delpnet import (Architecture, DelpNet, TrainConfig, backward, cross_entropy,
                                     cross_entropy_grad, fit, predict, predict_proba, softmax, train_step)
from defocus_restore.delpnet.layers import BatchNorm, Conv3x3
from defocus_restore.delpnet.serialization import BLOB, MANIFEST, load_model, save_model
from defocus_restore.errors import (CorruptionError, DimensionError, DivergenceError, InputError,
                                    StateError)


def _loss_and_grads(model, x, y, state):
    model.rng.bit_generator.state = state  # same dropout masks every time
    logits = model.forward(x, "train")
    grads = backward(model, x, y, logits=logits)
    return cross_entropy(logits, y), {k: v.copy() for k, v in grads.items()}


def _loss(model, x, y, state):
    model.rng.bit_generator.state = state
    loss = cross_entropy(model.forward(x, "train"), y)
    for layer in model.layers:
        layer.clear()
    return loss


def test_default_architecture():
    model = DelpNet(seed=0)
    assert model.parameter_count() == 2_333_388
    assert 2.2e6 <= model.parameter_count() <= 2.4e6
    assert model.conv_layer_count == 7
    kinds = [l.kind for l in model.layers]
    for i, k in enumerate(kinds):
        if k == "batchnorm":
            assert kinds[i - 1] == "conv" and kinds[i + 1] == "relu"
    assert model.layers[-1].params["weight"].shape == (512, 12)


def test_architecture_validation():
    with pytest.raises(InputError):
        Architecture(conv_widths=())
    with pytest.raises(InputError):
        Architecture(bn_momentum=1.0)
    with pytest.raises(InputError):
        Architecture(pool_after=(9,))
    with pytest.raises(InputError):
        TrainConfig(batch_size=0)
    with pytest.raises(InputError):
        TrainConfig(bn_momentum=-0.1)
    with pytest.raises(InputError):
        TrainConfig(learning_rate=-1.0)


@pytest.mark.parametrize("dropout", [0.0, 0.3])
def test_finite_difference_gradients(dropout):
    arch = Architecture(input_size=8, conv_widths=(3, 4), pool_after=(1,), num_classes=5,
                        dropout_pool=dropout, dropout_dense=dropout)
    model = DelpNet(arch, seed=3, dtype=np.float64)
    rng = np.random.default_rng(0)
    for _, p in model.named_parameters():
        p += rng.normal(0, 0.1, p.shape)  # move BN gamma/beta and biases off their init
    x = rng.random((4, 1, 8, 8))
    y = np.array([0, 3, 1, 4])
    state = model.rng.bit_generator.state
    _, grads = _loss_and_grads(model, x, y, state)
    h = 1e-5
    checked = set()
    for name, p in model.named_parameters():
        g = grads[name]
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = _loss(model, x, y, state)
            flat[i] = old - h
            down = _loss(model, x, y, state)
            flat[i] = old
            fd = (up - down) / (2 * h)
            an = g.reshape(-1)[i]
            scale = max(abs(fd), abs(an), 1e-6)
            assert abs(fd - an) / scale <= 1e-3, (name, i, fd, an)
        checked.add(name.split(".")[0])
    assert {"conv1", "conv2", "bn1", "bn2", "dense"} <= checked


def test_zero_dense_gives_uniform_and_tie_break():
    model = DelpNet(Architecture().scaled(1 / 16), seed=1)
    dense = model.layers[-1]
    dense.params["weight"][...] = 0
    dense.params["bias"][...] = 0
    x = np.random.default_rng(0).random((3, 1, 84, 84))
    logits = model.forward(x)
    assert np.all(logits == logits[:, :1])
    np.testing.assert_allclose(predict_proba(model, x), 1 / 12, atol=1e-7)
    label, probs = predict(model, x[0, 0])
    assert label == 0
    assert abs(probs.sum() - 1) <= 1e-6


def test_eval_determinism_and_batch_independence():
    model = DelpNet(Architecture().scaled(1 / 8), seed=2)
    x = np.random.default_rng(1).random((5, 1, 84, 84)).astype(np.float32)
    a = model.forward(x)
    b = model.forward(x)
    assert np.array_equal(a, b)
    single = model.forward(x[2:3])
    np.testing.assert_allclose(single[0], a[2], atol=1e-6)
    with pytest.raises(DimensionError):
        model.forward(np.zeros((1, 1, 80, 84)))
    with pytest.raises(DimensionError):
        predict(model, np.zeros((84, 83)))
    probs = predict_proba(model, x)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_cross_entropy_examples():
    assert math.isclose(cross_entropy(np.zeros((3, 12)), [0, 5, 11]), math.log(12), rel_tol=1e-12)
    big = np.zeros((1, 12))
    big[0, 4] = 800.0
    assert cross_entropy(big, [4]) == 0.0
    rng = np.random.default_rng(7)
    logits = rng.normal(0, 3, (2, 12))
    labels = [3, 9]
    oracle = 0.0
    for row, lab in zip(logits, labels):
        total = sum(math.exp(v) for v in row)
        oracle -= math.log(math.exp(row[lab]) / total)
    assert abs(cross_entropy(logits, labels) - oracle / 2) <= 1e-10
    with pytest.raises(InputError):
        cross_entropy(logits, [0, 12])
    with pytest.raises(InputError):
        cross_entropy(logits, [0])
    np.testing.assert_allclose(softmax(logits).sum(axis=1), 1.0, atol=1e-12)


def test_cross_entropy_grad_matches_softmax():
    logits = np.random.default_rng(2).normal(size=(4, 6))
    labels = np.array([0, 1, 5, 2])
    g = cross_entropy_grad(logits, labels)
    eps = 1e-6
    for i in range(4):
        for j in range(6):
            up, down = logits.copy(), logits.copy()
            up[i, j] += eps
            down[i, j] -= eps
            fd = (cross_entropy(up, labels) - cross_entropy(down, labels)) / (2 * eps)
            assert abs(fd - g[i, j]) <= 1e-7


def test_loss_scale_doubles_gradients_exactly():
    model = DelpNet(Architecture().scaled(1 / 16), seed=4)
    x = np.random.default_rng(3).random((3, 1, 84, 84))
    y = np.array([1, 11, 6])
    state = model.rng.bit_generator.state
    g1 = {k: v.copy() for k, v in backward(model, x, y, 1.0, logits=model.forward(x, "train")).items()}
    model.rng.bit_generator.state = state
    g2 = backward(model, x, y, 2.0, logits=model.forward(x, "train"))
    for k in g1:
        assert np.array_equal(g2[k], 2 * g1[k]), k


def test_dead_relu_gates_gradient():
    model = DelpNet(Architecture.miniature(), seed=0, dtype=np.float64)
    bn1 = model.layers[1]
    bn1.params["beta"][0] = -10.0  # channel 0 never fires
    x = np.random.default_rng(0).random((4, 1, 8, 8))
    grads = backward(model, x, np.array([0, 1, 2, 3]))
    assert grads["bn1.gamma"][0] == 0 and grads["bn1.beta"][0] == 0
    assert np.all(grads["conv1.weight"][..., 0] == 0)
    # zero input: every pre-activation is zero, so no gradient reaches conv1
    grads = backward(model, np.zeros((2, 1, 8, 8)), np.array([0, 0]))
    assert np.all(grads["conv1.bias"] == 0)


def test_state_errors():
    model = DelpNet(Architecture.miniature(), seed=0)
    x = np.random.default_rng(0).random((2, 1, 8, 8))
    with pytest.raises(StateError):
        model.backward(np.zeros((2, 5)))
    model.forward(x, "eval")
    with pytest.raises(StateError):
        model.backward(np.zeros((2, 5)))
    model.forward(x, "train")
    with pytest.raises(StateError):
        model.backward(np.zeros((2, 5)), x + 1)
    model.forward(x, "train")
    model.backward(np.zeros((2, 5)), x)
    with pytest.raises(StateError):
        model.backward(np.zeros((2, 5)), x)


def test_zero_learning_rate_leaves_parameters():
    model = DelpNet(Architecture.miniature(), seed=0)
    before = [p.copy() for _, p in model.named_parameters()]
    cfg = TrainConfig(learning_rate=0.0)
    x = np.random.default_rng(0).random((4, 1, 8, 8))
    for step in range(3):
        train_step(model, x, np.array([0, 1, 2, 3]), cfg, step)
    for b, (_, p) in zip(before, model.named_parameters()):
        assert np.array_equal(b, p)
    # running statistics still move
    assert not np.all(model.layers[1].state["running_mean"] == 0)


def test_running_stats_momentum():
    bn = BatchNorm("bn", 2, 0.6, 1e-3, np.float64)
    x = np.random.default_rng(1).normal(3.0, 2.0, (4, 5, 5, 2))
    bn.forward(x, True, None)
    mean = x.reshape(-1, 2).mean(axis=0)
    var = x.reshape(-1, 2).var(axis=0)
    np.testing.assert_allclose(bn.state["running_mean"], 0.4 * mean, rtol=1e-12)
    np.testing.assert_allclose(bn.state["running_var"], 0.6 + 0.4 * var, rtol=1e-12)


def test_batchnorm_eval_is_affine():
    rng = np.random.default_rng(5)
    conv = Conv3x3("c", 1, 3, rng, np.float64)
    conv.params["bias"][...] = rng.normal(size=3)
    bn = BatchNorm("bn", 3, 0.6, 1e-3, np.float64)
    bn.params["gamma"][...] = rng.normal(size=3)
    bn.params["beta"][...] = rng.normal(size=3)
    bn.state["running_mean"][...] = rng.normal(size=3)
    bn.state["running_var"][...] = rng.random(3) + 0.5

    def f(v):
        return bn.forward(conv.forward(v, False, None), False, None)

    a = rng.random((2, 9, 9, 1))
    b = rng.random((2, 9, 9, 1))
    for alpha in (0.0, 0.3, 1.0, 2.5):
        np.testing.assert_allclose(f(alpha * a + (1 - alpha) * b), alpha * f(a) + (1 - alpha) * f(b),
                                   atol=1e-12)


def test_global_max_pool_translation_invariance():
    arch = Architecture(input_size=32, conv_widths=(4, 6), pool_after=(), num_classes=3)
    model = DelpNet(arch, seed=1, dtype=np.float64)
    pattern = np.random.default_rng(2).random((8, 8))

    def features(dy, dx):
        x = np.zeros((1, 1, 32, 32))
        x[0, 0, 12 + dy:20 + dy, 12 + dx:20 + dx] = pattern
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        for layer in model.layers:
            if layer.kind == "globalmaxpool":
                return layer.forward(h, False, None)
            h = layer.forward(h, False, None)

    base = features(0, 0)
    for dy, dx in [(4, 0), (0, -4), (-3, 2), (1, 1)]:
        assert np.array_equal(features(dy, dx), base)

    # strided architecture: the top-1 prediction is stable under small shifts
    model = DelpNet(Architecture().scaled(1 / 8), seed=3)
    blob = np.random.default_rng(3).random((24, 24))
    labels = []
    for shift in range(5):
        x = np.zeros((84, 84))
        x[30 + shift:54 + shift, 30:54] = blob
        labels.append(predict(model, x)[0])
    assert len(set(labels)) == 1


def test_training_determinism():
    arch = Architecture(input_size=16, conv_widths=(4, 8), pool_after=(1,), num_classes=3)
    rng = np.random.default_rng(0)
    x = rng.random((24, 1, 16, 16)).astype(np.float32)
    y = rng.integers(0, 3, 24)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=8, epochs=2, seed=5)
    models = []
    for _ in range(2):
        m = DelpNet(arch, seed=9)
        fit(m, (x, y), (x[:6], y[:6]), cfg)
        models.append(m)
    for (_, a), (_, b) in zip(models[0].named_parameters() + models[0].named_state(),
                              models[1].named_parameters() + models[1].named_state()):
        assert np.array_equal(a, b)
    assert models[0].rng.bit_generator.state == models[1].rng.bit_generator.state


def _toy(n, size, seed):
    # class 0: bright left half, class 1: bright top half, class 2: bright centre
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n)
    x = rng.random((n, 1, size, size)) * 0.2
    h = size // 2
    for i, lab in enumerate(y):
        if lab == 0:
            x[i, 0, :, :h] += 0.8
        elif lab == 1:
            x[i, 0, :h, :] += 0.8
        else:
            x[i, 0, h // 2:h + h // 2, h // 2:h + h // 2] += 0.8
    return x.astype(np.float32), y


def test_toy_fit_beats_chance():
    arch = Architecture(input_size=16, conv_widths=(8, 16), pool_after=(1,), num_classes=3)
    model = DelpNet(arch, seed=0)
    x, y = _toy(96, 16, 1)
    cfg = TrainConfig(learning_rate=3e-3, batch_size=16)
    losses = []
    for step in range(200):
        idx = np.arange(step * 16, step * 16 + 16) % 96
        losses.append(train_step(model, x[idx], y[idx], cfg, step))
    assert np.mean(losses[-10:]) < math.log(3)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_memorizes_single_patch():
    model = DelpNet(Architecture().scaled(1 / 16), seed=0)
    patch = np.random.default_rng(4).random((1, 1, 84, 84)).astype(np.float32)
    cfg = TrainConfig(learning_rate=3e-3)
    for step in range(40):
        train_step(model, patch, np.array([7]), cfg, step)
    assert predict(model, patch[0, 0])[0] == 7


def test_divergence_reports_step():
    model = DelpNet(Architecture.miniature(), seed=0)
    model.layers[-1].params["bias"][0] = np.nan
    x = np.random.default_rng(0).random((2, 1, 8, 8))
    with pytest.raises(DivergenceError) as info:
        train_step(model, x, np.array([0, 1]), TrainConfig(), 17)
    assert info.value.step == 17


def test_save_load_round_trip(tmp_path):
    model = DelpNet(Architecture().scaled(1 / 16), seed=6)
    rng = np.random.default_rng(0)
    x = rng.random((4, 1, 84, 84)).astype(np.float32)
    cfg = TrainConfig(learning_rate=1e-3)
    train_step(model, x, np.array([0, 1, 2, 11]), cfg, 0)
    save_model(model, str(tmp_path / "m"), metadata={"bg_label": 11})
    back = load_model(str(tmp_path / "m"))
    assert np.array_equal(model.forward(x), back.forward(x))
    for (n1, a), (n2, b) in zip(model.named_parameters() + model.named_state(),
                                back.named_parameters() + back.named_state()):
        assert n1 == n2 and np.array_equal(a, b)
    assert back.rng.bit_generator.state == model.rng.bit_generator.state
    assert back.metadata == {"bg_label": 11}
    # the blob is little-endian float32 in manifest order
    blob = np.fromfile(tmp_path / "m" / BLOB, dtype="<f4")
    assert blob.size == sum(a.size for _, a in model.named_parameters() + model.named_state())
    assert np.array_equal(blob[:9 * model.arch.conv_widths[0]], model.named_parameters()[0][1].ravel())


def test_corrupted_models(tmp_path):
    model = DelpNet(Architecture().scaled(1 / 16), seed=0)
    path = tmp_path / "m"
    save_model(model, str(path))
    blob = (path / BLOB).read_bytes()
    (path / BLOB).write_bytes(blob[:-4])
    with pytest.raises(CorruptionError):
        load_model(str(path))
    (path / BLOB).write_bytes(blob)
    text = (path / MANIFEST).read_text()
    (path / MANIFEST).write_text(text.replace("conv_layers 7", "conv_layers 6"))
    with pytest.raises(CorruptionError):
        load_model(str(path))
