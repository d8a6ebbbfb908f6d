import numpy as np
import pytest

from photoclick.errors import CompatibilityError, ShapeError
from photoclick.library import TrajectoryLibrary
from photoclick.nn import (
    MGU,
    Dense,
    LeakyReLU,
    NeuralModel,
    TrainConfig,
    build_and_train,
    kl_divergence,
    loss_ce,
    loss_mse,
    loss_mse_lambda,
    loss_nll,
    predict_gaussian,
    predict_point,
    predict_posterior,
)
from photoclick.nn.losses import gaussian_unpack, softmax


def fd_grad(f, x, h=1e-4):
    """Fourth-order central differences of a scalar function."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        vals = []
        for s in (2, 1, -1, -2):
            x[i] = orig + s * h
            vals.append(f())
        x[i] = orig
        g[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
    return g


def close(a, b, tol=1e-6):
    scale = max(np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() <= tol * scale


def bound(layer, rng):
    flat = np.zeros(layer.n_params)
    grad = np.zeros(layer.n_params)
    layer.bind(flat, grad)
    layer.init(rng)
    return flat, grad


def check_layer(layer, x, rng):
    flat, grad = bound(layer, rng)
    r = rng.normal(size=layer.forward(x).shape)
    loss = lambda: float(np.sum(layer.forward(x) * r))
    grad[:] = 0
    layer.forward(x)
    dx = layer.backward(r)
    if layer.n_params:
        assert close(grad, fd_grad(loss, flat))
    assert close(dx, fd_grad(loss, x))


def test_dense_gradient(rng):
    check_layer(Dense(5, 3), rng.normal(size=(4, 5)), rng)


def test_leaky_relu_gradient(rng):
    x = rng.normal(size=(6, 4))
    x[np.abs(x) < 0.05] = 0.3  # keep away from the kink
    check_layer(LeakyReLU(), x, rng)


def test_mgu_gradient(rng):
    check_layer(MGU(2, 5), rng.normal(size=(3, 6, 2)), rng)


def test_mgu_zero_weights_give_zero_state():
    m = MGU(1, 4)
    flat, _ = bound(m, np.random.default_rng(0))
    flat[:] = 0.0
    assert np.all(m.forward(np.ones((2, 5, 1))) == 0.0)


def test_mgu_single_step_by_hand():
    m = MGU(1, 1)
    flat, _ = bound(m, np.random.default_rng(0))
    m.wf[:] = 0.5; m.uf[:] = 0.0; m.bf[:] = 0.1
    m.wh[:] = 2.0; m.uh[:] = 0.0; m.bh[:] = -0.3
    f = 1 / (1 + np.exp(-(0.5 * 0.7 + 0.1)))
    c = np.tanh(2.0 * 0.7 - 0.3)
    assert m.forward(np.array([[[0.7]]]))[0, 0] == pytest.approx(f * c, rel=1e-14)


def loss_grad_check(fn, out, *args):
    val, g = fn(out, *args)
    assert close(g, fd_grad(lambda: fn(out, *args)[0], out))
    return val


def test_mse_value_and_gradient(rng):
    assert loss_mse(np.array([[1.0, 0.0]]), np.zeros((1, 2)))[0] == 1.0
    assert loss_mse(np.array([[1.0, 2.0]]), np.zeros((1, 2)))[0] == 5.0
    loss_grad_check(loss_mse, rng.normal(size=(5, 2)), rng.normal(size=(5, 2)))


@pytest.mark.parametrize("d", [1, 2, 3])
@pytest.mark.parametrize("standard", [False, True])
def test_nll_gradient(rng, d, standard):
    out = rng.normal(scale=0.5, size=(4, d + d * (d + 1) // 2))
    loss_grad_check(lambda o, t: loss_nll(o, t, d, standard), out, rng.normal(size=(4, d)))


def test_nll_examples():
    assert loss_nll(np.array([[0.4, 0.0]]), np.array([[0.4]]), 1)[0] == 0.0
    assert loss_nll(np.array([[1.0, 0.0]]), np.array([[0.0]]), 1)[0] == 1.0
    assert loss_nll(np.array([[1.0, 0.0]]), np.array([[0.0]]), 1, standard=True)[0] == 0.5


@pytest.mark.parametrize("standard,factor", [(False, 2.0), (True, 1.0)])
def test_nll_variance_optimum(standard, factor):
    r = 0.3
    log_s = np.linspace(-4, 1, 50001)
    vals = [loss_nll(np.array([[r, ls]]), np.zeros((1, 1)), 1, standard)[0] for ls in log_s[::50]]
    best = np.exp(log_s[::50][int(np.argmin(vals))])
    assert best**2 == pytest.approx(factor * r * r, rel=0.02)


def test_ce_uniform_value_and_gradient(rng):
    assert loss_ce(np.zeros((1, 101)), [17])[0] == pytest.approx(np.log(101), abs=1e-12)
    assert np.log(101) == pytest.approx(4.6151, abs=1e-4)
    loss_grad_check(loss_ce, rng.normal(size=(3, 7)), np.array([0, 3, 6]))


def test_kl_gradient_and_ce_equivalence(rng):
    logits = rng.normal(size=(1, 9))
    p = rng.dirichlet(np.ones(9))[None]
    loss_grad_check(kl_divergence, logits, p)
    # p-weighted one-hot CE has the KL gradient
    g_ce = sum(p[0, j] * loss_ce(logits, [j])[1] for j in range(9))
    assert np.allclose(g_ce, kl_divergence(logits, p)[1], atol=1e-14)
    assert kl_divergence(np.log(p), p)[0] == pytest.approx(0.0, abs=1e-14)


def test_mse_lambda_limits_and_gradient(rng):
    pred, truth = rng.normal(size=(8, 1)), np.full((8, 1), 0.3)
    assert loss_mse_lambda(pred, truth, 1.0)[0] == pytest.approx(loss_mse(pred, truth)[0])
    assert loss_mse_lambda(pred, truth, 0.0)[0] == pytest.approx(float((pred.mean() - 0.3) ** 2))
    loss_grad_check(lambda o, t: loss_mse_lambda(o, t, 0.8), pred, truth)


def test_full_batch_ce_descent_lowers_kl_every_step(rng):
    logits = rng.normal(size=(8, 11))
    bins = rng.integers(0, 11, 8)
    onehot = np.eye(11)[bins]
    kl = []
    for _ in range(50):
        kl.append(kl_divergence(logits, onehot)[0])
        logits -= 0.5 * loss_ce(logits, bins)[1] * len(bins)
    assert np.all(np.diff(kl) < 0)


def toy_library(n=600, k=12, seed=0, constant=None):
    rng = np.random.default_rng(seed)
    thetas = np.full((n, 1), constant) if constant is not None else rng.uniform(0.5, 2.0, (n, 1))
    waits = rng.exponential(1 / thetas, (n, k))
    meta = {"param_names": ["rate"], "prior": {"rate": [0.5, 2.0]},
            "summaries": [{"kind": "total_time"}, {"kind": "histogram", "bin_edges": list(np.linspace(0, 4, 11))}]}
    return TrajectoryLibrary(thetas, waits, metadata=meta)


@pytest.mark.parametrize("frontend,loss", [("sequence", "nll"), ("histogram", "ce"), ("histogram", "nll_standard")])
def test_whole_network_gradient(frontend, loss, rng):
    lib = toy_library(n=5)
    from photoclick.nn.train import HEAD_FOR_LOSS, _targets, batch_loss, make_model_meta

    head = HEAD_FOR_LOSS[loss]
    model = NeuralModel.build(frontend, head, make_model_meta(lib, head, frontend, loss=loss), hidden=4, widths=(6,), seed=1)
    cfg = TrainConfig(loss=loss)
    x = model.features(lib.waits)
    t = _targets(model, lib.thetas, loss)
    f = lambda: batch_loss(model, model.forward(x), t, cfg)[0]
    model.zero_grad()
    model.backward(batch_loss(model, model.forward(x), t, cfg)[1])
    assert close(model.grad.copy(), fd_grad(f, model.weights))


def test_constant_target_is_learned():
    lib = toy_library(n=300, constant=1.25)
    model, hist = build_and_train(lib, "histogram", TrainConfig(epochs=300, patience=300, learning_rate=3e-3), widths=(8,))
    pred = predict_point(model, lib.waits)
    assert np.mean((pred - 1.25) ** 2) < 1e-4 * 1.25**2
    assert hist.val[-1] < hist.val[0]


def test_training_is_deterministic():
    lib = toy_library(n=200)
    a, _ = build_and_train(lib, "sequence", TrainConfig(epochs=3, seed=4), hidden=4, widths=(5,))
    b, _ = build_and_train(lib, "sequence", TrainConfig(epochs=3, seed=4), hidden=4, widths=(5,))
    assert np.array_equal(a.weights, b.weights)


def test_shuffled_labels_learn_nothing():
    lib = toy_library(n=3000, k=20)
    rng = np.random.default_rng(8)
    shuffled = TrajectoryLibrary(lib.thetas[rng.permutation(len(lib))], lib.waits, metadata=lib.metadata)
    model, _ = build_and_train(shuffled, "histogram", TrainConfig(epochs=60, patience=10))
    test = toy_library(n=1000, k=20, seed=6)
    rmse = np.sqrt(np.mean((predict_point(model, test.waits)[:, 0] - test.thetas[:, 0]) ** 2))
    assert rmse == pytest.approx(1.5 / np.sqrt(12), rel=0.1)


def test_regressor_learns_rate():
    lib = toy_library(n=3000, k=20)
    model, _ = build_and_train(lib, "histogram", TrainConfig(epochs=60, patience=10))
    test = toy_library(n=400, k=20, seed=5)
    rmse = np.sqrt(np.mean((predict_point(model, test.waits)[:, 0] - test.thetas[:, 0]) ** 2))
    assert rmse < 0.35  # prior sd is 0.43


def test_save_load_predictions_identical(tmp_path):
    lib = toy_library(n=50)
    model, _ = build_and_train(lib, "sequence", TrainConfig(epochs=2, loss="ce"), hidden=5, widths=(4,))
    back = NeuralModel.load(model.save(tmp_path / "m.pcnm"))
    assert np.array_equal(predict_posterior(back, lib.waits)[0].weights, predict_posterior(model, lib.waits)[0].weights)
    (tmp_path / "bad.pcnm").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(CompatibilityError):
        NeuralModel.load(tmp_path / "bad.pcnm")


def test_gaussian_head_covariance_is_spd(rng):
    _, chol = gaussian_unpack(rng.normal(scale=3, size=(20, 5)), 2)
    cov = chol @ np.swapaxes(chol, 1, 2)
    assert np.all(np.linalg.eigvalsh(cov) > 0)
    lib = toy_library(n=40)
    model, _ = build_and_train(lib, "histogram", TrainConfig(epochs=1, loss="nll"), widths=(4,))
    mu, cov = predict_gaussian(model, lib.waits)
    assert mu.shape == (40, 1) and np.all(cov[:, 0, 0] > 0)


def test_histogram_prediction_ignores_click_order(rng):
    lib = toy_library(n=50)
    model, _ = build_and_train(lib, "histogram", TrainConfig(epochs=1), widths=(4,))
    w = lib.waits[:10]
    shuffled = np.array([row[rng.permutation(len(row))] for row in w])
    assert np.array_equal(predict_point(model, w), predict_point(model, shuffled))


def test_wrong_click_count_rejected():
    lib = toy_library(n=20)
    model, _ = build_and_train(lib, "sequence", TrainConfig(epochs=1), hidden=3, widths=(3,))
    with pytest.raises(ShapeError):
        predict_point(model, np.ones((2, 5)))


def test_classifier_outputs_are_distributions():
    lib = toy_library(n=60)
    model, _ = build_and_train(lib, "histogram", TrainConfig(epochs=1, loss="ce"), widths=(4,))
    posts = predict_posterior(model, lib.waits[:5])
    assert all(p.weights.sum() == pytest.approx(1.0) for p in posts)
    assert len(posts[0].weights) == 101
    assert np.allclose(softmax(np.zeros((1, 4))), 0.25)
