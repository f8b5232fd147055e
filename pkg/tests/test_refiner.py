import math
import struct

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from scanrefine.errors import (
    DegenerateBatchError,
    EmptyInputError,
    IncompatibleModelError,
    InvalidConfigError,
    NotFoundError,
    ShapeError,
)
from scanrefine.fusion import FusedFrame, feature_width
from scanrefine.refiner import (
    Adam,
    TrainConfig,
    build_model,
    forward,
    init_model,
    learning_rate,
    load_model,
    loss_and_grad,
    predict,
    refine,
    save_model,
    train,
)
from scanrefine.refiner.network import BN_EPS
from scanrefine.refiner.persistence import dumps, loads


def numeric_gradients(model, x, y, step=1e-5):
    """Central differences of the train-mode loss for every parameter entry."""
    def loss():
        return loss_and_grad(model, x, y, update_running=False)[0]

    out = []
    for p in model.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + step
            plus = loss()
            p[idx] = keep - step
            minus = loss()
            p[idx] = keep
            g[idx] = (plus - minus) / (2 * step)
        out.append(g)
    return out


def max_relative_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def perturbed(model, rng):
    """Move BN affine parameters off their identity init so every path is exercised."""
    for g, b in zip(model.gamma, model.beta):
        g[:] = rng.uniform(0.5, 1.5, g.shape)
        b[:] = rng.uniform(-0.3, 0.3, b.shape)
    for bias in model.biases:
        bias[:] = rng.uniform(-0.1, 0.1, bias.shape)
    return model


@pytest.mark.parametrize("sizes", [(7, 4, 3), (7, 5, 4, 3)])
def test_gradients_match_finite_differences(sizes):
    rng = np.random.default_rng(0)
    model = perturbed(build_model(sizes, seed=1, dtype=np.float64), rng)
    x = rng.standard_normal((16, sizes[0]))
    y = rng.integers(0, sizes[-1], 16)
    y[:3] = 0  # ignored class present in the batch
    _, analytic = loss_and_grad(model, x, y, update_running=False)
    assert max_relative_error(analytic, numeric_gradients(model, x, y)) < 1e-4


def test_infer_mode_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    model = perturbed(build_model((6, 5, 3), seed=2, dtype=np.float64), rng)
    model.running_mean[0][:] = rng.normal(0, 0.5, 5)
    model.running_var[0][:] = rng.uniform(0.5, 2.0, 5)
    x = rng.standard_normal((9, 6))
    y = rng.integers(1, 3, 9)
    _, analytic = loss_and_grad(model, x, y, mode="infer")
    numeric = []
    for p in model.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + 1e-5
            plus = loss_and_grad(model, x, y, mode="infer")[0]
            p[idx] = keep - 1e-5
            minus = loss_and_grad(model, x, y, mode="infer")[0]
            p[idx] = keep
            g[idx] = (plus - minus) / 2e-5
        numeric.append(g)
    assert max_relative_error(analytic, numeric) < 1e-4


# --- initialisation -----------------------------------------------------------


def test_architecture_shapes():
    m = init_model(20, 2, seed=0)
    assert m.sizes == (71, 128, 1024, 512, 256, 128, 20)
    assert m.weights[0].shape == (128, 71)
    assert m.weights[-1].shape == (20, 128)
    assert len(m.gamma) == 5 and m.dtype == np.float32
    assert init_model(3, 1).sizes[0] == feature_width(3, 1)


def test_init_is_seeded():
    a, b = init_model(20, 2, seed=3), init_model(20, 2, seed=3)
    assert dumps(a) == dumps(b)
    assert dumps(a) != dumps(init_model(20, 2, seed=4))


def test_init_variance_and_constants():
    m = init_model(20, 2, seed=0)
    for w in m.weights:
        fan_in = w.shape[1]
        if fan_in >= 128:
            assert abs(w.astype(np.float64).var() / (2.0 / fan_in) - 1) < 0.2
    assert all((b == 0).all() for b in m.biases)
    assert all((g == 1).all() for g in m.gamma) and all((b == 0).all() for b in m.beta)
    assert all((v == 1).all() for v in m.running_var)
    assert all((mu == 0).all() for mu in m.running_mean)


def test_bad_q_or_k_rejected():
    with pytest.raises(InvalidConfigError):
        init_model(1, 2)
    with pytest.raises(InvalidConfigError):
        init_model(20, 0)


# --- forward ------------------------------------------------------------------


def test_infer_rows_sum_to_one_and_duplicate_rows_agree():
    rng = np.random.default_rng(2)
    m = init_model(20, 2, seed=0)
    x = rng.standard_normal((500, 71)).astype(np.float32) * 3
    x[250] = x[3]
    probs, _ = forward(m, x)
    assert np.abs(probs.sum(axis=1, dtype=np.float64) - 1).max() <= 1e-5
    assert probs.min() >= 0 and probs.max() <= 1
    assert np.array_equal(probs[3], probs[250])
    assert np.array_equal(predict(m, x), probs)


def test_width_mismatch_is_shape_error():
    m = init_model(20, 2)
    with pytest.raises(ShapeError):
        forward(m, np.zeros((4, 70), dtype=np.float32))


def test_train_mode_normalises_each_layer():
    rng = np.random.default_rng(3)
    m = init_model(20, 2, seed=0, dtype=np.float64)
    x = rng.normal(2.0, 5.0, (400, 71))
    _, cache = forward(m, x, mode="train")
    h = x
    for i in range(m.n_hidden):
        # recompute the pre-activation from the cached layer input
        z = cache["inputs"][i] @ m.weights[i].T + m.biases[i]
        xhat = (z - z.mean(axis=0)) / np.sqrt(z.var(axis=0) + BN_EPS)
        assert np.allclose(cache["xhat"][i], xhat, atol=1e-10)
        assert np.abs(xhat.mean(axis=0)).max() < 1e-4
        assert np.abs(xhat.var(axis=0) - 1).max() < 1e-3 + BN_EPS * 100
        h = np.maximum(m.gamma[i] * xhat + m.beta[i], 0)
        assert np.allclose(cache["inputs"][i + 1], h)


def test_running_statistics_update():
    rng = np.random.default_rng(4)
    m = build_model((5, 6, 3), seed=0, dtype=np.float64)
    x = rng.normal(1.0, 2.0, (50, 5))
    z = x @ m.weights[0].T + m.biases[0]
    forward(m, x, mode="train")
    assert np.allclose(m.running_mean[0], 0.1 * z.mean(axis=0))
    assert np.allclose(m.running_var[0], 0.9 + 0.1 * z.var(axis=0, ddof=1))
    before = [a.copy() for a in m.running_mean]
    forward(m, x, mode="infer")
    forward(m, x, mode="train", update_running=False)
    assert np.array_equal(before[0], m.running_mean[0])


def test_single_row_train_batch_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        forward(init_model(3, 1), np.zeros((1, feature_width(3, 1))), mode="train")


def test_inference_is_point_independent_and_thread_stable():
    rng = np.random.default_rng(5)
    m = init_model(20, 2, seed=1)
    x = rng.standard_normal((3000, 71)).astype(np.float32)
    perm = rng.permutation(3000)
    with threadpool_limits(1):
        a = predict(m, x)
    with threadpool_limits(4):
        b = predict(m, x)
    assert np.array_equal(a, b)
    assert np.array_equal(predict(m, x[perm]), a[perm])


# --- loss -----------------------------------------------------------------------


def test_uniform_output_gives_log_q():
    m = init_model(20, 2, seed=0, dtype=np.float64)
    m.weights[-1][:] = 0
    rng = np.random.default_rng(6)
    loss, _ = loss_and_grad(m, rng.standard_normal((10, 71)), rng.integers(1, 20, 10))
    assert loss == pytest.approx(math.log(20), abs=1e-12)
    assert loss == pytest.approx(2.9957, abs=1e-4)


def test_ignored_points_contribute_nothing():
    rng = np.random.default_rng(7)
    m = perturbed(build_model((6, 8, 4), seed=0, dtype=np.float64), rng)
    x = rng.standard_normal((12, 6))
    y = rng.integers(1, 4, 12)
    # infer mode keeps rows independent, so an extra ignored row must be inert
    base_loss, base_grads = loss_and_grad(m, x, y, mode="infer")
    x2 = np.vstack([x, rng.standard_normal((3, 6))])
    y2 = np.concatenate([y, [0, 0, 0]])
    loss, grads = loss_and_grad(m, x2, y2, mode="infer")
    assert loss == pytest.approx(base_loss, abs=1e-14)
    for a, b in zip(grads, base_grads):
        assert np.allclose(a, b, atol=1e-14)


def test_all_ignored_is_degenerate():
    m = build_model((4, 3, 3), seed=0)
    with pytest.raises(DegenerateBatchError):
        loss_and_grad(m, np.ones((5, 4)), np.zeros(5, dtype=int))


def test_label_length_mismatch():
    m = build_model((4, 3, 3), seed=0)
    with pytest.raises(ShapeError):
        loss_and_grad(m, np.ones((5, 4)), np.ones(4, dtype=int))


# --- optimisation ---------------------------------------------------------------


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert learning_rate(cfg, 0) == 0.01
    assert learning_rate(cfg, 1) == pytest.approx(0.009, rel=1e-12)
    assert learning_rate(cfg, 3) == pytest.approx(0.00729, rel=1e-12)
    for e in range(60):
        assert learning_rate(cfg, e) == cfg.base_lr * cfg.lr_decay ** e


def test_adam_first_steps_match_hand_computation():
    p = [np.array([1.0, -2.0])]
    opt = Adam(p, 0.9, 0.999, 1e-8)
    g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.3])
    opt.step(p, [g1], 0.01)
    # step 1: m_hat = g, v_hat = g^2 -> update = lr * sign(g) (up to eps)
    expected = np.array([1.0, -2.0]) - 0.01 * g1 / (np.abs(g1) + 1e-8)
    assert np.allclose(p[0], expected, atol=1e-15)
    opt.step(p, [g2], 0.01)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    m_hat, v_hat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    expected = expected - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert np.allclose(p[0], expected, atol=1e-15)


def test_config_validation():
    for bad in (dict(base_lr=0), dict(lr_decay=0), dict(lr_decay=1.5), dict(points_per_frame=0)):
        with pytest.raises(InvalidConfigError):
            TrainConfig(**bad).validate()


def toy_frames(rng, n=50, q=4, frames=1):
    """Linearly separable clusters in the current-score columns of a K=1 feature row."""
    out = []
    width = feature_width(q, 1)
    for f in range(frames):
        y = rng.integers(1, q, n)
        x = rng.normal(0, 0.3, (n, width)).astype(np.float32)
        x[np.arange(n), width - q + y] += 3.0
        out.append((FusedFrame(x, q, 1, f), y))
    return out


def test_overfits_tiny_problem():
    rng = np.random.default_rng(8)
    data = toy_frames(rng)
    model, history = train(TrainConfig(epochs=200, seed=0), data)
    assert history[-1]["loss"] < 0.05
    assert model.epochs_trained == 200
    assert history[0]["lr"] == 0.01 and history[1]["lr"] == 0.01 * 0.9


def test_training_is_deterministic_and_subsamples():
    rng = np.random.default_rng(9)
    data = toy_frames(rng, n=120, frames=3)
    cfg = TrainConfig(epochs=3, points_per_frame=40, seed=5, hidden=(16, 8))
    a, hist_a = train(cfg, data)
    b, hist_b = train(cfg, data)
    assert dumps(a) == dumps(b)
    assert hist_a == hist_b
    # toy labels are never the ignored class, so every sampled point counts
    assert all(h["points"] == 3 * 40 for h in hist_a)
    c, _ = train(TrainConfig(epochs=3, points_per_frame=40, seed=6, hidden=(16, 8)), data)
    assert dumps(a) != dumps(c)


def test_empty_dataset_rejected():
    with pytest.raises(EmptyInputError):
        train(TrainConfig(), [])


# --- refine -----------------------------------------------------------------------


def test_refine_argmax_and_ties():
    m = build_model((3, 4, 6), seed=0, q=6, dtype=np.float64)
    m.weights[-1][:] = 0
    m.biases[-1][:] = [0, 0, 1, 0, 0, 1]  # exact tie between classes 2 and 5
    _, labels = refine(m, np.zeros((2, 3)))
    assert labels.tolist() == [2, 2]
    m.biases[-1][:] = [0, 0, 0, 5, 0, 0]
    assert refine(m, np.zeros((1, 3)))[1].tolist() == [3]


def test_refine_labels_equal_argmax_of_scores():
    rng = np.random.default_rng(10)
    m = init_model(20, 2, seed=2)
    fused = FusedFrame(rng.standard_normal((800, 71)).astype(np.float32), 20, 2)
    probs, labels = refine(m, fused)
    assert labels.tolist() == [int(np.argmax(row)) for row in probs]


def test_refine_rejects_q_mismatch():
    m = init_model(20, 2)
    with pytest.raises(ShapeError):
        refine(m, FusedFrame(np.zeros((2, feature_width(19, 2)), dtype=np.float32), 19, 2))


# --- persistence ---------------------------------------------------------------------


def trained_like(seed):
    rng = np.random.default_rng(seed)
    q, k = int(rng.integers(2, 8)), int(rng.integers(1, 4))
    hidden = tuple(int(h) for h in rng.integers(1, 20, int(rng.integers(1, 4))))
    m = init_model(q, k, seed=seed, hidden=hidden)
    for group in (m.weights, m.biases, m.gamma, m.beta, m.running_mean):
        for a in group:
            a[:] = rng.standard_normal(a.shape)
    for a in m.running_var:
        a[:] = rng.uniform(0.1, 3, a.shape)
    m.epochs_trained = int(rng.integers(0, 50))
    return m


def test_model_round_trip_is_bit_exact(tmp_path):
    for seed in range(10):
        m = trained_like(seed)
        path = tmp_path / f"m{seed}.p2nm"
        save_model(m, path)
        back = load_model(path)
        assert (back.q, back.k, back.sizes, back.epochs_trained, back.seed) == \
            (m.q, m.k, m.sizes, m.epochs_trained, m.seed)
        for a, b in zip(m.parameters() + m.buffers(), back.parameters() + back.buffers()):
            assert np.array_equal(a.view(np.uint32), b.view(np.uint32))
        assert dumps(back) == path.read_bytes()


def test_model_file_corruption_detected(tmp_path):
    data = dumps(trained_like(0))
    with pytest.raises(IncompatibleModelError):
        loads(data[:-4])
    with pytest.raises(IncompatibleModelError):
        loads(data[:10])
    with pytest.raises(IncompatibleModelError):
        loads(data + b"\x00")
    with pytest.raises(IncompatibleModelError):
        loads(b"XXXX" + data[4:])
    with pytest.raises(IncompatibleModelError):
        loads(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(NotFoundError):
        load_model(tmp_path / "missing.p2nm")
