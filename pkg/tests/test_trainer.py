import numpy as np
import pytest

from conftest import small_topology
from oracles import finite_difference_grads, naive_forward
from streamnas.data import Dataset, generate_synthetic, split
from streamnas.errors import ShapeError, TrainingDiverged
from streamnas.topology import DEFAULT_SPACE, DSConv1D, Dense, GlobalAvgPool, Topology, decode, random_genome
from streamnas.trainer import (
    ModelParams,
    TrainConfig,
    evaluate,
    forward,
    init_params,
    load_params,
    loss_and_grads,
    metrics_from_predictions,
    save_params,
    train,
    _step,
)


def test_zero_params_give_zero_logits(rng):
    topo = small_topology()
    p = init_params(topo, rng)
    zero = ModelParams([{k: np.zeros_like(v) for k, v in layer.items()} for layer in p.layers])
    assert np.all(forward(zero, topo, rng.normal(size=(3, 2, 32))) == 0)


def test_identity_dsconv(rng):
    topo = Topology((DSConv1D(3, 1, 2, padding=1),), 2, 16)
    p = ModelParams([{"dw": np.array([[0, 1.0, 0], [0, 1.0, 0]]), "pw": np.eye(2), "pb": np.zeros(2)}])
    x = rng.uniform(0, 1, (4, 2, 16))
    assert np.allclose(forward(p, topo, x), x)


def test_forward_matches_naive_loops(rng):
    topos = [small_topology()] + [decode(random_genome(DEFAULT_SPACE, rng, 2, 32, max_active=4))
                                  for _ in range(5)]
    for topo in topos:
        p = init_params(topo, rng)
        x = rng.normal(size=(3, 2, 32))
        assert np.allclose(forward(p, topo, x), naive_forward(p, topo, x), atol=1e-6, rtol=0)


def test_hidden_dense_matches_naive(rng):
    topo = Topology((DSConv1D(3, 2, 4), Dense(5), Dense(2)), 2, 17)
    p = init_params(topo, rng)
    x = rng.normal(size=(2, 2, 17))
    assert np.allclose(forward(p, topo, x), naive_forward(p, topo, x), atol=1e-6)
    _check_gradients(p, topo, x, np.array([0, 1]))


def _check_gradients(p, topo, x, labels):
    _, g = loss_and_grads(p, topo, x, labels)
    fd = finite_difference_grads(p, topo, x, labels, forward)
    for ga, gb in zip(g.layers, fd):
        assert set(ga) == set(gb)
        for k in ga:
            err = np.abs(ga[k] - gb[k]) / np.maximum(1.0, np.abs(gb[k]))
            assert err.max() <= 1e-4, k


def test_gradients_match_finite_differences(rng):
    _check_gradients(init_params(small_topology(), rng), small_topology(),
                     rng.normal(size=(4, 2, 32)), np.array([0, 1, 1, 0]))


def test_duplicate_sample_gradient(rng):
    topo = small_topology()
    p = init_params(topo, rng)
    x = rng.normal(size=(1, 2, 32))
    _, g1 = loss_and_grads(p, topo, x, np.array([1]))
    _, g2 = loss_and_grads(p, topo, np.concatenate([x, x]), np.array([1, 1]))
    for a, b in zip(g1.layers, g2.layers):
        for k in a:
            assert np.allclose(a[k], b[k])


def test_symmetric_stationary_bias(rng):
    topo = small_topology()
    p = init_params(topo, rng)
    p.layers[-1]["w"][:] = 0
    p.layers[-1]["b"][:] = 0
    x = rng.normal(size=(4, 2, 32))
    _, g = loss_and_grads(p, topo, x, np.array([0, 1, 0, 1]))
    assert np.allclose(g.layers[-1]["b"], 0)


def test_shape_error(rng):
    topo = small_topology()
    with pytest.raises(ShapeError):
        forward(init_params(topo, rng), topo, np.zeros((1, 3, 32)))


def _separable(n=200, width=32, seed=0):
    r = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    x = r.normal(0, 0.3, (n, 2, width)) + np.where(labels == 1, 1.0, -1.0)[:, None, None]
    return split(Dataset(x, labels), seed=seed)


def test_learns_separable_data():
    topo = Topology((DSConv1D(3, 1, 4), DSConv1D(3, 2, 4), GlobalAvgPool(), Dense(2)), 2, 32)
    _, m = train(topo, _separable(), TrainConfig(epochs=20))
    assert m.accuracy >= 0.95


def test_training_is_deterministic():
    ds = _separable()
    topo = small_topology()
    a = train(topo, ds, TrainConfig(epochs=2, seed=5))
    b = train(topo, ds, TrainConfig(epochs=2, seed=5))
    assert a[1] == b[1]
    assert np.array_equal(a[0].flat(), b[0].flat())


def test_zero_learning_rate_keeps_params():
    ds = _separable()
    topo = small_topology()
    p0 = init_params(topo, np.random.default_rng(3))
    p, m = train(topo, ds, TrainConfig(epochs=2, lr=0.0, seed=3), params=p0.copy())
    assert np.array_equal(p.flat(), p0.flat())
    assert m == evaluate(p0, topo, *ds.subset("val"))


def test_divergence_is_reported():
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged):
        train(small_topology(), _separable(), TrainConfig(epochs=3, lr=1e100, clip_norm=None))


def test_metric_cases():
    labels = np.array([0, 0, 1, 1])
    m = metrics_from_predictions(labels, labels)
    assert (m.detection_rate, m.false_alarm_rate, m.accuracy) == (1.0, 0.0, 1.0)
    m = metrics_from_predictions(np.ones(4, int), labels)
    assert (m.detection_rate, m.false_alarm_rate) == (1.0, 1.0)
    m = metrics_from_predictions(np.zeros(4, int), labels)
    assert (m.detection_rate, m.false_alarm_rate) == (0.0, 0.0)


def test_evaluate_is_order_invariant(rng):
    topo = small_topology()
    p = init_params(topo, rng)
    x = rng.normal(size=(20, 2, 32))
    y = rng.integers(0, 2, 20)
    perm = rng.permutation(20)
    a, b = evaluate(p, topo, x, y), evaluate(p, topo, x[perm], y[perm])
    assert a.detection_rate == b.detection_rate and a.false_alarm_rate == b.false_alarm_rate
    assert a.loss == pytest.approx(b.loss, rel=1e-12)


def test_first_epoch_lowers_loss():
    ds = generate_synthetic(200, 128, seed=2)
    topo = Topology((DSConv1D(9, 2, 16), DSConv1D(5, 2, 8), GlobalAvgPool(), Dense(2)), 2, 128)
    x, y = ds.subset("train")
    decreased = 0
    for seed in range(10):
        p0 = init_params(topo, np.random.default_rng(seed))
        before = evaluate(p0, topo, x, y).loss
        # one epoch, keeping the final rather than the best parameters
        p = p0.copy()
        cfg = TrainConfig(epochs=1, seed=seed)
        vel = ModelParams([{k: np.zeros_like(v) for k, v in l.items()} for l in p.layers])
        order = np.random.default_rng(seed).permutation(len(y))
        for s in range(0, len(y), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            _, g = loss_and_grads(p, topo, x[idx], y[idx])
            _step(p, g, vel, cfg)
        decreased += evaluate(p, topo, x, y).loss < before
    assert decreased >= 9


def test_params_round_trip(tmp_path, rng):
    topo = small_topology()
    p = init_params(topo, rng)
    save_params(p, topo, tmp_path / "m.snp")
    raw = (tmp_path / "m.snp").read_bytes()
    assert raw[:4] == b"SNP1"
    p2, t2 = load_params(tmp_path / "m.snp")
    assert t2 == topo
    assert np.array_equal(p.flat(), p2.flat())
