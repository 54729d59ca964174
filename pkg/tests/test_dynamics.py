import math

import numpy as np
import pytest
import torch

from macura.dynamics import (
    DivergenceError,
    EnsembleModel,
    TrainConfig,
    constant_predictor_nll,
    gaussian_nll,
    nll_loss,
    pnn_forward,
    predict_ensemble,
    sample_next,
    train_ensemble,
)
from macura.gaussian import DiagGaussian, u_gjs


def zero_model(**kw):
    model = EnsembleModel(2, 1, **{"ensemble_size": 3, "hidden_layers": 2, "hidden_size": 8, **kw})
    with torch.no_grad():
        for p in [*model.layers.parameters(), *model.head.parameters()]:
            p.zero_()
    model.set_identity_normalizer()
    return model


def softplus(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def linear_data(n, rng, noise=1e-3):
    states = rng.normal(size=(n, 2))
    actions = rng.uniform(-1, 1, size=(n, 1))
    A = np.array([[0.9, 0.1], [-0.2, 0.95]])
    nxt = states @ A.T + 0.5 * actions + noise * rng.normal(size=(n, 2))
    return states, actions, nxt


def test_zero_network_predicts_identity_mean():
    model = zero_model()
    s, a = np.array([0.3, -1.2]), np.array([0.5])
    pred = pnn_forward(model, 1, s, a)
    np.testing.assert_allclose(pred.mean, s, rtol=0, atol=1e-7)
    lo, hi = -10.0, 0.5
    logvar = hi - softplus(hi - 0.0)
    logvar = lo + softplus(logvar - lo)
    np.testing.assert_allclose(pred.var, math.exp(logvar), rtol=1e-6)


def test_variance_bounds_hold_for_random_inputs():
    model = EnsembleModel(2, 1, ensemble_size=4, hidden_layers=2, hidden_size=16, seed=3)
    model.set_identity_normalizer()
    with torch.no_grad():
        model.head.weight.mul_(50.0)
    rng = np.random.default_rng(0)
    s = rng.normal(scale=20.0, size=(10_000, 2))
    a = rng.normal(scale=20.0, size=(10_000, 1))
    _, var = model.predict(s, a)
    lo, hi = model.variance_bounds()
    assert np.all(var >= lo[:, None, :] * (1 - 1e-6))
    assert np.all(var <= hi[:, None, :] * (1 + 1e-6))


def test_forward_is_pure():
    model = EnsembleModel(2, 1, ensemble_size=2, seed=1)
    model.set_identity_normalizer()
    a = model.predict([[0.1, 0.2]], [[0.3]])
    b = model.predict([[0.1, 0.2]], [[0.3]])
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_rejects_nonfinite_and_unfitted():
    model = EnsembleModel(2, 1, ensemble_size=2)
    with pytest.raises(RuntimeError):
        model.predict([[0.0, 0.0]], [[0.0]])
    model.set_identity_normalizer()
    with pytest.raises(ValueError):
        model.predict([[np.inf, 0.0]], [[0.0]])
    with pytest.raises(IndexError):
        pnn_forward(model, 2, [0.0, 0.0], [0.0])


def test_nll_closed_form_and_stationarity():
    d = 3
    pred = DiagGaussian(np.arange(d, dtype=float), np.ones(d))
    assert nll_loss(pred, pred.mean) == pytest.approx(0.5 * d * math.log(2 * math.pi), rel=1e-14)
    mu = torch.zeros(d, dtype=torch.float64, requires_grad=True)
    gaussian_nll(mu, torch.zeros(d, dtype=torch.float64), torch.zeros(d, dtype=torch.float64)).backward()
    np.testing.assert_array_equal(mu.grad.numpy(), np.zeros(d))


def central_difference(fn, x, h=1e-5):
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        grad.flat[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return grad


def test_nll_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    mu, logvar, target = rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)

    def f(m, lv):
        return float(gaussian_nll(torch.as_tensor(m), torch.as_tensor(lv), torch.as_tensor(target)))

    m_t = torch.tensor(mu, requires_grad=True)
    lv_t = torch.tensor(logvar, requires_grad=True)
    gaussian_nll(m_t, lv_t, torch.as_tensor(target)).backward()
    np.testing.assert_allclose(m_t.grad.numpy(), central_difference(lambda m: f(m, logvar), mu), rtol=1e-4)
    np.testing.assert_allclose(lv_t.grad.numpy(), central_difference(lambda lv: f(mu, lv), logvar), rtol=1e-4)
    # and the numpy loss agrees with the torch one
    assert nll_loss(DiagGaussian(mu, np.exp(logvar)), target) == pytest.approx(f(mu, logvar), rel=1e-12)


def test_network_gradients_match_finite_differences():
    model = EnsembleModel(2, 1, ensemble_size=2, hidden_layers=2, hidden_size=8, dtype=torch.float64, seed=5)
    model.set_identity_normalizer()
    rng = np.random.default_rng(1)
    x = torch.as_tensor(rng.normal(size=(2, 6, 3)))
    t = torch.as_tensor(rng.normal(size=(2, 6, 2)))

    def loss():
        mean, logvar = model(x)
        return gaussian_nll(mean, logvar, t).mean()

    model.zero_grad()
    loss().backward()
    for name, p in model.named_parameters():
        analytic = p.grad.numpy().copy()
        base = p.detach().numpy().copy()

        def f(v, p=p):
            with torch.no_grad():
                p.copy_(torch.as_tensor(v))
                out = float(loss())
            return out

        numeric = central_difference(f, base)
        with torch.no_grad():
            p.copy_(torch.as_tensor(base))
        err = np.abs(analytic - numeric) / np.maximum(np.abs(numeric) + np.abs(analytic), 1e-8)
        assert err.max() <= 1e-3, name


def test_training_is_deterministic():
    rng = np.random.default_rng(0)
    data = linear_data(300, rng)

    def run():
        model = EnsembleModel(2, 1, ensemble_size=2, hidden_layers=2, hidden_size=16, seed=4)
        train_ensemble(model, data, TrainConfig(max_epochs=5), np.random.default_rng(11))
        return model.state_arrays()

    a, b = run(), run()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes(), k


def test_training_beats_constant_predictor():
    rng = np.random.default_rng(2)
    states, actions, nxt = linear_data(1000, rng)
    model = EnsembleModel(2, 1, ensemble_size=3, hidden_layers=2, hidden_size=32, seed=0)
    split_rng = np.random.default_rng(3)
    report = train_ensemble(model, (states, actions, nxt), TrainConfig(max_epochs=100), split_rng)
    # rebuild the same split to score the baseline
    perm = np.random.default_rng(3).permutation(1000)
    hold, train = perm[:100], perm[100:]
    deltas = nxt - states
    baseline = constant_predictor_nll(deltas[train], deltas[hold])
    assert len(report.holdout_nll_per_member) == 3
    assert max(report.holdout_nll_per_member) < baseline
    assert report.improved


def test_patience_zero_runs_one_epoch():
    data = linear_data(200, np.random.default_rng(0))
    model = EnsembleModel(2, 1, ensemble_size=2, hidden_layers=1, hidden_size=8)
    report = train_ensemble(model, data, TrainConfig(patience=0), np.random.default_rng(0))
    assert report.epochs_run == 1


def test_insufficient_data_and_divergence():
    model = EnsembleModel(2, 1, ensemble_size=3, hidden_layers=1, hidden_size=8)
    with pytest.raises(ValueError):
        train_ensemble(model, linear_data(5, np.random.default_rng(0)), TrainConfig(), np.random.default_rng(0))
    with torch.no_grad():
        model.head.weight[1].fill_(float("nan"))
    with pytest.raises(DivergenceError) as info:
        train_ensemble(model, linear_data(100, np.random.default_rng(0)), TrainConfig(), np.random.default_rng(0))
    assert info.value.member == 1
    assert "member 1" in str(info.value)


def test_bootstrap_members_diverge_from_identical_init():
    model = EnsembleModel(2, 1, ensemble_size=2, hidden_layers=2, hidden_size=16)
    with torch.no_grad():
        for p in model.parameters():
            p[1] = p[0]
    train_ensemble(model, linear_data(300, np.random.default_rng(0)), TrainConfig(max_epochs=3), np.random.default_rng(0))
    w = model.head.weight.detach()
    assert not torch.equal(w[0], w[1])


def test_normalization_round_trip():
    states, actions, nxt = linear_data(500, np.random.default_rng(4))
    model = EnsembleModel(2, 1, ensemble_size=2, dtype=torch.float64)
    x = np.concatenate([states, actions], axis=1)
    model.fit_normalizer(x, nxt - states)
    xt = torch.as_tensor(x)
    back = model.denormalize_inputs(model.normalize_inputs(xt)).numpy()
    np.testing.assert_allclose(back, x, rtol=1e-10, atol=1e-12)
    assert torch.all(model.in_std >= 1e-8) and torch.all(model.out_std >= 1e-8)
    model.fit_normalizer(np.ones((10, 3)), np.zeros((10, 2)))
    assert torch.all(model.in_std == 1e-8)


def test_predict_ensemble_matches_members():
    model = EnsembleModel(2, 1, ensemble_size=3, seed=9)
    model.fit_normalizer(np.random.default_rng(0).normal(size=(50, 3)), np.random.default_rng(1).normal(size=(50, 2)))
    s, a = np.array([0.4, -0.3]), np.array([0.2])
    pred = predict_ensemble(model, s, a)
    assert pred.size == 3
    for e in range(3):
        single = pnn_forward(model, e, s, a)
        np.testing.assert_array_equal(pred.members[e].mean, single.mean)
        np.testing.assert_array_equal(pred.members[e].var, single.var)
    again = predict_ensemble(model, s, a)
    for m1, m2 in zip(pred.members, again.members):
        np.testing.assert_array_equal(m1.mean, m2.mean)


def test_identical_members_have_zero_uncertainty():
    model = zero_model()
    assert u_gjs(predict_ensemble(model, [1.0, 2.0], [0.0])) == 0.0


def test_sampling():
    model = zero_model(init_logvar_bounds=(-40.0, -39.0))
    s = np.array([0.7, -0.1])
    np.testing.assert_allclose(sample_next(model, 0, s, [0.0], np.random.default_rng(0)), s, atol=1e-7)

    model = zero_model()
    pred = pnn_forward(model, 2, s, [0.0])
    n = 100_000
    draws = sample_next(model, 2, np.tile(s, (n, 1)), np.zeros((n, 1)), np.random.default_rng(1))
    se = np.sqrt(pred.var / n)
    assert np.all(np.abs(draws.mean(axis=0) - pred.mean) < 4 * se)
    a = sample_next(model, 0, s, [0.0], np.random.default_rng(5))
    b = sample_next(model, 0, s, [0.0], np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(IndexError):
        sample_next(model, 3, s, [0.0], np.random.default_rng(0))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = EnsembleModel(2, 1, ensemble_size=3, hidden_layers=2, hidden_size=8, seed=2)
    train_ensemble(model, linear_data(100, np.random.default_rng(0)), TrainConfig(max_epochs=2), np.random.default_rng(0))
    path = model.save(tmp_path / "model.ckpt")
    assert path.read_bytes()[:8] == b"MACURAck"
    loaded = EnsembleModel.load(path)
    for k, v in model.state_arrays().items():
        assert loaded.state_arrays()[k].tobytes() == v.tobytes()
    s = np.random.default_rng(1).normal(size=(5, 2))
    a = np.random.default_rng(2).normal(size=(5, 1))
    assert model.predict(s, a)[0].tobytes() == loaded.predict(s, a)[0].tobytes()
