from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cepsynth.model import (
    LOGVAR_MIN, AdamState, EncoderOutput, Layer, MLPParams, ModelError, TrainConfig,
    adam_step, ae_config, backward_mlp, decode, elbo_loss, encode, expected_param_count,
    forward_mlp, init_model, kl_divergence, load_model, loss_and_grads, pitch_condition,
    reparameterize, save_model, train, write_loss_csv,
)

from oracles import adam_reference, kl_monte_carlo


# forward

def test_forward_trivial_nets(rng):
    b = rng.standard_normal(3)
    zero = MLPParams([Layer(np.zeros((3, 5)), b)])
    assert np.array_equal(forward_mlp(zero, rng.standard_normal(5))[0], b)
    ident = MLPParams([Layer(np.eye(4), np.zeros(4))])
    x = rng.standard_normal(4)
    assert np.array_equal(forward_mlp(ident, x)[0], x)
    with pytest.raises(ModelError):
        forward_mlp(ident, np.ones(3))


def test_forward_hand_evaluated():
    net = MLPParams([Layer(np.array([[1.0, 2.0], [3.0, -1.0]]), np.array([0.0, 0.5])),
                     Layer(np.array([[1.0, 1.0]]), np.array([0.0]))], leak=0.01)
    # hidden pre-activation [1-2, 3+1+0.5] = [-1, 4.5] -> [-0.01, 4.5]; output 4.49
    out, _ = forward_mlp(net, np.array([1.0, -1.0]))
    assert np.isclose(out[0], 4.49, atol=1e-15)


# encode / decode

def _cvae(**kw):
    kw = {"latent_dim": 8, "hidden": 16, **kw}
    return init_model(TrainConfig(**kw))


def test_zero_heads_give_standard_posterior(rng):
    m = _cvae()
    for head in (m.mu_head, m.logvar_head):
        head.W[:] = 0.0
        head.b[:] = 0.0
    e = encode(m, rng.standard_normal(91), pitch_condition(65))
    assert np.array_equal(e.mu, np.zeros(8)) and np.array_equal(e.logvar, np.zeros(8))


def test_condition_is_live_and_required(rng):
    m = _cvae()
    x = rng.standard_normal(91)
    a, b = encode(m, x, pitch_condition(60)), encode(m, x, pitch_condition(71))
    assert not np.allclose(a.mu, b.mu)
    z = rng.standard_normal(8)
    assert not np.allclose(decode(m, z, pitch_condition(60)), decode(m, z, pitch_condition(71)))
    with pytest.raises(ModelError):
        encode(m, x)
    ae = init_model(ae_config(latent_dim=8, hidden=16))
    with pytest.raises(ModelError):
        encode(ae, x, pitch_condition(60))


def test_encode_deterministic(rng):
    x = rng.standard_normal(91)
    a = encode(_cvae(seed=5), x, pitch_condition(62))
    b = encode(_cvae(seed=5), x, pitch_condition(62))
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.logvar, b.logvar)


def test_conditioning_nullability(rng):
    m = _cvae()
    m.decoder.layers[0].W[:, 8:] = 0.0
    z = rng.standard_normal((5, 8))
    assert np.array_equal(decode(m, z, pitch_condition([60] * 5)),
                          decode(m, z, pitch_condition([71] * 5)))


def test_zero_decoder_outputs_bias(rng):
    m = _cvae()
    for layer in m.decoder.layers:
        layer.W[:] = 0.0
    b = rng.standard_normal(91)
    m.decoder.layers[-1].b[:] = b
    m.decoder.layers[0].b[:] = 0.0
    assert np.array_equal(decode(m, rng.standard_normal(8), pitch_condition(63)), b)


def test_reparameterize():
    mu = np.array([0.3, -1.0])
    z = reparameterize(EncoderOutput(mu, np.full(2, LOGVAR_MIN)), np.random.default_rng(0))
    assert np.allclose(z, mu, atol=1e-3)
    draws = reparameterize(EncoderOutput(np.zeros((100000, 3)), np.zeros((100000, 3))),
                           np.random.default_rng(1))
    assert np.all(np.abs(draws.mean(axis=0)) < 0.02)
    assert np.all(np.abs(draws.var(axis=0) - 1) < 0.05)
    e = EncoderOutput(mu, np.zeros(2))
    assert np.array_equal(reparameterize(e, np.random.default_rng(9)),
                          reparameterize(e, np.random.default_rng(9)))


# KL + ELBO

def test_kl_examples():
    assert kl_divergence(EncoderOutput(np.zeros(4), np.zeros(4))) == 0.0
    assert np.isclose(kl_divergence(EncoderOutput(np.array([1.0]), np.array([0.0]))), 0.5)


def test_kl_monte_carlo():
    r = np.random.default_rng(3)
    for _ in range(5):
        mu, lv = r.standard_normal(4), r.uniform(-1, 1, 4)
        exact = kl_divergence(EncoderOutput(mu, lv))
        assert abs(kl_monte_carlo(mu, lv, 10 ** 6, r) - exact) < 0.01 * exact


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=8))
def test_kl_nonnegative(pairs):
    mu, lv = np.array(pairs).T
    kl = kl_divergence(EncoderOutput(mu, lv))
    assert kl >= -1e-12
    if np.all(mu == 0) and np.all(lv == 0):
        assert kl == 0


def test_elbo_examples(rng):
    x = rng.standard_normal(91)
    zero = EncoderOutput(np.zeros(4), np.zeros(4))
    assert elbo_loss(x, x, zero, 0.1) == (0.0, 0.0, 0.0)
    e = EncoderOutput(np.array([1.0]), np.array([0.0]))
    total, recon, kl = elbo_loss(x, x + 1.0, e, 0.1)
    assert np.isclose(total, 1.05) and np.isclose(recon, 1.0) and np.isclose(kl, 0.5)
    total, recon, _ = elbo_loss(x, x + 0.5, e, 0.0)
    assert total == recon
    with pytest.raises(ModelError):
        elbo_loss(x, x[:-1], zero, 0.1)


# gradients

def _numeric_grads(m, xs, cond, beta, noise, h=1e-4):
    out = []
    for p in m.arrays():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = loss_and_grads(m, xs, cond, beta, noise)[0][0]
            p[i] = old - h
            dn = loss_and_grads(m, xs, cond, beta, noise)[0][0]
            p[i] = old
            g[i] = (up - dn) / (2 * h)
        out.append(g)
    return out


def gradient_check_errors(kind="CVAE", seed=0):
    r = np.random.default_rng(seed)
    cfg = TrainConfig(latent_dim=8, hidden=16, seed=seed, conditional=(kind == "CVAE"))
    m = init_model(cfg)
    xs = r.standard_normal((4, 91))
    cond = pitch_condition(r.integers(60, 72, 4)) if cfg.conditional else None
    noise = r.standard_normal((4, 8)) if m.variational else None
    _, grads = loss_and_grads(m, xs, cond, 0.1, noise)
    num = _numeric_grads(m, xs, cond, 0.1, noise)
    return [np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-300)
            for a, n in zip(grads, num)]


def test_gradient_check_cvae():
    assert max(gradient_check_errors("CVAE")) < 1e-4


def test_gradient_check_ae():
    assert max(gradient_check_errors("AE", seed=1)) < 1e-4


def test_zero_loss_zero_grads_and_linearity(rng):
    m = init_model(ae_config(latent_dim=8, hidden=16))
    x = rng.standard_normal((1, 91))
    for layer in m.decoder.layers:
        layer.W[:] = 0.0
    m.decoder.layers[-1].b[:] = x[0]
    (total, _, _), grads = loss_and_grads(m, x, None, 0.0)
    assert total == 0.0 and all(not np.any(g) for g in grads)

    net = MLPParams([Layer(rng.standard_normal((6, 5)), rng.standard_normal(6)),
                     Layer(rng.standard_normal((3, 6)), rng.standard_normal(3))])
    _, cache = forward_mlp(net, rng.standard_normal((2, 5)))
    g = rng.standard_normal((2, 3))
    one, _ = backward_mlp(net, cache, g)
    two, _ = backward_mlp(net, cache, 2 * g)
    for a, b in zip(one, two):
        assert np.allclose(2 * a.W, b.W, rtol=0, atol=1e-14)
        assert np.allclose(2 * a.b, b.b, rtol=0, atol=1e-14)


# optimiser

def test_adam_constant_gradient_limit():
    p = [np.zeros(3)]
    state = AdamState.zeros_like(p)
    for _ in range(2000):
        before = p[0].copy()
        adam_step(p, [np.array([0.5, -2.0, 1e-3])], state, lr=1e-3)
    assert np.allclose(np.abs(p[0] - before), 1e-3, rtol=1e-4)


def test_adam_zero_gradient():
    p = [np.array([1.0, -2.0])]
    state = AdamState.zeros_like(p)
    adam_step(p, [np.zeros(2)], state)
    assert np.array_equal(p[0], [1.0, -2.0])
    adam_step(p, [np.array([1.0, 1.0])], state)
    m1, v1 = state.m[0].copy(), state.v[0].copy()
    adam_step(p, [np.zeros(2)], state)
    assert np.allclose(state.m[0], 0.9 * m1) and np.allclose(state.v[0], 0.999 * v1)
    with pytest.raises(ModelError):
        adam_step(p, [np.zeros(3)], state)


def adam_trajectory_error():
    A = np.array([[3.0, 0.5], [0.5, 1.0]])
    grad = lambda th: list(A @ np.asarray(th) - np.array([1.0, -2.0]))
    ref = adam_reference([0.7, -0.3], grad, 10, lr=0.05)
    p = [np.array([0.7, -0.3])]
    state = AdamState.zeros_like(p)
    ours = []
    for _ in range(10):
        adam_step(p, [np.array(grad(p[0]))], state, lr=0.05)
        ours.append(p[0].copy())
    return float(np.max(np.abs(np.array(ours) - ref)))


def test_adam_matches_reference():
    assert adam_trajectory_error() < 1e-12


# training

def memorization_loss(epochs=200):
    x = np.random.default_rng(0).normal(0, 0.3, 91)
    m = train(np.tile(x, (512, 1)), None,
              ae_config(epochs=epochs, latent_dim=8, standardize=False, seed=0))
    return m.loss_history[-1][0]


def test_memorization():
    assert memorization_loss() < 1e-5


def _two_clusters(n=128):
    r = np.random.default_rng(2)
    centres = r.normal(0, 1, (2, 91))
    X = np.concatenate([centres[0] + 0.05 * r.standard_normal((n, 91)),
                        centres[1] + 0.05 * r.standard_normal((n, 91))])
    return X, np.repeat([60, 71], n)


def test_training_curve_smoothed_nonincreasing():
    X, midi = _two_clusters()
    m = train(X, midi, TrainConfig(beta=0.1, epochs=400, latent_dim=8, seed=1))
    total = np.array([r + 0.1 * k for r, k in m.loss_history])
    smooth = np.convolve(total, np.ones(50) / 50, mode="valid")
    assert np.all(np.diff(smooth) <= 1e-4 * smooth[:-1])


def test_training_deterministic_and_errors():
    X, midi = _two_clusters(16)
    cfg = TrainConfig(epochs=5, latent_dim=4, seed=3)
    assert train(X, midi, cfg).loss_history == train(X, midi, cfg).loss_history
    with pytest.raises(ModelError):
        train(np.zeros((0, 91)), [], cfg)
    with pytest.raises(ModelError):
        train(X, None, cfg)


def test_beta_limit_matches_autoencoder():
    X, _ = _two_clusters(32)
    cfg = ae_config(epochs=30, latent_dim=4, seed=4)
    ae = init_model(cfg)
    vae = ae.copy()
    h = ae.config.hidden
    # a log-variance head pinned below the clamp floor: sd = exp(-10)
    vae.logvar_head = Layer(np.zeros((4, h)), np.full(4, -30.0))
    a = train(X, None, cfg, init=ae).loss_history
    b = train(X, None, cfg, init=vae).loss_history
    ra, rb = np.array(a)[:, 0], np.array(b)[:, 0]
    assert np.allclose(ra, rb, rtol=1e-3)


def test_parameter_count():
    cfg = TrainConfig(latent_dim=32)
    hand = (92 * 91 + 91) + 2 * (91 * 32 + 32) + (33 * 91 + 91) + (91 * 91 + 91)
    assert init_model(cfg).n_params() == expected_param_count(cfg) == hand
    ae = ae_config(latent_dim=32)
    assert init_model(ae).n_params() == expected_param_count(ae) == 91 * 91 + 91 + 91 * 32 + 32 + 32 * 91 + 91 + 91 * 91 + 91


def test_config_validation():
    with pytest.raises(ModelError):
        TrainConfig(beta=-1)
    with pytest.raises(ModelError):
        TrainConfig(latent_dim=0)
    with pytest.raises(ModelError):
        TrainConfig(cond_encoding="words")


def test_onehot_condition():
    c = pitch_condition([60, 65.5, 71], "onehot")
    assert c.shape == (3, 12) and np.allclose(c.sum(axis=1), 1)
    assert c[1, 5] == 0.5 and c[1, 6] == 0.5


def test_model_file_round_trip(tmp_path, rng):
    X, midi = _two_clusters(16)
    m = train(X, midi, TrainConfig(epochs=3, latent_dim=4, seed=0))
    back = load_model(save_model(m, tmp_path / "m.vpmd"))
    assert all(np.array_equal(a, b) for a, b in zip(m.arrays(), back.arrays()))
    assert back.config == m.config and back.loss_history == m.loss_history
    z = rng.standard_normal(4)
    assert np.array_equal(decode(m, z, pitch_condition(64)), decode(back, z, pitch_condition(64)))
    p = write_loss_csv(m, tmp_path / "loss.csv", "abc")
    assert p.read_text().splitlines()[:2] == ["# config_hash=abc", "epoch,recon,kl"]
    bad = tmp_path / "bad.vpmd"
    bad.write_bytes(b"VPEN" + bytes(20))
    with pytest.raises(ModelError, match="bad magic"):
        load_model(bad)
    (tmp_path / "t.vpmd").write_bytes((tmp_path / "m.vpmd").read_bytes()[:200])
    with pytest.raises(ModelError):
        load_model(tmp_path / "t.vpmd")
