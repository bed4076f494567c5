import numpy as np
import pytest

from urllc_lab.env import TrafficSource
from urllc_lab.harness.traces import fixture_sessions, packet_dataset, sources_from_sessions
from urllc_lab.nnet import numeric_gradient
from urllc_lab.refiner import (FeatureScaler, Refiner, RefinerConfig, VirtualEnvSpec, build_virtual_env,
                               epsilon_floor, gan_losses, load_refiner, make_discriminator, save_refiner,
                               synthetic_dataset, train_refiner)


def _pair(seed=0, n=64):
    rng = np.random.default_rng(seed)
    ref = Refiner(3, (8,), rng)
    for w in ref.net.weights:
        w *= 3.0
    disc = make_discriminator(3, (8,), rng)
    return ref, disc, rng.standard_normal((n, 3)) + 0.5, rng.standard_normal((n, 3))


def test_constant_half_discriminator_objective():
    ref, disc, x, z = _pair()
    disc.weights[-1][...] = 0.0
    disc.biases[-1][...] = 0.0
    assert gan_losses(ref, disc, x, z, 0.0).d_objective == pytest.approx(2 * np.log(0.5))


def test_identity_refiner_has_zero_similarity():
    ref, disc, x, z = _pair()
    ref.zero_()
    assert gan_losses(ref, disc, x, z, 7.0).similarity == 0.0


def test_gan_gradients_match_finite_differences():
    ref, disc, x, z = _pair(1, 16)
    _, g_d, g_r = gan_losses(ref, disc, x, z, 0.7, with_grads=True)
    for p, g in zip(disc.params, g_d):
        num = numeric_gradient(lambda: gan_losses(ref, disc, x, z, 0.7).d_loss, p)
        assert np.max(np.abs(g - num)) / max(np.max(np.abs(num)), 1e-8) < 1e-4
    for p, g in zip(ref.params, g_r):
        num = numeric_gradient(lambda: gan_losses(ref, disc, x, z, 0.7).r_loss, p)
        assert np.max(np.abs(g - num)) / max(np.max(np.abs(num)), 1e-8) < 1e-4


def test_epsilon_floor_examples():
    assert epsilon_floor([[1.0, 0.0], [1.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]) == 1.0
    z = np.random.default_rng(0).standard_normal((10, 3))
    assert epsilon_floor(z, z) == 0.0


def test_mean_similarity_never_below_floor():
    rng = np.random.default_rng(2)
    for _ in range(20):
        ref = Refiner(3, (16, 16), rng)
        for w in ref.net.weights:
            w *= rng.uniform(0.1, 5.0)
        z = rng.standard_normal((256, 3)) * rng.uniform(0.1, 3.0)
        fz = ref(z)
        assert np.linalg.norm(fz - z, axis=1).mean() >= epsilon_floor(fz, z) - 1e-9


def test_large_penalty_pins_refiner_to_input():
    rng = np.random.default_rng(3)
    real = rng.standard_normal((600, 1)) + 1.0
    syn = rng.standard_normal((600, 1))
    res = train_refiner(real, syn, RefinerConfig(lambda_r=1e3, steps=300, lr_refiner=1e-3, lr_disc=1e-3,
                                                 batch=64, hidden=(8,)), seed=0)
    assert res.mean_similarity < 0.05


def test_degenerate_dataset_rejected():
    with pytest.raises(ValueError):
        train_refiner(np.ones((10, 2)), np.random.default_rng(0).standard_normal((10, 2)))
    with pytest.raises(ValueError):
        FeatureScaler.fit(np.ones((5, 3)))


def test_pure_real_mixture_is_trace_replay():
    sessions = fixture_sessions(10, 2000.0, 150.0, seed=4)
    src = sources_from_sessions(sessions, 2, seed=4)
    real = packet_dataset(sessions, seed=4)
    ref = Refiner(3, (4,)).zero_()
    scaler = FeatureScaler.fit(real.log_features())
    venv = build_virtual_env(VirtualEnvSpec(1.0, 0.0), ref, scaler, src, real, seed=0)
    for s, v in zip(src, venv.streams):
        plain = s.stream()
        for k in range(50):
            a = plain.take(k * 1e-3, (k + 1) * 1e-3)
            b = v.take(k * 1e-3, (k + 1) * 1e-3)
            assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_pure_synthetic_identity_is_mm1():
    rng = np.random.default_rng(5)
    base = synthetic_dataset(5000, 200e-6, 350.0, rng)
    scaler = FeatureScaler.fit(base.log_features())
    ref = Refiner(3, (4,)).zero_()
    spec = VirtualEnvSpec(0.0, 1.0, 200e-6, 350.0)
    src = [TrafficSource(0, "poisson", 200e-6, 2800.0)]
    venv = build_virtual_env(spec, ref, scaler, src, None, seed=1)
    times, sizes = venv.streams[0].take(0.0, 20.0)
    iat = np.diff(times)
    assert iat.mean() == pytest.approx(200e-6, rel=0.02)
    assert np.std(iat) / iat.mean() == pytest.approx(1.0, abs=0.03)  # exponential gaps
    assert sizes.mean() / 8 == pytest.approx(350.0, rel=0.02)
    g = venv.fading_sampler(np.random.default_rng(0), (200, 100))
    assert g.mean() == pytest.approx(1.0, abs=0.02)
    assert venv.sampler.resample_rate == 0.0


def test_mixture_weights_validated():
    with pytest.raises(ValueError):
        VirtualEnvSpec(0.7, 0.7)


def test_save_load_refiner(tmp_path):
    rng = np.random.default_rng(6)
    real, syn = rng.standard_normal((100, 3)) + 0.3, rng.standard_normal((100, 3))
    cfg = RefinerConfig(steps=5, batch=16, hidden=(4,))
    res = train_refiner(real, syn, cfg, seed=1)
    scaler = FeatureScaler(np.zeros(3), np.ones(3))
    save_refiner(tmp_path / "r.json", res, scaler, cfg)
    ref, disc, sc = load_refiner(tmp_path / "r.json")
    z = rng.standard_normal((4, 3))
    assert np.array_equal(ref(z), res.refiner(z))
    assert np.array_equal(sc.std, scaler.std)
