import numpy as np
import pytest

from dskd import tensor as tn
from dskd.diffusion import ConfigError, NoisePredictor, compute_sigma2, make_schedule, posterior_params, unguided_step
from dskd.guidance import (
    GuidanceConfig,
    NoiseAdapter,
    TeacherClassifier,
    adapter_init,
    classifier_grad,
    classifier_logits,
    denoise_student,
    guided_step,
    teacher_log_prob,
)
from dskd.tensor import Tensor


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


class ZeroNoise:
    def __call__(self, x, t):
        return f64(np.zeros(x.shape))


class ZeroRng:
    def standard_normal(self, shape):
        return np.zeros(shape)


def random_classifier(rng, d=4, c=3):
    return TeacherClassifier(rng.standard_normal((d, c)).astype(np.float32), rng.standard_normal(c).astype(np.float32))


def forced_adapter(depth, logit):
    a = NoiseAdapter(depth, seed=0)
    a.params["fc.w"].data[:] = 0
    a.params["fc.b"].data[:] = logit
    return a


def test_identity_classifier_logits():
    tc = TeacherClassifier(np.eye(2, dtype=np.float32), np.zeros(2, np.float32))
    x = np.broadcast_to(np.array([3.0, -1.0], np.float32), (2, 3, 2))
    np.testing.assert_allclose(classifier_logits(tc, x).data, [3.0, -1.0])


def test_logits_invariant_to_tiling(rng):
    tc = random_classifier(rng)
    x = rng.standard_normal((2, 3, 4)).astype(np.float32)
    tiled = np.tile(x, (2, 2, 1))
    np.testing.assert_allclose(classifier_logits(tc, tiled).data, classifier_logits(tc, x).data, rtol=1e-5)


def test_zero_map_gives_bias(rng):
    tc = random_classifier(rng)
    np.testing.assert_array_equal(classifier_logits(tc, np.zeros((2, 2, 4), np.float32)).data, tc.bias)


def test_depth_mismatch_is_shape_error(rng):
    with pytest.raises(tn.ShapeError):
        classifier_logits(random_classifier(rng), np.zeros((2, 2, 5)))


def test_grad_with_uniform_probabilities(rng):
    w = rng.standard_normal((4, 3))
    tc = TeacherClassifier(w, np.zeros(3))
    x = np.zeros((2, 3, 4))  # zero map and zero bias give equal logits
    g = classifier_grad(tc, x, 1)
    expected = (w[:, 1] - w.mean(axis=1)) / 6
    np.testing.assert_allclose(g, np.broadcast_to(expected, x.shape), rtol=1e-14)


def test_single_class_grad_vanishes(rng):
    tc = TeacherClassifier(rng.standard_normal((4, 1)), rng.standard_normal(1))
    np.testing.assert_array_equal(classifier_grad(tc, rng.standard_normal((2, 2, 4)), 0), 0.0)


def test_grad_rejects_bad_label(rng):
    tc = random_classifier(rng)
    with pytest.raises(IndexError):
        classifier_grad(tc, np.zeros((2, 2, 4)), 3)


def test_grad_matches_central_differences(rng):
    tc = TeacherClassifier(rng.standard_normal((3, 4)), rng.standard_normal(4))
    x = rng.standard_normal((2, 2, 3))
    g = classifier_grad(tc, x, 2)
    num = np.zeros_like(x)
    h = 1e-5
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = (teacher_log_prob(tc, xp, 2)[0] - teacher_log_prob(tc, xm, 2)[0]) / (2 * h)
    assert np.max(np.abs(g - num)) < 1e-8


def test_k0_guided_step_is_bitwise_unguided(rng):
    s = make_schedule(3, 0.1, 0.3)
    model = NoisePredictor(4, seed=1)
    tc = random_classifier(rng)
    x = Tensor(rng.standard_normal((2, 4, 4, 4)))
    for t in (3, 2, 1):
        a = guided_step(model, tc, x, t, [0, 2], 0.0, s, np.random.default_rng(t)).data
        b = unguided_step(model, x, t, s, np.random.default_rng(t)).data
        assert a.tobytes() == b.tobytes()


def test_final_step_returns_mu_for_any_k(rng):
    s = make_schedule(3, 0.1, 0.3)
    model = NoisePredictor(4, seed=1)
    tc = random_classifier(rng)
    x = Tensor(rng.standard_normal((1, 2, 2, 4)))
    mu, _ = posterior_params(model, x, 1, s)
    for k in (0.0, 1.0, 5.0):
        assert guided_step(model, tc, x, 1, [1], k, s, np.random.default_rng(0)).data.tobytes() == mu.data.tobytes()


def test_negative_k_rejected(rng):
    with pytest.raises(ValueError):
        guided_step(ZeroNoise(), random_classifier(rng), f64(np.zeros((1, 2, 2, 4))), 2, [0], -1.0,
                    make_schedule(2, 0.1, 0.2), np.random.default_rng(0))


def test_guided_mean_monte_carlo():
    # equal betas with beta/(2-beta) = sigma^2 give sigma_2 = 0.05 exactly
    sigma = 0.05
    beta = 2 * sigma**2 / (1 + sigma**2)
    s = make_schedule(2, beta, beta)
    assert compute_sigma2(2, s) == pytest.approx(sigma**2, rel=1e-12)
    rng = np.random.default_rng(7)
    tc = TeacherClassifier(np.array([[1.0, -0.5, 0.2], [0.3, 0.8, -1.0]]), np.array([0.1, 0.0, -0.2]))
    n, k, y = 1_000_000, 1.5, 2
    x_t = np.broadcast_to(np.array([0.4, -0.3]), (n, 1, 1, 2))
    out = guided_step(ZeroNoise(), tc, f64(x_t), 2, np.full(n, y), k, s, rng).data.reshape(n, 2)
    mu = np.array([0.4, -0.3]) / np.sqrt(s.alpha_at(2))
    target = mu + k * sigma**2 * classifier_grad(tc, x_t[:1], [y]).reshape(2)
    se = sigma / np.sqrt(n)
    assert np.all(np.abs(out.mean(axis=0) - target) < 3 * se)


def test_margin_nondecreasing_in_k(rng):
    s = make_schedule(3, 0.1, 0.3)
    model = NoisePredictor(4, seed=2)
    tc = random_classifier(rng)
    x = Tensor(rng.standard_normal((6, 2, 2, 4)))
    y = rng.integers(3, size=6)
    prev = None
    for k in (0.0, 0.5, 1.0, 2.0, 4.0):
        out = guided_step(model, tc, x, 3, y, k, s, np.random.default_rng(3)).data
        z = classifier_logits(tc, out).data.astype(np.float64)
        margin = z[np.arange(6), y] - np.log(np.exp(z).sum(axis=1))
        if prev is not None:
            assert np.all(margin >= prev - 1e-6)
        prev = margin


def test_adapter_extremes_and_midpoint(rng):
    f = rng.standard_normal((2, 4, 4, 3)).astype(np.float32)
    x, kappa = adapter_init(forced_adapter(3, 60.0), f, np.random.default_rng(0))
    np.testing.assert_array_equal(kappa, 1.0)
    np.testing.assert_array_equal(x.data, f)
    eps = np.random.default_rng(0).standard_normal(f.shape).astype(np.float32)
    x, kappa = adapter_init(forced_adapter(3, -60.0), f, np.random.default_rng(0))
    np.testing.assert_allclose(x.data, eps, atol=1e-6)
    x, kappa = adapter_init(forced_adapter(3, 0.0), np.full((1, 2, 2, 3), 2.0, np.float32), ZeroRng())
    np.testing.assert_array_equal(kappa, 0.5)
    np.testing.assert_array_equal(x.data, 1.0)


def test_kappa_strictly_inside_unit_interval(rng):
    a = NoiseAdapter(3, seed=4)
    _, kappa = adapter_init(a, 3 * rng.standard_normal((8, 4, 4, 3)), np.random.default_rng(0))
    assert kappa.shape == (8,) and np.all((kappa > 0) & (kappa < 1))


def test_denoise_rejects_step_mismatch(rng):
    with pytest.raises(ConfigError):
        denoise_student(NoisePredictor(4), random_classifier(rng), NoiseAdapter(4), np.zeros((1, 2, 2, 4)), [0],
                        GuidanceConfig(k=1.0, T=3), make_schedule(2, 0.1, 0.2), np.random.default_rng(0))


def test_single_step_denoise_is_posterior_mean(rng):
    s = make_schedule(1, 0.1, 0.1)
    f = rng.standard_normal((2, 2, 2, 4))
    eps = rng.standard_normal(f.shape)

    class Oracle:
        def __call__(self, x, t):
            return f64(eps)

    out, _ = denoise_student(Oracle(), random_classifier(rng), forced_adapter(4, 60.0).cast(np.float64), f64(f),
                             [0, 1], GuidanceConfig(k=0.0, T=1), s, np.random.default_rng(0))
    mu, _ = posterior_params(Oracle(), f64(f), 1, s)
    np.testing.assert_allclose(out.data, mu.data, rtol=1e-12)


def test_k0_denoise_matches_manual_unguided_chain(rng):
    s = make_schedule(3, 0.1, 0.3)
    model, adapter = NoisePredictor(4, seed=5), NoiseAdapter(4, seed=6)
    f = rng.standard_normal((2, 4, 4, 4)).astype(np.float32)
    got, _ = denoise_student(model, random_classifier(rng), adapter, f, [0, 1], GuidanceConfig(k=0.0, T=3), s,
                             np.random.default_rng(9))
    r = np.random.default_rng(9)
    x, _ = adapter_init(adapter, f, r)
    for t in (3, 2, 1):
        x = unguided_step(model, x, t, s, r)
    assert got.data.tobytes() == x.data.tobytes()


def test_gradient_reaches_only_the_adapter(rng):
    s = make_schedule(2, 0.1, 0.3)
    model, adapter = NoisePredictor(4, seed=5), NoiseAdapter(4, seed=6)
    f = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
    before = f.data.copy()
    out, _ = denoise_student(model, random_classifier(rng), adapter, f, [0, 1], GuidanceConfig(k=1.0, T=2), s,
                             np.random.default_rng(1))
    tn.backward(tn.sum(tn.square(out)))
    assert f.grad is None
    assert all(p.grad is None for p in model.params.values())
    assert any(p.grad is not None and np.any(p.grad != 0) for p in adapter.params.values())
    np.testing.assert_array_equal(f.data, before)


def test_frozen_adapter_mode_records_no_tape(rng):
    s = make_schedule(2, 0.1, 0.3)
    out, _ = denoise_student(NoisePredictor(4), random_classifier(rng), NoiseAdapter(4), rng.standard_normal((1, 2, 2, 4)),
                             [0], GuidanceConfig(T=2), s, np.random.default_rng(0), adapter_grad="frozen")
    assert not out.requires_grad


def test_guidance_raises_teacher_log_prob(rng):
    s = make_schedule(2, 0.1, 0.3)
    model, adapter = NoisePredictor(4, seed=7), NoiseAdapter(4, seed=8)
    tc = random_classifier(rng)
    f = rng.standard_normal((512, 2, 2, 4)).astype(np.float32)
    y = rng.integers(3, size=512)
    lp = {}
    with tn.no_grad():
        for k in (0.0, 1.0):
            out, _ = denoise_student(model, tc, adapter, f, y, GuidanceConfig(k=k, T=2), s, np.random.default_rng(4))
            lp[k] = teacher_log_prob(tc, out.data, y).mean()
    assert lp[1.0] > lp[0.0]


def test_guidance_config_validation():
    with pytest.raises(ConfigError):
        GuidanceConfig(k=-0.1)
    with pytest.raises(ConfigError):
        GuidanceConfig(T=0)
    with pytest.raises(ConfigError):
        GuidanceConfig(target_label_source="predicted")
