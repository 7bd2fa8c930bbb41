import math
from dataclasses import replace

import numpy as np
import pytest

from aerofed import detector, nn
from aerofed.rng import stream

NO_DP = detector.DpConfig(epsilon_dp=np.inf, delta_dp=1e-5, clip_bound=np.inf)


def small_gan(seed=0, feature_dim=4, latent_dim=3, hidden=(8,)):
    return detector.new_gan(feature_dim, latent_dim, hidden, stream(seed, "gan-init"))


def test_discriminator_loss_zero_params():
    # constant critic: D == 0 and grad == 0, so only the (0-1)^2 penalty remains
    gan = small_gan()
    gan = replace(gan, w=np.zeros_like(gan.w))
    batch = stream(1, "batch").normal(size=(6, 4))
    loss = detector.discriminator_loss(gan, batch, batch, batch, gp_coeff=10.0)
    assert abs(loss - 10.0) < 1e-12


def test_discriminator_loss_unit_gradient_cancels():
    # D(x) = a.x with ||a|| = 1 and real == fake: every term vanishes
    spec = nn.MlpSpec((4, 1), activation="linear", output_activation="linear")
    a = np.array([0.5, 0.5, 0.5, 0.5])
    gan = detector.GanModel(
        gen_spec=nn.MlpSpec((3, 4), activation="tanh"),
        disc_spec=spec,
        theta=np.zeros(nn.MlpSpec((3, 4), activation="tanh").param_count()),
        w=np.concatenate([a, [0.0]]),
        latent_dim=3,
    )
    batch = stream(2, "batch").normal(size=(5, 4))
    loss = detector.discriminator_loss(gan, batch, batch, batch, gp_coeff=10.0)
    assert abs(loss) < 1e-12


def test_discriminator_loss_matches_straight_line_oracle():
    gan = small_gan(3)
    rng = stream(3, "batch")
    real = rng.normal(size=(7, 4))
    fake = rng.normal(size=(7, 4))
    u = rng.uniform(size=7)
    interp = detector.interpolate(real, fake, u)

    total = 0.0
    for i in range(7):
        d_real = nn.forward(gan.disc_spec, gan.w, real[i])[0]
        d_fake = nn.forward(gan.disc_spec, gan.w, fake[i])[0]
        g = nn.grad_input(gan.disc_spec, gan.w, interp[i])
        total += d_fake - d_real + 10.0 * (np.linalg.norm(g) - 1.0) ** 2
    oracle = total / 7
    loss = detector.discriminator_loss(gan, real, fake, interp, gp_coeff=10.0)
    assert abs(loss - oracle) < 1e-10


def test_losses_match_oracle_on_random_sweep():
    for case in range(100):
        rng = stream(case, "loss-sweep")
        gan = small_gan(seed=case + 500, hidden=(6,))
        m = int(rng.integers(1, 9))
        real = rng.normal(size=(m, 4))
        fake = rng.normal(size=(m, 4))
        interp = detector.interpolate(real, fake, rng.uniform(size=m))
        total = 0.0
        for i in range(m):
            d_r = nn.forward(gan.disc_spec, gan.w, real[i])[0]
            d_f = nn.forward(gan.disc_spec, gan.w, fake[i])[0]
            g = nn.grad_input(gan.disc_spec, gan.w, interp[i])
            total += d_f - d_r + 10.0 * (np.linalg.norm(g) - 1.0) ** 2
        assert abs(detector.discriminator_loss(gan, real, fake, interp, 10.0)
                   - total / m) < 1e-10
        lg_oracle = -sum(nn.forward(gan.disc_spec, gan.w, fake[i])[0]
                         for i in range(m)) / m
        assert abs(detector.generator_loss(gan, fake) - lg_oracle) < 1e-10


def test_discriminator_loss_empty_batch():
    gan = small_gan()
    empty = np.zeros((0, 4))
    with pytest.raises(ValueError):
        detector.discriminator_loss(gan, empty, empty, empty, 10.0)


def test_generator_loss_constant_critic():
    gan = small_gan()
    w = np.zeros_like(gan.w)
    w[-1] = 3.5  # critic output bias: D == 3.5 everywhere
    gan = replace(gan, w=w)
    batch = stream(4, "batch").normal(size=(5, 4))
    assert abs(detector.generator_loss(gan, batch) + 3.5) < 1e-12
    gan0 = replace(gan, w=np.zeros_like(gan.w))
    assert detector.generator_loss(gan0, batch) == 0.0


def test_generator_loss_matches_oracle():
    gan = small_gan(5)
    batch = stream(5, "batch").normal(size=(9, 4))
    oracle = -np.mean([nn.forward(gan.disc_spec, gan.w, row)[0] for row in batch])
    assert abs(detector.generator_loss(gan, batch) - oracle) < 1e-10


def test_noise_scale_spot_value():
    # 2*0.5*sqrt(6*ln(1e5))/10 = sqrt(69.0776)/10
    sigma = detector.noise_scale(0.5, 6, 1e-5, 10.0)
    assert abs(sigma - 0.83113) < 1e-4
    assert abs(sigma - math.sqrt(6 * math.log(1e5)) / 10.0) < 1e-12


def test_noise_scale_limits():
    assert detector.noise_scale(1e-12, 6, 1e-5, 10.0) < 1e-11
    s1 = detector.noise_scale(0.3, 6, 1e-5, 5.0)
    s2 = detector.noise_scale(0.3, 6, 1e-5, 10.0)
    assert abs(s1 - 2 * s2) < 1e-15


def test_noise_scale_exact_closed_form_sweep():
    rng = stream(6, "noise-sweep")
    for _ in range(100):
        p = rng.uniform(0.01, 1.0)
        nd = int(rng.integers(1, 20))
        delta = rng.uniform(1e-8, 1e-2)
        eps = rng.uniform(0.1, 50.0)
        expected = 2.0 * p * math.sqrt(nd * math.log(1.0 / delta)) / eps
        got = detector.noise_scale(p, nd, delta, eps)
        assert abs(got - expected) <= 1e-12 * max(1.0, abs(expected))


def test_dp_gradient_noiseless_equals_plain_mean():
    gan = small_gan(7)
    rng = stream(7, "batch")
    real = rng.normal(size=(6, 4))
    fake = rng.normal(size=(6, 4))
    interp = detector.interpolate(real, fake, rng.uniform(size=6))
    got = detector.dp_discriminator_gradient(gan, real, fake, interp, 10.0, NO_DP,
                                             stream(7, "noise"))
    plain = detector._per_sample_critic_grads(gan, real, fake, interp, 10.0).mean(axis=0)
    assert np.array_equal(got, plain)


def test_dp_gradient_clipping_bounds_contributions():
    gan = small_gan(8)
    rng = stream(8, "batch")
    real = rng.normal(size=(4, 4)) * 50.0  # force large per-sample gradients
    fake = rng.normal(size=(4, 4)) * 50.0
    interp = detector.interpolate(real, fake, rng.uniform(size=4))
    per_sample = detector._per_sample_critic_grads(gan, real, fake, interp, 10.0)
    assert np.linalg.norm(per_sample, axis=1).max() > 1.0
    dp = detector.DpConfig(epsilon_dp=10.0, delta_dp=1e-5, clip_bound=1.0)
    got = detector.dp_discriminator_gradient(gan, real, fake, interp, 10.0, dp,
                                             stream(8, "noise"))
    # mean of 4 clipped rows can be at most norm 1
    assert np.linalg.norm(got) <= 1.0 + 1e-12


def test_dp_gradient_noise_std_matches_configuration():
    # zero critic params make the analytic gradient exactly zero, leaving noise
    gan = small_gan(9)
    gan = replace(gan, w=np.zeros_like(gan.w))
    m = 20
    rng = stream(9, "batch")
    real = rng.normal(size=(m, 4))
    fake = rng.normal(size=(m, 4))
    interp = detector.interpolate(real, fake, rng.uniform(size=m))
    sigma, c_g = 0.8, 1.0
    dp = detector.DpConfig(10.0, 1e-5, c_g, noise_scale=sigma)
    noise_rng = stream(9, "noise")
    draws = []
    while sum(d.size for d in draws) < 100_000:
        draws.append(detector.dp_discriminator_gradient(gan, real, fake, interp, 10.0,
                                                        dp, noise_rng))
    samples = np.concatenate(draws)
    expected_std = sigma * c_g / math.sqrt(m)
    assert abs(samples.std() - expected_std) / expected_std < 0.05


def test_local_update_zero_iters_is_identity():
    gan = small_gan(10)
    cfg = detector.TrainConfig(batch_size=4, n_disc_iters=2, n_local_iters=0)
    rows = stream(10, "rows").normal(size=(32, 4))
    out = detector.local_update(gan, rows, cfg, NO_DP, stream(10, "upd"))
    assert np.array_equal(out.theta, gan.theta)
    assert np.array_equal(out.w, gan.w)


def test_local_update_deterministic():
    gan = small_gan(11)
    cfg = detector.TrainConfig(batch_size=4, n_disc_iters=2, n_local_iters=3)
    rows = stream(11, "rows").normal(size=(32, 4))
    a = detector.local_update(gan, rows, cfg, NO_DP, stream(11, "upd"))
    b = detector.local_update(gan, rows, cfg, NO_DP, stream(11, "upd"))
    assert np.array_equal(a.theta, b.theta)
    assert np.array_equal(a.w, b.w)


def test_local_update_rejects_small_dataset():
    gan = small_gan(12)
    cfg = detector.TrainConfig(batch_size=16, n_disc_iters=1, n_local_iters=1)
    with pytest.raises(ValueError):
        detector.local_update(gan, np.zeros((8, 4)), cfg, NO_DP, stream(12, "upd"))


def plain_wgan_gp_oracle(gan, rows, cfg, rng):
    """Straight-line WGAN-GP loop with no privacy machinery, mirroring the
    documented draw order (latent, indices, interpolation weights)."""
    theta, w = gan.theta, gan.w
    m = cfg.batch_size
    adam_w = nn.AdamState.fresh(w.size, cfg.alpha, cfg.beta1, cfg.beta2)
    adam_t = nn.AdamState.fresh(theta.size, cfg.alpha, cfg.beta1, cfg.beta2)
    for _ in range(cfg.n_local_iters):
        for _ in range(cfg.n_disc_iters):
            z = rng.standard_normal((m, gan.latent_dim))
            idx = rng.integers(0, rows.shape[0], size=m)
            u = rng.uniform(size=m)
            real = rows[idx]
            fake = nn.forward(gan.gen_spec, theta, z)
            interp = detector.interpolate(real, fake, u)
            ones = np.ones((m, 1))
            g_fake = nn.per_sample_grad_params(gan.disc_spec, w, fake, ones)
            g_real = nn.per_sample_grad_params(gan.disc_spec, w, real, ones)
            g_pen, _, _ = nn.gp_per_sample(gan.disc_spec, w, interp, cfg.gp_coeff)
            grad_w = (g_fake - g_real + g_pen).mean(axis=0)
            w, adam_w = nn.adam_step(w, grad_w, adam_w)
        z = rng.standard_normal((m, gan.latent_dim))
        fake = nn.forward(gan.gen_spec, theta, z)
        d_grad = nn.grad_input(gan.disc_spec, w, fake)
        grad_t = nn.grad_params(gan.gen_spec, theta, z, -d_grad / m)
        theta, adam_t = nn.adam_step(theta, grad_t, adam_t)
    return theta, w


def test_local_update_noiseless_is_plain_wgan_gp_bit_identical():
    gan = small_gan(13)
    cfg = detector.TrainConfig(batch_size=5, n_disc_iters=3, n_local_iters=10)
    rows = stream(13, "rows").normal(size=(64, 4))
    trained = detector.local_update(gan, rows, cfg, NO_DP, stream(13, "upd"))
    theta, w = plain_wgan_gp_oracle(gan, rows, cfg, stream(13, "upd"))
    assert np.array_equal(trained.theta, theta)
    assert np.array_equal(trained.w, w)


def train_toy_gaussian(seed, iters=500, mean=(2.0, 2.0)):
    """Train on z-scored rows, as the production pipeline always does."""
    from aerofed.dataset import Normalizer

    rng = stream(seed, "toy-data")
    rows = rng.normal(loc=mean, scale=0.1, size=(512, 2))
    norm = Normalizer.fit(rows)
    gan = detector.new_gan(2, 4, (16, 16), stream(seed, "toy-init"))
    cfg = detector.TrainConfig(batch_size=20, n_disc_iters=3, n_local_iters=iters,
                               alpha=5e-4)
    trained = detector.local_update(gan, norm.normalize(rows), cfg, NO_DP,
                                    stream(seed, "toy-train"))
    return trained, norm, rows


def test_local_update_learns_toy_gaussian_mean():
    trained, norm, _ = train_toy_gaussian(14)
    z = stream(14, "toy-sample").standard_normal((10_000, 4))
    samples = norm.denormalize(nn.forward(trained.gen_spec, trained.theta, z))
    err = np.linalg.norm(samples.mean(axis=0) - np.array([2.0, 2.0]))
    assert err < 0.5  # loose per-module check; the acceptance suite runs longer


def test_anomaly_score_weight_zero_is_negated_critic():
    gan = small_gan(15)
    model = detector.AnomalyModel(gan, threshold=0.0, score_weight=0.0,
                                  latent_search_count=8)
    x = stream(15, "x").normal(size=(6, 4))
    scores = detector.anomaly_scores(model, x, stream(15, "score"))
    critic = nn.forward(gan.disc_spec, gan.w, x)[:, 0]
    assert np.allclose(scores, -critic)


def test_anomaly_score_single_matches_batch():
    gan = small_gan(22)
    model = detector.AnomalyModel(gan, threshold=0.0, latent_search_count=8)
    x = stream(22, "x").normal(size=4)
    single = detector.anomaly_score(model, x, stream(22, "score"))
    batch = detector.anomaly_scores(model, x[None, :], stream(22, "score"))
    assert single == batch[0]


def test_anomaly_score_perfect_reconstruction():
    gan = small_gan(16)
    model = detector.AnomalyModel(gan, threshold=0.0, score_weight=1.0,
                                  latent_search_count=8)
    # rebuild the latent set the scorer will draw, then score one of its outputs
    z = stream(16, "score").standard_normal((8, gan.latent_dim))
    candidates = nn.forward(gan.gen_spec, gan.theta, z)
    scores = detector.anomaly_scores(model, candidates[3], stream(16, "score"))
    assert scores[0] == 0.0


def test_calibrate_threshold_degenerate_injection():
    gan = small_gan(17)
    model = detector.AnomalyModel(gan, threshold=0.0)
    validation = stream(17, "val").normal(size=(40, 4))
    thr = detector.calibrate_threshold(model, validation, 0.5, 0.0, stream(17, "cal"))
    scores = detector.anomaly_scores(model, validation, stream(17, "cal-ref"))
    # magnitude 0: the injected copy equals the original, threshold == A_normal
    rng_ref = stream(17, "cal")
    _ = detector.inject_rows(validation, 0.5, 0.0, rng_ref)
    ref_scores = detector.anomaly_scores(model, np.vstack([validation, validation]), rng_ref)
    assert thr == ref_scores[:40].mean()


def test_calibrate_threshold_midpoint():
    gan = small_gan(18)
    model = detector.AnomalyModel(gan, threshold=0.0, score_weight=1.0,
                                  latent_search_count=4)
    validation = stream(18, "val").normal(size=(30, 4))
    rng = stream(18, "cal")
    injected, _ = detector.inject_rows(validation, 0.5, 3.0, rng)
    scores = detector.anomaly_scores(model, np.vstack([validation, injected]), rng)
    expected = (scores[:30].mean() + scores[30:].mean()) / 2
    got = detector.calibrate_threshold(model, validation, 0.5, 3.0, stream(18, "cal"))
    assert got == expected


def test_calibrate_threshold_empty_set():
    gan = small_gan(19)
    model = detector.AnomalyModel(gan, threshold=0.0)
    with pytest.raises(ValueError):
        detector.calibrate_threshold(model, np.zeros((0, 4)), 0.5, 3.0, stream(19, "cal"))


def test_evaluate_hand_computed_counts():
    predicted = np.array([True] * 10 + [False] * 2)
    actual = np.array([True] * 8 + [False] * 2 + [True] * 2)
    report = detector.metrics_from_predictions(predicted, actual)
    assert report.true_pos == 8 and report.false_pos == 2 and report.false_neg == 2
    assert report.precision == 0.8
    assert report.recall == 0.8
    assert abs(report.f1 - 0.8) < 1e-12


def test_evaluate_all_correct():
    predicted = np.array([True, False, True, False])
    report = detector.metrics_from_predictions(predicted, predicted.copy())
    assert report.precision == report.recall == report.f1 == 1.0


def test_evaluate_no_positives_predicted():
    predicted = np.zeros(5, dtype=bool)
    actual = np.array([True, True, False, False, False])
    report = detector.metrics_from_predictions(predicted, actual)
    assert report.precision == 0.0 and report.recall == 0.0 and report.f1 == 0.0


def test_threshold_monotonicity_on_separable_scores():
    # anomalies strictly above normals: raising the threshold can only
    # reduce recall and raise (defined) precision
    rng = stream(20, "sep")
    normal_scores = rng.uniform(0.0, 1.0, size=50)
    abnormal_scores = rng.uniform(2.0, 3.0, size=20)
    scores = np.concatenate([normal_scores, abnormal_scores])
    actual = np.array([False] * 50 + [True] * 20)
    prev_recall, prev_precision = None, None
    for thr in np.linspace(-0.5, 3.5, 41):
        report = detector.metrics_from_predictions(scores > thr, actual)
        if prev_recall is not None:
            assert report.recall <= prev_recall
            if report.true_pos + report.false_pos > 0 and prev_precision is not None:
                assert report.precision >= prev_precision - 1e-12
        prev_recall = report.recall
        if report.true_pos + report.false_pos > 0:
            prev_precision = report.precision


def test_trained_model_separates_perturbed_points():
    trained, norm, rows = train_toy_gaussian(21, iters=600)
    model = detector.AnomalyModel(trained, threshold=0.0, score_weight=0.9,
                                  latent_search_count=64)
    rng = stream(21, "perturb")
    clean = norm.normalize(rows[:100])
    noisy = clean + rng.normal(size=clean.shape) * 3.0  # 3 sigma in normalized space
    scores = detector.anomaly_scores(model, np.vstack([clean, noisy]), stream(21, "sc"))
    assert scores[100:].mean() > scores[:100].mean()
