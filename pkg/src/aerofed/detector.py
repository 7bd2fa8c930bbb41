"""Differentially private WGAN-GP anomaly detector.

The critic loss is the standard WGAN-GP form
    mean_i [ D(fake_i) - D(real_i) + gp_coeff * (||grad_x D(interp_i)||_2 - 1)^2 ],
privacy comes from per-sample gradient clipping plus calibrated Gaussian
noise on the critic update, and anomaly scores combine a latent-search
reconstruction residual with the negated critic output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import nn


@dataclass(frozen=True)
class GanModel:
    gen_spec: nn.MlpSpec
    disc_spec: nn.MlpSpec
    theta: np.ndarray  # generator parameters
    w: np.ndarray  # discriminator parameters
    latent_dim: int

    def __post_init__(self):
        if self.gen_spec.in_width != self.latent_dim:
            raise ValueError("generator input width must equal latent_dim")
        if self.gen_spec.out_width != self.disc_spec.in_width:
            raise ValueError("generator output width must match discriminator input")
        if self.disc_spec.out_width != 1:
            raise ValueError("discriminator must be scalar-output")

    @property
    def feature_dim(self) -> int:
        return self.gen_spec.out_width


def new_gan(feature_dim: int, latent_dim: int, hidden: tuple[int, ...],
            rng: np.random.Generator) -> GanModel:
    """Fresh GAN: tanh generator, leaky-relu critic, both linear-output."""
    gen_spec = nn.MlpSpec((latent_dim,) + hidden + (feature_dim,), activation="tanh")
    disc_spec = nn.MlpSpec((feature_dim,) + hidden + (1,), activation="leaky_relu")
    return GanModel(
        gen_spec=gen_spec,
        disc_spec=disc_spec,
        theta=nn.init_params(gen_spec, rng),
        w=nn.init_params(disc_spec, rng),
        latent_dim=latent_dim,
    )


@dataclass(frozen=True)
class DpConfig:
    epsilon_dp: float
    delta_dp: float
    clip_bound: float  # may be inf to disable clipping
    noise_scale: float = 0.0  # derived from the budget; see local_update

    def __post_init__(self):
        if self.epsilon_dp <= 0:
            raise ValueError("epsilon_dp must be positive")
        if not 0 < self.delta_dp < 1:
            raise ValueError("delta_dp must lie in (0, 1)")
        if self.clip_bound <= 0:
            raise ValueError("clip_bound must be positive")
        if self.noise_scale > 0.0 and not math.isfinite(self.clip_bound):
            raise ValueError("noise requires a finite clip bound")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 20
    n_disc_iters: int = 6
    n_local_iters: int = 20
    gp_coeff: float = 10.0
    alpha: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9

    def __post_init__(self):
        if self.batch_size < 1 or self.n_disc_iters < 1 or self.n_local_iters < 0:
            raise ValueError("batch_size and n_disc_iters must be >= 1, n_local_iters >= 0")
        if self.gp_coeff < 0:
            raise ValueError("gp_coeff must be non-negative")


@dataclass
class AnomalyModel:
    gan: GanModel
    threshold: float
    score_weight: float = 0.9  # weight on the reconstruction residual
    latent_search_count: int = 64


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    true_pos: int
    false_pos: int
    false_neg: int
    true_neg: int


def generate(gan: GanModel, z: np.ndarray) -> np.ndarray:
    return nn.forward(gan.gen_spec, gan.theta, z)


def discriminate(gan: GanModel, x: np.ndarray) -> np.ndarray:
    return nn.forward(gan.disc_spec, gan.w, x)


def interpolate(real: np.ndarray, fake: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-sample convex mix u*real + (1-u)*fake used for the penalty."""
    return u[:, None] * real + (1.0 - u[:, None]) * fake


def discriminator_loss(gan: GanModel, real_batch: np.ndarray, fake_batch: np.ndarray,
                       interp_batch: np.ndarray, gp_coeff: float) -> float:
    """Critic loss: mean of D(fake) - D(real) + gp_coeff*(||grad D(interp)|| - 1)^2."""
    if real_batch.shape[0] == 0:
        raise ValueError("empty batch")
    if not (real_batch.shape == fake_batch.shape == interp_batch.shape):
        raise ValueError("batches must share shape")
    d_real = nn.forward(gan.disc_spec, gan.w, real_batch)[:, 0]
    d_fake = nn.forward(gan.disc_spec, gan.w, fake_batch)[:, 0]
    _, penalties, _ = nn.gp_per_sample(gan.disc_spec, gan.w, interp_batch, gp_coeff)
    return float(np.mean(d_fake - d_real + penalties))


def generator_loss(gan: GanModel, fake_batch: np.ndarray) -> float:
    """Generator loss: -mean D(fake)."""
    if fake_batch.shape[0] == 0:
        raise ValueError("empty batch")
    return float(-np.mean(nn.forward(gan.disc_spec, gan.w, fake_batch)[:, 0]))


def noise_scale(sampling_rate: float, n_disc_iters: int, delta: float, epsilon: float) -> float:
    """Gaussian noise scale guaranteeing the configured privacy budget."""
    if not 0 < sampling_rate <= 1:
        raise ValueError("sampling rate must lie in (0, 1]")
    if delta <= 0 or epsilon <= 0:
        raise ValueError("delta and epsilon must be positive")
    return 2.0 * sampling_rate * math.sqrt(n_disc_iters * math.log(1.0 / delta)) / epsilon


def _per_sample_critic_grads(gan: GanModel, real_batch: np.ndarray, fake_batch: np.ndarray,
                             interp_batch: np.ndarray, gp_coeff: float) -> np.ndarray:
    ones = np.ones((real_batch.shape[0], 1))
    g_fake = nn.per_sample_grad_params(gan.disc_spec, gan.w, fake_batch, ones)
    g_real = nn.per_sample_grad_params(gan.disc_spec, gan.w, real_batch, ones)
    g_pen, _, _ = nn.gp_per_sample(gan.disc_spec, gan.w, interp_batch, gp_coeff)
    return g_fake - g_real + g_pen


def dp_discriminator_gradient(gan: GanModel, real_batch: np.ndarray, fake_batch: np.ndarray,
                              interp_batch: np.ndarray, gp_coeff: float, dp: DpConfig,
                              rng: np.random.Generator) -> np.ndarray:
    """Clipped, noised critic gradient.

    Per-sample loss gradients are clipped to L2 norm <= clip_bound, then
    averaged together with one Gaussian draw per sample of std
    noise_scale*clip_bound (realized as a single draw of std
    noise_scale*clip_bound/sqrt(m), the same distribution).
    """
    m = real_batch.shape[0]
    if m < 1:
        raise ValueError("empty batch")
    grads = _per_sample_critic_grads(gan, real_batch, fake_batch, interp_batch, gp_coeff)
    if not np.all(np.isfinite(grads)):
        raise nn.DivergenceError("non-finite critic gradient")
    if np.isfinite(dp.clip_bound):
        norms = np.linalg.norm(grads, axis=1)
        scale = np.minimum(1.0, dp.clip_bound / np.maximum(norms, 1e-300))
        grads = grads * scale[:, None]
    mean_grad = grads.mean(axis=0)
    if dp.noise_scale > 0.0:
        mean_grad = mean_grad + rng.standard_normal(mean_grad.size) * (
            dp.noise_scale * dp.clip_bound / math.sqrt(m)
        )
    return mean_grad


def generator_gradient(gan: GanModel, z_batch: np.ndarray) -> np.ndarray:
    """Gradient of -mean D(G(z)) with respect to the generator parameters."""
    m = z_batch.shape[0]
    fake = nn.forward(gan.gen_spec, gan.theta, z_batch)
    d_fake_dx = nn.grad_input(gan.disc_spec, gan.w, fake)
    return nn.grad_params(gan.gen_spec, gan.theta, z_batch, -d_fake_dx / m)


def local_update(gan: GanModel, dataset_rows: np.ndarray, cfg: TrainConfig, dp: DpConfig,
                 rng: np.random.Generator, loss_trace: list | None = None) -> GanModel:
    """Run the local training loop: n_local_iters blocks of n_disc_iters
    critic steps followed by one generator step.

    Draw order per critic step is latent batch, real-batch indices,
    interpolation weights, then the privacy noise; the generator step draws
    one latent batch.  The privacy noise scale is recomputed from the
    actual sampling rate batch_size / len(dataset_rows).  When loss_trace
    is given, one (critic loss, generator loss) pair is appended per block;
    recording consumes no random draws.
    """
    rows = np.asarray(dataset_rows, dtype=np.float64)
    m = cfg.batch_size
    if rows.shape[0] < m:
        raise ValueError(f"dataset has {rows.shape[0]} rows, batch size is {m}")
    sigma = noise_scale(m / rows.shape[0], cfg.n_disc_iters, dp.delta_dp, dp.epsilon_dp)
    dp = replace(dp, noise_scale=sigma)
    theta, w = gan.theta, gan.w
    adam_w = nn.AdamState.fresh(w.size, cfg.alpha, cfg.beta1, cfg.beta2)
    adam_t = nn.AdamState.fresh(theta.size, cfg.alpha, cfg.beta1, cfg.beta2)
    model = gan
    for _ in range(cfg.n_local_iters):
        ld = 0.0
        for _ in range(cfg.n_disc_iters):
            z = rng.standard_normal((m, gan.latent_dim))
            idx = rng.integers(0, rows.shape[0], size=m)
            u = rng.uniform(size=m)
            real = rows[idx]
            fake = nn.forward(gan.gen_spec, theta, z)
            interp = interpolate(real, fake, u)
            if loss_trace is not None:
                ld = discriminator_loss(model, real, fake, interp, cfg.gp_coeff)
            grad_w = dp_discriminator_gradient(model, real, fake, interp, cfg.gp_coeff,
                                               dp, rng)
            w, adam_w = nn.adam_step(w, grad_w, adam_w)
            model = replace(model, theta=theta, w=w)
        z = rng.standard_normal((m, gan.latent_dim))
        grad_t = generator_gradient(model, z)
        if loss_trace is not None:
            fake = nn.forward(gan.gen_spec, theta, z)
            loss_trace.append((ld, generator_loss(model, fake)))
        theta, adam_t = nn.adam_step(theta, grad_t, adam_t)
        model = replace(model, theta=theta, w=w)
    return model


def anomaly_scores(model: AnomalyModel, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Score rows as weight*residual + (1-weight)*(-D(x)).

    The residual of a row is the minimum L1 distance to any of
    latent_search_count generator samples; the latent set is drawn once per
    call and shared by every row.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z = rng.standard_normal((model.latent_search_count, model.gan.latent_dim))
    candidates = nn.forward(model.gan.gen_spec, model.gan.theta, z)  # (L, d)
    residual = np.abs(x[:, None, :] - candidates[None, :, :]).sum(axis=2).min(axis=1)
    critic = nn.forward(model.gan.disc_spec, model.gan.w, x)[:, 0]
    return model.score_weight * residual + (1.0 - model.score_weight) * (-critic)


def anomaly_score(model: AnomalyModel, x: np.ndarray, rng: np.random.Generator) -> float:
    """Score a single feature vector; see anomaly_scores."""
    return float(anomaly_scores(model, x, rng)[0])


def calibrate_threshold(model: AnomalyModel, validation: np.ndarray, injection_fraction: float,
                        injection_magnitude: float, rng: np.random.Generator) -> float:
    """Midpoint threshold between the mean score of the validation data and
    the mean score of a noise-injected copy of it.

    Both sets are scored in one call so they share the latent search set;
    with zero injection magnitude the two means are identical.
    """
    validation = np.atleast_2d(validation)
    if validation.shape[0] == 0:
        raise ValueError("empty validation set")
    injected, _ = inject_rows(validation, injection_fraction, injection_magnitude, rng)
    scores = anomaly_scores(model, np.vstack([validation, injected]), rng)
    a_normal = float(scores[: validation.shape[0]].mean())
    a_abnormal = float(scores[validation.shape[0] :].mean())
    return (a_normal + a_abnormal) / 2.0


def inject_rows(rows: np.ndarray, fraction: float, magnitude: float,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # local import keeps dataset optional for pure-detector use
    from .dataset import inject_anomalies

    return inject_anomalies(rows, fraction, magnitude, rng)


def evaluate(model: AnomalyModel, test_rows: np.ndarray, test_labels: np.ndarray,
             rng: np.random.Generator) -> MetricsReport:
    """Classify rows with score > threshold and report precision/recall/F1."""
    scores = anomaly_scores(model, test_rows, rng)
    predicted = scores > model.threshold
    return metrics_from_predictions(predicted, np.asarray(test_labels, dtype=bool))


def metrics_from_predictions(predicted: np.ndarray, actual: np.ndarray) -> MetricsReport:
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    tn = int(np.sum(~predicted & ~actual))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(precision, recall, f1, tp, fp, fn, tn)
