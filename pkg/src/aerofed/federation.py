"""Selection-driven federated round: local training, latency accounting,
size-weighted aggregation, global broadcast, and global losses.

Only selected UAVs train and upload in a slot; everyone receives the
broadcast global parameters afterwards.  Round time is the maximum of the
per-UAV component sums over the selected set, the time cost their mean.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import detector, env, nn
from .rng import stream


@dataclass(frozen=True)
class UavComputeConfig:
    compute_capability: float  # cycles/second
    cycles_per_sample: float
    model_size_bits: float
    aggregation_unit_time: float  # seconds per participating UAV

    def __post_init__(self):
        for name in ("compute_capability", "cycles_per_sample", "model_size_bits",
                     "aggregation_unit_time"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class RoundPlan:
    slot: int
    selection: np.ndarray  # (N,) binary
    local_dataset_sizes: np.ndarray  # (N,) training-set cardinalities

    def selected_ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.selection)]


@dataclass(frozen=True)
class LatencyBreakdown:
    update: np.ndarray  # seconds, one entry per selected UAV
    upload: np.ndarray
    aggregation: np.ndarray
    distribution: np.ndarray
    round_time: float
    time_cost: float

    def per_uav_totals(self) -> np.ndarray:
        return self.update + self.upload + self.aggregation + self.distribution


def local_update_latency(dataset_size: int, cfg: UavComputeConfig) -> float:
    """Training latency: dataset size * cycles per sample / compute capability."""
    return dataset_size * cfg.cycles_per_sample / cfg.compute_capability


def upload_latency(uplink_bps: float, cfg: UavComputeConfig) -> float:
    if uplink_bps <= 0:
        raise ValueError("no uplink")
    return cfg.model_size_bits / uplink_bps


def aggregation_latency(n_selected: int, cfg: UavComputeConfig) -> float:
    return cfg.aggregation_unit_time * n_selected


def distribution_latency(downlink_bps: float, cfg: UavComputeConfig) -> float:
    if downlink_bps <= 0:
        raise ValueError("no downlink")
    return cfg.model_size_bits / downlink_bps


def round_time(per_uav_totals: np.ndarray) -> float:
    """Maximum one-round execution time over the selected set."""
    totals = np.asarray(per_uav_totals)
    if totals.size == 0:
        raise ValueError("empty selection")
    return float(totals.max())


def time_cost(per_uav_totals: np.ndarray) -> float:
    """Mean one-round execution time over the selected set."""
    totals = np.asarray(per_uav_totals)
    if totals.size == 0:
        raise ValueError("empty selection")
    return float(totals.mean())


def aggregate(models: list[tuple[detector.GanModel, int]]) -> tuple[np.ndarray, np.ndarray]:
    """Dataset-size-weighted average of (theta, w) over the given models."""
    if not models:
        raise ValueError("cannot aggregate an empty selection")
    ref = models[0][0]
    for gan, _ in models[1:]:
        if gan.gen_spec != ref.gen_spec or gan.disc_spec != ref.disc_spec:
            raise ValueError("aggregation requires identical model specs")
    sizes = np.array([float(size) for _, size in models])
    total = sizes.sum()
    if total <= 0:
        raise ValueError("aggregation weights sum to zero")
    weights = sizes / total
    theta = sum(wgt * gan.theta for (gan, _), wgt in zip(models, weights))
    w = sum(wgt * gan.w for (gan, _), wgt in zip(models, weights))
    return theta, w


def global_losses(models: list[detector.GanModel], eval_batches: list[np.ndarray],
                  gp_coeff: float, rng: np.random.Generator) -> tuple[float, float]:
    """Average critic and generator losses over the selected UAVs.

    For each UAV a latent batch and interpolation weights are drawn from
    the stream, the model's own generator produces the fake batch, and the
    per-UAV losses are averaged.
    """
    if not models:
        raise ValueError("empty selection")
    if len(models) != len(eval_batches):
        raise ValueError("one evaluation batch per selected model")
    ld_total, lg_total = 0.0, 0.0
    for gan, real in zip(models, eval_batches):
        m = real.shape[0]
        z = rng.standard_normal((m, gan.latent_dim))
        fake = nn.forward(gan.gen_spec, gan.theta, z)
        u = rng.uniform(size=m)
        interp = detector.interpolate(real, fake, u)
        ld_total += detector.discriminator_loss(gan, real, fake, interp, gp_coeff)
        lg_total += detector.generator_loss(gan, fake)
    return ld_total / len(models), lg_total / len(models)


@dataclass(frozen=True)
class RoundResult:
    models: list[detector.GanModel]  # post-broadcast models for all UAVs
    global_theta: np.ndarray
    global_w: np.ndarray
    latency: LatencyBreakdown
    comp_energy: np.ndarray  # (N,) joules
    tx_energy: np.ndarray  # (N,) joules
    ld_global: float
    lg_global: float
    trained: np.ndarray  # (N,) bool: selected and had enough data to train


def run_round(world: env.WorldState, models: list[detector.GanModel],
              buffers: list[np.ndarray], plan: RoundPlan,
              train_cfg: detector.TrainConfig, dp_cfg: detector.DpConfig,
              compute_cfg: UavComputeConfig, channel_cfg: env.ChannelConfig,
              energy_cfg: env.EnergyConfig, eval_batches: list[np.ndarray],
              seed: int, episode: int) -> RoundResult:
    """Execute one aggregation round for the selected UAVs.

    Selected UAVs with at least one training batch of data run the local
    update (per-UAV streams keyed by (seed, episode, slot, uav)); the rest
    pass their current parameters through.  Aggregation is size-weighted
    and the global parameters are broadcast to all UAVs.  Latencies and
    energies follow the closed-form models; global losses are evaluated on
    the selected UAVs' evaluation batches after the broadcast.
    """
    selected = plan.selected_ids()
    if not selected:
        raise ValueError("round requires a nonempty selection")
    n_uavs = len(models)

    updated = list(models)
    trained = np.zeros(n_uavs, dtype=bool)
    for uav in selected:
        rows = buffers[uav]
        if rows.shape[0] >= train_cfg.batch_size:
            local_rng = stream(seed, "local-update", episode, plan.slot, uav)
            updated[uav] = detector.local_update(models[uav], rows, train_cfg,
                                                 dp_cfg, local_rng)
            trained[uav] = True

    theta, w = aggregate([(updated[uav], int(plan.local_dataset_sizes[uav]))
                          for uav in selected])
    broadcast = [replace(m, theta=theta, w=w) for m in updated]

    update_lat = np.array([
        local_update_latency(int(plan.local_dataset_sizes[uav]), compute_cfg)
        for uav in selected
    ])
    upload_lat = np.array([
        upload_latency(env.uplink_rate(world.uav_positions[uav], channel_cfg), compute_cfg)
        for uav in selected
    ])
    agg_lat = np.full(len(selected), aggregation_latency(len(selected), compute_cfg))
    dist_lat = np.array([
        distribution_latency(env.downlink_rate(world.uav_positions[uav], channel_cfg),
                             compute_cfg)
        for uav in selected
    ])
    totals = update_lat + upload_lat + agg_lat + dist_lat
    latency = LatencyBreakdown(update_lat, upload_lat, agg_lat, dist_lat,
                               round_time(totals), time_cost(totals))

    comp = np.zeros(n_uavs)
    tx = np.zeros(n_uavs)
    for i, uav in enumerate(selected):
        comp[uav] = env.computational_energy(True, update_lat[i], energy_cfg)
        tx[uav] = env.transmission_energy(True, upload_lat[i], channel_cfg)

    eval_rng = stream(seed, "global-loss", episode, plan.slot)
    ld, lg = global_losses([broadcast[uav] for uav in selected],
                           [eval_batches[uav] for uav in selected],
                           train_cfg.gp_coeff, eval_rng)
    return RoundResult(broadcast, theta, w, latency, comp, tx, ld, lg, trained)
