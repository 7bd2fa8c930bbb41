"""Shared fixtures: a small simulation context over synthetic data."""

import numpy as np

from aerofed import dataset, detector, env, federation, scheduler
from aerofed.rng import stream


def make_codec(n_devices=3, n_uavs=2, area=1000.0, altitude=100.0,
               p_threshold=0.9, xi=1.07e-4, velocity=30.0, slot_duration=10.0):
    sensing = env.SensingConfig(xi_sense=xi, p_threshold=p_threshold)
    return scheduler.ObsCodec(
        n_devices=n_devices,
        n_uavs=n_uavs,
        area_side=area,
        altitude=altitude,
        e_max=50e3,
        sensing_range=sensing.max_sensing_range,
        max_step=velocity * slot_duration,
    )


def random_state(codec, seed):
    """Encoded state with uniform positions and full energy."""
    rng = stream(seed, "util-state")
    devices = np.zeros((codec.n_devices, 3))
    devices[:, :2] = rng.uniform(0, codec.area_side, size=(codec.n_devices, 2))
    uavs = np.full((codec.n_uavs, 3), codec.altitude)
    uavs[:, :2] = rng.uniform(0, codec.area_side, size=(codec.n_uavs, 2))
    return np.concatenate([
        devices.ravel() / codec.area_side,
        uavs.ravel() / codec.area_side,
        np.ones(codec.n_uavs),
    ])


def clustered_state(codec, seed, spread=200.0):
    """State with everything inside one sensing-feasible cluster."""
    rng = stream(seed, "util-clustered")
    center = codec.area_side / 2
    devices = np.zeros((codec.n_devices, 3))
    devices[:, :2] = center + rng.uniform(-spread, spread, size=(codec.n_devices, 2))
    uavs = np.full((codec.n_uavs, 3), codec.altitude)
    uavs[:, :2] = center + rng.uniform(-spread, spread, size=(codec.n_uavs, 2))
    return np.concatenate([
        devices.ravel() / codec.area_side,
        uavs.ravel() / codec.area_side,
        np.ones(codec.n_uavs),
    ])


def make_context(seed=0, n_devices=3, n_uavs=2, slots=4, area=1000.0,
                 n_records=400, gan_hidden=(8,), latent_dim=4,
                 n_local_iters=1, n_disc_iters=1, batch_size=8,
                 rl_hidden=(16, 16), minibatch=8, warm_start=32,
                 mobility="random_walk", epsilon=0.1):
    codec = make_codec(n_devices, n_uavs, area=area)
    sensing = env.SensingConfig(xi_sense=1.07e-4, p_threshold=0.9)
    channel = env.ChannelConfig(
        carrier_hz=2e9, lightspeed_m_s=3e8, h_los_db=10.0,
        uplink_bw_hz=5e6, downlink_bw_hz=20e6,
        uav_tx_w=env.dbm_to_watts(26.0), haps_tx_w=env.dbm_to_watts(33.0),
        noise_psd_w_hz=env.dbm_to_watts(-174.0),
        haps_position=np.array([area / 2, area / 2, 20000.0]),
    )
    energy = env.EnergyConfig(kappa1=0.009, kappa2=357.0, kappa3=80.0, g_param=69.0,
                              velocity_m_s=30.0, e_max_j=50e3, compute_power_w=5.0)
    compute = federation.UavComputeConfig(80_000.0, 4.0, 5000.0, 1e-3)
    train_cfg = detector.TrainConfig(batch_size=batch_size, n_disc_iters=n_disc_iters,
                                     n_local_iters=n_local_iters)
    dp_cfg = detector.DpConfig(epsilon_dp=10.0, delta_dp=1e-5, clip_bound=1.0)
    rl_cfg = scheduler.Ca2cConfig(hidden=rl_hidden, minibatch=minibatch,
                                  epsilon_explore=epsilon)

    records = dataset.synthesize(n_records, n_devices, stream(seed, "synth"))
    rows = dataset.records_to_rows(records)
    splits = dataset.split(rows)
    per_device = [splits.train[d::n_devices] for d in range(n_devices)]
    streams = [dataset.DeviceStream(p) for p in per_device]

    buffers = [dataset.RingBuffer(4096) for _ in range(n_uavs)]
    for uav in range(n_uavs):
        warm_rng = stream(seed, "warm-start", uav)
        idx = warm_rng.integers(0, splits.train.shape[0], size=warm_start)
        for i in idx:
            buffers[uav].append(splits.train[i])

    models = [detector.new_gan(4, latent_dim, gan_hidden, stream(seed, "gan-init", i))
              for i in range(n_uavs)]
    eval_batches = [splits.validation[stream(seed, "eval-batch", i).integers(
        0, splits.validation.shape[0], size=16)] for i in range(n_uavs)]

    return scheduler.SimContext(
        codec=codec, sensing=sensing, channel=channel, energy=energy,
        compute=compute, train_cfg=train_cfg, dp_cfg=dp_cfg, rl_cfg=rl_cfg,
        device_streams=streams, buffers=buffers, models=models,
        eval_batches=eval_batches, seed=seed, episode_slots=slots,
        mobility=mobility,
    ), splits
