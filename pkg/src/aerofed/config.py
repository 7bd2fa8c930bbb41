"""Run configuration: defaults, file parsing, validation, and construction
of the typed config objects used by the simulation.

The config file is plain text, one dotted key per line::

    # comment
    run.algo = ca2c_afl
    world.n_uavs = 3
    scheduler.hidden = 64,64

Unknown keys and invariant violations are reported with their key path.
All dB/dBm figures are converted to linear scale here, once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import detector, env, federation, scheduler

ALGOS = ("ca2c_afl", "dqn_afl", "ddpg_fl", "standalone", "random")


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    area_side: float = 1000.0
    n_devices: int = 20
    n_uavs: int = 5
    altitude: float = 100.0
    haps_x: float = 500.0
    haps_y: float = 500.0
    haps_z: float = 20000.0
    slot_duration: float = 10.0
    mobility: str = "random_walk"
    device_step_radius: float = 1.0


@dataclass
class ChannelSettings:
    carrier_hz: float = 2e9
    lightspeed_m_s: float = 3e8
    h_los_db: float = 10.0
    uplink_bw_hz: float = 5e6
    downlink_bw_hz: float = 20e6
    uav_tx_dbm: float = 26.0
    haps_tx_dbm: float = 33.0
    noise_psd_dbm_hz: float = -174.0


@dataclass
class EnergySettings:
    kappa1: float = 0.009
    kappa2: float = 357.0
    kappa3: float = 80.0
    g_param: float = 69.0
    velocity_m_s: float = 30.0
    e_max_j: float = 50e3
    compute_power_w: float = 5.0


@dataclass
class SensingSettings:
    xi_sense: float = 1.07e-4
    p_threshold: float = 0.9


@dataclass
class ComputeSettings:
    compute_capability: float = 80_000.0
    cycles_per_sample: float = 4.0
    model_size_bits: float = 5000.0
    aggregation_unit_time: float = 1e-3


@dataclass
class TrainingSettings:
    batch_size: int = 20
    n_disc_iters: int = 6
    n_local_iters: int = 20
    gp_coeff: float = 10.0
    alpha: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    latent_dim: int = 10
    gan_hidden: tuple[int, ...] = (32, 32)


@dataclass
class DpSettings:
    epsilon: float = 10.0
    delta: float = 1e-5
    clip_bound: float = 1.0
    enabled: bool = True


@dataclass
class SchedulerSettings:
    hidden: tuple[int, ...] = (128, 128)
    tau: float = 0.005
    epsilon_explore: float = 0.1
    chi: float = 0.9
    minibatch: int = 64
    replay_capacity: int = 2000
    rl_alpha: float = 1e-4
    mu1: float = 2.0
    mu2: float = 4.0
    mu3: float = 10.0
    energy_penalty_coeff: float = 0.01


@dataclass
class DetectionSettings:
    score_weight: float = 0.9
    latent_search_count: int = 64
    calibration_fraction: float = 1.0
    calibration_magnitude: float = 3.0
    test_anomaly_fraction: float = 0.05
    test_anomaly_magnitude: float = 3.0


@dataclass
class DataSettings:
    buffer_capacity: int = 4096
    latency_dataset_cap: int = 256
    warm_start_samples: int = 256
    synthetic_records: int = 6000
    eval_batch_size: int = 64
    train_ratio: float = 0.7
    validation_ratio: float = 0.15
    test_ratio: float = 0.15


@dataclass
class RunSettings:
    algo: str = "ca2c_afl"
    episodes: int = 200
    slots: int = 50
    seed: int = 0
    out: str = "runs/default"
    dataset: str = "synthetic"


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    channel: ChannelSettings = field(default_factory=ChannelSettings)
    energy: EnergySettings = field(default_factory=EnergySettings)
    sensing: SensingSettings = field(default_factory=SensingSettings)
    compute: ComputeSettings = field(default_factory=ComputeSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    dp: DpSettings = field(default_factory=DpSettings)
    scheduler: SchedulerSettings = field(default_factory=SchedulerSettings)
    detection: DetectionSettings = field(default_factory=DetectionSettings)
    data: DataSettings = field(default_factory=DataSettings)
    run: RunSettings = field(default_factory=RunSettings)

    def validate(self) -> None:
        def check(cond, path, msg):
            if not cond:
                raise ConfigError(f"{path}: {msg}")

        check(self.run.algo in ALGOS, "run.algo", f"must be one of {ALGOS}")
        check(self.run.episodes >= 0, "run.episodes", "must be >= 0")
        check(self.run.slots >= 0, "run.slots", "must be >= 0")
        check(self.world.n_devices >= 1, "world.n_devices", "must be >= 1")
        check(self.world.n_uavs >= 1, "world.n_uavs", "must be >= 1")
        check(self.world.area_side > 0, "world.area_side", "must be positive")
        check(self.world.mobility in ("static", "random_walk"), "world.mobility",
              "must be static or random_walk")
        check(0 < self.scheduler.chi < 1, "scheduler.chi", "must lie in (0, 1)")
        check(0 <= self.scheduler.epsilon_explore <= 1, "scheduler.epsilon_explore",
              "must lie in [0, 1]")
        check(0 < self.scheduler.tau <= 1, "scheduler.tau", "must lie in (0, 1]")
        check(self.scheduler.replay_capacity >= 1, "scheduler.replay_capacity",
              "must be >= 1")
        check(0 < self.sensing.p_threshold <= 1, "sensing.p_threshold",
              "must lie in (0, 1]")
        check(self.sensing.xi_sense > 0, "sensing.xi_sense", "must be positive")
        check(self.dp.epsilon > 0, "dp.epsilon", "must be positive")
        check(0 < self.dp.delta < 1, "dp.delta", "must lie in (0, 1)")
        check(self.dp.clip_bound > 0, "dp.clip_bound", "must be positive")
        check(self.training.batch_size >= 1, "training.batch_size", "must be >= 1")
        check(self.training.n_disc_iters >= 1, "training.n_disc_iters", "must be >= 1")
        check(self.training.gp_coeff >= 0, "training.gp_coeff", "must be >= 0")
        check(0 <= self.detection.score_weight <= 1, "detection.score_weight",
              "must lie in [0, 1]")
        ratios = (self.data.train_ratio, self.data.validation_ratio, self.data.test_ratio)
        check(all(r > 0 for r in ratios) and abs(sum(ratios) - 1.0) < 1e-9,
              "data.train_ratio", "split ratios must be positive and sum to 1")
        check(self.data.warm_start_samples >= 0, "data.warm_start_samples",
              "must be >= 0")

    # typed objects consumed by the simulation

    def sensing_config(self) -> env.SensingConfig:
        return env.SensingConfig(self.sensing.xi_sense, self.sensing.p_threshold)

    def channel_config(self) -> env.ChannelConfig:
        c = self.channel
        return env.ChannelConfig(
            carrier_hz=c.carrier_hz,
            lightspeed_m_s=c.lightspeed_m_s,
            h_los_db=c.h_los_db,
            uplink_bw_hz=c.uplink_bw_hz,
            downlink_bw_hz=c.downlink_bw_hz,
            uav_tx_w=env.dbm_to_watts(c.uav_tx_dbm),
            haps_tx_w=env.dbm_to_watts(c.haps_tx_dbm),
            noise_psd_w_hz=env.dbm_to_watts(c.noise_psd_dbm_hz),
            haps_position=np.array([self.world.haps_x, self.world.haps_y,
                                    self.world.haps_z]),
        )

    def energy_config(self) -> env.EnergyConfig:
        e = self.energy
        return env.EnergyConfig(e.kappa1, e.kappa2, e.kappa3, e.g_param,
                                e.velocity_m_s, e.e_max_j, e.compute_power_w)

    def compute_config(self) -> federation.UavComputeConfig:
        c = self.compute
        return federation.UavComputeConfig(c.compute_capability, c.cycles_per_sample,
                                           c.model_size_bits, c.aggregation_unit_time)

    def train_config(self) -> detector.TrainConfig:
        t = self.training
        return detector.TrainConfig(t.batch_size, t.n_disc_iters, t.n_local_iters,
                                    t.gp_coeff, t.alpha, t.beta1, t.beta2)

    def dp_config(self) -> detector.DpConfig:
        d = self.dp
        epsilon = d.epsilon if d.enabled else math.inf
        clip = d.clip_bound if d.enabled else math.inf
        return detector.DpConfig(epsilon_dp=epsilon, delta_dp=d.delta, clip_bound=clip)

    def rl_config(self) -> scheduler.Ca2cConfig:
        s = self.scheduler
        return scheduler.Ca2cConfig(
            hidden=s.hidden, tau=s.tau, epsilon_explore=s.epsilon_explore,
            discount_chi=s.chi, minibatch=s.minibatch,
            replay_capacity=s.replay_capacity, rl_alpha=s.rl_alpha,
            weights=(s.mu1, s.mu2, s.mu3),
            energy_penalty_coeff=s.energy_penalty_coeff,
        )

    def codec(self) -> scheduler.ObsCodec:
        return scheduler.ObsCodec(
            n_devices=self.world.n_devices,
            n_uavs=self.world.n_uavs,
            area_side=self.world.area_side,
            altitude=self.world.altitude,
            e_max=self.energy.e_max_j,
            sensing_range=self.sensing_config().max_sensing_range,
            max_step=self.energy.velocity_m_s * self.world.slot_duration,
        )


def _coerce(path: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{path}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{path}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{path}: expected a number, got {raw!r}") from exc
    if isinstance(default, tuple):
        try:
            return tuple(int(part) for part in raw.split(",") if part.strip())
        except ValueError as exc:
            raise ConfigError(f"{path}: expected comma-separated integers") from exc
    return raw


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Set dotted-path keys on the config, with path-aware errors."""
    for path, raw in overrides.items():
        parts = path.split(".")
        if len(parts) != 2:
            raise ConfigError(f"{path}: keys are section.name")
        section, name = parts
        if not hasattr(cfg, section) or section == "validate":
            raise ConfigError(f"{path}: unknown section {section!r}")
        target = getattr(cfg, section)
        if not any(f.name == name for f in fields(target)):
            raise ConfigError(f"{path}: unknown key {name!r}")
        default = getattr(target, name)
        setattr(target, name, _coerce(path, str(raw), default))
    return cfg


def parse_config_text(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        value = value.split("#")[0]  # trailing comments
        entries[key.strip()] = value.strip()
    return entries


def load_config(path=None, overrides: dict[str, str] | None = None,
                env_seed: str | None = None) -> RunConfig:
    """Assemble a validated RunConfig.

    Precedence, lowest first: built-in defaults, AEROFED_SEED, the config
    file, then explicit overrides (CLI flags).
    """
    cfg = RunConfig()
    if env_seed is not None:
        apply_overrides(cfg, {"run.seed": env_seed})
    if path is not None:
        with open(path, "r") as fh:
            apply_overrides(cfg, parse_config_text(fh.read()))
    if overrides:
        apply_overrides(cfg, {k: str(v) for k, v in overrides.items()})
    cfg.validate()
    return cfg
