"""Three-layer network environment: geometry, sensing, LoS links, UAV energy.

All quantities are linear-scale SI units; dB/dBm conversions happen once at
config construction.  World snapshots are immutable; transitions return new
snapshots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


def _frozen_int(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.int64)
    out.setflags(write=False)
    return out


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1000.0


@dataclass(frozen=True)
class SensingConfig:
    xi_sense: float  # 1/m, sensing performance falloff
    p_threshold: float  # minimum successful sensing probability

    def __post_init__(self):
        if self.xi_sense <= 0:
            raise ValueError("xi_sense must be positive")
        if not 0 < self.p_threshold <= 1:
            raise ValueError("p_threshold must be in (0, 1]")

    @property
    def max_sensing_range(self) -> float:
        """Largest slant distance at which sensing still meets the threshold."""
        return -math.log(self.p_threshold) / self.xi_sense


@dataclass(frozen=True)
class ChannelConfig:
    carrier_hz: float
    lightspeed_m_s: float
    h_los_db: float
    uplink_bw_hz: float
    downlink_bw_hz: float
    uav_tx_w: float
    haps_tx_w: float
    noise_psd_w_hz: float  # linear W/Hz, converted from dBm/Hz at load
    haps_position: np.ndarray

    def __post_init__(self):
        for name in ("carrier_hz", "lightspeed_m_s", "uplink_bw_hz", "downlink_bw_hz",
                     "uav_tx_w", "haps_tx_w", "noise_psd_w_hz"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        object.__setattr__(self, "haps_position", _frozen(self.haps_position))


@dataclass(frozen=True)
class EnergyConfig:
    kappa1: float
    kappa2: float
    kappa3: float
    g_param: float
    velocity_m_s: float
    e_max_j: float
    compute_power_w: float

    def __post_init__(self):
        for name in ("kappa1", "kappa2", "kappa3", "g_param", "velocity_m_s",
                     "e_max_j", "compute_power_w"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def propulsion_power_w(self) -> float:
        v = self.velocity_m_s
        return (self.kappa1 * v**3 + self.kappa2 / v
                + self.kappa3 * (1.0 + v**2 / self.g_param**2))


@dataclass(frozen=True)
class WorldState:
    """Immutable per-slot snapshot of devices, UAVs, and indicators."""

    slot: int
    device_positions: np.ndarray  # (K, 3), z = 0
    uav_positions: np.ndarray  # (N, 3), z = altitude
    remaining_energy: np.ndarray  # (N,) joules
    association: np.ndarray  # (K, N) binary
    selection: np.ndarray  # (N,) binary
    area_side: float
    altitude: float

    def __post_init__(self):
        object.__setattr__(self, "device_positions", _frozen(self.device_positions))
        object.__setattr__(self, "uav_positions", _frozen(self.uav_positions))
        object.__setattr__(self, "remaining_energy", _frozen(self.remaining_energy))
        object.__setattr__(self, "association", _frozen_int(self.association))
        object.__setattr__(self, "selection", _frozen_int(self.selection))
        if self.association.shape != (self.n_devices, self.n_uavs):
            raise ValueError("association matrix shape mismatch")
        if self.selection.shape != (self.n_uavs,):
            raise ValueError("selection vector shape mismatch")
        if np.any(self.association.sum(axis=1) > 1):
            raise ValueError("a device may associate with at most one UAV")
        if self.device_positions.size and np.any(self.device_positions[:, 2] != 0.0):
            raise ValueError("devices are ground nodes (z = 0)")
        if self.uav_positions.size and np.any(self.uav_positions[:, 2] != self.altitude):
            raise ValueError("UAVs fly at the fixed altitude")

    @property
    def n_devices(self) -> int:
        return self.device_positions.shape[0]

    @property
    def n_uavs(self) -> int:
        return self.uav_positions.shape[0]


def distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two 3-D points."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b))


def sensing_probability(associated: bool, dist: float, cfg: SensingConfig) -> float:
    """Probability that an associated device at slant distance dist is sensed."""
    if dist < 0:
        raise ValueError("distance must be non-negative")
    if not associated:
        return 0.0
    return math.exp(-cfg.xi_sense * dist)


def coverage_capacity(uav_id: int, world: WorldState, cfg: SensingConfig) -> int:
    """Number of devices the UAV senses with probability >= the threshold."""
    if not 0 <= uav_id < world.n_uavs:
        raise ValueError(f"unknown uav id {uav_id}")
    uav = world.uav_positions[uav_id]
    count = 0
    for k in range(world.n_devices):
        if world.association[k, uav_id]:
            d = distance(uav, world.device_positions[k])
            if sensing_probability(True, d, cfg) >= cfg.p_threshold:
                count += 1
    return count


def los_path_loss(dist: float, cfg: ChannelConfig) -> float:
    """Free-space LoS path loss in dB, including the mean additional loss."""
    if dist <= 0:
        raise ValueError("distance must be positive")
    return 20.0 * math.log10(4.0 * math.pi * dist * cfg.carrier_hz / cfg.lightspeed_m_s) + cfg.h_los_db


def _shannon_rate(bw_hz: float, tx_w: float, loss_db: float, noise_psd: float) -> float:
    snr = tx_w * db_to_linear(-loss_db) / (bw_hz * noise_psd)
    return bw_hz * math.log2(1.0 + snr)


def uplink_rate(uav_position: np.ndarray, cfg: ChannelConfig) -> float:
    """UAV-to-HAPS transmission rate in bits/second."""
    loss = los_path_loss(distance(uav_position, cfg.haps_position), cfg)
    return _shannon_rate(cfg.uplink_bw_hz, cfg.uav_tx_w, loss, cfg.noise_psd_w_hz)


def downlink_rate(uav_position: np.ndarray, cfg: ChannelConfig) -> float:
    """HAPS-to-UAV transmission rate in bits/second."""
    loss = los_path_loss(distance(uav_position, cfg.haps_position), cfg)
    return _shannon_rate(cfg.downlink_bw_hz, cfg.haps_tx_w, loss, cfg.noise_psd_w_hz)


def propulsion_energy(prev: np.ndarray, nxt: np.ndarray, cfg: EnergyConfig) -> float:
    """Flight energy for one displacement: (distance / V) * propulsion power."""
    d = distance(prev, nxt)
    if d == 0.0:
        return 0.0
    return d / cfg.velocity_m_s * cfg.propulsion_power_w


def computational_energy(selected: bool, update_latency_s: float, cfg: EnergyConfig) -> float:
    """Training energy: compute power times update latency, zero if unselected."""
    return cfg.compute_power_w * update_latency_s if selected else 0.0


def transmission_energy(selected: bool, upload_latency_s: float, cfg: ChannelConfig) -> float:
    """Upload energy: UAV transmit power times upload latency, zero if unselected."""
    return cfg.uav_tx_w * upload_latency_s if selected else 0.0


def step_devices(world: WorldState, mobility: str, rng: np.random.Generator,
                 step_radius_m: float = 1.0) -> WorldState:
    """Advance device positions one slot; UAV fields are untouched.

    ``random_walk`` draws each step uniformly from a disc of the given radius
    and reflects at the world boundary; ``static`` leaves positions alone.
    """
    if mobility == "static":
        return replace(world, slot=world.slot + 1)
    if mobility != "random_walk":
        raise ValueError(f"unknown mobility model {mobility!r}")
    pos = np.array(world.device_positions)
    k = pos.shape[0]
    r = step_radius_m * np.sqrt(rng.uniform(size=k))
    ang = rng.uniform(0.0, 2.0 * math.pi, size=k)
    pos[:, 0] += r * np.cos(ang)
    pos[:, 1] += r * np.sin(ang)
    for axis in (0, 1):
        over = pos[:, axis] > world.area_side
        pos[over, axis] = 2.0 * world.area_side - pos[over, axis]
        under = pos[:, axis] < 0.0
        pos[under, axis] = -pos[under, axis]
    return replace(world, slot=world.slot + 1, device_positions=pos)


def apply_uav_positions(world: WorldState, targets: np.ndarray, energy_cfg: EnergyConfig,
                        slot_duration_s: float) -> tuple[WorldState, np.ndarray]:
    """Move each UAV toward its 2-D target, capped at V * slot duration.

    Targets outside the world are clamped to the boundary.  Altitude is
    preserved and the propulsion energy of the realized move is deducted
    (floored at zero).  Returns the new world and per-UAV flight energies.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (world.n_uavs, 2):
        raise ValueError("need one 2-D target per UAV")
    max_step = energy_cfg.velocity_m_s * slot_duration_s
    pos = np.array(world.uav_positions)
    energy = np.array(world.remaining_energy)
    spent = np.zeros(world.n_uavs)
    for n in range(world.n_uavs):
        goal = np.clip(targets[n], 0.0, world.area_side)
        delta = goal - pos[n, :2]
        dist2d = float(np.linalg.norm(delta))
        if dist2d > max_step:
            delta = delta * (max_step / dist2d)
        new_xy = pos[n, :2] + delta
        spent[n] = propulsion_energy(pos[n], np.array([new_xy[0], new_xy[1], world.altitude]),
                                     energy_cfg)
        pos[n, :2] = new_xy
        pos[n, 2] = world.altitude
        energy[n] = max(0.0, energy[n] - spent[n])
    return replace(world, uav_positions=pos, remaining_energy=energy), spent


def deduct_energy(world: WorldState, amounts: np.ndarray) -> WorldState:
    """Subtract per-UAV energy consumption, flooring remaining energy at zero."""
    energy = np.maximum(0.0, np.array(world.remaining_energy) - np.asarray(amounts))
    return replace(world, remaining_energy=energy)
