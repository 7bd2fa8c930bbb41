"""Hybrid-action scheduler: system cost/reward, the compound-action
actor-critic (CA2C) that picks device association and UAV selection by an
approximate Q-argmax while a deterministic actor emits UAV displacements,
plus the comparison policies (DQN over discrete actions with random
trajectories, DDPG over trajectories with nearest association, standalone,
uniform random).

The discrete argmax is factorized: selections are enumerated exactly
(2^N - 1 nonempty subsets) and association is refined by one greedy
coordinate-ascent pass over devices starting from nearest-feasible, so the
returned Q never drops below the nearest-association heuristic's.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import detector, env, federation, nn
from .dataset import DeviceStream, RingBuffer, build_uav_buffer
from .rng import stream


def energy_penalty(per_slot_energy: np.ndarray, e_max: float, n_slots: int) -> np.ndarray:
    """Per-UAV overdraw beyond the per-slot energy budget e_max / n_slots."""
    return np.maximum(np.asarray(per_slot_energy) - e_max / n_slots, 0.0)


def system_cost(coverage_sum: float, time_cost: float, global_disc_loss: float,
                weights: tuple[float, float, float]) -> float:
    """Weighted cost: -mu1 * coverage + mu2 * time cost + mu3 * critic loss."""
    mu1, mu2, mu3 = weights
    return -mu1 * coverage_sum + mu2 * time_cost + mu3 * global_disc_loss


def reward(cost: float, penalties: np.ndarray, penalty_coeff: float) -> float:
    """Instant reward: negated cost plus weighted L1 energy-overdraw penalty."""
    return -(cost + penalty_coeff * float(np.abs(np.asarray(penalties)).sum()))


@dataclass(frozen=True)
class ObsCodec:
    """Encoding of world snapshots and actions into network inputs.

    State: device positions (K x 3) and previous UAV positions (N x 3)
    scaled by the world side, remaining energy scaled by capacity.
    Discrete action: one-hot association rows (K x N) plus the selection
    vector.  Continuous action: per-UAV displacement in units of the
    per-slot movement cap.
    """

    n_devices: int
    n_uavs: int
    area_side: float
    altitude: float
    e_max: float
    sensing_range: float
    max_step: float

    @property
    def state_dim(self) -> int:
        return 3 * self.n_devices + 4 * self.n_uavs

    @property
    def discrete_dim(self) -> int:
        return self.n_devices * self.n_uavs + self.n_uavs

    @property
    def continuous_dim(self) -> int:
        return 2 * self.n_uavs

    @property
    def feasible_horizontal_sq(self) -> float:
        reach_sq = self.sensing_range**2 - self.altitude**2
        return max(reach_sq, -1.0)  # negative: no UAV is ever in range

    def encode_state(self, world: env.WorldState) -> np.ndarray:
        return np.concatenate([
            world.device_positions.ravel() / self.area_side,
            world.uav_positions.ravel() / self.area_side,
            world.remaining_energy / self.e_max,
        ])

    def decode_positions(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Recover device and UAV xy coordinates from encoded state rows."""
        states = np.atleast_2d(states)
        k, n = self.n_devices, self.n_uavs
        dev = states[:, : 3 * k].reshape(-1, k, 3)[:, :, :2] * self.area_side
        uav = states[:, 3 * k : 3 * k + 3 * n].reshape(-1, n, 3)[:, :, :2] * self.area_side
        return dev, uav

    def feasible_matrix(self, device_xy: np.ndarray, uav_xy: np.ndarray) -> np.ndarray:
        """(..., K, N) boolean: device within sensing reach of the UAV."""
        diff = device_xy[..., :, None, :] - uav_xy[..., None, :, :]
        return np.sum(diff * diff, axis=-1) <= self.feasible_horizontal_sq

    def encode_discrete(self, assoc_idx: np.ndarray, selection: np.ndarray) -> np.ndarray:
        """One-hot encode association indices (-1 = none) plus selection bits."""
        assoc_idx = np.atleast_2d(assoc_idx)
        selection = np.atleast_2d(selection)
        b = assoc_idx.shape[0]
        onehot = np.zeros((b, self.n_devices, self.n_uavs))
        rows, cols = np.nonzero(assoc_idx >= 0)
        onehot[rows, cols, assoc_idx[rows, cols]] = 1.0
        return np.concatenate([onehot.reshape(b, -1), selection.astype(np.float64)], axis=1)

    def association_matrix(self, assoc_idx: np.ndarray) -> np.ndarray:
        """(K, N) binary matrix from per-device UAV indices (-1 = none)."""
        mat = np.zeros((self.n_devices, self.n_uavs), dtype=np.int64)
        for k, n in enumerate(assoc_idx):
            if n >= 0:
                mat[k, n] = 1
        return mat

    def nearest_feasible(self, device_xy: np.ndarray, uav_xy: np.ndarray) -> np.ndarray:
        """(..., K) index of the closest in-range UAV per device, -1 if none."""
        diff = device_xy[..., :, None, :] - uav_xy[..., None, :, :]
        dist_sq = np.sum(diff * diff, axis=-1)
        nearest = np.argmin(dist_sq, axis=-1)
        in_range = np.take_along_axis(dist_sq, nearest[..., None], axis=-1)[..., 0] \
            <= self.feasible_horizontal_sq
        return np.where(in_range, nearest, -1)


@dataclass(frozen=True)
class Action:
    assoc_idx: np.ndarray  # (K,) UAV index per device, -1 for none
    selection: np.ndarray  # (N,) binary
    targets_norm: np.ndarray  # (N, 2) displacement in [-1, 1] units of max_step

    def targets_abs(self, uav_xy: np.ndarray, codec: ObsCodec) -> np.ndarray:
        return uav_xy + self.targets_norm * codec.max_step


@dataclass(frozen=True)
class Experience:
    state: np.ndarray
    action: np.ndarray  # encoded [discrete, continuous]
    reward: float
    next_state: np.ndarray

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise ValueError("experience reward must be finite")


class ReplayBuffer:
    """Ring of experiences; uniform sampling without replacement per batch."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: list[Experience] = []
        self._head = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, exp: Experience) -> None:
        if len(self._items) < self.capacity:
            self._items.append(exp)
        else:
            self._items[self._head] = exp
            self._head = (self._head + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Experience]:
        n = min(batch_size, len(self._items))
        idx = rng.permutation(len(self._items))[:n]
        return [self._items[i] for i in idx]


@dataclass
class Ca2cConfig:
    hidden: tuple[int, ...] = (128, 128)
    tau: float = 0.005
    epsilon_explore: float = 0.1
    discount_chi: float = 0.9
    minibatch: int = 64
    replay_capacity: int = 2000
    rl_alpha: float = 1e-4
    rl_beta1: float = 0.9
    rl_beta2: float = 0.999
    weights: tuple[float, float, float] = (2.0, 4.0, 10.0)
    energy_penalty_coeff: float = 0.01

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 < self.discount_chi < 1:
            raise ValueError("discount factor must lie in (0, 1)")
        if not 0 <= self.epsilon_explore <= 1:
            raise ValueError("exploration probability must lie in [0, 1]")


@dataclass
class TrainableNet:
    spec: nn.MlpSpec
    params: np.ndarray
    target: np.ndarray
    adam: nn.AdamState

    @classmethod
    def build(cls, spec: nn.MlpSpec, cfg: Ca2cConfig, rng: np.random.Generator) -> "TrainableNet":
        params = nn.init_params(spec, rng)
        return cls(spec, params, params.copy(),
                   nn.AdamState.fresh(params.size, cfg.rl_alpha, cfg.rl_beta1, cfg.rl_beta2))

    def soft_update(self, tau: float) -> None:
        self.target = (1.0 - tau) * self.target + tau * self.params


def critic_q(critic_spec: nn.MlpSpec, critic_params: np.ndarray, state: np.ndarray,
             action_enc: np.ndarray) -> float:
    """Scalar Q for one encoded (state, action) pair."""
    return float(nn.forward(critic_spec, critic_params, np.concatenate([state, action_enc]))[0])


def actor_targets(actor_spec: nn.MlpSpec, actor_params: np.ndarray, state: np.ndarray,
                  discrete_enc: np.ndarray, uav_xy: np.ndarray, codec: ObsCodec) -> np.ndarray:
    """Absolute (N, 2) targets: tanh outputs scaled to the movement cap and
    added to the current UAV positions."""
    out = nn.forward(actor_spec, actor_params, np.concatenate([state, discrete_enc]))
    return uav_xy + out.reshape(codec.n_uavs, 2) * codec.max_step


class Ca2cNets:
    """Actor + critic pairs with their target copies."""

    def __init__(self, codec: ObsCodec, cfg: Ca2cConfig, rng: np.random.Generator):
        self.codec = codec
        self.cfg = cfg
        actor_spec = nn.MlpSpec(
            (codec.state_dim + codec.discrete_dim,) + cfg.hidden + (codec.continuous_dim,),
            activation="relu", output_activation="tanh")
        critic_spec = nn.MlpSpec(
            (codec.state_dim + codec.discrete_dim + codec.continuous_dim,) + cfg.hidden + (1,),
            activation="relu", output_activation="linear")
        self.actor = TrainableNet.build(actor_spec, cfg, rng)
        self.critic = TrainableNet.build(critic_spec, cfg, rng)


def _masked_candidate_argmax(q: np.ndarray, feasible: np.ndarray) -> np.ndarray:
    """Row argmax over candidates with infeasible entries forced to -inf.

    Candidate 0 (no association) is always feasible; ties resolve to the
    first maximal index, i.e. none, then the lowest UAV id.
    """
    masked = np.where(feasible, q, -np.inf)
    return np.argmax(masked, axis=1)


def search_discrete(codec: ObsCodec, critic_spec: nn.MlpSpec, critic_params: np.ndarray,
                    states: np.ndarray,
                    actor_spec: nn.MlpSpec | None = None,
                    actor_params: np.ndarray | None = None,
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Factorized argmax over (association, selection) for a batch of states.

    Enumerates every nonempty selection in ascending bitmask order; for
    each, association starts at nearest-feasible and gets one greedy
    coordinate-ascent pass per device over [none, uav 0, ..] candidates.
    The continuous part is re-derived from the actor for every candidate
    (pass no actor for a purely discrete Q network).  Returns
    (assoc_idx (B, K), selection (B, N), q (B,), a_c (B, 2N)).
    """
    states = np.atleast_2d(states)
    b = states.shape[0]
    k, n = codec.n_devices, codec.n_uavs
    device_xy, uav_xy = codec.decode_positions(states)
    feasible = codec.feasible_matrix(device_xy, uav_xy)  # (B, K, N)
    init_assoc = codec.nearest_feasible(device_xy, uav_xy)  # (B, K)

    def q_of(state_rows, assoc_idx, sel_rows):
        disc = codec.encode_discrete(assoc_idx, sel_rows)
        if actor_spec is None:
            a_c = np.zeros((assoc_idx.shape[0], 0))
            q_in = np.concatenate([state_rows, disc], axis=1)
        else:
            a_c = nn.forward(actor_spec, actor_params,
                             np.concatenate([state_rows, disc], axis=1))
            q_in = np.concatenate([state_rows, disc, a_c], axis=1)
        return nn.forward(critic_spec, critic_params, q_in)[:, 0], a_c

    best_q = np.full(b, -np.inf)
    best_assoc = np.zeros((b, k), dtype=np.int64)
    best_sel = np.zeros((b, n), dtype=np.int64)
    best_ac = np.zeros((b, codec.continuous_dim if actor_spec is not None else 0))

    n_cand = n + 1  # none + each UAV
    states_rep = np.repeat(states, n_cand, axis=0)
    for mask in range(1, 2**n):
        sel = np.array([(mask >> j) & 1 for j in range(n)], dtype=np.int64)
        assoc = init_assoc.copy()
        for dev in range(k):
            # all candidate values of this device's association, batched
            cand_assoc = np.repeat(assoc, n_cand, axis=0)
            cand_assoc[:, dev] = np.tile(np.arange(-1, n), b)
            sel_rows = np.broadcast_to(sel, (b * n_cand, n))
            q_flat, _ = q_of(states_rep, cand_assoc, sel_rows)
            q_cand = q_flat.reshape(b, n_cand)
            cand_ok = np.concatenate([np.ones((b, 1), dtype=bool), feasible[:, dev, :]],
                                     axis=1)
            choice = _masked_candidate_argmax(q_cand, cand_ok)
            assoc[:, dev] = choice - 1  # candidate 0 is "none"
        q_final, a_c = q_of(states, assoc, np.broadcast_to(sel, (b, n)))
        better = q_final > best_q
        best_q = np.where(better, q_final, best_q)
        best_assoc[better] = assoc[better]
        best_sel[better] = sel
        if actor_spec is not None:
            best_ac[better] = a_c[better]
    return best_assoc, best_sel, best_q, best_ac


def random_discrete_action(codec: ObsCodec, feasible: np.ndarray,
                           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform valid discrete action: per device one of [none + feasible
    UAVs], selection uniform over nonempty subsets."""
    k, n = codec.n_devices, codec.n_uavs
    assoc = np.full(k, -1, dtype=np.int64)
    for dev in range(k):
        options = [-1] + [j for j in range(n) if feasible[dev, j]]
        assoc[dev] = options[rng.integers(len(options))]
    mask = int(rng.integers(1, 2**n))
    sel = np.array([(mask >> j) & 1 for j in range(n)], dtype=np.int64)
    return assoc, sel


def select_discrete_action(nets: Ca2cNets, state: np.ndarray, epsilon: float,
                           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Epsilon-greedy discrete action for a single state."""
    codec = nets.codec
    if rng.uniform() < epsilon:
        device_xy, uav_xy = codec.decode_positions(state)
        feasible = codec.feasible_matrix(device_xy, uav_xy)[0]
        return random_discrete_action(codec, feasible, rng)
    assoc, sel, _, _ = search_discrete(codec, nets.critic.spec, nets.critic.params,
                                       state, nets.actor.spec, nets.actor.params)
    return assoc[0], sel[0]


def train_critic(nets: Ca2cNets, batch: list[Experience], chi: float, tau: float) -> float:
    """One critic update: argmax next discrete action with online nets,
    bootstrap with target nets, minimize batch MSE, then soft-update.
    Returns the pre-step batch MSE."""
    if not batch:
        raise ValueError("empty minibatch")
    codec = nets.codec
    states = np.stack([e.state for e in batch])
    actions = np.stack([e.action for e in batch])
    rewards = np.array([e.reward for e in batch])
    next_states = np.stack([e.next_state for e in batch])

    assoc, sel, _, _ = search_discrete(codec, nets.critic.spec, nets.critic.params,
                                       next_states, nets.actor.spec, nets.actor.params)
    disc = codec.encode_discrete(assoc, sel)
    a_c = nn.forward(nets.actor.spec, nets.actor.target,
                     np.concatenate([next_states, disc], axis=1))
    q_next = nn.forward(nets.critic.spec, nets.critic.target,
                        np.concatenate([next_states, disc, a_c], axis=1))[:, 0]
    y = rewards + chi * q_next

    q_in = np.concatenate([states, actions], axis=1)
    q = nn.forward(nets.critic.spec, nets.critic.params, q_in)[:, 0]
    mse = float(np.mean((y - q) ** 2))
    upstream = (2.0 * (q - y) / len(batch))[:, None]
    grad = nn.grad_params(nets.critic.spec, nets.critic.params, q_in, upstream)
    nets.critic.params, nets.critic.adam = nn.adam_step(nets.critic.params, grad,
                                                        nets.critic.adam)
    nets.critic.soft_update(tau)
    return mse


def train_actor(nets: Ca2cNets, batch: list[Experience], tau: float) -> None:
    """One actor update ascending mean Q through the critic's continuous
    input, using the stored discrete actions; then soft-update."""
    if not batch:
        raise ValueError("empty minibatch")
    codec = nets.codec
    states = np.stack([e.state for e in batch])
    disc = np.stack([e.action[: codec.discrete_dim] for e in batch])
    actor_in = np.concatenate([states, disc], axis=1)
    a_c = nn.forward(nets.actor.spec, nets.actor.params, actor_in)
    q_in = np.concatenate([states, disc, a_c], axis=1)
    _, dq_dinput = nn.grad_params_and_input(nets.critic.spec, nets.critic.params, q_in,
                                            np.ones((len(batch), 1)))
    dq_dac = dq_dinput[:, -codec.continuous_dim:]
    grad = nn.grad_params(nets.actor.spec, nets.actor.params, actor_in,
                          -dq_dac / len(batch))
    nets.actor.params, nets.actor.adam = nn.adam_step(nets.actor.params, grad,
                                                      nets.actor.adam)
    nets.actor.soft_update(tau)


@dataclass
class SimContext:
    """Everything an episode needs besides the policy: configs, the shared
    GAN models, per-UAV sensing buffers, and the device data streams."""

    codec: ObsCodec
    sensing: env.SensingConfig
    channel: env.ChannelConfig
    energy: env.EnergyConfig
    compute: federation.UavComputeConfig
    train_cfg: detector.TrainConfig
    dp_cfg: detector.DpConfig
    rl_cfg: Ca2cConfig
    device_streams: list[DeviceStream]
    buffers: list[RingBuffer]
    models: list[detector.GanModel]
    eval_batches: list[np.ndarray]
    seed: int
    episode_slots: int
    slot_duration: float = 10.0
    mobility: str = "random_walk"
    latency_dataset_cap: int = 256


@dataclass(frozen=True)
class SlotRecord:
    episode: int
    slot: int
    reward: float
    system_cost: float
    coverage_sum: int
    time_cost: float
    round_time: float
    ld: float
    lg: float
    prop_energy: np.ndarray
    comp_energy: np.ndarray
    tx_energy: np.ndarray
    selection_mask: int
    assoc_counts: np.ndarray
    aggregation_latency: float
    mean_update_latency: float
    mean_upload_latency: float
    mean_distribution_latency: float


@dataclass(frozen=True)
class EpisodeResult:
    rows: list[SlotRecord]
    mean_reward: float
    discounted_return: float
    total_energy: np.ndarray  # (N,)


class Policy:
    """Per-slot action source; subclasses may also learn from transitions."""

    name = "base"
    uses_aggregation = True

    def __init__(self, codec: ObsCodec, cfg: Ca2cConfig):
        self.codec = codec
        self.cfg = cfg

    def act(self, state: np.ndarray, rng: np.random.Generator) -> Action:
        raise NotImplementedError

    def observe(self, state, action: Action, reward_value: float, next_state,
                rng: np.random.Generator) -> None:
        pass

    def _random_targets(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(self.codec.n_uavs, 2))

    def _nearest_assoc(self, state: np.ndarray) -> np.ndarray:
        device_xy, uav_xy = self.codec.decode_positions(state)
        return self.codec.nearest_feasible(device_xy, uav_xy)[0]


class Ca2cPolicy(Policy):
    """Compound-action actor-critic over the full hybrid action space."""

    name = "ca2c_afl"

    def __init__(self, codec: ObsCodec, cfg: Ca2cConfig, rng: np.random.Generator):
        super().__init__(codec, cfg)
        self.nets = Ca2cNets(codec, cfg, rng)
        self.replay = ReplayBuffer(cfg.replay_capacity)

    def act(self, state, rng):
        assoc, sel = select_discrete_action(self.nets, state, self.cfg.epsilon_explore, rng)
        disc = self.codec.encode_discrete(assoc, sel)[0]
        out = nn.forward(self.nets.actor.spec, self.nets.actor.params,
                         np.concatenate([state, disc]))
        return Action(assoc, sel, out.reshape(self.codec.n_uavs, 2))

    def observe(self, state, action, reward_value, next_state, rng):
        disc = self.codec.encode_discrete(action.assoc_idx, action.selection)[0]
        enc = np.concatenate([disc, action.targets_norm.ravel()])
        self.replay.add(Experience(state, enc, reward_value, next_state))
        batch = self.replay.sample(self.cfg.minibatch, rng)
        train_critic(self.nets, batch, self.cfg.discount_chi, self.cfg.tau)
        train_actor(self.nets, batch, self.cfg.tau)


class DqnAflPolicy(Policy):
    """Discrete actions by a Q-network; trajectories uniformly random."""

    name = "dqn_afl"

    def __init__(self, codec: ObsCodec, cfg: Ca2cConfig, rng: np.random.Generator):
        super().__init__(codec, cfg)
        spec = nn.MlpSpec((codec.state_dim + codec.discrete_dim,) + cfg.hidden + (1,),
                          activation="relu", output_activation="linear")
        self.qnet = TrainableNet.build(spec, cfg, rng)
        self.replay = ReplayBuffer(cfg.replay_capacity)

    def act(self, state, rng):
        if rng.uniform() < self.cfg.epsilon_explore:
            device_xy, uav_xy = self.codec.decode_positions(state)
            feasible = self.codec.feasible_matrix(device_xy, uav_xy)[0]
            assoc, sel = random_discrete_action(self.codec, feasible, rng)
        else:
            idx, sels, _, _ = search_discrete(self.codec, self.qnet.spec, self.qnet.params,
                                              state)
            assoc, sel = idx[0], sels[0]
        return Action(assoc, sel, self._random_targets(rng))

    def observe(self, state, action, reward_value, next_state, rng):
        disc = self.codec.encode_discrete(action.assoc_idx, action.selection)[0]
        self.replay.add(Experience(state, disc, reward_value, next_state))
        batch = self.replay.sample(self.cfg.minibatch, rng)
        if not batch:
            return
        states = np.stack([e.state for e in batch])
        actions = np.stack([e.action for e in batch])
        rewards = np.array([e.reward for e in batch])
        next_states = np.stack([e.next_state for e in batch])
        assoc, sel, q_next, _ = search_discrete(self.codec, self.qnet.spec,
                                                self.qnet.target, next_states)
        y = rewards + self.cfg.discount_chi * q_next
        q_in = np.concatenate([states, actions], axis=1)
        q = nn.forward(self.qnet.spec, self.qnet.params, q_in)[:, 0]
        upstream = (2.0 * (q - y) / len(batch))[:, None]
        grad = nn.grad_params(self.qnet.spec, self.qnet.params, q_in, upstream)
        self.qnet.params, self.qnet.adam = nn.adam_step(self.qnet.params, grad,
                                                        self.qnet.adam)
        self.qnet.soft_update(self.cfg.tau)


class DdpgFlPolicy(Policy):
    """DDPG trajectories; nearest-feasible association; every UAV selected."""

    name = "ddpg_fl"

    def __init__(self, codec: ObsCodec, cfg: Ca2cConfig, rng: np.random.Generator):
        super().__init__(codec, cfg)
        actor_spec = nn.MlpSpec((codec.state_dim,) + cfg.hidden + (codec.continuous_dim,),
                                activation="relu", output_activation="tanh")
        critic_spec = nn.MlpSpec(
            (codec.state_dim + codec.continuous_dim,) + cfg.hidden + (1,),
            activation="relu", output_activation="linear")
        self.actor = TrainableNet.build(actor_spec, cfg, rng)
        self.critic = TrainableNet.build(critic_spec, cfg, rng)
        self.replay = ReplayBuffer(cfg.replay_capacity)

    def act(self, state, rng):
        assoc = self._nearest_assoc(state)
        sel = np.ones(self.codec.n_uavs, dtype=np.int64)
        if rng.uniform() < self.cfg.epsilon_explore:
            targets = self._random_targets(rng)
        else:
            targets = nn.forward(self.actor.spec, self.actor.params,
                                 state).reshape(self.codec.n_uavs, 2)
        return Action(assoc, sel, targets)

    def observe(self, state, action, reward_value, next_state, rng):
        self.replay.add(Experience(state, action.targets_norm.ravel(),
                                   reward_value, next_state))
        batch = self.replay.sample(self.cfg.minibatch, rng)
        if not batch:
            return
        states = np.stack([e.state for e in batch])
        actions = np.stack([e.action for e in batch])
        rewards = np.array([e.reward for e in batch])
        next_states = np.stack([e.next_state for e in batch])
        a_next = nn.forward(self.actor.spec, self.actor.target, next_states)
        q_next = nn.forward(self.critic.spec, self.critic.target,
                            np.concatenate([next_states, a_next], axis=1))[:, 0]
        y = rewards + self.cfg.discount_chi * q_next
        q_in = np.concatenate([states, actions], axis=1)
        q = nn.forward(self.critic.spec, self.critic.params, q_in)[:, 0]
        upstream = (2.0 * (q - y) / len(batch))[:, None]
        grad = nn.grad_params(self.critic.spec, self.critic.params, q_in, upstream)
        self.critic.params, self.critic.adam = nn.adam_step(self.critic.params, grad,
                                                            self.critic.adam)
        self.critic.soft_update(self.cfg.tau)

        a_c = nn.forward(self.actor.spec, self.actor.params, states)
        q_in = np.concatenate([states, a_c], axis=1)
        _, dq = nn.grad_params_and_input(self.critic.spec, self.critic.params, q_in,
                                         np.ones((len(batch), 1)))
        grad = nn.grad_params(self.actor.spec, self.actor.params, states,
                              -dq[:, -self.codec.continuous_dim:] / len(batch))
        self.actor.params, self.actor.adam = nn.adam_step(self.actor.params, grad,
                                                          self.actor.adam)
        self.actor.soft_update(self.cfg.tau)


class StandalonePolicy(Policy):
    """No scheduling and no model exchange; every UAV trains on its own."""

    name = "standalone"
    uses_aggregation = False

    def act(self, state, rng):
        assoc = self._nearest_assoc(state)
        sel = np.ones(self.codec.n_uavs, dtype=np.int64)
        return Action(assoc, sel, self._random_targets(rng))


class RandomPolicy(Policy):
    """Uniform random valid actions; the learning-free control."""

    name = "random"

    def act(self, state, rng):
        device_xy, uav_xy = self.codec.decode_positions(state)
        feasible = self.codec.feasible_matrix(device_xy, uav_xy)[0]
        assoc, sel = random_discrete_action(self.codec, feasible, rng)
        return Action(assoc, sel, self._random_targets(rng))


def make_baseline(kind: str, codec: ObsCodec, cfg: Ca2cConfig,
                  rng: np.random.Generator) -> Policy:
    """Comparison policies from the evaluation section."""
    if kind == "dqn_afl":
        return DqnAflPolicy(codec, cfg, rng)
    if kind == "ddpg_fl":
        return DdpgFlPolicy(codec, cfg, rng)
    if kind == "standalone":
        return StandalonePolicy(codec, cfg)
    raise ValueError(f"unknown baseline {kind!r}")


def make_policy(algo: str, codec: ObsCodec, cfg: Ca2cConfig,
                rng: np.random.Generator) -> Policy:
    if algo == "ca2c_afl":
        return Ca2cPolicy(codec, cfg, rng)
    if algo == "random":
        return RandomPolicy(codec, cfg)
    return make_baseline(algo, codec, cfg, rng)


def init_world(ctx: SimContext, episode: int) -> env.WorldState:
    """Fresh per-episode world: random positions, full energy budgets."""
    codec = ctx.codec
    dev_rng = stream(ctx.seed, "device-init", episode)
    uav_rng = stream(ctx.seed, "uav-init", episode)
    devices = np.zeros((codec.n_devices, 3))
    devices[:, :2] = dev_rng.uniform(0, codec.area_side, size=(codec.n_devices, 2))
    uavs = np.full((codec.n_uavs, 3), codec.altitude)
    uavs[:, :2] = uav_rng.uniform(0, codec.area_side, size=(codec.n_uavs, 2))
    return env.WorldState(
        slot=0,
        device_positions=devices,
        uav_positions=uavs,
        remaining_energy=np.full(codec.n_uavs, ctx.energy.e_max_j),
        association=np.zeros((codec.n_devices, codec.n_uavs), dtype=np.int64),
        selection=np.zeros(codec.n_uavs, dtype=np.int64),
        area_side=codec.area_side,
        altitude=codec.altitude,
    )


def _covered_devices(world: env.WorldState, sensing: env.SensingConfig) -> list[list[int]]:
    out: list[list[int]] = [[] for _ in range(world.n_uavs)]
    for k in range(world.n_devices):
        for n in range(world.n_uavs):
            if world.association[k, n]:
                d = env.distance(world.uav_positions[n], world.device_positions[k])
                if env.sensing_probability(True, d, sensing) >= sensing.p_threshold:
                    out[n].append(k)
    return out


def _standalone_round(ctx: SimContext, world: env.WorldState, plan_sizes: np.ndarray,
                      episode: int, slot: int):
    """Local-only training: every UAV updates its own model, nothing is
    exchanged, so only the update latency and compute energy exist."""
    n = ctx.codec.n_uavs
    update_lat = np.array([federation.local_update_latency(int(s), ctx.compute)
                           for s in plan_sizes])
    for uav in range(n):
        rows = ctx.buffers[uav].view()
        if rows.shape[0] >= ctx.train_cfg.batch_size:
            local_rng = stream(ctx.seed, "local-update", episode, slot, uav)
            ctx.models[uav] = detector.local_update(ctx.models[uav], rows,
                                                    ctx.train_cfg, ctx.dp_cfg, local_rng)
    comp = np.array([env.computational_energy(True, lat, ctx.energy)
                     for lat in update_lat])
    eval_rng = stream(ctx.seed, "global-loss", episode, slot)
    ld, lg = federation.global_losses(ctx.models, ctx.eval_batches,
                                      ctx.train_cfg.gp_coeff, eval_rng)
    return update_lat, comp, ld, lg


def run_episode(ctx: SimContext, policy: Policy, episode: int) -> EpisodeResult:
    """Simulate one episode: per slot observe, act, move, sense, run the
    aggregation round, reward, store, and train."""
    codec = ctx.codec
    world = init_world(ctx, episode)
    rows: list[SlotRecord] = []
    rewards: list[float] = []
    total_energy = np.zeros(codec.n_uavs)

    for slot in range(ctx.episode_slots):
        state = codec.encode_state(world)
        act_rng = stream(ctx.seed, "explore", episode, slot)
        action = policy.act(state, act_rng)

        targets_abs = world.uav_positions[:, :2] + action.targets_norm * codec.max_step
        moved, prop_energy = env.apply_uav_positions(world, targets_abs, ctx.energy,
                                                     ctx.slot_duration)
        moved = replace(moved, association=codec.association_matrix(action.assoc_idx),
                        selection=np.asarray(action.selection))

        covered = _covered_devices(moved, ctx.sensing)
        coverage_sum = sum(len(c) for c in covered)
        for uav in range(codec.n_uavs):
            build_uav_buffer(ctx.buffers[uav], ctx.device_streams, covered[uav])
        plan_sizes = np.array([min(len(b), ctx.latency_dataset_cap) for b in ctx.buffers])

        if policy.uses_aggregation:
            plan = federation.RoundPlan(slot, np.asarray(action.selection), plan_sizes)
            result = federation.run_round(
                moved, ctx.models, [b.view() for b in ctx.buffers], plan,
                ctx.train_cfg, ctx.dp_cfg, ctx.compute, ctx.channel, ctx.energy,
                ctx.eval_batches, ctx.seed, episode)
            ctx.models[:] = result.models
            comp, tx = result.comp_energy, result.tx_energy
            latency = result.latency
            ld, lg = result.ld_global, result.lg_global
            time_c, round_t = latency.time_cost, latency.round_time
            agg_lat = float(latency.aggregation[0])
            mean_upd = float(latency.update.mean())
            mean_upl = float(latency.upload.mean())
            mean_dist = float(latency.distribution.mean())
        else:
            update_lat, comp, ld, lg = _standalone_round(ctx, moved, plan_sizes,
                                                         episode, slot)
            tx = np.zeros(codec.n_uavs)
            time_c, round_t = float(update_lat.mean()), float(update_lat.max())
            agg_lat, mean_upl, mean_dist = 0.0, 0.0, 0.0
            mean_upd = float(update_lat.mean())

        after_round = env.deduct_energy(moved, comp + tx)
        slot_energy = prop_energy + comp + tx
        total_energy += slot_energy

        cost = system_cost(coverage_sum, time_c, ld, ctx.rl_cfg.weights)
        penalties = energy_penalty(slot_energy, ctx.energy.e_max_j, ctx.episode_slots)
        r = reward(cost, penalties, ctx.rl_cfg.energy_penalty_coeff)
        rewards.append(r)

        world = env.step_devices(after_round, ctx.mobility,
                                 stream(ctx.seed, "device-walk", episode, slot))
        next_state = codec.encode_state(world)
        policy.observe(state, action, r, next_state,
                       stream(ctx.seed, "rl-train", episode, slot))

        rows.append(SlotRecord(
            episode=episode, slot=slot, reward=r, system_cost=cost,
            coverage_sum=coverage_sum, time_cost=time_c, round_time=round_t,
            ld=ld, lg=lg, prop_energy=prop_energy, comp_energy=comp, tx_energy=tx,
            selection_mask=int(np.sum(np.asarray(action.selection)
                                      * (1 << np.arange(codec.n_uavs)))),
            assoc_counts=np.array([len(c) for c in covered]),
            aggregation_latency=agg_lat, mean_update_latency=mean_upd,
            mean_upload_latency=mean_upl, mean_distribution_latency=mean_dist,
        ))

    chi = ctx.rl_cfg.discount_chi
    discounted = sum(r * chi**i for i, r in enumerate(rewards))
    mean_reward = float(np.mean(rewards)) if rewards else 0.0
    return EpisodeResult(rows, mean_reward, discounted, total_energy)
