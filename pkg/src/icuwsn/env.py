"""Dec-POMDP wrapper around the world: observations, action constraints, team reward."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import acoustics, metrics
from .acoustics import ChannelParams
from .metrics import EpisodeTrace, UtilityWeights
from .world import (
    Deployment, MobilityConfig, Region, Scenario, SlotOutcome, WorldState,
    apply_malfunctions, default_deployment, initial_state, network_lifetime,
    network_slot_duration, place_interferers, resolve_slot, step_mobility,
    update_malfunctions,
)

MALFUNCTION_MODES = ("silent", "random")


@dataclass(frozen=True)
class ActionSpace:
    levels_w: tuple[float, ...] = (0.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)

    def __post_init__(self):
        lv = self.levels_w
        if not lv or lv[0] != 0.0:
            raise ValueError("action space must start with 0 W")
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError("power levels must be strictly increasing")

    @classmethod
    def from_powers(cls, powers: Sequence[float]) -> "ActionSpace":
        return cls((0.0, *sorted(float(p) for p in powers)))

    def __len__(self) -> int:
        return len(self.levels_w)

    @property
    def max_w(self) -> float:
        return self.levels_w[-1]

    def index_of(self, power_w: float) -> int:
        try:
            return self.levels_w.index(float(power_w))
        except ValueError:
            raise ValueError(f"{power_w} W is not an available power level") from None


@dataclass(frozen=True)
class RewardConfig:
    weights: UtilityWeights = field(default_factory=UtilityWeights)
    fairness_window_h: int = 5
    lifetime_requirement_slots: int = 30
    violation_penalty: float = -100.0

    def __post_init__(self):
        if self.fairness_window_h < 1:
            raise ValueError("fairness window must be >= 1")
        if self.lifetime_requirement_slots < 1:
            raise ValueError("lifetime requirement must be >= 1 slot")


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: Scenario = Scenario.UNICAST
    n_tx: int = 5
    lifetime_slots: int = 30
    epsilon: float = 0.0
    malfunction_mode: str = "silent"
    power_levels_w: tuple[float, ...] = (2.0, 4.0, 8.0, 16.0, 32.0, 64.0)
    battery_j: float = 5000.0
    cease_fraction: float = 0.1
    t_tran_s: float = 3.0
    t_guard_s: float = 0.1
    gamma_th_db: float = 10.0
    weights: UtilityWeights = field(default_factory=UtilityWeights)
    fairness_window: int | None = None
    violation_penalty: float = -100.0
    interferer_power_w: float | None = 4.0
    ring_fraction: float = 0.5
    region: Region = field(default_factory=Region)
    channel: ChannelParams = field(default_factory=ChannelParams)
    mobility: MobilityConfig = field(default_factory=MobilityConfig)
    deployment: Deployment | None = None

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if self.malfunction_mode not in MALFUNCTION_MODES:
            raise ValueError(f"malfunction_mode must be one of {MALFUNCTION_MODES}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if self.n_tx < 1:
            raise ValueError("need at least one transmitter")
        if not 0.0 <= self.cease_fraction < 1.0:
            raise ValueError("cease_fraction must be in [0, 1)")

    @property
    def action_space(self) -> ActionSpace:
        return ActionSpace.from_powers(self.power_levels_w)

    @property
    def gamma_th(self) -> float:
        return float(acoustics.db_to_linear(self.gamma_th_db))

    def build_deployment(self) -> Deployment:
        if self.deployment is not None:
            return self.deployment
        return default_deployment(self.scenario, self.n_tx, self.region, self.ring_fraction,
                                  self.battery_j, self.interferer_power_w)

    def reward_config(self, n_tx: int) -> RewardConfig:
        return RewardConfig(self.weights, self.fairness_window or n_tx,
                            self.lifetime_slots, self.violation_penalty)


@dataclass(frozen=True)
class Observation:
    node_id: int
    self_position: np.ndarray
    residual_energy_ratio: float
    last_send_flag: int
    past_send_ratio: float
    prev_power_w: float
    receiver_positions: np.ndarray
    interferer_positions: np.ndarray   # other transmitters, then external entities
    interferer_active: np.ndarray      # presence flags of the external entities


@dataclass
class SendHistory:
    """Per-transmitter send bookkeeping needed by the observations."""

    last_send: np.ndarray
    send_count: np.ndarray
    prev_power_w: np.ndarray

    @classmethod
    def empty(cls, n_tx: int) -> "SendHistory":
        return cls(np.zeros(n_tx), np.zeros(n_tx), np.zeros(n_tx))

    def record(self, power_w: np.ndarray) -> "SendHistory":
        sent = (power_w > 0).astype(float)
        return SendHistory(sent, self.send_count + sent, power_w.astype(float).copy())


def observe(world: WorldState, node_id: int, history: SendHistory) -> Observation:
    """Ground-truth local observation of one transmitter at the upcoming slot."""
    dep = world.deployment
    t_pos = dep.tx_ids.index(node_id)
    k = dep.tx_index[t_pos]
    elapsed = world.slot
    others = [dep.tx_index[j] for j in range(dep.n_tx) if j != t_pos]
    ext = dep.interferer_index
    active = np.array([dep.region.contains(world.positions[j]) for j in ext], dtype=float)
    return Observation(
        node_id=node_id,
        self_position=world.positions[k].copy(),
        residual_energy_ratio=float(world.residual_j[k] / world.battery_j[k]),
        last_send_flag=int(history.last_send[t_pos]),
        past_send_ratio=float(history.send_count[t_pos] / elapsed) if elapsed else 0.0,
        prev_power_w=float(history.prev_power_w[t_pos]),
        receiver_positions=world.positions[dep.receivers_of(t_pos)].copy(),
        interferer_positions=np.concatenate(
            [world.positions[others].reshape(-1, 3), world.positions[ext].reshape(-1, 3)]),
        interferer_active=active,
    )


def observation_vector(obs: Observation, dep: Deployment, max_power_w: float) -> np.ndarray:
    """Flatten and normalise an observation for the agent network.

    Horizontal coordinates are divided by the region radius and depth by its
    height; the previous power by the largest level; the id is one-hot.
    """
    scale = np.array([dep.region.radius_m, dep.region.radius_m, dep.region.height_m])
    onehot = np.zeros(dep.n_tx)
    onehot[dep.tx_ids.index(obs.node_id)] = 1.0
    return np.concatenate([
        obs.self_position / scale,
        [obs.residual_energy_ratio, obs.last_send_flag, obs.past_send_ratio,
         obs.prev_power_w / max_power_w],
        onehot,
        (obs.receiver_positions / scale).ravel(),
        (obs.interferer_positions / scale).ravel(),
        obs.interferer_active,
    ])


def observe_all(world: WorldState, history: SendHistory, max_power_w: float) -> np.ndarray:
    """Vectorised ``observation_vector(observe(...))`` for every transmitter, shape (n_tx, D)."""
    dep = world.deployment
    n = dep.n_tx
    reg = dep.region
    scale = np.array([reg.radius_m, reg.radius_m, reg.height_m])
    pos = world.positions / scale
    tx = dep.tx_index
    elapsed = world.slot
    res = world.residual_j[tx] / world.battery_j[tx]
    ratio = history.send_count / elapsed if elapsed else np.zeros(n)
    scal = np.stack([res, history.last_send, ratio, history.prev_power_w / max_power_w], axis=1)
    recv = pos[dep.link_rx].reshape(n, -1)
    others = pos[dep._other_tx].reshape(n, -1)
    ext = dep.interferer_index
    ext_pos = np.broadcast_to(pos[ext].ravel(), (n, 3 * len(ext)))
    active = reg.inside(world.positions[ext]).astype(float)
    return np.concatenate([
        pos[tx], scal, np.eye(n), recv, others, ext_pos,
        np.broadcast_to(active, (n, len(ext))),
    ], axis=1)


def observation_width(dep: Deployment) -> int:
    n = dep.n_tx
    return 3 + 4 + n + 3 * dep.n_links // n + 3 * (n - 1) + 4 * len(dep.interferer_index)


def constrain_action(world: WorldState, node_id: int, proposed_w: float, space: ActionSpace,
                     mode: str = "silent", cease_fraction: float = 0.1,
                     rng: np.random.Generator | None = None) -> float:
    """Power a transmitter actually uses given its energy and malfunction state."""
    dep = world.deployment
    k = dep.tx_index[dep.tx_ids.index(node_id)]
    if world.residual_j[k] < cease_fraction * world.battery_j[k]:
        return 0.0
    if world.malfunction[k]:
        if mode == "silent":
            return 0.0
        if rng is None:
            raise ValueError("random malfunction mode needs an rng")
        return float(space.levels_w[rng.integers(len(space))])
    return float(proposed_w)


def team_reward(window: Sequence[SlotOutcome], cfg: RewardConfig, lifetime_ok: bool
                ) -> tuple[float, bool]:
    """Team reward of the latest slot in ``window`` and whether the episode must end.

    ``window`` holds the slots so far (at least the last ``h``); the newest is
    last. The failure penalty is the negated ineffective index so that failed
    transmissions lower the reward.
    """
    if not lifetime_ok:
        return cfg.violation_penalty, True
    w = cfg.weights
    cur = window[-1]
    spa = metrics.spatial_reuse_index(cur)
    fair = metrics.fairness_index(window, cfg.fairness_window_h)
    penalty = -metrics.ineffective_index(cur)
    return w.alpha * spa + w.beta * fair - w.mu * penalty, False


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    terminal: bool
    outcome: SlotOutcome
    executed: np.ndarray       # action indices actually executed
    violation: bool


class UWSNEnv:
    """One episode at a time of joint link scheduling and power allocation.

    Agents are the deployment's transmitters. ``step`` takes one action index
    per transmitter into ``action_space``.
    """

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.deployment = cfg.build_deployment()
        self.space = cfg.action_space
        self.levels = np.asarray(self.space.levels_w)
        self.reward_cfg = cfg.reward_config(self.deployment.n_tx)
        self.gamma_th = cfg.gamma_th
        self.ambient_w = acoustics.ambient_noise_power(cfg.channel)
        self.obs_dim = observation_width(self.deployment)
        self.n_agents = self.deployment.n_tx
        self.world: WorldState | None = None

    @property
    def n_actions(self) -> int:
        return len(self.space)

    def reset(self, seed=None, epsilon: float | None = None) -> np.ndarray:
        cfg = self.cfg
        self.rng = np.random.default_rng(seed)
        eps = cfg.epsilon if epsilon is None else epsilon
        self.epsilon = eps
        world = initial_state(self.deployment)
        t_slot = network_slot_duration(self.deployment, world.positions, cfg.channel,
                                       cfg.t_tran_s, cfg.t_guard_s)
        world = replace(world, t_slot_s=t_slot)
        world = place_interferers(world, self.rng, cfg.lifetime_slots * t_slot)
        world = apply_malfunctions(world, eps, self.rng, cfg.lifetime_slots)
        self.initial = world
        self.world = world
        self.history = SendHistory.empty(self.n_agents)
        self.outcomes: list[SlotOutcome] = []
        self.rewards: list[float] = []
        self.done = False
        return self.observe()

    def observe(self) -> np.ndarray:
        return observe_all(self.world, self.history, self.space.max_w)

    @property
    def intelligent(self) -> np.ndarray:
        """Mask of transmitters acting on their own policy in the upcoming slot."""
        return ~self.world.malfunction[self.deployment.tx_index]

    def constrain(self, proposed_w: np.ndarray) -> np.ndarray:
        world, dep, cfg = self.world, self.deployment, self.cfg
        tx = dep.tx_index
        p = np.asarray(proposed_w, dtype=float).copy()
        broken = world.malfunction[tx]
        if cfg.malfunction_mode == "silent":
            p[broken] = 0.0
        else:
            for i in np.flatnonzero(broken):
                p[i] = self.levels[self.rng.integers(len(self.levels))]
        depleted = world.residual_j[tx] < cfg.cease_fraction * world.battery_j[tx]
        p[depleted] = 0.0
        return p

    def step(self, actions) -> StepResult:
        if self.done:
            raise RuntimeError("episode is over; call reset()")
        cfg, dep = self.cfg, self.deployment
        a = np.asarray(actions, dtype=np.int64)
        if a.shape != (self.n_agents,):
            raise ValueError(f"expected {self.n_agents} actions, got shape {a.shape}")
        intelligent = self.intelligent
        power = self.constrain(self.levels[a])
        world, outcome = resolve_slot(self.world, power, cfg.channel, self.gamma_th,
                                      cfg.t_tran_s, self.ambient_w)
        self.outcomes.append(outcome)
        tx = dep.tx_index
        crossed = world.residual_j[tx] < cfg.cease_fraction * world.battery_j[tx]
        violation = bool(np.any(crossed & intelligent))
        reward, terminal = team_reward(self.outcomes[-self.reward_cfg.fairness_window_h:],
                                       self.reward_cfg, not violation)
        terminal = terminal or outcome.slot >= cfg.lifetime_slots
        self.rewards.append(reward)
        self.history = self.history.record(power)
        world = step_mobility(world, cfg.mobility, self.rng)
        world = update_malfunctions(world, outcome.slot + 1)
        self.world = world
        self.done = terminal
        executed = np.searchsorted(self.levels, power)
        return StepResult(self.observe(), reward, terminal, outcome, executed, violation)

    def trace(self) -> EpisodeTrace:
        life = network_lifetime(self.outcomes, self.initial, self.cfg.cease_fraction,
                                horizon=len(self.outcomes))
        return EpisodeTrace(tuple(self.outcomes), life.slots, self.cfg.scenario,
                            self.initial.t_slot_s, self.cfg.t_tran_s)

    def report(self) -> dict:
        return metrics.episode_report(self.trace(), self.cfg.weights, sum(self.rewards))
