"""Network topology, node state, mobility, malfunctions and per-slot resolution.

A ``WorldState`` is treated as an immutable value: every stepping function
returns a new state and never mutates its input arrays.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import acoustics
from .acoustics import ChannelParams

DEPLOYMENT_FORMAT = 1


class Scenario(str, Enum):
    UNICAST = "unicast"
    BROADCAST = "broadcast"


@dataclass(frozen=True)
class Transmitter:
    receiver_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.receiver_ids) == 0:
            raise ValueError("a transmitter needs at least one intended receiver")


@dataclass(frozen=True)
class Receiver:
    pass


@dataclass(frozen=True)
class ExternalInterferer:
    power_w: float

    def __post_init__(self):
        if not self.power_w >= 0:
            raise ValueError("interferer power must be >= 0")


NodeRole = Transmitter | Receiver | ExternalInterferer


@dataclass(frozen=True)
class Region:
    """Upright cylinder with its base at z=0."""

    radius_m: float = 4000.0
    height_m: float = 1000.0

    def inside(self, pts, tol: float = 1e-6) -> np.ndarray:
        """Per-point membership for an (m, 3) array."""
        p = np.asarray(pts, dtype=float)
        return ((p[:, 0] ** 2 + p[:, 1] ** 2 <= (self.radius_m + tol) ** 2)
                & (p[:, 2] >= -tol) & (p[:, 2] <= self.height_m + tol))

    def contains(self, pos, tol: float = 1e-6) -> bool:
        p = np.asarray(pos, dtype=float)
        return bool(np.hypot(p[..., 0], p[..., 1]).max() <= self.radius_m + tol
                    and p[..., 2].min() >= -tol and p[..., 2].max() <= self.height_m + tol)


@dataclass(frozen=True)
class NodeSpec:
    id: int
    role: NodeRole
    position_m: tuple[float, float, float]
    battery_j: float = 5000.0


@dataclass(frozen=True)
class MobilityConfig:
    current_speed_mps: float = 0.3
    drift_direction_deg: float = 0.0
    jitter_std_mps: float = 0.05

    def __post_init__(self):
        if self.current_speed_mps < 0 or self.jitter_std_mps < 0:
            raise ValueError("current speed and jitter must be >= 0")


@dataclass(frozen=True, eq=False)
class Deployment:
    """Static topology: who transmits to whom, and where everything starts."""

    scenario: Scenario
    nodes: tuple[NodeSpec, ...]
    region: Region = field(default_factory=Region)

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        index = {nid: k for k, nid in enumerate(ids)}
        tx = [k for k, n in enumerate(self.nodes) if isinstance(n.role, Transmitter)]
        if not tx:
            raise ValueError("deployment has no transmitters")
        network = [k for k, n in enumerate(self.nodes) if not isinstance(n.role, ExternalInterferer)]
        link_tx, link_rx = [], []
        for ti, k in enumerate(tx):
            role = self.nodes[k].role
            for rid in role.receiver_ids:
                if rid not in index:
                    raise ValueError(f"node {self.nodes[k].id}: unknown receiver {rid}")
                rk = index[rid]
                if rk == k:
                    raise ValueError(f"node {rid} cannot receive from itself")
                rrole = self.nodes[rk].role
                if isinstance(rrole, ExternalInterferer):
                    raise ValueError(f"node {rid} is an external interferer")
                if self.scenario is Scenario.UNICAST and not isinstance(rrole, Receiver):
                    raise ValueError(f"unicast receiver {rid} must have the receiver role")
                link_tx.append(ti)
                link_rx.append(rk)
            if self.scenario is Scenario.UNICAST and len(role.receiver_ids) != 1:
                raise ValueError("unicast transmitters have exactly one receiver")
            if self.scenario is Scenario.BROADCAST:
                expected = {self.nodes[j].id for j in network if j != k}
                if set(role.receiver_ids) != expected:
                    raise ValueError("broadcast transmitters address every other network node")
        intf = [k for k, n in enumerate(self.nodes) if isinstance(n.role, ExternalInterferer)]
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "tx_index", np.array(tx, dtype=np.int64))
        object.__setattr__(self, "interferer_index", np.array(intf, dtype=np.int64))
        object.__setattr__(self, "network_index", np.array(network, dtype=np.int64))
        object.__setattr__(self, "link_tx", np.array(link_tx, dtype=np.int64))
        object.__setattr__(self, "link_rx", np.array(link_rx, dtype=np.int64))
        object.__setattr__(self, "tx_ids", tuple(self.nodes[k].id for k in tx))
        onehot = np.zeros((len(tx), len(link_tx)), dtype=bool)
        onehot[link_tx, np.arange(len(link_tx))] = True
        object.__setattr__(self, "_link_owner", onehot)
        n = len(tx)
        others = np.array([[tx[j] for j in range(n) if j != i] for i in range(n)],
                          dtype=np.int64).reshape(n, n - 1)
        object.__setattr__(self, "_other_tx", others)

    def _key(self):
        return (self.scenario, self.nodes, self.region)

    def __eq__(self, other):
        return isinstance(other, Deployment) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    @property
    def n_tx(self) -> int:
        return len(self.tx_index)

    @property
    def n_links(self) -> int:
        return len(self.link_tx)

    def receivers_of(self, tx_pos: int) -> np.ndarray:
        """Node indices addressed by the ``tx_pos``-th transmitter."""
        return self.link_rx[self.link_tx == tx_pos]


def default_deployment(scenario: Scenario | str = Scenario.UNICAST, n_tx: int = 5,
                       region: Region | None = None, ring_fraction: float = 0.5,
                       battery_j: float = 5000.0, interferer_power_w: float | None = 4.0
                       ) -> Deployment:
    """Transmitters evenly spaced on a ring at the bottom, receivers right above them.

    Unicast pairs each transmitter with the receiver above it; broadcast makes
    every transmitter address all other network nodes.
    """
    scenario = Scenario(scenario)
    region = region or Region()
    r = ring_fraction * region.radius_m
    nodes = []
    for i in range(n_tx):
        ang = 2 * math.pi * i / n_tx
        x, y = r * math.cos(ang), r * math.sin(ang)
        nodes.append(((x, y, 0.0), (x, y, region.height_m)))
    n_net = 2 * n_tx
    specs = []
    for i, (tx_pos, _) in enumerate(nodes):
        if scenario is Scenario.UNICAST:
            recv = (n_tx + i,)
        else:
            recv = tuple(j for j in range(n_net) if j != i)
        specs.append(NodeSpec(i, Transmitter(recv), tx_pos, battery_j))
    for i, (_, rx_pos) in enumerate(nodes):
        specs.append(NodeSpec(n_tx + i, Receiver(), rx_pos, battery_j))
    if interferer_power_w is not None:
        specs.append(NodeSpec(n_net, ExternalInterferer(interferer_power_w),
                              (region.radius_m, 0.0, region.height_m / 2), 0.0))
    return Deployment(scenario, tuple(specs), region)


def _role_to_json(role: NodeRole) -> dict:
    if isinstance(role, Transmitter):
        return {"role": "transmitter", "receivers": list(role.receiver_ids)}
    if isinstance(role, Receiver):
        return {"role": "receiver"}
    return {"role": "interferer", "power_w": role.power_w}


def deployment_to_dict(dep: Deployment) -> dict:
    return {
        "format": DEPLOYMENT_FORMAT,
        "scenario": dep.scenario.value,
        "region": {"radius_m": dep.region.radius_m, "height_m": dep.region.height_m},
        "nodes": [
            {"id": n.id, **_role_to_json(n.role), "position_m": list(n.position_m),
             "battery_j": n.battery_j}
            for n in dep.nodes
        ],
    }


def deployment_from_dict(data: Mapping) -> Deployment:
    if data.get("format") != DEPLOYMENT_FORMAT:
        raise ValueError(f"unsupported deployment format: {data.get('format')!r}")
    nodes = []
    for item in data["nodes"]:
        kind = item["role"]
        if kind == "transmitter":
            role = Transmitter(tuple(int(r) for r in item["receivers"]))
        elif kind == "receiver":
            role = Receiver()
        elif kind == "interferer":
            role = ExternalInterferer(float(item["power_w"]))
        else:
            raise ValueError(f"unknown role {kind!r}")
        pos = tuple(float(v) for v in item["position_m"])
        if len(pos) != 3:
            raise ValueError(f"node {item['id']}: position must have 3 coordinates")
        nodes.append(NodeSpec(int(item["id"]), role, pos, float(item.get("battery_j", 5000.0))))
    reg = data.get("region", {})
    region = Region(float(reg.get("radius_m", 4000.0)), float(reg.get("height_m", 1000.0)))
    return Deployment(Scenario(data["scenario"]), tuple(nodes), region)


def save_deployment(dep: Deployment, path) -> None:
    Path(path).write_text(json.dumps(deployment_to_dict(dep), indent=2) + "\n")


def load_deployment(path) -> Deployment:
    return deployment_from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class WorldState:
    deployment: Deployment
    slot: int                      # number of slots already resolved
    positions: np.ndarray          # (n_nodes, 3)
    battery_j: np.ndarray          # (n_nodes,)
    energy_used_j: np.ndarray      # (n_nodes,)
    malfunction: np.ndarray        # (n_nodes,) bool, kappa
    onset_slot: np.ndarray         # (n_nodes,) int, 0 = never
    velocity: np.ndarray           # (n_nodes, 3), only used by interferers
    t_slot_s: float = 0.0

    @property
    def residual_j(self) -> np.ndarray:
        return self.battery_j - self.energy_used_j

    def node(self, node_id: int) -> dict:
        k = self.deployment.index[node_id]
        return {
            "id": node_id,
            "position_m": self.positions[k].copy(),
            "battery_j": float(self.battery_j[k]),
            "energy_used_j": float(self.energy_used_j[k]),
            "malfunction": bool(self.malfunction[k]),
            "malfunction_onset_slot": int(self.onset_slot[k]) or None,
            "role": self.deployment.nodes[k].role,
        }


def initial_state(dep: Deployment, t_slot_s: float = 0.0) -> WorldState:
    n = len(dep.nodes)
    return WorldState(
        deployment=dep,
        slot=0,
        positions=np.array([s.position_m for s in dep.nodes], dtype=float),
        battery_j=np.array([s.battery_j for s in dep.nodes], dtype=float),
        energy_used_j=np.zeros(n),
        malfunction=np.zeros(n, dtype=bool),
        onset_slot=np.zeros(n, dtype=np.int64),
        velocity=np.zeros((n, 3)),
        t_slot_s=t_slot_s,
    )


def network_slot_duration(dep: Deployment, positions: np.ndarray, ch: ChannelParams,
                          t_tran_s: float, t_guard_s: float) -> float:
    """Slot length from the longest transmitter-receiver link of the deployment."""
    tx_pos = positions[dep.tx_index[dep.link_tx]]
    rx_pos = positions[dep.link_rx]
    d_max = acoustics.max_pair_distance(tx_pos, rx_pos)
    return acoustics.slot_duration(t_tran_s, d_max, t_guard_s, ch)


def place_interferers(state: WorldState, rng: np.random.Generator, transit_s: float) -> WorldState:
    """Draw a straight entry-to-exit chord through the region for each interferer.

    The interferer starts on the cylinder wall and reaches the opposite wall
    after ``transit_s`` seconds.
    """
    dep = state.deployment
    if len(dep.interferer_index) == 0:
        return state
    reg = dep.region
    pos = state.positions.copy()
    vel = state.velocity.copy()
    for k in dep.interferer_index:
        a_in = rng.uniform(0.0, 2 * math.pi)
        a_out = a_in + math.pi + rng.uniform(-math.pi / 2, math.pi / 2)
        z_in, z_out = rng.uniform(0.0, reg.height_m, size=2)
        p_in = np.array([reg.radius_m * math.cos(a_in), reg.radius_m * math.sin(a_in), z_in])
        p_out = np.array([reg.radius_m * math.cos(a_out), reg.radius_m * math.sin(a_out), z_out])
        pos[k] = p_in
        vel[k] = (p_out - p_in) / transit_s
    return replace(state, positions=pos, velocity=vel)


def _reflect_into(pos: np.ndarray, reg: Region) -> np.ndarray:
    out = pos.copy()
    r = np.hypot(out[:, 0], out[:, 1])
    over = r > reg.radius_m
    if np.any(over):
        new_r = np.clip(2 * reg.radius_m - r[over], 0.0, reg.radius_m)
        out[over, 0] *= new_r / r[over]
        out[over, 1] *= new_r / r[over]
    z = out[:, 2]
    z = np.where(z < 0, -z, z)
    z = np.where(z > reg.height_m, 2 * reg.height_m - z, z)
    out[:, 2] = np.clip(z, 0.0, reg.height_m)
    return out


def step_mobility(state: WorldState, cfg: MobilityConfig, rng: np.random.Generator,
                  dt_s: float | None = None) -> WorldState:
    """Advance positions by one slot: uniform current drift plus isotropic jitter.

    Network nodes reflect off the cylinder boundary; interferers follow their
    straight paths and may leave the region.
    """
    dt = state.t_slot_s if dt_s is None else dt_s
    dep = state.deployment
    pos = state.positions.copy()
    net = dep.network_index
    theta = math.radians(cfg.drift_direction_deg)
    drift = cfg.current_speed_mps * dt * np.array([math.cos(theta), math.sin(theta), 0.0])
    moved = pos[net] + drift
    if cfg.jitter_std_mps > 0:
        moved = moved + rng.normal(0.0, cfg.jitter_std_mps * dt, size=moved.shape)
    pos[net] = _reflect_into(moved, dep.region)
    if len(dep.interferer_index):
        ii = dep.interferer_index
        pos[ii] = pos[ii] + state.velocity[ii] * dt
    return replace(state, positions=pos)


def apply_malfunctions(state: WorldState, epsilon: float, rng: np.random.Generator,
                       horizon: int) -> WorldState:
    """Destine each transmitter to fail with probability ``epsilon``.

    A destined node gets an onset slot drawn uniformly from [1, horizon]; its
    flag flips when that slot begins and never clears.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    dep = state.deployment
    n_tx = dep.n_tx
    destined = rng.random(n_tx) < epsilon
    onsets = rng.integers(1, horizon + 1, size=n_tx)
    onset = state.onset_slot.copy()
    onset[dep.tx_index] = np.where(destined, onsets, 0)
    return update_malfunctions(replace(state, onset_slot=onset), state.slot + 1)


def update_malfunctions(state: WorldState, slot: int) -> WorldState:
    """Set kappa for every node whose onset is at or before ``slot``."""
    flag = state.malfunction | ((state.onset_slot > 0) & (state.onset_slot <= slot))
    if np.array_equal(flag, state.malfunction):
        return state
    return replace(state, malfunction=flag)


@dataclass(frozen=True, eq=False)
class SlotOutcome:
    """Result of one slot; link arrays follow ``Deployment.link_tx/link_rx`` order."""

    slot: int
    tx_ids: tuple[int, ...]
    power_w: np.ndarray        # (n_tx,)
    link_tx: np.ndarray        # (n_links,) index into tx_ids
    link_rx: tuple[int, ...]   # receiver node id per link
    scheduled: np.ndarray      # (n_links,) bool, s_{i,rx}
    received: np.ndarray       # (n_links,) bool, re_{i,rx}
    sinr: np.ndarray           # (n_links,) linear
    rate_bps: np.ndarray       # (n_links,)
    energy_j: np.ndarray       # (n_tx,)

    @property
    def sends(self) -> dict[int, float]:
        return {i: float(p) for i, p in zip(self.tx_ids, self.power_w) if p > 0}

    def _by_link(self, values) -> dict[tuple[int, int], object]:
        return {(self.tx_ids[t], r): v for t, r, v in zip(self.link_tx, self.link_rx, values)}

    @property
    def receptions(self) -> dict[tuple[int, int], bool]:
        return self._by_link(bool(v) for v in self.received)

    @property
    def sinr_values(self) -> dict[tuple[int, int], float]:
        return self._by_link(float(v) for v in self.sinr)

    @property
    def rates_bps(self) -> dict[tuple[int, int], float]:
        return self._by_link(float(v) for v in self.rate_bps)

    @property
    def n_tx(self) -> int:
        return len(self.tx_ids)


def _joint_power_array(dep: Deployment, joint_power) -> np.ndarray:
    if isinstance(joint_power, Mapping):
        p = np.zeros(dep.n_tx)
        pos_of = {nid: t for t, nid in enumerate(dep.tx_ids)}
        for nid, val in joint_power.items():
            if nid not in pos_of:
                if val > 0:
                    raise ValueError(
                        f"node {nid} cannot send: it is not a transmitter (half-duplex receiver)")
                continue
            p[pos_of[nid]] = val
        return p
    p = np.asarray(joint_power, dtype=float)
    if p.shape != (dep.n_tx,):
        raise ValueError(f"expected {dep.n_tx} transmit powers, got shape {p.shape}")
    return p


def resolve_slot(state: WorldState, joint_power, ch: ChannelParams, gamma_th: float,
                 t_tran_s: float, ambient_w: float | None = None
                 ) -> tuple[WorldState, SlotOutcome]:
    """Resolve concurrent transmissions of one slot and debit their energy.

    ``joint_power`` is either an array aligned with the deployment's
    transmitters or a mapping node id -> watts. Each scheduled link succeeds
    iff its SINR reaches ``gamma_th`` (linear). Every other concurrent sender
    is interference; external interferers inside the region contribute I_s.
    """
    dep = state.deployment
    p = _joint_power_array(dep, joint_power)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("transmit powers must be finite and >= 0")
    ia = acoustics.ambient_noise_power(ch) if ambient_w is None else ambient_w
    eta = ch.transducer_eff
    pos = state.positions
    tx_pos = pos[dep.tx_index]
    rx_nodes = dep.link_rx
    # gains from every transmitter to every link receiver
    rx_pos = pos[rx_nodes]
    d = np.sqrt(((tx_pos[:, None, :] - rx_pos[None, :, :]) ** 2).sum(axis=2))
    gain = np.zeros_like(d)
    nz = d > 0
    gain[nz] = 1.0 / acoustics.attenuation(d[nz], ch)
    contrib = p[:, None] * gain                       # (n_tx, n_links)
    owner = dep._link_owner
    signal = eta * contrib[dep.link_tx, np.arange(dep.n_links)]
    interference = eta * np.where(owner, 0.0, contrib).sum(axis=0)
    i_s = np.zeros(dep.n_links)
    ii = dep.interferer_index
    if len(ii):
        live = ii[dep.region.inside(pos[ii])]
        if len(live):
            di = np.sqrt(((rx_pos[:, None, :] - pos[live][None, :, :]) ** 2).sum(axis=2))
            powers = np.array([dep.nodes[k].role.power_w for k in live])
            att = acoustics.attenuation(np.maximum(di, 1e-9), ch)
            i_s = np.where(di > 0, powers / att, 0.0).sum(axis=1)
    denom = interference + i_s + ia
    sender = p[dep.link_tx] > 0
    if np.any(sender & (denom == 0)):
        raise ZeroDivisionError("SINR undefined: no noise or interference")
    gamma = np.where(sender, signal / np.where(denom == 0, 1.0, denom), 0.0)
    scheduled = sender.copy()
    if dep.scenario is Scenario.BROADCAST:
        sending_nodes = np.zeros(len(dep.nodes), dtype=bool)
        sending_nodes[dep.tx_index[p > 0]] = True
        scheduled &= ~sending_nodes[rx_nodes]
    received = scheduled & (gamma >= gamma_th)
    rate = np.where(received, ch.bandwidth_hz * np.log2(1.0 + gamma), 0.0)
    energy = p * t_tran_s
    used = state.energy_used_j.copy()
    used[dep.tx_index] += energy
    slot = state.slot + 1
    outcome = SlotOutcome(
        slot=slot, tx_ids=dep.tx_ids, power_w=p, link_tx=dep.link_tx,
        link_rx=tuple(dep.nodes[k].id for k in rx_nodes), scheduled=scheduled,
        received=received, sinr=gamma, rate_bps=rate, energy_j=energy,
    )
    return replace(state, slot=slot, energy_used_j=used), outcome


@dataclass(frozen=True)
class Lifetime:
    slots: int
    degenerate: bool = False


def network_lifetime(outcomes: Sequence[SlotOutcome], initial: WorldState,
                     cease_fraction: float = 0.1, horizon: int | None = None) -> Lifetime:
    """First slot count after which an intelligent transmitter is out of service.

    A node's service ends in the slot whose transmission drops its residual
    energy below ``cease_fraction`` of its battery; its lifetime is the number
    of slots before that one. Nodes malfunctioning at that slot are ignored.
    When no transmitter is intelligent at the end, the horizon is returned with
    ``degenerate=True``.
    """
    if len(outcomes) == 0:
        raise ValueError("episode has no slots")
    dep = initial.deployment
    horizon = len(outcomes) if horizon is None else horizon
    onset = initial.onset_slot[dep.tx_index]
    last = outcomes[-1].slot
    if np.all((onset > 0) & (onset <= last)):
        return Lifetime(horizon, degenerate=True)
    battery = initial.battery_j[dep.tx_index]
    residual = battery - initial.energy_used_j[dep.tx_index]
    floor = cease_fraction * battery
    for out in outcomes:
        residual = residual - out.energy_j
        crossed = residual < floor
        intelligent = ~((onset > 0) & (onset <= out.slot))
        if np.any(crossed & intelligent):
            return Lifetime(out.slot - 1)
    return Lifetime(horizon)


def write_trace_csv(path, outcomes: Sequence[SlotOutcome]) -> None:
    """One row per (slot, tx, rx) with power, SINR in dB and the reception flag."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "tx", "rx", "power_w", "sinr_db", "scheduled", "re"])
        for out in outcomes:
            for li, (t, r) in enumerate(zip(out.link_tx, out.link_rx)):
                g = out.sinr[li]
                gdb = f"{10 * math.log10(g):.4f}" if g > 0 else ""
                w.writerow([out.slot, out.tx_ids[t], r, f"{out.power_w[t]:.4f}", gdb,
                            int(out.scheduled[li]), int(out.received[li])])
