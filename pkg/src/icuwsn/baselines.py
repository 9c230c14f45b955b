"""Reference power-allocation policies: EPA, OLPA, RPA and SOLPA.

Each policy proposes one action index per transmitter; the environment then
applies the same energy and malfunction constraints as for the learned policy.
"""
from __future__ import annotations

import numpy as np

from . import acoustics
from .acoustics import ChannelParams
from .env import ActionSpace, UWSNEnv
from .world import WorldState

EPA_POWER_W = 32.0
POLICY_NAMES = ("icrl", "epa", "olpa", "rpa", "solpa")


def epa_action(space: ActionSpace) -> int:
    """Every node at the fixed 32 W level."""
    return space.index_of(EPA_POWER_W)


def external_interference_w(world: WorldState, rx_nodes: np.ndarray, ch: ChannelParams) -> np.ndarray:
    """Attenuated power of the in-region external interferers at each receiver node."""
    dep = world.deployment
    pos = world.positions
    total = np.zeros(len(rx_nodes))
    for k in dep.interferer_index:
        if not dep.region.contains(pos[k]):
            continue
        d = np.maximum(np.linalg.norm(pos[rx_nodes] - pos[k], axis=1), 1e-9)
        total += dep.nodes[k].role.power_w / acoustics.attenuation(d, ch)
    return total


def olpa_power(world: WorldState, tx_pos: int, space: ActionSpace, ch: ChannelParams,
               gamma_th: float, ambient_w: float) -> float:
    """Smallest level whose interference-free SINR reaches ``gamma_th`` at the worst receiver.

    Same-network senders are ignored (open loop); only ambient noise and the
    external interferers count. Infeasible links get the largest level.
    """
    dep = world.deployment
    rx = dep.link_rx[dep.link_tx == tx_pos]
    src = world.positions[dep.tx_index[tx_pos]]
    d = np.linalg.norm(world.positions[rx] - src, axis=1)
    need = gamma_th * acoustics.attenuation(d, ch) * (ambient_w + external_interference_w(world, rx, ch))
    need = float(np.max(need)) / ch.transducer_eff
    for p in space.levels_w[1:]:
        if p >= need:
            return p
    return space.max_w


class _Baseline:
    name = ""

    def reset(self, env: UWSNEnv, rng: np.random.Generator) -> None:
        pass


class EPAPolicy(_Baseline):
    name = "epa"

    def act(self, env, obs, rng):
        return np.full(env.n_agents, epa_action(env.space))


class OLPAPolicy(_Baseline):
    name = "olpa"

    def act(self, env, obs, rng):
        ch = env.cfg.channel
        return np.array([env.space.index_of(olpa_power(env.world, i, env.space, ch, env.gamma_th,
                                                       env.ambient_w))
                         for i in range(env.n_agents)])


class RPAPolicy(_Baseline):
    """Uniform over all levels, 0 W included, redrawn every slot."""

    name = "rpa"

    def act(self, env, obs, rng):
        return rng.integers(env.n_actions, size=env.n_agents)


class SOLPAPolicy(_Baseline):
    """Round robin: in slot t only sender (t - 1) mod n is on, at its OLPA level."""

    name = "solpa"

    def act(self, env, obs, rng):
        a = np.zeros(env.n_agents, dtype=np.int64)
        i = env.world.slot % env.n_agents        # world.slot counts completed slots
        a[i] = env.space.index_of(olpa_power(env.world, i, env.space, env.cfg.channel,
                                             env.gamma_th, env.ambient_w))
        return a


def make_baseline(name: str) -> _Baseline:
    table = {"epa": EPAPolicy, "olpa": OLPAPolicy, "rpa": RPAPolicy, "solpa": SOLPAPolicy}
    try:
        return table[name]()
    except KeyError:
        raise ValueError(f"unknown baseline {name!r}; choose from {sorted(table)}") from None
