"""Spatial reuse, fairness and ineffective-communication indices, utilities, throughput."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .world import Scenario, SlotOutcome

REPORT_FIELDS = (
    "utility", "throughput", "fairness", "delivery_ratio", "spatial_reuse",
    "ineffective", "lifetime_slots", "episode_reward",
)


@dataclass(frozen=True)
class UtilityWeights:
    alpha: float = 1.0
    beta: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.mu) < 0:
            raise ValueError("utility weights must be >= 0")
        if self.alpha == self.beta == self.mu == 0:
            raise ValueError("utility weights cannot all be zero")


@dataclass(frozen=True)
class EpisodeTrace:
    outcomes: tuple[SlotOutcome, ...]
    lifetime_slots: int
    scenario: Scenario
    t_slot_s: float
    t_tran_s: float

    def __post_init__(self):
        if self.lifetime_slots > len(self.outcomes):
            raise ValueError("lifetime exceeds the number of recorded slots")

    @property
    def served(self) -> tuple[SlotOutcome, ...]:
        return self.outcomes[: self.lifetime_slots]


def spatial_reuse_index(outcome: SlotOutcome) -> float:
    """Successful receptions over all intended links of every transmitter."""
    return float(np.count_nonzero(outcome.received)) / len(outcome.received)


def jain_index(x) -> float:
    """Jain's fairness over per-transmitter delivery counts; 0 when nothing was delivered."""
    x = np.asarray(x, dtype=float)
    sq = float(np.dot(x, x))
    if sq == 0.0:
        return 0.0
    s = float(x.sum())
    return s * s / (len(x) * sq)


def deliveries_per_tx(outcomes: Sequence[SlotOutcome]) -> np.ndarray:
    if not outcomes:
        raise ValueError("need at least one slot")
    first = outcomes[0]
    counts = np.zeros(first.n_tx)
    for out in outcomes:
        counts += np.bincount(out.link_tx, weights=out.received, minlength=out.n_tx)
    return counts


def fairness_index(outcomes: Sequence[SlotOutcome], h: int | None = None) -> float:
    """Jain's index over deliveries in the last ``h`` slots (all slots when ``h`` is None)."""
    if h is not None:
        if h < 1:
            raise ValueError("fairness window must be >= 1")
        outcomes = outcomes[-h:]
    return jain_index(deliveries_per_tx(outcomes))


def ineffective_index(outcome: SlotOutcome) -> float:
    """(received - scheduled) / scheduled over scheduled links; 0 if nothing was scheduled."""
    s = np.count_nonzero(outcome.scheduled)
    if s == 0:
        return 0.0
    re = np.count_nonzero(outcome.received & outcome.scheduled)
    return (re - s) / s


def throughput(trace: EpisodeTrace) -> float:
    """Unicast: delivered bits per second; broadcast: successful receptions per second."""
    if trace.lifetime_slots < 1:
        return 0.0
    served = trace.served
    if trace.scenario is Scenario.UNICAST:
        total = sum(float(o.rate_bps.sum()) for o in served) * trace.t_tran_s
    else:
        total = float(sum(np.count_nonzero(o.received) for o in served))
    return total / (trace.lifetime_slots * trace.t_slot_s)


def delivery_ratio(trace: EpisodeTrace) -> float:
    """Pooled successful / scheduled links over the lifetime (0 when nothing was sent)."""
    served = trace.served
    s = sum(np.count_nonzero(o.scheduled) for o in served)
    if s == 0:
        return 0.0
    return sum(np.count_nonzero(o.received & o.scheduled) for o in served) / s


def utility_components(trace: EpisodeTrace) -> tuple[float, float, float]:
    """Lifetime spatial-reuse, fairness and ineffective-communication utilities."""
    served = trace.served
    if not served:
        return 0.0, 0.0, 0.0
    u_spa = float(np.mean([spatial_reuse_index(o) for o in served]))
    u_fair = fairness_index(served)
    u_ief = float(np.mean([ineffective_index(o) for o in served]))
    return u_spa, u_fair, u_ief


def network_utility(trace: EpisodeTrace, w: UtilityWeights = UtilityWeights()) -> float:
    u_spa, u_fair, u_ief = utility_components(trace)
    return w.alpha * u_spa + w.beta * u_fair + w.mu * u_ief


def episode_report(trace: EpisodeTrace, w: UtilityWeights = UtilityWeights(),
                   episode_reward: float | None = None) -> dict:
    """Per-episode metrics under the stable field names of ``REPORT_FIELDS``."""
    u_spa, u_fair, u_ief = utility_components(trace)
    return {
        "utility": w.alpha * u_spa + w.beta * u_fair + w.mu * u_ief,
        "throughput": throughput(trace),
        "fairness": u_fair,
        "delivery_ratio": delivery_ratio(trace),
        "spatial_reuse": u_spa,
        "ineffective": u_ief,
        "lifetime_slots": trace.lifetime_slots,
        "episode_reward": float("nan") if episode_reward is None else float(episode_reward),
    }


def aggregate_reports(reports: Sequence[dict]) -> dict:
    """Field-wise mean of episode reports."""
    if not reports:
        raise ValueError("no reports to aggregate")
    return {k: float(np.mean([r[k] for r in reports])) for k in REPORT_FIELDS}
