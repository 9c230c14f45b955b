"""Recurrent multi-agent DQN with a summation mixer (value decomposition).

All transmitters share one evaluation network and one target network; the
agent id is part of each observation. Replay stores whole episodes so the GRU
state can be rebuilt from the first slot.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import metrics, neural
from .env import ScenarioConfig, UWSNEnv
from .neural import NetParams, OptimizerState

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainerConfig:
    episodes: int = 5000
    target_update_period: int = 200
    discount: float = 0.99
    explore_start: float = 1.0
    explore_end: float = 0.05
    explore_fraction: float = 0.5
    eval_period: int = 200
    eval_runs: int = 20
    buffer_capacity: int = 10_000
    batch_size: int = 32
    lr: float = 5e-4
    hidden: int = 64
    grad_clip: float | None = 10.0
    init_scheme: str = "fan_in_uniform"
    seed: int = 0
    train_epsilon: float = 0.0

    def __post_init__(self):
        if self.target_update_period < 1:
            raise ValueError("target_update_period must be >= 1")
        if self.episodes < 1 or self.eval_period < 1 or self.eval_runs < 1:
            raise ValueError("episodes, eval_period and eval_runs must be >= 1")
        if not 0 < self.explore_fraction <= 1:
            raise ValueError("explore_fraction must be in (0, 1]")

    def exploration(self, episode: int) -> float:
        """Greedy factor for a 1-based episode: linear decay, then constant."""
        span = max(1, int(round(self.episodes * self.explore_fraction)))
        frac = min(1.0, (episode - 1) / span)
        return self.explore_start + frac * (self.explore_end - self.explore_start)


@dataclass
class EpisodeRecord:
    obs: np.ndarray        # (T+1, n, D) float32
    actions: np.ndarray    # (T, n) int
    rewards: np.ndarray    # (T,)
    terminal: np.ndarray   # (T,) bool
    alive: np.ndarray      # (T+1, n) bool; intelligent agents
    length: int

    @property
    def transitions(self) -> int:
        return self.length


class ReplayBuffer:
    """Whole-episode replay holding at most ``capacity`` transitions.

    The oldest episodes are dropped first.
    """

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.episodes: deque[EpisodeRecord] = deque()
        self.n_transitions = 0
        self.total_added = 0

    def __len__(self) -> int:
        return len(self.episodes)

    def add(self, ep: EpisodeRecord) -> None:
        if ep.transitions > self.capacity:
            raise ValueError("episode longer than the buffer")
        while self.n_transitions + ep.transitions > self.capacity:
            self.n_transitions -= self.episodes.popleft().transitions
        self.episodes.append(ep)
        self.n_transitions += ep.transitions
        self.total_added += 1

    def sample_indices(self, rng: np.random.Generator, k: int) -> np.ndarray:
        return rng.integers(len(self.episodes), size=k)

    def sample(self, rng: np.random.Generator, k: int) -> dict:
        """Stack ``k`` uniformly drawn episodes, padded to the longest horizon."""
        picks = [self.episodes[i] for i in self.sample_indices(rng, k)]
        T = max(e.obs.shape[0] - 1 for e in picks)
        n, D = picks[0].obs.shape[1:]
        obs = np.zeros((T + 1, k, n, D), dtype=np.float32)
        actions = np.zeros((T, k, n), dtype=np.int64)
        rewards = np.zeros((T, k))
        terminal = np.ones((T, k), dtype=bool)
        alive = np.zeros((T + 1, k, n), dtype=bool)
        valid = np.zeros((T, k), dtype=bool)
        for j, e in enumerate(picks):
            L = e.length
            obs[: L + 1, j] = e.obs[: L + 1]
            actions[:L, j] = e.actions[:L]
            rewards[:L, j] = e.rewards[:L]
            terminal[:L, j] = e.terminal[:L]
            alive[: L + 1, j] = e.alive[: L + 1]
            valid[:L, j] = True
        return {"obs": obs, "actions": actions, "rewards": rewards, "terminal": terminal,
                "alive": alive, "valid": valid}


def greedy_action(q: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest index (lowest power)."""
    return np.argmax(q, axis=-1)


def select_action(params: NetParams, obs: np.ndarray, hidden: np.ndarray, epsilon: float,
                  rng: np.random.Generator):
    """Epsilon-greedy actions for every agent row of ``obs``; returns (actions, next_hidden)."""
    q, h = neural.forward(params, obs, hidden)
    return epsilon_greedy(q, epsilon, rng), h


def epsilon_greedy(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    a = greedy_action(q)
    if epsilon > 0:
        explore = rng.random(a.shape) < epsilon
        if np.any(explore):
            a = np.where(explore, rng.integers(q.shape[-1], size=a.shape), a)
    return a


def mix(q_selected) -> float:
    """Summation mixer: the team value is the sum of the agents' chosen values."""
    return float(np.sum(q_selected))


def td_targets(rewards: np.ndarray, terminal: np.ndarray, next_q_target: np.ndarray,
               next_alive: np.ndarray, gamma: float) -> np.ndarray:
    """Team TD targets y = r + gamma * sum_i max_a Q_i^-(next), or r at terminal steps.

    ``next_q_target`` has shape (..., n_agents, n_actions); the per-agent max
    followed by a sum is the joint max of the summed value.
    """
    best = np.max(next_q_target, axis=-1) * next_alive
    bootstrap = best.sum(axis=-1)
    return rewards + gamma * np.where(terminal, 0.0, bootstrap)


def vdn_loss_and_grad(params: NetParams, target: NetParams, batch: dict, gamma: float):
    """Mean squared TD error of the summed team value and its gradient."""
    obs = batch["obs"]
    Tp1, B, n, D = obs.shape
    T = Tp1 - 1
    flat_obs = obs.reshape(Tp1, B * n, D)
    q, cache = neural.forward_sequence(params, flat_obs[:T])
    q_next, _ = neural.forward_sequence(target, flat_obs, keep_cache=False)
    A = q.shape[-1]
    q = q.reshape(T, B, n, A)
    q_next = q_next[1:].reshape(T, B, n, A).astype(np.float64)
    actions = batch["actions"]
    alive = batch["alive"]
    chosen = np.take_along_axis(q, actions[..., None], axis=-1)[..., 0].astype(np.float64)
    q_tot = (chosen * alive[:T]).sum(-1)
    y = td_targets(batch["rewards"], batch["terminal"], q_next, alive[1:], gamma)
    valid = batch["valid"]
    n_valid = max(1, int(valid.sum()))
    err = (y - q_tot) * valid
    loss = float(np.sum(err * err) / n_valid)
    dchosen = (-2.0 * err / n_valid)[..., None] * alive[:T]
    dq = np.zeros((T, B, n, A), dtype=q.dtype)
    np.put_along_axis(dq, actions[..., None], dchosen[..., None].astype(q.dtype), axis=-1)
    grad = neural.backward(params, cache, dq.reshape(T, B * n, A))
    return loss, grad


class Policy(Protocol):
    def reset(self, env: UWSNEnv, rng: np.random.Generator) -> None: ...
    def act(self, env: UWSNEnv, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


class QPolicy:
    """Shared recurrent Q-network acting for every transmitter."""

    def __init__(self, params: NetParams, epsilon: float = 0.0):
        self.params = params
        self.epsilon = epsilon

    def reset(self, env, rng):
        self.hidden = neural.zero_hidden(env.n_agents, self.params.hidden, self.params.flat.dtype)

    def act(self, env, obs, rng):
        a, self.hidden = select_action(self.params, obs, self.hidden, self.epsilon, rng)
        return a


def run_episode(env: UWSNEnv, policy: Policy, seed, epsilon_malfunction: float | None = None,
                policy_rng: np.random.Generator | None = None, record: bool = False):
    """Play one episode; returns (report dict, EpisodeRecord or None)."""
    rng = policy_rng if policy_rng is not None else np.random.default_rng(seed)
    obs = env.reset(seed, epsilon_malfunction)
    policy.reset(env, rng)
    T = env.cfg.lifetime_slots
    if record:
        n, D = env.n_agents, env.obs_dim
        obs_buf = np.zeros((T + 1, n, D), dtype=np.float32)
        act_buf = np.zeros((T, n), dtype=np.int64)
        rew_buf = np.zeros(T)
        term_buf = np.zeros(T, dtype=bool)
        alive_buf = np.zeros((T + 1, n), dtype=bool)
    t = 0
    while True:
        if record:
            obs_buf[t] = obs
            alive_buf[t] = env.intelligent
        res = env.step(policy.act(env, obs, rng))
        if record:
            act_buf[t] = res.executed
            rew_buf[t] = res.reward
            term_buf[t] = res.terminal
        t += 1
        obs = res.obs
        if res.terminal:
            break
    report = env.report()
    if not record:
        return report, None
    obs_buf[t] = obs
    alive_buf[t] = env.intelligent
    return report, EpisodeRecord(obs_buf, act_buf, rew_buf, term_buf, alive_buf, t)


def evaluate(env: UWSNEnv, policy: Policy, seeds: Sequence, epsilon_malfunction=None) -> list[dict]:
    return [run_episode(env, policy, s, epsilon_malfunction)[0] for s in seeds]


@dataclass
class Snapshot:
    episode: int
    params: NetParams
    mean_reward: float
    mean_utility: float
    epsilon: float


class CurriculumHook(Protocol):
    @property
    def epsilon(self) -> float: ...
    def on_evaluation(self, episode: int, mean_utility: float) -> None: ...


@dataclass
class FixedMalfunction:
    """Constant training malfunction rate."""

    epsilon: float = 0.0

    def on_evaluation(self, episode: int, mean_utility: float) -> None:
        pass


LOG_FIELDS = ("episode", "epsilon_malfunction", "mean_eval_reward", "loss", "buffer_fill")


@dataclass
class TrainResult:
    params: NetParams                 # selected model
    final_params: NetParams
    snapshots: list[Snapshot]
    log: list[dict]
    selected_episode: int


class NonFiniteLoss(RuntimeError):
    pass


def eval_seeds(seed: int, runs: int) -> list[tuple]:
    return [(seed, 2, k) for k in range(runs)]


def train(scenario: ScenarioConfig, cfg: TrainerConfig, curriculum: CurriculumHook | None = None,
          on_episode: Callable[[dict], None] | None = None,
          inspect: Callable[[int, NetParams, NetParams], None] | None = None) -> TrainResult:
    """Centralised training of the shared agent network (decentralised execution).

    Each episode draws its malfunction rate from ``curriculum``; after the
    episode one gradient step is taken on a minibatch of whole episodes. Every
    ``eval_period`` episodes the greedy policy is evaluated, snapshotted and
    reported to the curriculum; the target network syncs every
    ``target_update_period`` episodes. ``inspect(episode, params, target)``
    sees both networks at the end of every episode.
    """
    curriculum = curriculum or FixedMalfunction(cfg.train_epsilon)
    neural.tune_allocator()
    env = UWSNEnv(scenario)
    eval_env = UWSNEnv(scenario)
    init_rng = np.random.default_rng([cfg.seed, 0])
    act_rng = np.random.default_rng([cfg.seed, 1])
    sample_rng = np.random.default_rng([cfg.seed, 3])
    params = neural.init_params(init_rng, env.obs_dim, env.n_actions, cfg.hidden, cfg.init_scheme)
    target = params.copy()
    opt = OptimizerState.for_params(params, cfg.lr)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    policy = QPolicy(params)
    seeds = eval_seeds(cfg.seed, cfg.eval_runs)
    snapshots: list[Snapshot] = []
    rows: list[dict] = []
    for episode in range(1, cfg.episodes + 1):
        eps_m = float(curriculum.epsilon)
        policy.params = params
        policy.epsilon = cfg.exploration(episode)
        _, record = run_episode(env, policy, (cfg.seed, 1, episode), eps_m, act_rng, record=True)
        buffer.add(record)
        loss = float("nan")
        if buffer.n_transitions >= cfg.batch_size:   # warm-up
            batch = buffer.sample(sample_rng, cfg.batch_size)
            loss, grad = vdn_loss_and_grad(params, target, batch, cfg.discount)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise NonFiniteLoss(
                    f"non-finite loss at episode {episode}: loss={loss}, "
                    f"|theta|={float(np.linalg.norm(params.flat))}")
            grad, _ = neural.clip_by_norm(grad, cfg.grad_clip)
            params, opt = neural.optimizer_step(params, grad, opt)
        mean_reward = float("nan")
        if episode % cfg.eval_period == 0 or episode == cfg.episodes:
            greedy = QPolicy(params, 0.0)
            reports = evaluate(eval_env, greedy, seeds, eps_m)
            mean_reward = float(np.mean([r["episode_reward"] for r in reports]))
            mean_util = float(np.mean([r["utility"] for r in reports]))
            snapshots.append(Snapshot(episode, params.copy(), mean_reward, mean_util, eps_m))
            curriculum.on_evaluation(episode, mean_util)
            log.debug("episode %d eps=%.3f reward=%.3f utility=%.3f", episode, eps_m,
                      mean_reward, mean_util)
        if episode % cfg.target_update_period == 0:
            target = params.copy()
        row = {"episode": episode, "epsilon_malfunction": eps_m, "mean_eval_reward": mean_reward,
               "loss": loss, "buffer_fill": buffer.n_transitions}
        rows.append(row)
        if on_episode:
            on_episode(row)
        if inspect:
            inspect(episode, params, target)
    chosen = select_final_model(snapshots, [r["epsilon_malfunction"] for r in rows])
    return TrainResult(chosen.params, params, snapshots, rows, chosen.episode)


def select_final_model(snapshots: Sequence[Snapshot], epsilon_by_episode: Sequence[float]
                       ) -> Snapshot:
    """Best-reward snapshot taken at or after the (first) peak training malfunction rate.

    ``epsilon_by_episode[k]`` is the rate used in episode ``k + 1``.
    """
    if not snapshots:
        raise ValueError("no snapshots to choose from")
    if len(snapshots) == 1:
        return snapshots[0]
    peak = int(np.argmax(np.asarray(epsilon_by_episode))) + 1 if len(epsilon_by_episode) else 1
    eligible = [s for s in snapshots if s.episode >= peak] or [snapshots[-1]]
    best = eligible[0]
    for s in eligible[1:]:
        if s.mean_reward > best.mean_reward:
            best = s
    return best
