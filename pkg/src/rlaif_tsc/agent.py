"""DQN learner with an ordered, relabelable replay buffer."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .nn import AdamW, DenseNet
from .pref import Segment
from .sim import N_PHASES, OBS_DIM, Intersection, StepMetrics

METRIC_FIELDS = ("throughput", "throughput_ns", "throughput_ew", "co2", "co2_rate", "queue_total",
                 "idle_seconds", "spilled", "time")


class BufferFullError(RuntimeError):
    pass


class ReplayBuffer:
    """Append-only transition store; index ``i`` always refers to the ``i``-th
    transition of the run, which is what contiguous segment extraction needs.

    Rewards live in two fields: ``raw_reward`` (as produced by the reward
    source) and ``reward`` (standardized, what the learner reads), each
    stamped with ``version``.
    """

    def __init__(self, capacity: int = 200_000):
        self.capacity = int(capacity)
        self.size = 0
        self.obs = np.zeros((capacity, OBS_DIM))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.next_obs = np.zeros((capacity, OBS_DIM))
        self.raw_reward = np.zeros(capacity)
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.step_index = np.zeros(capacity, dtype=np.int64)
        self.version = np.zeros(capacity, dtype=np.int64)
        self.metric_arrays = {k: np.zeros(capacity) for k in METRIC_FIELDS}
        self.reward_stats = (0.0, 1.0)

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action, next_obs, metrics: StepMetrics, done: bool, step_index: int,
            raw_reward: float = 0.0, reward: float = 0.0, version: int = 0) -> int:
        if self.size >= self.capacity:
            raise BufferFullError(f"replay buffer capacity {self.capacity} exhausted")
        i = self.size
        self.obs[i] = obs
        self.actions[i] = action
        self.next_obs[i] = next_obs
        self.raw_reward[i] = raw_reward
        self.reward[i] = reward
        self.done[i] = done
        self.step_index[i] = step_index
        self.version[i] = version
        for k, arr in self.metric_arrays.items():
            arr[i] = getattr(metrics, k)
        self.size += 1
        return i

    def set_rewards(self, raw: np.ndarray, standardized: np.ndarray, version: int) -> None:
        n = self.size
        if len(raw) != n or len(standardized) != n:
            raise ValueError("reward arrays must cover the whole buffer")
        self.raw_reward[:n] = raw
        self.reward[:n] = standardized
        self.version[:n] = version

    def eligible_starts(self, length: int = 1) -> np.ndarray:
        """Start indices of ``length``-step windows that stay within one episode."""
        n = self.size - length + 1
        if n <= 0:
            return np.zeros(0, dtype=np.int64)
        if length == 1:
            return np.arange(n)
        # a window may end on a terminal transition but not contain one earlier
        d = self.done[:self.size].astype(np.int64)
        c = np.concatenate([[0], np.cumsum(d)])
        starts = np.arange(n)
        crossing = c[starts + length - 1] - c[starts]
        return starts[crossing == 0]

    def metrics_at(self, i: int) -> StepMetrics:
        m = {k: self.metric_arrays[k][i] for k in METRIC_FIELDS}
        ns, ew = int(m["throughput_ns"]), int(m["throughput_ew"])
        return StepMetrics(
            throughput=int(m["throughput"]), co2=float(m["co2"]), co2_rate=float(m["co2_rate"]),
            throughput_ns=ns, throughput_ew=ew, queue_total=int(m["queue_total"]),
            time=int(m["time"]), idle_seconds=int(m["idle_seconds"]), spilled=int(m["spilled"]),
        )

    def segment(self, start: int, length: int = 1) -> Segment:
        if start < 0 or start + length > self.size:
            raise IndexError(f"segment [{start}, {start + length}) outside buffer of size {self.size}")
        sl = slice(start, start + length)
        return Segment(
            observations=self.obs[sl].copy(),
            actions=self.actions[sl].copy(),
            next_observations=self.next_obs[sl].copy(),
            metrics=[self.metrics_at(i) for i in range(start, start + length)],
            indices=np.arange(start, start + length),
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.size, size=batch_size)


@dataclass
class DQNConfig:
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 20_000
    target_sync: int = 1000
    learn_start: int = 1000
    train_freq: int = 1
    batch_size: int = 128
    huber_delta: float = 1.0
    lr: float = 3e-4
    weight_decay: float = 0.01
    double_dqn: bool = False

    def validate(self) -> "DQNConfig":
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("eps_decay_steps", "target_sync", "train_freq", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def huber(x: np.ndarray, delta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise Huber loss and its derivative."""
    a = np.abs(x)
    loss = np.where(a <= delta, 0.5 * x * x, delta * (a - 0.5 * delta))
    grad = np.clip(x, -delta, delta)
    return loss, grad


class DQNAgent:
    def __init__(self, config: DQNConfig | None = None, seed: int = 0,
                 obs_dim: int = OBS_DIM, n_actions: int = N_PHASES):
        self.config = (config or DQNConfig()).validate()
        self.n_actions = n_actions
        self.q = DenseNet(obs_dim, n_actions, seed=seed)
        self.target = self.q.clone()
        self.opt = AdamW(lr=self.config.lr, weight_decay=self.config.weight_decay)
        self.rng = np.random.default_rng(seed + 7919)
        self.env_steps = 0
        self.updates = 0

    def epsilon(self, step: int | None = None) -> float:
        c = self.config
        step = self.env_steps if step is None else step
        frac = min(1.0, step / c.eps_decay_steps)
        return c.eps_start + frac * (c.eps_end - c.eps_start)

    def greedy(self, obs: np.ndarray) -> int:
        # argmax returns the first maximum, i.e. ties go to the lowest index
        return int(np.argmax(self.q.predict(obs)))

    def select_action(self, obs: np.ndarray, epsilon: float | None = None) -> int:
        eps = self.epsilon() if epsilon is None else epsilon
        if eps > 0.0 and self.rng.random() < eps:
            return int(self.rng.integers(self.n_actions))
        return self.greedy(obs)

    def td_targets(self, rewards, next_obs, dones) -> np.ndarray:
        c = self.config
        q_next = self.target.predict(next_obs)
        if c.double_dqn:
            best = np.argmax(self.q.predict(next_obs), axis=1)
            boot = q_next[np.arange(len(best)), best]
        else:
            boot = q_next.max(axis=1)
        return rewards + c.gamma * (1.0 - dones) * boot

    def loss_and_grads(self, obs, actions, targets):
        """Mean Huber TD loss and parameter gradients for the online net."""
        q = self.q.forward(obs)
        idx = np.arange(len(actions))
        td = q[idx, actions] - targets
        loss, dl = huber(td, self.config.huber_delta)
        gq = np.zeros_like(q)
        gq[idx, actions] = dl / len(actions)
        return float(loss.mean()), self.q.backward(gq)

    def dqn_update(self, obs, actions, rewards, next_obs, dones) -> float:
        targets = self.td_targets(rewards, next_obs, np.asarray(dones, dtype=np.float64))
        loss, grads = self.loss_and_grads(obs, np.asarray(actions), targets)
        self.opt.step(self.q, grads)
        self.updates += 1
        if self.updates % self.config.target_sync == 0:
            self.sync_target()
        return loss

    def sync_target(self) -> None:
        self.target.copy_from(self.q)

    def maybe_update(self, buffer: ReplayBuffer,
                     rewards: Callable[[np.ndarray], np.ndarray] | None = None) -> float | None:
        """One learner step from ``buffer`` if the schedule calls for it.

        ``rewards`` maps sampled indices to rewards; by default the stored
        ``buffer.reward`` column is used.
        """
        c = self.config
        if len(buffer) < c.learn_start or self.env_steps % c.train_freq:
            return None
        idx = buffer.sample(c.batch_size, self.rng)
        r = buffer.reward[idx] if rewards is None else rewards(idx)
        return self.dqn_update(buffer.obs[idx], buffer.actions[idx], r,
                               buffer.next_obs[idx], buffer.done[idx])


def run_episode(env: Intersection, policy: Callable[[np.ndarray], int],
                on_step: Callable[[np.ndarray, int, np.ndarray, StepMetrics, bool], None] | None = None,
                seed: int | None = None) -> list[StepMetrics]:
    """Roll out one full episode from a fresh reset and return its metrics."""
    obs = env.reset(seed)
    history = []
    done = False
    while not done:
        action = policy(obs)
        next_obs, metrics, done = env.step(action)
        if on_step is not None:
            on_step(obs, action, next_obs, metrics, done)
        history.append(metrics)
        obs = next_obs
    return history
