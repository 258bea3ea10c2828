"""Preference buffer, Bradley-Terry reward ensemble, disagreement sampling, relabeling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .nn import AdamW, ContractError, DenseNet
from .sim import N_PHASES, OBS_DIM, StepMetrics

if TYPE_CHECKING:
    from .agent import ReplayBuffer

log = logging.getLogger(__name__)

FEATURE_DIM = OBS_DIM + N_PHASES
STANDARDIZE_CLAMP = 10.0
STD_GUARD = 1e-8


def features(observations: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Reward-model input: observation concatenated with the action one-hot."""
    observations = np.asarray(observations, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    onehot = np.zeros((len(actions), N_PHASES))
    onehot[np.arange(len(actions)), actions] = 1.0
    return np.concatenate([observations.reshape(len(actions), OBS_DIM), onehot], axis=1)


@dataclass
class Segment:
    observations: np.ndarray
    actions: np.ndarray
    next_observations: np.ndarray
    metrics: list[StepMetrics]
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64).reshape(-1, OBS_DIM)
        self.next_observations = np.asarray(self.next_observations, dtype=np.float64).reshape(-1, OBS_DIM)
        self.actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        n = len(self.actions)
        if n < 1:
            raise ContractError("a segment needs at least one transition")
        if len(self.observations) != n or len(self.next_observations) != n or len(self.metrics) != n:
            raise ContractError("segment fields have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.actions)

    def features(self) -> np.ndarray:
        return features(self.observations, self.actions)

    def to_dict(self) -> dict:
        return {
            "indices": self.indices.tolist(),
            "observations": self.observations.tolist(),
            "actions": self.actions.tolist(),
            "next_observations": self.next_observations.tolist(),
            "metrics": [_metrics_to_dict(m) for m in self.metrics],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        return cls(
            observations=np.array(d["observations"], dtype=np.float64),
            actions=np.array(d["actions"], dtype=np.int64),
            next_observations=np.array(d["next_observations"], dtype=np.float64),
            metrics=[_metrics_from_dict(m) for m in d["metrics"]],
            indices=np.array(d.get("indices", []), dtype=np.int64),
        )


def _metrics_to_dict(m: StepMetrics) -> dict:
    d = dict(vars(m))
    d["lane_queues"] = list(m.lane_queues)
    d["lane_discharged"] = list(m.lane_discharged)
    return d


def _metrics_from_dict(d: dict) -> StepMetrics:
    d = dict(d)
    d["lane_queues"] = tuple(d.get("lane_queues", ()))
    d["lane_discharged"] = tuple(d.get("lane_discharged", ()))
    return StepMetrics(**d)


@dataclass
class PreferenceRecord:
    sigma1: Segment
    sigma2: Segment
    label: int
    annotator: str = ""
    timestamp: float = 0.0
    request_id: str = ""

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "label": self.label,
            "annotator": self.annotator,
            "timestamp": self.timestamp,
            "sigma1": self.sigma1.to_dict(),
            "sigma2": self.sigma2.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreferenceRecord":
        return cls(
            sigma1=Segment.from_dict(d["sigma1"]),
            sigma2=Segment.from_dict(d["sigma2"]),
            label=int(d["label"]),
            annotator=d.get("annotator", ""),
            timestamp=float(d.get("timestamp", 0.0)),
            request_id=d.get("request_id", ""),
        )


class PreferenceBuffer:
    """The labelled pair dataset. Only decisive labels (1 or 2) are admitted."""

    def __init__(self):
        self.records: list[PreferenceRecord] = []
        self._arrays: tuple | None = None

    def __len__(self) -> int:
        return len(self.records)

    def add(self, record: PreferenceRecord) -> None:
        if record.label not in (1, 2):
            raise ValueError(f"only labels 1 or 2 may be stored, got {record.label!r}")
        if len(record.sigma1) != len(record.sigma2):
            raise ContractError("paired segments must have equal length")
        self.records.append(record)
        self._arrays = None

    def extend(self, records: Iterable[PreferenceRecord]) -> None:
        for r in records:
            self.add(r)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked features ``(N, H, F)`` for both sides and labels ``(N,)``.

        Assumes a single segment length across the buffer.
        """
        if self._arrays is None or len(self._arrays[2]) != len(self.records):
            f1 = np.stack([r.sigma1.features() for r in self.records])
            f2 = np.stack([r.sigma2.features() for r in self.records])
            y = np.array([r.label for r in self.records], dtype=np.int64)
            self._arrays = (f1, f2, y)
        return self._arrays

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PreferenceBuffer":
        buf = cls()
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    buf.add(PreferenceRecord.from_dict(json.loads(line)))
        return buf


class RewardEnsemble:
    """Independently initialised reward nets over (observation, action)."""

    def __init__(self, n_members: int = 3, seed: int = 0, beta: float = 1.0,
                 lr: float = 3e-4, weight_decay: float = 0.01, hidden: int = 256):
        if beta <= 0:
            raise ValueError("beta must be positive")
        self.beta = float(beta)
        self.members = [DenseNet(FEATURE_DIM, 1, seed=seed * 1000 + k, hidden=hidden) for k in range(n_members)]
        self.optimizers = [AdamW(lr=lr, weight_decay=weight_decay) for _ in range(n_members)]
        self.version = 0

    def __len__(self) -> int:
        return len(self.members)

    def member_rewards(self, observations: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Per-step rewards from every member, shape ``(M, N)``."""
        x = features(observations, actions)
        return np.stack([net.predict(x)[:, 0] for net in self.members])

    def reward(self, observations: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.member_rewards(observations, actions).mean(axis=0)


def segment_return(member: DenseNet, segment: Segment) -> float:
    """Sum of the member's per-step rewards over the segment."""
    return float(member.predict(segment.features())[:, 0].sum())


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def preference_prob(member: DenseNet, sigma1: Segment, sigma2: Segment, beta: float = 1.0) -> float:
    """Bradley-Terry probability that ``sigma1`` is preferred over ``sigma2``."""
    if len(sigma1) != len(sigma2):
        raise ContractError("segments must have equal length")
    if beta <= 0:
        raise ValueError("beta must be positive")
    diff = segment_return(member, sigma1) - segment_return(member, sigma2)
    return float(sigmoid(diff / beta))


def bt_loss(r1: np.ndarray, r2: np.ndarray, labels: np.ndarray, beta: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean pairwise cross-entropy and its gradient w.r.t. ``r1`` (``-grad`` for ``r2``).

    ``labels`` uses 1 for "first preferred" and 2 for "second preferred".
    """
    z = (np.asarray(r1) - np.asarray(r2)) / beta
    target = (np.asarray(labels) == 1).astype(np.float64)
    # -log sigmoid(z) = softplus(-z), computed stably
    loss = target * np.logaddexp(0.0, -z) + (1.0 - target) * np.logaddexp(0.0, z)
    dz = (sigmoid(z) - target) / len(z)
    return float(loss.mean()), dz / beta


def pair_loss_and_grads(net: DenseNet, f1: np.ndarray, f2: np.ndarray, y: np.ndarray,
                        beta: float = 1.0) -> tuple[float, list]:
    """Pairwise loss of ``net`` on feature blocks ``(b, H, F)`` and its parameter gradients."""
    b, h, _ = f1.shape
    x = np.concatenate([f1.reshape(b * h, -1), f2.reshape(b * h, -1)])
    out = net.forward(x)[:, 0]
    r1 = out[:b * h].reshape(b, h).sum(axis=1)
    r2 = out[b * h:].reshape(b, h).sum(axis=1)
    loss, dr1 = bt_loss(r1, r2, y, beta)
    grad = np.concatenate([np.repeat(dr1, h), np.repeat(-dr1, h)])[:, None]
    return loss, net.backward(grad)


def train_member(net: DenseNet, opt: AdamW, f1: np.ndarray, f2: np.ndarray, y: np.ndarray,
                 beta: float, epochs: int, batch_size: int, rng: np.random.Generator) -> list[float]:
    n = f1.shape[0]
    trace = []
    for _ in range(epochs):
        order = rng.permutation(n)
        losses, weights = [], []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            b = len(idx)
            loss, grads = pair_loss_and_grads(net, f1[idx], f2[idx], y[idx], beta)
            opt.step(net, grads)
            losses.append(loss)
            weights.append(b)
        trace.append(float(np.average(losses, weights=weights)))
    return trace


def train_ensemble(ensemble: RewardEnsemble, prefs: PreferenceBuffer, epochs: int = 50,
                   batch_size: int = 128, rng: np.random.Generator | None = None) -> list[list[float]]:
    """Fit every member on the whole buffer with its own shuffles.

    Returns the per-epoch mean loss for each member. An empty buffer is a
    no-op (logged) and leaves the ensemble version unchanged.
    """
    if len(prefs) == 0:
        log.warning("preference buffer is empty; reward ensemble not trained")
        return [[] for _ in ensemble.members]
    rng = rng if rng is not None else np.random.default_rng(0)
    f1, f2, y = prefs.arrays()
    seeds = rng.integers(0, 2**63 - 1, size=len(ensemble))
    traces = [
        train_member(net, opt, f1, f2, y, ensemble.beta, epochs, batch_size, np.random.default_rng(s))
        for net, opt, s in zip(ensemble.members, ensemble.optimizers, seeds)
    ]
    ensemble.version += 1
    return traces


@dataclass
class PairSelection:
    pairs: list[tuple[int, int]]
    disagreement: np.ndarray
    candidates: list[tuple[int, int]]
    candidate_disagreement: np.ndarray


def pair_disagreement(member_returns: np.ndarray, first: np.ndarray, second: np.ndarray,
                      beta: float) -> np.ndarray:
    """Population std over members of P_k(first > second); ``member_returns`` is ``(M, S)``."""
    diff = member_returns[:, first] - member_returns[:, second]
    # orient every pair so member 0 prefers its first segment; the std is
    # unchanged (p -> 1 - p) and (i, j), (j, i) then score bit-identically
    diff = np.where(diff[:1] < 0, -diff, diff)
    probs = sigmoid(diff / beta)
    # centre on the first member so identical members give exactly zero
    c = probs - probs[:1]
    c -= c.mean(axis=0)
    return np.sqrt((c * c).mean(axis=0))


def sample_disagreement_pairs(buffer: "ReplayBuffer", ensemble: RewardEnsemble, k: int = 1024,
                              oversample: int = 5, segment_length: int = 1,
                              rng: np.random.Generator | None = None) -> PairSelection:
    """Draw ``k * oversample`` random segment pairs and keep the ``k`` the
    ensemble disagrees on most (ties keep sampling order).

    Pairs are returned as ``(start1, start2)`` replay indices, ordered by
    decreasing disagreement.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    starts = buffer.eligible_starts(segment_length)
    n = len(starts)
    if n < 2:
        log.warning("only %d eligible segments in the replay buffer; no pairs sampled", n)
        empty = np.zeros(0)
        return PairSelection([], empty, [], empty)
    m = k * oversample
    a = rng.integers(0, n, size=m)
    b = rng.integers(0, n - 1, size=m)
    b = b + (b >= a)
    used = np.unique(np.concatenate([a, b]))
    step_idx = starts[used][:, None] + np.arange(segment_length)[None, :]
    flat = step_idx.reshape(-1)
    rewards = ensemble.member_rewards(buffer.obs[flat], buffer.actions[flat])
    returns = rewards.reshape(len(ensemble), len(used), segment_length).sum(axis=2)
    pos = np.searchsorted(used, a), np.searchsorted(used, b)
    dis = pair_disagreement(returns, pos[0], pos[1], ensemble.beta)
    order = np.argsort(-dis, kind="stable")[:min(k, m)]
    candidates = list(zip(starts[a].tolist(), starts[b].tolist()))
    return PairSelection(
        pairs=[candidates[i] for i in order],
        disagreement=dis[order],
        candidates=candidates,
        candidate_disagreement=dis,
    )


def standardize(raw: np.ndarray) -> tuple[np.ndarray, float, float]:
    mean = float(raw.mean()) if len(raw) else 0.0
    std = float(raw.std()) if len(raw) else 0.0
    if std < STD_GUARD:
        return np.zeros_like(raw), mean, std
    return np.clip((raw - mean) / std, -STANDARDIZE_CLAMP, STANDARDIZE_CLAMP), mean, std


def relabel_buffer(buffer: "ReplayBuffer", ensemble: RewardEnsemble, chunk: int = 8192) -> None:
    """Recompute every stored reward with the current ensemble, then
    standardize buffer-wide. Only reward fields and versions change."""
    n = len(buffer)
    raw = np.empty(n)
    for s in range(0, n, chunk):
        # the last window ends at n rather than shrinking: BLAS picks other
        # kernels for very short batches, which would change the low bits
        s = max(0, min(s, n - chunk))
        e = min(n, s + chunk)
        raw[s:e] = ensemble.reward(buffer.obs[s:e], buffer.actions[s:e])
    std_reward, mean, std = standardize(raw)
    buffer.set_rewards(raw, std_reward, version=ensemble.version)
    buffer.reward_stats = (mean, std)
