"""Experiment engine: the RLAIF loop, programmatic-reward baselines, and suites.

A run alternates environment interaction with learner updates. RLAIF runs
start on a proxy reward (negative total queue), then at every feedback
boundary sample disagreement pairs, annotate them, refit the reward
ensemble, and relabel the whole replay buffer.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import pickle
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .agent import DQNAgent, DQNConfig, ReplayBuffer
from .annotate import (AnnotatorUnavailable, FilterStats, LLMAnnotator, LLMConfig, OracleAnnotator,
                       ReplayAnnotator, filter_and_store)
from .pref import PreferenceBuffer, RewardEnsemble, relabel_buffer, sample_disagreement_pairs, train_ensemble
from .scenario import ScenarioSpec, load_scenario
from .sim import Intersection, StepMetrics, metrics_window

log = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
METRIC_COLUMNS = ("kind", "step", "throughput", "co2_rate", "ns_share", "queue", "epsilon",
                  "dqn_loss", "reward_loss")
SESSION_COLUMNS = ("session", "step", "requested", "stored", "filtered", "filter_rate",
                   "preferences", "reward_loss", "ensemble_version", "seconds")
LINEAR_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
PRIORITY_VARIANTS = ("equal", "ns_priority", "ns_only", "ew_priority", "ew_only")


class RunHalted(RuntimeError):
    """The run stopped early; its directory holds a resumable checkpoint."""


@dataclass
class BaselineSpec:
    kind: str  # linear | throughput | emission | fixed_cycle | random
    alpha: float | None = None

    KINDS = ("linear", "throughput", "emission", "fixed_cycle", "random")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.kind == "linear":
            if self.alpha is None or not any(math.isclose(self.alpha, a) for a in LINEAR_GRID + (1.0,)):
                raise ValueError(f"linear alpha must be one of {LINEAR_GRID}, got {self.alpha}")

    @property
    def label(self) -> str:
        return f"linear_{self.alpha:.1f}" if self.kind == "linear" else self.kind


@dataclass
class RunOptions:
    """Schedule knobs that are not part of the scenario itself."""

    profile: str = "full"
    eval_interval: int = 5000
    eval_episodes: int = 2
    final_eval_episodes: int = 3
    log_interval: int = 500
    ensemble_epochs: int = 50
    ensemble_batch: int = 128
    ensemble_beta: float = 1.0
    replay_capacity: int = 200_000
    fixed_cycle: tuple[int, ...] = (3, 3, 8, 8)
    dqn: DQNConfig = field(default_factory=DQNConfig)
    halt_after_session: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fixed_cycle"] = list(self.fixed_cycle)
        return d


def fast_profile(spec: ScenarioSpec, options: RunOptions | None = None) -> tuple[ScenarioSpec, RunOptions]:
    """2000 s episodes and a 20k-step run, for CI-sized experiments."""
    options = options or RunOptions()
    spec = spec.with_updates(sim=spec.sim.with_updates(episode_length=2000), run_length=20_000)
    dqn = replace(options.dqn, eps_decay_steps=10_000)
    return spec, replace(options, profile="fast", eval_interval=2000, dqn=dqn)


def train_seed(seed: int, episode: int) -> int:
    return 2 * (seed * 100_000 + episode)


def eval_seed(seed: int, j: int) -> int:
    # odd, so never equal to a training seed
    return 2 * (seed * 100_000 + j) + 1


def feedback_steps(spec: ScenarioSpec) -> list[int]:
    """Env-step counts after which a feedback session runs."""
    if spec.run_length <= spec.bootstrap_length:
        return []
    p = spec.feedback_period
    first = max(p, -(-spec.bootstrap_length // p) * p)
    return list(range(first, spec.run_length + 1, p))


class RunningStandardizer:
    """Welford mean/std; ``transform`` always uses the latest statistics."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, x: float) -> None:
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / self.n) if self.n > 1 else 0.0

    def transform(self, x):
        std = self.std
        if std < 1e-8:
            return np.zeros_like(np.asarray(x, dtype=np.float64))
        return np.clip((np.asarray(x, dtype=np.float64) - self.mean) / std, -10.0, 10.0)

    def __call__(self, x: float) -> float:
        self.update(x)
        return float(self.transform(x))


class ProgrammaticReward:
    """Fixed reward from step metrics with every term standardized online.

    Stored transitions keep their raw metrics; ``batch`` standardizes them
    with the current running statistics, so early transitions are not frozen
    at the scale seen when they were recorded.
    """

    def __init__(self, kind: str, alpha: float | None = None):
        self.kind = kind
        self.alpha = alpha
        self.norm_r1 = RunningStandardizer()
        self.norm_r2 = RunningStandardizer()

    def _terms(self, throughput, co2_rate, queue):
        if self.kind == "proxy":
            return -np.asarray(queue, dtype=np.float64), None
        return np.asarray(throughput, dtype=np.float64), np.asarray(co2_rate, dtype=np.float64)

    def raw(self, throughput, co2_rate, queue):
        r1, r2 = self._terms(throughput, co2_rate, queue)
        if self.kind in ("proxy", "throughput"):
            return r1
        if self.kind == "emission":
            return -r2
        return self.alpha * r1 - (1 - self.alpha) * r2

    def batch(self, throughput, co2_rate, queue) -> np.ndarray:
        r1, r2 = self._terms(throughput, co2_rate, queue)
        if self.kind in ("proxy", "throughput"):
            return self.norm_r1.transform(r1)
        if self.kind == "emission":
            return -self.norm_r2.transform(r2)
        return self.alpha * self.norm_r1.transform(r1) - (1 - self.alpha) * self.norm_r2.transform(r2)

    def __call__(self, m: StepMetrics) -> tuple[float, float]:
        r1, r2 = self._terms(m.throughput, m.co2_rate, m.queue_total)
        self.norm_r1.update(float(r1))
        if r2 is not None:
            self.norm_r2.update(float(r2))
        args = (m.throughput, m.co2_rate, m.queue_total)
        return float(self.raw(*args)), float(self.batch(*args))

    def for_buffer(self, buffer: "ReplayBuffer", idx: np.ndarray) -> np.ndarray:
        mm = buffer.metric_arrays
        return self.batch(mm["throughput"][idx], mm["co2_rate"][idx], mm["queue_total"][idx])


@dataclass
class RunResult:
    run_dir: Path | None
    label: str
    final: dict
    evals: list[dict]
    sessions: list[dict]
    filter_stats: dict
    requests: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["run_dir"] = str(self.run_dir) if self.run_dir else None
        return d


def fixed_cycle_policy(greens: Sequence[int]) -> Callable[[np.ndarray], int]:
    """Cycle through phases 0..3 holding phase ``k`` for ``greens[k]`` steps."""
    seq = [p for p, n in enumerate(greens) for _ in range(n)]
    state = {"t": 0}

    def policy(obs):
        a = seq[state["t"] % len(seq)]
        state["t"] += 1
        return a
    return policy


def evaluate(policy_factory: Callable[[], Callable[[np.ndarray], int]], spec: ScenarioSpec,
             seeds: Sequence[int]) -> dict:
    """Greedy rollouts on the given seeds; metrics averaged over all steps."""
    env = Intersection(spec.sim)
    history: list[StepMetrics] = []
    for s in seeds:
        policy = policy_factory()
        obs = env.reset(s)
        done = False
        while not done:
            obs, m, done = env.step(policy(obs))
            history.append(m)
    w = metrics_window(history, len(history))
    return {"throughput": w.throughput, "co2_rate": w.co2_rate, "ns_share": w.ns_share,
            "queue": w.queue_total}


class Run:
    """One training run. Picklable, so a checkpoint is the pickled object."""

    def __init__(self, spec: ScenarioSpec, *, mode: str, seed: int = 0, options: RunOptions | None = None,
                 baseline: BaselineSpec | None = None, annotator=None, run_dir: str | Path | None = None):
        if mode not in ("rlaif", "baseline"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "baseline" and baseline is None:
            raise ValueError("baseline mode needs a BaselineSpec")
        if mode == "rlaif" and annotator is None:
            raise ValueError("rlaif mode needs an annotator")
        self.spec = spec.validate()
        self.mode = mode
        self.seed = int(seed)
        self.options = options or RunOptions()
        self.baseline = baseline
        self.annotator = annotator
        self.run_dir = Path(run_dir) if run_dir else None

        self.env = Intersection(spec.sim)
        self.episode = 0
        self.obs = self.env.reset(train_seed(self.seed, 0))
        self.agent = DQNAgent(self.options.dqn, seed=self.seed)
        self.buffer = ReplayBuffer(max(self.options.replay_capacity, spec.run_length))
        self.t = 0
        self.rng = np.random.default_rng(self.seed + 104_729)
        if mode == "rlaif":
            self.reward_fn = ProgrammaticReward("proxy")
            self.ensemble = RewardEnsemble(seed=self.seed, beta=self.options.ensemble_beta,
                                           lr=self.options.dqn.lr, weight_decay=self.options.dqn.weight_decay)
            self.prefs = PreferenceBuffer()
            self.schedule = feedback_steps(spec)
        else:
            kind = "linear" if baseline.kind == "linear" else baseline.kind
            self.reward_fn = ProgrammaticReward(kind, baseline.alpha)
            self.ensemble = None
            self.prefs = None
            self.schedule = []
        self.filter_stats = FilterStats()
        self.sessions: list[dict] = []
        self.evals: list[dict] = []
        self.requests = 0
        self._window: list[tuple[StepMetrics, float | None]] = []
        self._last_reward_loss = float("nan")
        self.final: dict | None = None
        self.finished = False

    # ------------------------------------------------------------------ i/o

    @property
    def label(self) -> str:
        return "rlaif" if self.mode == "rlaif" else self.baseline.label

    def _path(self, name: str) -> Path | None:
        return self.run_dir / name if self.run_dir else None

    def _append_csv(self, name: str, columns: Sequence[str], row: dict) -> None:
        path = self._path(name)
        if path is None:
            return
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns)
            if new:
                w.writeheader()
            w.writerow({k: row.get(k, "") for k in columns})

    def _append_jsonl(self, name: str, entries: Sequence[dict]) -> None:
        path = self._path(name)
        if path is None:
            return
        with open(path, "a") as fh:
            for e in entries:
                fh.write(json.dumps(e) + "\n")

    def write_config(self) -> None:
        if self.run_dir is None:
            return
        self.run_dir.mkdir(parents=True, exist_ok=True)
        cfg = {
            "mode": self.mode,
            "seed": self.seed,
            "scenario": self.spec.to_dict(),
            "options": self.options.to_dict(),
            "baseline": asdict(self.baseline) if self.baseline else None,
            "annotator": getattr(self.annotator, "kind", None),
            "feedback_steps": self.schedule,
        }
        with open(self.run_dir / "config.yaml", "w") as fh:
            yaml.safe_dump(cfg, fh, sort_keys=False)

    def checkpoint(self) -> None:
        path = self._path("checkpoint.pkl")
        if path is None:
            return
        tmp = path.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            pickle.dump(self, fh)
        tmp.replace(path)

    @staticmethod
    def resume(run_dir: str | Path, annotator=None) -> "Run":
        """Reload a checkpoint; recorded annotations are replayed before any
        new request reaches ``annotator`` (or the pickled one)."""
        run_dir = Path(run_dir)
        with open(run_dir / "checkpoint.pkl", "rb") as fh:
            run: Run = pickle.load(fh)
        run.run_dir = run_dir
        live = annotator if annotator is not None else run.annotator
        log_path = run_dir / "annotations.jsonl"
        if run.mode == "rlaif" and log_path.exists():
            entries = [json.loads(ln) for ln in log_path.read_text().splitlines() if ln.strip()]
            run.annotator = ReplayAnnotator(entries, fallback=live)
            run._live_annotator = live
        elif live is not None:
            run.annotator = live
        run.options = replace(run.options, halt_after_session=None)
        return run

    # ------------------------------------------------------------- training

    def _reward_for(self, obs: np.ndarray, action: int, metrics: StepMetrics) -> tuple[float, float, int]:
        if self.mode == "rlaif" and self.ensemble.version > 0:
            raw = float(self.ensemble.reward(obs[None, :], np.array([action]))[0])
            mean, std = self.buffer.reward_stats
            z = 0.0 if std < 1e-8 else float(np.clip((raw - mean) / std, -10.0, 10.0))
            return raw, z, self.ensemble.version
        raw, z = self.reward_fn(metrics)
        return raw, z, 0

    def _env_step(self) -> tuple[StepMetrics, float | None]:
        action = self.agent.select_action(self.obs)
        next_obs, metrics, done = self.env.step(action)
        raw, z, version = self._reward_for(self.obs, action, metrics)
        self.buffer.add(self.obs, action, next_obs, metrics, done, self.t, raw, z, version)
        self.t += 1
        self.agent.env_steps = self.t
        if done:
            self.episode += 1
            self.obs = self.env.reset(train_seed(self.seed, self.episode))
        else:
            self.obs = next_obs
        lookup = None
        if self.ensemble is None or self.ensemble.version == 0:
            lookup = lambda idx: self.reward_fn.for_buffer(self.buffer, idx)
        return metrics, self.agent.maybe_update(self.buffer, lookup)

    def _greedy_factory(self):
        q = self.agent.q.clone()
        return lambda: (lambda obs: int(np.argmax(q.predict(obs))))

    def _policy_factory(self):
        if self.mode == "baseline" and self.baseline.kind == "fixed_cycle":
            return lambda: fixed_cycle_policy(self.options.fixed_cycle)
        if self.mode == "baseline" and self.baseline.kind == "random":
            rng = np.random.default_rng(self.seed + 31)
            return lambda: (lambda obs: int(rng.integers(4)))
        return self._greedy_factory()

    def evaluate(self, n_episodes: int) -> dict:
        seeds = [eval_seed(self.seed, j) for j in range(n_episodes)]
        return evaluate(self._policy_factory(), self.spec, seeds)

    def _log_train_window(self) -> None:
        hist = [m for m, _ in self._window]
        losses = [l for _, l in self._window if l is not None]
        w = metrics_window(hist, len(hist))
        self._append_csv("metrics.csv", METRIC_COLUMNS, {
            "kind": "train", "step": self.t, "throughput": w.throughput, "co2_rate": w.co2_rate,
            "ns_share": w.ns_share, "queue": w.queue_total, "epsilon": self.agent.epsilon(),
            "dqn_loss": float(np.mean(losses)) if losses else "",
            "reward_loss": "" if math.isnan(self._last_reward_loss) else self._last_reward_loss,
        })
        self._window = []

    def _log_eval(self, n_episodes: int) -> dict:
        row = {"step": self.t, **self.evaluate(n_episodes)}
        self.evals.append(row)
        self._append_csv("metrics.csv", METRIC_COLUMNS, {"kind": "eval", "epsilon": 0.0, **row})
        return row

    def feedback_session(self) -> dict:
        spec = self.spec
        k = len(self.sessions)
        t0 = time.monotonic()
        sel = sample_disagreement_pairs(self.buffer, self.ensemble, k=spec.annotation_batch,
                                        oversample=spec.oversample, segment_length=spec.segment_length,
                                        rng=self.rng)
        H = spec.segment_length
        pairs = [(self.buffer.segment(i, H), self.buffer.segment(j, H)) for i, j in sel.pairs]
        ids = [f"s{k:03d}-{n:05d}" for n in range(len(pairs))]
        try:
            labels = self.annotator.annotate_pairs(pairs, ids)
        except AnnotatorUnavailable:
            self.checkpoint()
            raise
        self.requests += len(pairs)
        entries = []
        for lab, (i, j) in zip(labels, sel.pairs):
            e = lab.log_entry()
            e.update(session=k, start_1=int(i), start_2=int(j))
            entries.append(e)
        self._append_jsonl("annotations.jsonl", entries)
        before = FilterStats(**{k2: v for k2, v in self.filter_stats.to_dict().items() if k2 != "filter_rate"})
        stored, _ = filter_and_store(labels, pairs, self.prefs, self.filter_stats, timestamp=float(self.t))
        traces = train_ensemble(self.ensemble, self.prefs, epochs=self.options.ensemble_epochs,
                                batch_size=self.options.ensemble_batch, rng=self.rng)
        if self.ensemble.version > 0:
            relabel_buffer(self.buffer, self.ensemble)
        finals = [tr[-1] for tr in traces if tr]
        self._last_reward_loss = float(np.mean(finals)) if finals else float("nan")
        requested = self.filter_stats.requested - before.requested
        filtered = self.filter_stats.filtered - before.filtered
        row = {
            "session": k, "step": self.t, "requested": requested, "stored": stored, "filtered": filtered,
            "filter_rate": filtered / requested if requested else 0.0, "preferences": len(self.prefs),
            "reward_loss": self._last_reward_loss, "ensemble_version": self.ensemble.version,
            "seconds": round(time.monotonic() - t0, 3),
        }
        self.sessions.append(row)
        self._append_csv("sessions.csv", SESSION_COLUMNS, row)
        if self.run_dir:
            self.prefs.save(self.run_dir / "preferences.jsonl")
        log.info("session %d at step %d: %d requested, %d stored, filter rate %.3f",
                 k, self.t, requested, stored, row["filter_rate"])
        return row

    def _session_due(self) -> bool:
        return self.t in self.schedule and not (self.sessions and self.sessions[-1]["step"] == self.t)

    def _after_step(self, progress) -> None:
        opts = self.options
        halt = False
        if self._session_due():
            self.feedback_session()
            if progress:
                s = self.sessions[-1]
                progress(f"[{self.label}] session {s['session']} step {self.t}: "
                         f"stored {s['stored']}/{s['requested']}, |D|={s['preferences']}")
            halt = opts.halt_after_session is not None and len(self.sessions) > opts.halt_after_session
        if self.t % opts.log_interval == 0 and self._window:
            self._log_train_window()
        if self.t % opts.eval_interval == 0 and self.t < self.spec.run_length:
            row = self._log_eval(opts.eval_episodes)
            if progress:
                progress(f"[{self.label}] step {self.t}: throughput {row['throughput']:.3f} "
                         f"co2 {row['co2_rate']:.1f} ns_share {row['ns_share']:.3f}")
        if halt:
            self.checkpoint()
            raise RunHalted(f"halted after session {opts.halt_after_session}")

    def run(self, progress: Callable[[str], None] | None = None) -> RunResult:
        if self.run_dir and self.t == 0:
            self.write_config()
        opts = self.options
        learns = not (self.mode == "baseline" and self.baseline.kind in ("fixed_cycle", "random"))
        if learns and self._session_due():
            # resumed after the annotator failed mid-session
            self._after_step(progress)
        while self.t < self.spec.run_length and learns:
            metrics, loss = self._env_step()
            self._window.append((metrics, loss))
            self._after_step(progress)
        self.final = self._log_eval(opts.final_eval_episodes)
        self.finished = True
        result = self.result()
        if self.run_dir:
            self.agent.q.save(self.run_dir / "qnet.npz")
            if self.ensemble is not None:
                for k, net in enumerate(self.ensemble.members):
                    net.save(self.run_dir / f"reward_{k}.npz")
            with open(self.run_dir / "summary.json", "w") as fh:
                json.dump(result.to_dict(), fh, indent=2)
            self.checkpoint()
        return result

    def result(self) -> RunResult:
        return RunResult(run_dir=self.run_dir, label=self.label, final=self.final or {},
                         evals=self.evals, sessions=self.sessions,
                         filter_stats=self.filter_stats.to_dict(), requests=self.requests)

    def __getstate__(self):
        state = dict(self.__dict__)
        live = state.pop("_live_annotator", None)
        if isinstance(state.get("annotator"), ReplayAnnotator):
            state["annotator"] = live
        return state


# ---------------------------------------------------------------- entry points


def make_annotator(kind: str, spec: ScenarioSpec, llm_config: LLMConfig | None = None):
    if kind == "oracle":
        return OracleAnnotator(spec.oracle)
    if kind == "llm":
        return LLMAnnotator(spec, llm_config)
    raise ValueError(f"unknown annotator kind {kind!r}")


def run_rlaif(spec: ScenarioSpec, annotator, seed: int = 0, options: RunOptions | None = None,
              run_dir: str | Path | None = None, progress=None) -> RunResult:
    return Run(spec, mode="rlaif", seed=seed, options=options, annotator=annotator,
               run_dir=run_dir).run(progress)


def run_baseline(spec: ScenarioSpec, baseline: BaselineSpec, seed: int = 0, options: RunOptions | None = None,
                 run_dir: str | Path | None = None, progress=None) -> RunResult:
    return Run(spec, mode="baseline", seed=seed, options=options, baseline=baseline,
               run_dir=run_dir).run(progress)


def select_alpha(rows: Sequence[dict], co2_tolerance: float = 0.10) -> float:
    """Highest-throughput alpha whose CO2 is within ``co2_tolerance`` of the
    grid minimum; ties go to the larger alpha."""
    floor = min(r["co2_rate"] for r in rows)
    ok = [r for r in rows if r["co2_rate"] <= floor * (1 + co2_tolerance)]
    best = max(ok, key=lambda r: (r["throughput"], r["alpha"]))
    return best["alpha"]


def grid_search_linear(spec: ScenarioSpec, seeds: Sequence[int] = (0,), options: RunOptions | None = None,
                       out_dir: str | Path | None = None, progress=None) -> tuple[list[dict], float]:
    rows = []
    for alpha in LINEAR_GRID:
        finals = []
        for s in seeds:
            rd = Path(out_dir) / f"linear_{alpha:.1f}_seed{s}" if out_dir else None
            finals.append(run_baseline(spec, BaselineSpec("linear", alpha), seed=s, options=options,
                                       run_dir=rd, progress=progress).final)
        rows.append({"alpha": alpha,
                     "throughput": float(np.mean([f["throughput"] for f in finals])),
                     "co2_rate": float(np.mean([f["co2_rate"] for f in finals]))})
    return rows, select_alpha(rows)


def run_priority_suite(spec: ScenarioSpec, annotator_factory: Callable[[ScenarioSpec], object],
                       seeds: Sequence[int] = (0,), options: RunOptions | None = None,
                       variants: Sequence[str] = PRIORITY_VARIANTS, out_dir: str | Path | None = None,
                       progress=None) -> list[dict]:
    """One RLAIF run per user specification; reports mean final NS share."""
    rows = []
    for key in variants:
        v = spec.variant(key)
        shares, thr = [], []
        for s in seeds:
            rd = Path(out_dir) / f"{key}_seed{s}" if out_dir else None
            res = run_rlaif(v, annotator_factory(v), seed=s, options=options, run_dir=rd, progress=progress)
            shares.append(res.final["ns_share"])
            thr.append(res.final["throughput"])
        rows.append({"variant": key, "user_specification": v.user_specification,
                     "ns_share": float(np.mean(shares)), "throughput": float(np.mean(thr)),
                     "ns_shares": shares})
    return rows


__all__ = [
    "BaselineSpec", "RunOptions", "RunResult", "Run", "RunHalted", "ScenarioSpec", "load_scenario",
    "fast_profile", "feedback_steps", "run_rlaif", "run_baseline", "grid_search_linear",
    "run_priority_suite", "select_alpha", "make_annotator", "evaluate", "fixed_cycle_policy",
]
