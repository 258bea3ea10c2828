"""Single four-way intersection queue model with surrogate CO2 emissions.

Each approach (N, S, E, W) has a left-turn lane and a through/right lane.
Vehicles arrive as Poisson streams, cruise for ``travel_time`` seconds to the
stop line, queue, and discharge at one vehicle per ``saturation_headway``
seconds of green. The controller picks one of four phases every
``step_length`` seconds; switching serves a yellow interval first, and a
phase is held for at least ``min_green`` seconds after it was selected.

Emissions are charged per vehicle-second by state: queued vehicles idle,
vehicles leaving the stop line accelerate, approaching vehicles cruise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .nn import ContractError

N_LANES = 8
N_PHASES = 4
OBS_DIM = N_PHASES + 1 + 2 * N_LANES


class LaneId(NamedTuple):
    approach: str
    movement: str

    @property
    def name(self) -> str:
        return f"{self.approach}_{self.movement}"


LANES: tuple[LaneId, ...] = tuple(
    LaneId(a, m) for a in ("N", "S", "E", "W") for m in ("left", "through")
)
APPROACH_NAMES = {"N": "north approach", "S": "south approach", "E": "east approach", "W": "west approach"}
# Lane order: N_left, N_through, S_left, S_through, E_left, E_through, W_left, W_through.
PHASE_LANES: tuple[tuple[int, int], ...] = ((0, 2), (1, 3), (4, 6), (5, 7))
PHASE_NAMES = ("north-south left-turn", "north-south through and right-turn", "east-west left-turn",
               "east-west through and right-turn")
NS_LANES = np.array([0, 1, 2, 3])
EW_LANES = np.array([4, 5, 6, 7])


class ConfigError(ValueError):
    pass


class EpisodeDone(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    arrival_rates: tuple[float, ...] = (200.0,) * 4 + (600.0,) * 4  # veh/h per lane, LANES order
    episode_length: int = 10_000
    step_length: int = 5
    yellow: int = 2
    min_green: int = 10
    saturation_headway: float = 2.0
    travel_time: int = 20
    capacity: int = 40
    emission_idle: float = 1.5
    emission_discharging: float = 4.0
    emission_cruising: float = 2.5
    seed: int = 0

    def validate(self) -> "SimConfig":
        if len(self.arrival_rates) != N_LANES:
            raise ConfigError(f"need {N_LANES} arrival rates, got {len(self.arrival_rates)}")
        if any(r < 0 or not np.isfinite(r) for r in self.arrival_rates):
            raise ConfigError("arrival rates must be finite and non-negative")
        positive = ("episode_length", "step_length", "yellow", "min_green", "saturation_headway",
                    "travel_time", "capacity", "emission_idle", "emission_discharging",
                    "emission_cruising")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive")
        for name in ("episode_length", "step_length", "yellow", "min_green", "travel_time", "capacity"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ConfigError(f"{name} must be a whole number of seconds/vehicles")
        if self.episode_length % self.step_length:
            raise ConfigError("step_length must divide episode_length")
        if self.yellow >= self.step_length:
            raise ConfigError("yellow must be shorter than step_length")
        return self

    def with_updates(self, **kw) -> "SimConfig":
        if "arrival_rates" in kw:
            kw["arrival_rates"] = tuple(float(r) for r in kw["arrival_rates"])
        return replace(self, **kw).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arrival_rates"] = list(self.arrival_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "arrival_rates" in d:
            d["arrival_rates"] = tuple(float(r) for r in d["arrival_rates"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sim config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class StepMetrics:
    throughput: int
    co2: float
    co2_rate: float
    throughput_ns: int
    throughput_ew: int
    queue_total: int
    time: int
    idle_seconds: int = 0
    spilled: int = 0
    lane_queues: tuple[int, ...] = field(default=(0,) * N_LANES)
    lane_discharged: tuple[int, ...] = field(default=(0,) * N_LANES)


@dataclass
class WindowMetrics:
    throughput: float
    co2_rate: float
    ns_share: float
    ew_share: float
    queue_total: float
    steps: int


def metrics_window(history: Sequence[StepMetrics], window: int) -> WindowMetrics:
    """Means over the last ``window`` steps. Directional shares are ratios of
    summed NS/EW throughput (0.5 each when nothing exited)."""
    if not history:
        raise ValueError("empty metrics history")
    if window <= 0 or window > len(history):
        raise ValueError(f"window {window} not in [1, {len(history)}]")
    tail = history[-window:]
    thr = sum(m.throughput for m in tail)
    ns = sum(m.throughput_ns for m in tail)
    ns_share = ns / thr if thr else 0.5
    return WindowMetrics(
        throughput=thr / window,
        co2_rate=sum(m.co2_rate for m in tail) / window,
        ns_share=ns_share,
        ew_share=1.0 - ns_share,
        queue_total=sum(m.queue_total for m in tail) / window,
        steps=window,
    )


class Intersection:
    """Seedable environment: ``reset() -> obs``, ``step(a) -> (obs, metrics, done)``."""

    def __init__(self, config: SimConfig | None = None):
        self.config = (config or SimConfig()).validate()
        self._rates = np.asarray(self.config.arrival_rates, dtype=np.float64) / 3600.0
        self.reset()

    def reset(self, seed: int | None = None) -> np.ndarray:
        cfg = self.config
        self.seed = cfg.seed if seed is None else int(seed)
        self.rng = np.random.default_rng(self.seed)
        # pipeline[k] holds vehicles reaching the stop line on a tick t with t % travel_time == k
        self.pipeline = np.zeros((cfg.travel_time, N_LANES), dtype=np.int64)
        self.queue = np.zeros(N_LANES, dtype=np.int64)
        self.credit = np.zeros(N_LANES, dtype=np.float64)
        self.phase = 0
        self.phase_elapsed = 0
        self.time = 0
        self.done = False
        self.arrived = 0
        self.entered = 0
        self.exited = 0
        self.spilled = 0
        self.lane_entered = np.zeros(N_LANES, dtype=np.int64)
        self.lane_exited = np.zeros(N_LANES, dtype=np.int64)
        return self.observe()

    @property
    def on_network(self) -> int:
        return int(self.pipeline.sum() + self.queue.sum())

    @property
    def min_green_elapsed(self) -> bool:
        return self.phase_elapsed >= self.config.min_green

    def observe(self) -> np.ndarray:
        cap = float(self.config.capacity)
        obs = np.zeros(OBS_DIM)
        obs[self.phase] = 1.0
        obs[N_PHASES] = 1.0 if self.min_green_elapsed else 0.0
        obs[N_PHASES + 1:N_PHASES + 1 + N_LANES] = (self.pipeline.sum(axis=0) + self.queue) / cap
        obs[N_PHASES + 1 + N_LANES:] = self.queue / cap
        return obs

    def step(self, action: int) -> tuple[np.ndarray, StepMetrics, bool]:
        if self.done:
            raise EpisodeDone("step() called after the episode finished; call reset()")
        if not isinstance(action, (int, np.integer)) or not 0 <= int(action) < N_PHASES:
            raise ContractError(f"action must be a phase index in 0..{N_PHASES - 1}, got {action!r}")
        action = int(action)
        cfg = self.config
        yellow_ticks = 0
        if action != self.phase and self.min_green_elapsed:
            yellow_ticks = cfg.yellow
            self.phase = action
            self.phase_elapsed = 0
        green = np.zeros(N_LANES, dtype=bool)
        green[list(PHASE_LANES[self.phase])] = True

        co2 = 0.0
        idle = 0
        discharged = np.zeros(N_LANES, dtype=np.int64)
        spilled_before = self.spilled
        rate_per_tick = 1.0 / cfg.saturation_headway
        for tick in range(cfg.step_length):
            slot = self.time % cfg.travel_time
            # (a) arrivals, capped by lane storage
            arrivals = self.rng.poisson(self._rates)
            room = cfg.capacity - (self.pipeline.sum(axis=0) + self.queue)
            admitted = np.minimum(arrivals, np.maximum(room, 0))
            self.arrived += int(arrivals.sum())
            self.spilled += int((arrivals - admitted).sum())
            self.entered += int(admitted.sum())
            self.lane_entered += admitted
            # (b) vehicles reaching the stop line join the queue
            self.queue += self.pipeline[slot]
            self.pipeline[slot] = admitted
            # (c) saturation-flow discharge on green lanes outside yellow
            out = np.zeros(N_LANES, dtype=np.int64)
            if tick >= yellow_ticks:
                serving = green & (self.queue > 0)
                self.credit[serving] += rate_per_tick
                out = np.minimum(np.floor(self.credit).astype(np.int64), self.queue) * serving
                self.credit -= out
                self.queue -= out
                self.credit[~serving] = 0.0
            else:
                self.credit[:] = 0.0
            discharged += out
            # (d) per-state emissions for this second
            n_idle = int(self.queue.sum())
            idle += n_idle
            co2 += (cfg.emission_idle * n_idle
                    + cfg.emission_discharging * int(out.sum())
                    + cfg.emission_cruising * int(self.pipeline.sum()))
            self.time += 1
        self.phase_elapsed += cfg.step_length

        n_out = int(discharged.sum())
        self.exited += n_out
        self.lane_exited += discharged
        ns = int(discharged[NS_LANES].sum())
        metrics = StepMetrics(
            throughput=n_out,
            co2=co2,
            co2_rate=co2 / cfg.step_length,
            throughput_ns=ns,
            throughput_ew=n_out - ns,
            queue_total=int(self.queue.sum()),
            time=self.time,
            idle_seconds=idle,
            spilled=self.spilled - spilled_before,
            lane_queues=tuple(int(q) for q in self.queue),
            lane_discharged=tuple(int(d) for d in discharged),
        )
        self.done = self.time >= cfg.episode_length
        return self.observe(), metrics, self.done

    def conservation_ok(self) -> bool:
        """Every vehicle that arrived has exited, is on the network, or spilled."""
        return self.arrived == self.exited + self.on_network + self.spilled
