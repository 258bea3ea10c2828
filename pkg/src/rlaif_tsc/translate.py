"""Rule-based text rendering of trajectory segments for annotators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .sim import APPROACH_NAMES, LANES, N_LANES, N_PHASES, PHASE_NAMES

if TYPE_CHECKING:
    from .pref import Segment
    from .scenario import ScenarioSpec

_MOVEMENT_NAMES = {"left": "left-turn lane", "through": "through and right-turn lane"}


@dataclass
class SegmentDescription:
    text: str
    values: dict = field(default_factory=dict)


def lane_label(i: int) -> str:
    lane = LANES[i]
    return f"{APPROACH_NAMES[lane.approach]} {_MOVEMENT_NAMES[lane.movement]}"


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def describe_segment(segment: "Segment", scenario: "ScenarioSpec") -> SegmentDescription:
    """Render every step of ``segment`` as prose plus structured values.

    Densities are printed with two decimals, vehicle counts as integers. Each
    step lists the signal state, every lane, the chosen phase and the step's
    outcome; emission-focused scenarios report CO2, direction-focused ones
    the north-south / east-west split.
    """
    if len(segment) == 0:
        raise ValueError("cannot describe an empty segment")
    capacity = scenario.sim.capacity
    step_length = scenario.sim.step_length
    lines: list[str] = []
    steps: list[dict] = []
    for t in range(len(segment)):
        obs = segment.observations[t]
        if obs.shape != (N_PHASES + 1 + 2 * N_LANES,):
            raise ValueError(f"observation {t} has shape {obs.shape}")
        phase = int(np.argmax(obs[:N_PHASES]))
        min_green = bool(obs[N_PHASES] >= 0.5)
        density = obs[N_PHASES + 1:N_PHASES + 1 + N_LANES]
        queue = obs[N_PHASES + 1 + N_LANES:]
        queued = [int(round(q * capacity)) for q in queue]
        m = segment.metrics[t]
        action = int(segment.actions[t])
        step = {
            "phase": phase,
            "min_green_elapsed": min_green,
            "density": [round(float(d), 2) for d in density],
            "queued": queued,
            "action": action,
            "passed": int(m.throughput),
        }
        lines.append(f"Step {t + 1}:")
        lines.append(f"- Active green phase: {PHASE_NAMES[phase]}.")
        lines.append("- Minimum green time: " + ("elapsed, the phase may change."
                                                  if min_green else "not yet elapsed, the phase is held."))
        for i in range(N_LANES):
            lines.append(f"- {lane_label(i)}: density {_fmt(density[i])}, {queued[i]} vehicles queued.")
        lines.append(f"- Phase chosen for the next {step_length} seconds: {PHASE_NAMES[action]}.")
        lines.append(f"- Vehicles that passed the junction in this step: {int(m.throughput)}.")
        if scenario.focus == "direction":
            step["passed_ns"] = int(m.throughput_ns)
            step["passed_ew"] = int(m.throughput_ew)
            lines.append(f"- Of these, north-south: {int(m.throughput_ns)}, east-west: {int(m.throughput_ew)}.")
        else:
            step["co2_rate"] = round(float(m.co2_rate), 2)
            lines.append(f"- Carbon emission in this step: {_fmt(m.co2_rate)} g/s.")
        steps.append(step)

    totals = {"throughput": int(sum(m.throughput for m in segment.metrics))}
    lines.append("Segment totals:")
    lines.append(f"- Vehicles passed: {totals['throughput']}.")
    if scenario.focus == "direction":
        totals["throughput_ns"] = int(sum(m.throughput_ns for m in segment.metrics))
        totals["throughput_ew"] = int(sum(m.throughput_ew for m in segment.metrics))
        lines.append(f"- North-south vehicles passed: {totals['throughput_ns']}.")
        lines.append(f"- East-west vehicles passed: {totals['throughput_ew']}.")
    else:
        totals["co2_rate_mean"] = round(float(np.mean([m.co2_rate for m in segment.metrics])), 2)
        lines.append(f"- Mean carbon emission: {_fmt(totals['co2_rate_mean'])} g/s.")
    return SegmentDescription(text="\n".join(lines), values={"steps": steps, "totals": totals})
