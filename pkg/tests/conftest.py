import numpy as np
import pytest

from rlaif_tsc.pref import Segment
from rlaif_tsc.sim import OBS_DIM, StepMetrics


def make_metrics(throughput=0, co2=0.0, ns=None, queue=0, t=5):
    ns = throughput // 2 if ns is None else ns
    return StepMetrics(throughput=throughput, co2=co2, co2_rate=co2 / 5.0, throughput_ns=ns,
                       throughput_ew=throughput - ns, queue_total=queue, time=t)


def random_segment(rng, length=1, start=0):
    obs = rng.random((length, OBS_DIM))
    metrics = [make_metrics(int(rng.integers(0, 8)), float(rng.uniform(0, 800)), t=5 * (start + i + 1))
               for i in range(length)]
    return Segment(observations=obs, actions=rng.integers(0, 4, size=length),
                   next_observations=rng.random((length, OBS_DIM)), metrics=metrics,
                   indices=np.arange(start, start + length))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report: one line per criterion at the end of the session
CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    CRITERIA[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
