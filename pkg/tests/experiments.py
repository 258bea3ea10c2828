"""Seeded end-to-end runs shared by the acceptance criteria.

Each run happens at most once per session. Setting ``RLAIF_TSC_RESULT_CACHE``
to a directory also keeps finished results on disk between sessions.
"""

import functools
import json
import os
import time
from pathlib import Path

from rlaif_tsc.orchestrator import (BaselineSpec, RunOptions, fast_profile, load_scenario, make_annotator,
                                    run_baseline, run_rlaif)

SEEDS = (0, 1, 2)


def _disk_cache():
    d = os.environ.get("RLAIF_TSC_RESULT_CACHE")
    return Path(d) if d else None


@functools.lru_cache(maxsize=None)
def fast_run(scenario: str, kind: str, seed: int, alpha: float | None = None, variant: str | None = None) -> dict:
    """Final greedy evaluation of one ``--fast`` run, plus its wall time."""
    key = f"{scenario}-{variant or 'base'}-{kind}-{alpha}-{seed}"
    cache = _disk_cache()
    if cache and (cache / f"{key}.json").exists():
        return json.loads((cache / f"{key}.json").read_text())
    spec = load_scenario(scenario)
    if variant:
        spec = spec.variant(variant)
    spec, options = fast_profile(spec, RunOptions())
    t0 = time.monotonic()
    if kind == "rlaif":
        res = run_rlaif(spec, make_annotator("oracle", spec), seed=seed, options=options)
    else:
        res = run_baseline(spec, BaselineSpec(kind, alpha), seed=seed, options=options)
    out = {**res.final, "seconds": time.monotonic() - t0, "filter_rate": res.filter_stats["filter_rate"]}
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
        (cache / f"{key}.json").write_text(json.dumps(out))
    return out


def mean_over_seeds(scenario: str, kind: str, alpha: float | None = None, seeds=SEEDS,
                    variant: str | None = None) -> dict:
    runs = [fast_run(scenario, kind, s, alpha, variant) for s in seeds]
    keys = ("throughput", "co2_rate", "ns_share", "seconds")
    return {k: sum(r[k] for r in runs) / len(runs) for k in keys} | {"runs": runs}
