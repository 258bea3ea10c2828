"""Preference annotators: an LLM over a chat-completions endpoint and a scripted oracle.

Both return :class:`PreferenceLabel` with ``y`` in {0, 1, 2}: 1 prefers the
first segment, 2 the second, 0 means "not confident" and is filtered out
before anything reaches the preference buffer.
"""

from __future__ import annotations

import logging
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import TYPE_CHECKING, Sequence

import httpx

from .pref import PreferenceBuffer, PreferenceRecord, Segment
from .translate import describe_segment

if TYPE_CHECKING:
    from .scenario import ScenarioSpec

log = logging.getLogger(__name__)

LABEL_RE = re.compile(r"LABEL:\s*([012])")
PROMPT_VERSION = "v1"
ORACLE_METRICS = ("throughput", "throughput_ns", "throughput_ew", "co2", "co2_rate", "queue_total")


class AnnotatorUnavailable(RuntimeError):
    """Every request of a batch failed at the transport level."""


@dataclass
class AnnotationRequest:
    segment_1: str
    segment_2: str
    objectives: Sequence[str]
    user_specification: str
    request_id: str = ""

    def __post_init__(self):
        if not self.segment_1.strip() or not self.segment_2.strip():
            raise ValueError("both segment descriptions must be non-empty")
        if not self.objectives or not self.user_specification.strip():
            raise ValueError("objectives and user specification must be set")


@dataclass
class PreferenceLabel:
    y: int
    annotator: str
    request_id: str = ""
    rationale: str | None = None
    latency: float = 0.0
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    attempts: int = 1
    error: str | None = None
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.y not in (0, 1, 2):
            raise ValueError(f"label must be 0, 1 or 2, got {self.y!r}")

    def log_entry(self) -> dict:
        return {
            "request_id": self.request_id,
            "annotator": self.annotator,
            "y": self.y,
            "error": self.error,
            "attempts": self.attempts,
            "latency": self.latency,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "response": self.rationale,
            **self.detail,
        }


# ---------------------------------------------------------------- oracle


@dataclass(frozen=True)
class OracleTeacherSpec:
    """Ground-truth scalarisation ``g = sum_t sum_m w_m * metric_m(t) / scale_m``.

    ``tie_threshold`` is an absolute margin; when it is None the margin is
    ``tie_fraction`` times the running std of ``g`` over all segments the
    annotator has scored.
    """

    weights: dict
    scales: dict = field(default_factory=dict)
    tie_threshold: float | None = None
    tie_fraction: float = 0.02

    def __post_init__(self):
        unknown = set(self.weights) | set(self.scales)
        unknown -= set(ORACLE_METRICS)
        if unknown:
            raise ValueError(f"unknown oracle metrics {sorted(unknown)}")
        if not any(w != 0 for w in self.weights.values()):
            raise ValueError("oracle needs at least one non-zero weight")
        if self.tie_threshold is not None and self.tie_threshold < 0:
            raise ValueError("tie threshold must be >= 0")
        if self.tie_fraction < 0:
            raise ValueError("tie fraction must be >= 0")
        if any(s <= 0 for s in self.scales.values()):
            raise ValueError("metric scales must be positive")

    def __hash__(self):
        return hash((tuple(sorted(self.weights.items())), tuple(sorted(self.scales.items())),
                     self.tie_threshold, self.tie_fraction))

    def to_dict(self) -> dict:
        return {"weights": dict(self.weights), "scales": dict(self.scales),
                "tie_threshold": self.tie_threshold, "tie_fraction": self.tie_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "OracleTeacherSpec":
        return cls(
            weights={k: float(v) for k, v in d["weights"].items()},
            scales={k: float(v) for k, v in (d.get("scales") or {}).items()},
            tie_threshold=None if d.get("tie_threshold") is None else float(d["tie_threshold"]),
            tie_fraction=float(d.get("tie_fraction", 0.02)),
        )


def oracle_score(segment: Segment, spec: OracleTeacherSpec) -> float:
    total = 0.0
    for m in segment.metrics:
        for name, w in spec.weights.items():
            total += w * getattr(m, name) / spec.scales.get(name, 1.0)
    return total


def annotate_oracle(pair: tuple[Segment, Segment], spec: OracleTeacherSpec,
                    threshold: float | None = None) -> PreferenceLabel:
    s1, s2 = pair
    if len(s1) != len(s2):
        raise ValueError("oracle comparison needs equal-length segments")
    eps = threshold if threshold is not None else (spec.tie_threshold or 0.0)
    g1, g2 = oracle_score(s1, spec), oracle_score(s2, spec)
    diff = g1 - g2
    y = 1 if diff > eps else 2 if diff < -eps else 0
    return PreferenceLabel(y=y, annotator="oracle", detail={"g1": g1, "g2": g2, "eps": eps})


class OracleAnnotator:
    kind = "oracle"

    def __init__(self, spec: OracleTeacherSpec):
        self.spec = spec
        self._n = 0
        self._mean = 0.0
        self._m2 = 0.0

    @property
    def g_std(self) -> float:
        return math.sqrt(self._m2 / self._n) if self._n > 1 else 0.0

    def _observe(self, g: float) -> None:
        self._n += 1
        d = g - self._mean
        self._mean += d / self._n
        self._m2 += d * (g - self._mean)

    def threshold(self) -> float:
        if self.spec.tie_threshold is not None:
            return self.spec.tie_threshold
        return self.spec.tie_fraction * self.g_std

    def annotate_pairs(self, pairs: Sequence[tuple[Segment, Segment]],
                       request_ids: Sequence[str] | None = None) -> list[PreferenceLabel]:
        for s1, s2 in pairs:
            self._observe(oracle_score(s1, self.spec))
            self._observe(oracle_score(s2, self.spec))
        eps = self.threshold()
        labels = []
        for i, pair in enumerate(pairs):
            lab = annotate_oracle(pair, self.spec, threshold=eps)
            lab.request_id = request_ids[i] if request_ids else str(i)
            labels.append(lab)
        return labels


# ---------------------------------------------------------------- LLM


@dataclass
class LLMConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4.1-nano"
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    timeout: float = 60.0
    max_retries: int = 3
    retry_backoff: float = 1.0
    max_in_flight: int = 8

    @property
    def endpoint(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"

    def api_key(self) -> str | None:
        return os.environ.get(self.api_key_env)


def _template(name: str) -> str:
    return resources.files("rlaif_tsc.prompts").joinpath(f"{name}_{PROMPT_VERSION}.txt").read_text()


def build_messages(req: AnnotationRequest) -> list[dict]:
    user = _template("annotation").format(
        objectives="\n".join(f"- {o}" for o in req.objectives),
        user_specification=req.user_specification,
        segment_1=req.segment_1,
        segment_2=req.segment_2,
    )
    return [{"role": "system", "content": _template("system").strip()},
            {"role": "user", "content": user}]


def parse_label(text: str | None) -> int | None:
    """Label from the last non-empty line, which must read ``LABEL: <0|1|2>``."""
    if not text:
        return None
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        return None
    m = LABEL_RE.fullmatch(lines[-1].strip("*` "))
    return int(m.group(1)) if m else None


def annotate_llm(req: AnnotationRequest, config: LLMConfig,
                 client: httpx.Client | None = None) -> PreferenceLabel:
    """Query the endpoint until a label parses or retries run out.

    Exhausted retries yield ``y=0`` with ``error`` set, never a guessed 1/2.
    """
    own = client is None
    client = client or httpx.Client(timeout=config.timeout)
    headers = {"Content-Type": "application/json"}
    key = config.api_key()
    if key:
        headers["Authorization"] = f"Bearer {key}"
    payload = {"model": config.model, "messages": build_messages(req), "temperature": config.temperature}
    start = time.monotonic()
    error = None
    content = None
    usage: dict = {}
    attempts = 0
    transport_only = True
    try:
        for attempt in range(config.max_retries + 1):
            attempts = attempt + 1
            if attempt and config.retry_backoff > 0:
                time.sleep(config.retry_backoff * 2 ** (attempt - 1))
            try:
                resp = client.post(config.endpoint, json=payload, headers=headers, timeout=config.timeout)
                resp.raise_for_status()
                body = resp.json()
                content = body["choices"][0]["message"]["content"]
                usage = body.get("usage") or {}
            except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
                error = f"{type(exc).__name__}: {exc}"
                content = None
                continue
            transport_only = False
            y = parse_label(content)
            if y is not None:
                return PreferenceLabel(
                    y=y, annotator=f"llm:{config.model}", request_id=req.request_id, rationale=content,
                    latency=time.monotonic() - start, attempts=attempts,
                    prompt_tokens=usage.get("prompt_tokens"), completion_tokens=usage.get("completion_tokens"),
                )
            error = "no LABEL line in response"
    finally:
        if own:
            client.close()
    label = PreferenceLabel(
        y=0, annotator=f"llm:{config.model}", request_id=req.request_id, rationale=content,
        latency=time.monotonic() - start, attempts=attempts, error=error,
        prompt_tokens=usage.get("prompt_tokens"), completion_tokens=usage.get("completion_tokens"),
    )
    label.detail["transport_failure"] = transport_only
    return label


class LLMAnnotator:
    kind = "llm"

    def __init__(self, scenario: "ScenarioSpec", config: LLMConfig | None = None):
        self.scenario = scenario
        self.config = config or LLMConfig()

    def request_for(self, pair: tuple[Segment, Segment], request_id: str = "") -> AnnotationRequest:
        return AnnotationRequest(
            segment_1=describe_segment(pair[0], self.scenario).text,
            segment_2=describe_segment(pair[1], self.scenario).text,
            objectives=self.scenario.objectives,
            user_specification=self.scenario.user_specification,
            request_id=request_id,
        )

    def annotate_pairs(self, pairs: Sequence[tuple[Segment, Segment]],
                       request_ids: Sequence[str] | None = None) -> list[PreferenceLabel]:
        ids = list(request_ids) if request_ids else [str(i) for i in range(len(pairs))]
        reqs = [self.request_for(p, rid) for p, rid in zip(pairs, ids)]
        return self.annotate_requests(reqs)

    def annotate_requests(self, reqs: Sequence[AnnotationRequest]) -> list[PreferenceLabel]:
        if not reqs:
            return []
        with httpx.Client(timeout=self.config.timeout) as client:
            with ThreadPoolExecutor(max_workers=max(1, self.config.max_in_flight)) as pool:
                # map() yields in submission order, so results line up with reqs
                labels = list(pool.map(lambda r: annotate_llm(r, self.config, client), reqs))
        if all(lab.detail.get("transport_failure") for lab in labels):
            raise AnnotatorUnavailable(
                f"all {len(labels)} requests to {self.config.endpoint} failed: {labels[0].error}")
        return labels


class ReplayAnnotator:
    """Serves labels recorded in an annotation log, keyed by request id."""

    kind = "replay"

    def __init__(self, entries: Sequence[dict], fallback=None):
        self.labels = {e["request_id"]: e for e in entries}
        self.fallback = fallback

    def annotate_pairs(self, pairs, request_ids=None) -> list[PreferenceLabel]:
        out = []
        missing = [i for i, rid in enumerate(request_ids) if rid not in self.labels]
        fresh = {}
        if missing:
            if self.fallback is None:
                raise KeyError(f"no recorded label for request {request_ids[missing[0]]!r}")
            got = self.fallback.annotate_pairs([pairs[i] for i in missing], [request_ids[i] for i in missing])
            fresh = dict(zip(missing, got))
        for i, rid in enumerate(request_ids):
            if i in fresh:
                out.append(fresh[i])
                continue
            e = self.labels[rid]
            out.append(PreferenceLabel(y=int(e["y"]), annotator=e.get("annotator", "replay"), request_id=rid,
                                       rationale=e.get("response"), error=e.get("error")))
        return out


# ---------------------------------------------------------------- filtering


@dataclass
class FilterStats:
    requested: int = 0
    stored: int = 0
    filtered: int = 0

    @property
    def filter_rate(self) -> float:
        return self.filtered / self.requested if self.requested else 0.0

    def to_dict(self) -> dict:
        return {"requested": self.requested, "stored": self.stored, "filtered": self.filtered,
                "filter_rate": self.filter_rate}


def filter_and_store(labels: Sequence[PreferenceLabel], pairs: Sequence[tuple[Segment, Segment]],
                     prefs: PreferenceBuffer, stats: FilterStats | None = None,
                     timestamp: float | None = None) -> tuple[int, FilterStats]:
    """Append decisive labels to ``prefs``; y=0 only counts towards the filter rate."""
    if len(labels) != len(pairs):
        raise ValueError("labels and pairs differ in length")
    stats = stats if stats is not None else FilterStats()
    ts = time.time() if timestamp is None else timestamp
    stored = 0
    for lab, (s1, s2) in zip(labels, pairs):
        stats.requested += 1
        if lab.y == 0:
            stats.filtered += 1
            continue
        prefs.add(PreferenceRecord(s1, s2, lab.y, annotator=lab.annotator, timestamp=ts,
                                   request_id=lab.request_id))
        stats.stored += 1
        stored += 1
    return stored, stats
