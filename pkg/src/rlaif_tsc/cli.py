"""Command-line entry point: ``rlaif-tsc {train,baseline,annotate,report}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .annotate import AnnotatorUnavailable, LLMConfig, OracleAnnotator
from .orchestrator import (LINEAR_GRID, BaselineSpec, Run, RunHalted, RunOptions, fast_profile,
                           grid_search_linear, make_annotator, run_baseline)
from .pref import Segment
from .scenario import ScenarioSpec, load_scenario
from .sim import ConfigError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

log = logging.getLogger("rlaif_tsc")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    seeds: list[int]
    git: str
    annotator: str | None
    started: float = field(default_factory=time.time)
    finished: float | None = None
    status: str = "running"
    profile: str = "full"
    prompt_tokens: int = 0
    completion_tokens: int = 0
    requests: int = 0
    cost_usd: float | None = None
    runs: list[str] = field(default_factory=list)

    def write(self, out: Path) -> None:
        out.mkdir(parents=True, exist_ok=True)
        tmp = out / "manifest.json.tmp"
        tmp.write_text(json.dumps(asdict(self), indent=2))
        tmp.replace(out / "manifest.json")


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() or "unknown"


# ------------------------------------------------------------------ config


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path} not found")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping at top level")
    return data


def resolve(args: argparse.Namespace, keys: Sequence[str]) -> dict:
    """Config file values overridden by any flag given on the command line."""
    cfg = load_config(getattr(args, "config", None))
    llm = dict(cfg.get("llm") or {})
    for k in keys:
        v = getattr(args, k, None)
        if v is not None and v is not False:
            cfg[k] = v
    if getattr(args, "endpoint", None):
        llm["base_url"] = args.endpoint
    if getattr(args, "model", None):
        llm["model"] = args.model
    cfg["llm"] = llm
    seeds = cfg.get("seed", 0)
    cfg["seed"] = [int(s) for s in (seeds if isinstance(seeds, list) else [seeds])]
    return cfg


def build_scenario(cfg: dict) -> tuple[ScenarioSpec, RunOptions]:
    name = cfg.get("scenario")
    if not name:
        raise UsageError("--scenario is required")
    spec = load_scenario(name)
    if cfg.get("variant"):
        spec = spec.variant(cfg["variant"])
    options = RunOptions()
    opts = dict(cfg.get("options") or {})
    try:
        if "dqn" in opts:
            opts["dqn"] = replace(options.dqn, **opts["dqn"]).validate()
        if "fixed_cycle" in opts:
            opts["fixed_cycle"] = tuple(opts["fixed_cycle"])
        options = replace(options, **opts)
        if cfg.get("fast"):
            spec, options = fast_profile(spec, options)
        if cfg.get("sim"):
            spec = spec.with_updates(sim=spec.sim.with_updates(**cfg["sim"]))
        if cfg.get("run"):
            spec = spec.with_updates(**{k: int(v) for k, v in cfg["run"].items()})
        if cfg.get("steps"):
            spec = spec.with_updates(run_length=int(cfg["steps"]))
    except TypeError as exc:
        raise UsageError(f"bad configuration key: {exc}") from exc
    return spec.validate(), options


def llm_config(cfg: dict) -> LLMConfig:
    fields = {k: v for k, v in cfg.get("llm", {}).items() if k in LLMConfig.__dataclass_fields__}
    return LLMConfig(**fields)


def _progress(line: str) -> None:
    print(line, flush=True)


def _default_out(label: str) -> Path:
    return Path("runs") / f"{label}-{time.strftime('%Y%m%d-%H%M%S')}"


def _run_dirs(out: Path, seeds: Sequence[int]) -> list[Path]:
    return [out] if len(seeds) == 1 else [out / f"seed{s}" for s in seeds]


def _tally_tokens(manifest: RunManifest, dirs: Sequence[Path], cfg: dict) -> None:
    pt = ct = n = 0
    for d in dirs:
        path = d / "annotations.jsonl"
        if not path.exists():
            continue
        for ln in path.read_text().splitlines():
            if ln.strip():
                e = json.loads(ln)
                pt += e.get("prompt_tokens") or 0
                ct += e.get("completion_tokens") or 0
                n += 1
    manifest.prompt_tokens, manifest.completion_tokens, manifest.requests = pt, ct, n
    price_in = cfg.get("llm", {}).get("price_input_per_mtok")
    price_out = cfg.get("llm", {}).get("price_output_per_mtok")
    if price_in is not None and price_out is not None:
        manifest.cost_usd = (pt * price_in + ct * price_out) / 1e6


# ---------------------------------------------------------------- commands


def cmd_train(args: argparse.Namespace) -> int:
    if args.resume:
        return _resume(args)
    cfg = resolve(args, ("scenario", "variant", "annotator", "seed", "steps", "fast", "out"))
    cfg.setdefault("annotator", "oracle")
    if cfg["annotator"] not in ("oracle", "llm"):
        raise UsageError(f"unknown annotator {cfg['annotator']!r}")
    spec, options = build_scenario(cfg)
    out = Path(cfg.get("out") or _default_out(f"rlaif-{spec.name}"))
    manifest = RunManifest(command=sys.argv[:], config=cfg, seeds=cfg["seed"], git=git_describe(),
                           annotator=cfg["annotator"], profile=options.profile)
    dirs = _run_dirs(out, cfg["seed"])
    manifest.runs = [str(d) for d in dirs]
    manifest.write(out)
    status = EXIT_OK
    try:
        for s, d in zip(cfg["seed"], dirs):
            annotator = make_annotator(cfg["annotator"], spec, llm_config(cfg))
            res = Run(spec, mode="rlaif", seed=s, options=options, annotator=annotator, run_dir=d).run(_progress)
            _progress(f"seed {s}: final {json.dumps(res.final)} -> {d}")
        manifest.status = "finished"
    except AnnotatorUnavailable as exc:
        manifest.status = "annotator_unavailable"
        print(f"error: annotator unreachable ({exc}). Check --endpoint and the {llm_config(cfg).api_key_env} "
              f"variable, then continue with `rlaif-tsc train --resume <run dir>`.", file=sys.stderr)
        status = EXIT_RUNTIME
    finally:
        manifest.finished = time.time()
        _tally_tokens(manifest, dirs, cfg)
        if manifest.status == "running":
            manifest.status = "failed"
        manifest.write(out)
    return status


def _resume(args: argparse.Namespace) -> int:
    run_dir = Path(args.resume)
    if not (run_dir / "checkpoint.pkl").exists():
        raise UsageError(f"{run_dir} holds no checkpoint to resume")
    cfg = resolve(args, ())
    live = None
    if cfg["llm"]:
        run = Run.resume(run_dir)
        live = make_annotator("llm", run.spec, llm_config(cfg))
    run = Run.resume(run_dir, live)
    if run.finished:
        print(f"{run_dir} already finished", file=sys.stderr)
        return EXIT_OK
    try:
        res = run.run(_progress)
    except AnnotatorUnavailable as exc:
        print(f"error: annotator unreachable ({exc}); checkpoint kept in {run_dir}", file=sys.stderr)
        return EXIT_RUNTIME
    _progress(f"final {json.dumps(res.final)} -> {run_dir}")
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace) -> int:
    cfg = resolve(args, ("scenario", "variant", "seed", "steps", "fast", "out", "kind", "alpha", "grid"))
    kind = cfg.get("kind")
    if kind not in BaselineSpec.KINDS:
        raise UsageError(f"--kind must be one of {', '.join(BaselineSpec.KINDS)}")
    spec, options = build_scenario(cfg)
    grid = bool(cfg.get("grid"))
    if grid and kind != "linear":
        raise UsageError("--grid only applies to --kind linear")
    if kind == "linear" and not grid and cfg.get("alpha") is None:
        raise UsageError("--kind linear needs --alpha or --grid")
    label = "linear_grid" if grid else BaselineSpec(kind, cfg.get("alpha")).label
    out = Path(cfg.get("out") or _default_out(f"{label}-{spec.name}"))
    manifest = RunManifest(command=sys.argv[:], config=cfg, seeds=cfg["seed"], git=git_describe(),
                           annotator=None, profile=options.profile)
    manifest.write(out)
    try:
        if grid:
            rows, alpha = grid_search_linear(spec, cfg["seed"], options, out_dir=out, progress=_progress)
            with open(out / "grid.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=("alpha", "throughput", "co2_rate", "selected"))
                w.writeheader()
                for r in rows:
                    w.writerow({**r, "selected": int(r["alpha"] == alpha)})
            _progress(f"selected alpha {alpha:.1f} -> {out / 'grid.csv'}")
            manifest.runs = [str(out / f"linear_{a:.1f}_seed{s}") for a in LINEAR_GRID for s in cfg["seed"]]
        else:
            b = BaselineSpec(kind, cfg.get("alpha"))
            dirs = _run_dirs(out, cfg["seed"])
            manifest.runs = [str(d) for d in dirs]
            for s, d in zip(cfg["seed"], dirs):
                res = run_baseline(spec, b, seed=s, options=options, run_dir=d, progress=_progress)
                _progress(f"seed {s}: final {json.dumps(res.final)} -> {d}")
        manifest.status = "finished"
    finally:
        manifest.finished = time.time()
        if manifest.status == "running":
            manifest.status = "failed"
        manifest.write(out)
    return EXIT_OK


def read_pair_file(path: str | Path) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"pair file {path} not found")
    items = []
    for n, ln in enumerate(p.read_text().splitlines(), 1):
        if not ln.strip():
            continue
        try:
            d = json.loads(ln)
            items.append({"request_id": d.get("request_id", f"pair-{n:05d}"),
                          "pair": (Segment.from_dict(d["sigma1"]), Segment.from_dict(d["sigma2"]))})
        except (KeyError, ValueError, TypeError) as exc:
            raise UsageError(f"{path}:{n}: malformed pair ({exc})") from exc
    return items


def write_pair_file(path: str | Path, pairs: Sequence[tuple[Segment, Segment]],
                    request_ids: Sequence[str] | None = None) -> None:
    ids = request_ids or [f"pair-{n:05d}" for n in range(len(pairs))]
    with open(path, "w") as fh:
        for rid, (a, b) in zip(ids, pairs):
            fh.write(json.dumps({"request_id": rid, "sigma1": a.to_dict(), "sigma2": b.to_dict()}) + "\n")


def agreement(a: Sequence[int], b: Sequence[int]) -> float:
    if len(a) != len(b) or not a:
        raise ValueError("label sequences must be non-empty and equally long")
    return sum(x == y for x, y in zip(a, b)) / len(a)


def cmd_annotate(args: argparse.Namespace) -> int:
    cfg = resolve(args, ("scenario", "variant", "annotator", "out"))
    cfg.setdefault("annotator", "oracle")
    spec, _ = build_scenario(cfg)
    items = read_pair_file(args.pairs)
    if not items:
        raise UsageError(f"{args.pairs} holds no pairs")
    pairs = [it["pair"] for it in items]
    ids = [it["request_id"] for it in items]
    annotator = make_annotator(cfg["annotator"], spec, llm_config(cfg))
    try:
        labels = annotator.annotate_pairs(pairs, ids)
    except AnnotatorUnavailable as exc:
        print(f"error: annotator unreachable ({exc})", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(cfg.get("out") or Path(args.pairs).with_suffix(".labels.jsonl"))
    with open(out, "w") as fh:
        for lab in labels:
            fh.write(json.dumps(lab.log_entry()) + "\n")
    counts = {y: sum(lab.y == y for lab in labels) for y in (0, 1, 2)}
    summary = {"pairs": len(labels), "labels": counts, "out": str(out)}
    if args.compare:
        ref = OracleAnnotator(spec.oracle).annotate_pairs(pairs, ids) if args.compare == "oracle" else \
            make_annotator("llm", spec, llm_config(cfg)).annotate_pairs(pairs, ids)
        summary["agreement"] = {"with": args.compare,
                                "rate": agreement([l.y for l in labels], [r.y for r in ref])}
    print(json.dumps(summary), flush=True)
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(x: str) -> float:
    return float(x) if x not in ("", None) else float("nan")


def summarize_run(run_dir: Path, window: int = 5) -> dict:
    """Final-window and session summary for one run directory."""
    rows = _read_csv(run_dir / "metrics.csv")
    train = [r for r in rows if r["kind"] == "train"]
    evals = [r for r in rows if r["kind"] == "eval"]
    sessions = _read_csv(run_dir / "sessions.csv")
    out: dict = {"run": str(run_dir), "label": None, "train_rows": len(train), "sessions": len(sessions)}
    summary = run_dir / "summary.json"
    if summary.exists():
        out["label"] = json.loads(summary.read_text()).get("label")
    if evals:
        last = evals[-1]
        out["final"] = {k: _num(last[k]) for k in ("step", "throughput", "co2_rate", "ns_share", "queue")}
    if train:
        tail = train[-window:]
        out["final_window"] = {k: float(np.mean([_num(r[k]) for r in tail]))
                               for k in ("throughput", "co2_rate", "ns_share", "queue")}
    if sessions:
        req = sum(int(s["requested"]) for s in sessions)
        filt = sum(int(s["filtered"]) for s in sessions)
        out["annotations"] = {"requested": req, "stored": sum(int(s["stored"]) for s in sessions),
                              "filtered": filt, "filter_rate": filt / req if req else 0.0}
    return out


def cmd_report(args: argparse.Namespace) -> int:
    root = Path(args.run_dir)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    candidates = [root] + sorted(p for p in root.iterdir() if p.is_dir())
    dirs = [d for d in candidates if (d / "metrics.csv").exists()]
    if not dirs:
        raise UsageError(f"{root} contains no run output (metrics.csv)")
    reports = [summarize_run(d, args.window) for d in dirs]
    manifest = root / "manifest.json"
    doc = {"runs": reports}
    if manifest.exists():
        m = json.loads(manifest.read_text())
        doc["cost"] = {k: m.get(k) for k in ("prompt_tokens", "completion_tokens", "requests", "cost_usd")}
    if args.json:
        print(json.dumps(doc, indent=2))
        return EXIT_OK
    head = f"{'run':<40} {'thr':>7} {'co2':>8} {'ns':>6} {'win thr':>8} {'win co2':>8} {'sess':>5} {'filter':>7}"
    print(head)
    for r in reports:
        f = r.get("final", {})
        w = r.get("final_window", {})
        a = r.get("annotations", {})
        print(f"{Path(r['run']).name or r['run']:<40} {f.get('throughput', float('nan')):>7.3f} "
              f"{f.get('co2_rate', float('nan')):>8.2f} {f.get('ns_share', float('nan')):>6.3f} "
              f"{w.get('throughput', float('nan')):>8.3f} {w.get('co2_rate', float('nan')):>8.2f} "
              f"{r['sessions']:>5d} {a.get('filter_rate', float('nan')):>7.3f}")
    if "cost" in doc:
        c = doc["cost"]
        print(f"tokens: prompt {c['prompt_tokens']} completion {c['completion_tokens']} "
              f"requests {c['requests']} cost {c['cost_usd']}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rlaif-tsc", description="Preference-based traffic signal control experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, annotator=True):
        sp.add_argument("--scenario", help="shipped scenario name or path to a scenario YAML")
        sp.add_argument("--variant", help="user-specification variant of the scenario")
        sp.add_argument("--config", help="YAML config; flags override its values")
        sp.add_argument("--out", help="output directory")
        if annotator:
            sp.add_argument("--annotator", choices=("llm", "oracle"))
            sp.add_argument("--endpoint", help="base URL of an OpenAI-compatible API, e.g. http://localhost:8000/v1")
            sp.add_argument("--model")

    t = sub.add_parser("train", help="RLAIF training run")
    common(t)
    t.add_argument("--seed", type=int, nargs="+")
    t.add_argument("--steps", type=int, help="override the run length in env steps")
    t.add_argument("--fast", action="store_true", help="short episodes and a 20k-step run")
    t.add_argument("--resume", metavar="RUN_DIR", help="continue a halted run from its checkpoint")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("baseline", help="programmatic-reward baselines")
    common(b, annotator=False)
    b.add_argument("--kind", choices=BaselineSpec.KINDS)
    b.add_argument("--alpha", type=float)
    b.add_argument("--grid", action="store_true", help="sweep alpha over 0.1..0.9")
    b.add_argument("--seed", type=int, nargs="+")
    b.add_argument("--steps", type=int)
    b.add_argument("--fast", action="store_true")
    b.set_defaults(func=cmd_baseline)

    a = sub.add_parser("annotate", help="label a file of serialized segment pairs")
    common(a)
    a.add_argument("pairs", help="JSONL file with sigma1/sigma2 segments per line")
    a.add_argument("--compare", choices=("oracle", "llm"), help="report agreement with another annotator")
    a.set_defaults(func=cmd_annotate)

    r = sub.add_parser("report", help="summarize a run directory")
    r.add_argument("run_dir")
    r.add_argument("--window", type=int, default=5, help="training log rows in the final window")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunHalted as exc:
        print(f"halted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
