"""``kneecut`` command-line harness.

Exit codes: 0 success, 2 config error, 3 validation violations, 4 backend abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .backends import RemoteBackend, make_backend
from .config import SCHEMA_VERSION, ConfigError, load_yaml
from .decoding import DecodeConfig, SafetyContext, validate_sequence
from .evaluation import EvalConfig, aggregate, score_episode
from .grammar import GrammarConfig, GrammarError, Primitive, decode_tokens, load_grammar_config
from .jsonl import read_jsonl, write_jsonl
from .sim import EpisodeResult, load_model, load_noise, model_from_dict, run_episode
from .synth import SynthConfig, generate_episode
from .timeline import (DEFAULT_MAX_STALENESS_US, GRID_STEP_US, ReferenceGrid, align_episode,
                       detect_dropouts, records_from_aligned, streams_from_records)

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION, EXIT_ABORT = 0, 2, 3, 4

@dataclasses.dataclass(frozen=True)
class RunConfig:
    plan: str | None
    grammar: str | None
    noise: str
    out: Path
    seed: int
    runs: int
    decode: DecodeConfig
    backend: str
    endpoint: str | None = None
    timeout_s: float = 5.0
    retries: int = 3
    budget: int = 512
    samples: int = 2048
    jobs: int = 1

    @classmethod
    def from_args(cls, a: argparse.Namespace) -> "RunConfig":
        for label, p in (("plan", a.plan), ("grammar", a.grammar)):
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{label} file not found", p)
        if a.runs < 1 or a.budget < 1 or a.jobs < 1:
            raise ConfigError("--runs, --budget and --jobs must be >= 1")
        if a.backend == "remote" and not a.endpoint:
            raise ConfigError("--backend remote needs --endpoint")
        try:
            dec = DecodeConfig(mode=a.decode_mode, seed=a.seed, temperature=a.temperature, top_p=a.top_p)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(plan=a.plan, grammar=a.grammar, noise=a.noise, out=Path(a.out), seed=a.seed, runs=a.runs,
                   decode=dec, backend=a.backend, endpoint=a.endpoint, timeout_s=a.timeout_ms / 1000.0,
                   retries=a.retries, budget=a.budget, samples=a.samples, jobs=a.jobs)


def _out_dir(path: str | Path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory: {exc.strerror}", p) from exc
    return p


# ---------------------------------------------------------------------------
# gen-data

def cmd_gen_data(a: argparse.Namespace) -> int:
    grammar = load_grammar_config(a.grammar)
    model = load_model(a.plan)
    try:
        cfg = SynthConfig(seed=a.seed, gaps=a.gaps, gap_ms=a.gap_ms, tracking_sigma_mm=a.tracking_sigma)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(a.out)
    for e in range(a.episodes):
        path = out / f"raw_{e:04d}.jsonl"
        write_jsonl(path, generate_episode(model, grammar, e, cfg))
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# resample

def _staleness_overrides(a: argparse.Namespace) -> dict[str, int]:
    out = {}
    for item in a.max_staleness or []:
        key, sep, ms = item.rpartition("=")
        try:
            val = int(round(float(ms) * 1000))
        except ValueError:
            raise ConfigError(f"bad --max-staleness {item!r}; expected [KIND=]MS") from None
        if not sep:
            out.update(pose=val, robot_state=val, frame=val)
        else:
            out[key] = val
    return out


def resample_file(src: Path, dst: Path, step_us: int, bounds: dict[str, int],
                  grammar: GrammarConfig | None = None) -> dict[str, Any]:
    header, recs = read_jsonl(src)
    grammar = grammar or load_grammar_config(None)
    if header.get("kind") == "aligned_episode":
        raw = records_from_aligned(r for r in recs if "streams" in r) + list(header.get("events", []))
        grid = ReferenceGrid(header["epoch_us"], header["length"], header["step_us"])
        if step_us != grid.step_us:
            grid = ReferenceGrid.covering(grid.epoch_us, grid.times[-1], step_us)
        bounds = {**header.get("max_staleness_us", {}), **bounds}
        dropouts = header.get("dropouts", {})
    else:
        raw = recs
        grid = None
        dropouts = None
    streams = streams_from_records(raw)
    if grid is None:
        epoch = int(header.get("epoch_us", min(int(s.timestamps[0]) for s in streams if len(s))))
        end = max(int(s.timestamps[-1]) for s in streams if len(s))
        grid = ReferenceGrid.covering(epoch, end, step_us)
    limits = {**DEFAULT_MAX_STALENESS_US, **bounds}
    if dropouts is None:
        dropouts = {}
        for s in streams:
            if s.kind == "event":
                continue
            lim = limits.get(s.stream_id, limits.get(s.kind, limits["pose"]))
            dropouts[s.stream_id] = [list(g) for g in detect_dropouts(s, lim)]
    frames = align_episode(streams, grid, grammar, limits)
    events = [{"stream": s.stream_id, "t_us": int(t), "payload": p}
              for s in streams if s.kind == "event" for t, p in zip(s.timestamps, s.payloads)]
    out_header = {
        "schema_version": SCHEMA_VERSION, "kind": "aligned_episode",
        "episode_id": header.get("episode_id"), "epoch_us": grid.epoch_us, "step_us": grid.step_us,
        "length": grid.length, "max_staleness_us": limits, "dropouts": dropouts,
        "gaps": header.get("gaps", []), "events": events,
        "degraded": sum(f.degraded for f in frames),
    }
    write_jsonl(dst, [out_header] + [f.to_record() for f in frames])
    return out_header


def _inputs(paths: Sequence[str], pattern: str) -> list[Path]:
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(p.glob(pattern))
        elif p.is_file():
            files.append(p)
        else:
            raise ConfigError("input not found", p)
    if not files:
        raise ConfigError(f"no input files matching {pattern}")
    return files


def cmd_resample(a: argparse.Namespace) -> int:
    if a.step_ms <= 0:
        raise ConfigError("--step-ms must be positive")
    step_us = int(round(a.step_ms * 1000))
    bounds = _staleness_overrides(a)
    grammar = load_grammar_config(a.grammar)
    out = _out_dir(a.out)
    for src in _inputs(a.inputs, "*.jsonl"):
        hdr = resample_file(src, out / src.name, step_us, bounds, grammar)
        injected = {(g["stream"], g["prev_us"], g["next_us"]) for g in hdr["gaps"]}
        found = {(sid, p, n) for sid, gs in hdr["dropouts"].items() for p, n in gs}
        for sid, p, n in sorted(found):
            print(f"{src.name}\tdropout\t{sid}\t{p}\t{n}\t{(n - p) / 1000:.1f} ms")
        if hdr["gaps"]:
            print(f"{src.name}\tinjected gaps recovered: {injected <= found} "
                  f"({len(injected & found)}/{len(injected)})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(a: argparse.Namespace) -> int:
    rc = RunConfig.from_args(a)
    grammar = load_grammar_config(rc.grammar)
    model = load_model(rc.plan, samples=rc.samples, patch_seed=rc.seed)
    noise = dataclasses.replace(load_noise(rc.noise), seed=rc.seed)  # --seed drives every stream
    try:
        backend = make_backend(rc.backend, grammar, rc.seed, rc.endpoint, rc.timeout_s, rc.retries)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if isinstance(backend, RemoteBackend):
        backend.max_in_flight = max(backend.max_in_flight, rc.jobs)
    out = _out_dir(rc.out)

    def one(e: int) -> EpisodeResult:
        res = run_episode(backend, model, noise, rc.decode, rc.budget, grammar, episode_id=e)
        write_jsonl(out / f"episode_{e:04d}.jsonl", res.to_records(model))
        return res

    if rc.jobs > 1:
        with ThreadPoolExecutor(rc.jobs) as pool:
            results = list(pool.map(one, range(rc.runs)))
    else:
        results = [one(e) for e in range(rc.runs)]

    with open(out / "timing.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["episode", "status", "steps", "policy_ms_mean", "decode_ms_mean", "decode_ms_max"])
        for r in results:
            t = np.array(r.timings).reshape(-1, 2)
            pm, dm = (t.mean(axis=0) if len(t) else (np.nan, np.nan))
            w.writerow([r.episode_id, r.status, len(t), f"{pm:.4f}", f"{dm:.4f}",
                        f"{t[:, 1].max() if len(t) else np.nan:.4f}"])
    all_t = np.concatenate([np.array(r.timings).reshape(-1, 2) for r in results])
    aborted = [r for r in results if r.aborted]
    for r in results:
        cut = sum(r.planes_cut)
        flag = f" ABORTED: {r.abort_reason}" if r.aborted else ""
        print(f"episode {r.episode_id:4d} {r.status:9s} planes cut {cut}/{len(r.planes_cut)} "
              f"p={r.path_length:.2f} l={r.shortest_path:.2f} mm{flag}")
    if len(all_t):
        print(f"mean per-step decode {all_t[:, 1].mean():.4f} ms, policy {all_t[:, 0].mean():.4f} ms "
              f"over {len(all_t)} steps")
    if aborted:
        print(f"{len(aborted)} episode(s) aborted by the backend", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

def load_results(directory: str | Path) -> list[tuple[dict, EpisodeResult]]:
    files = sorted(Path(directory).glob("episode_*.jsonl"))
    if not files:
        raise ConfigError("no episode_*.jsonl files", directory)
    out = []
    for p in files:
        header, recs = read_jsonl(p)
        if header.get("kind") != "episode_result":
            raise ConfigError("not an episode result file", p, 1)
        out.append((header, EpisodeResult.from_records(header, recs)))
    return out


def cmd_evaluate(a: argparse.Namespace) -> int:
    try:
        cfg = EvalConfig(delta=a.delta, samples=a.samples if a.samples is not None else 2048,
                         runs=a.runs if a.runs is not None else 7)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    loaded = load_results(a.results)
    if a.runs is not None:
        if len(loaded) < a.runs:
            raise ConfigError(f"--runs {a.runs} but only {len(loaded)} episodes found", a.results)
        loaded = loaded[: a.runs]
    if a.plan is not None:
        plan = load_model(a.plan).plan
    elif "model" in loaded[0][0]:
        plan = model_from_dict(loaded[0][0]["model"]).plan
    else:
        plan = load_model(None).plan
    scores = [score_episode(r, plan, cfg, samples=a.samples) for _, r in loaded]
    report = aggregate(scores, plan.names, cfg, label=a.label)
    out = _out_dir(a.out if a.out else a.results)
    (out / "table1.csv").write_text(report.to_csv(1))
    (out / "table2.csv").write_text(report.to_csv(2))
    (out / "report.json").write_text(report.to_json() + "\n")
    with open(out / "episodes.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["episode", "success", "aborted", "mean_deviation_mm", "path_length_mm",
                    "shortest_path_mm", "spl_term", *plan.names])
        for s in scores:
            w.writerow([s.episode_id, s.success, int(s.aborted), f"{s.mean_deviation:.6f}",
                        f"{s.path_length:.6f}", f"{s.shortest_path:.6f}", f"{s.spl_term:.6f}",
                        *(f"{c:.6f}" for c in s.chamfers)])
    print(f"SR per plane (cut and own Chamfer <= {cfg.delta} mm):")
    print(report.to_csv(1), end="")
    print("SPL per plane (mean ± SD):")
    print(report.to_csv(2), end="")
    print(f"episode SR (six-plane mean <= {cfg.delta} mm): "
          f"{report.to_dict()['episode_sr']['text']}; episode SPL {report.to_dict()['episode_spl']['text']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate / decode

def read_tokens(path: str | Path) -> tuple[list[int], dict]:
    """Tokens from an episode result, a raw episode, a JSON list or ``{"tokens": [...]}``."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read: {exc.strerror}", p) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        header, _ = read_jsonl(p)
        data = header
    if isinstance(data, list):
        return [int(t) for t in data], {}
    if isinstance(data, dict) and "tokens" in data:
        return [int(t) for t in data["tokens"]], data
    raise ConfigError("no token array found", p, 1)


def _context_for(header: dict, plan_path):
    if plan_path is not None:
        model = load_model(plan_path)
    elif "model" in header:
        model = model_from_dict(header["model"])
    else:
        model = load_model(None)
    return SafetyContext.fresh(model.plan, model.initial_tool_pose)


def cmd_validate(a: argparse.Namespace) -> int:
    grammar = load_grammar_config(a.grammar)
    bad = 0
    for p in _inputs(a.inputs, "*.jsonl"):
        tokens, header = read_tokens(p)
        v = validate_sequence(tokens, _context_for(header, a.plan), grammar, require_complete=a.strict)
        if v is None:
            print(f"{p}\tok\t{len(tokens)} tokens")
        else:
            bad += 1
            name = grammar.vocab.token_name(tokens[v.index]) if v.index < len(tokens) else "<end>"
            print(f"{p}\tviolation\tindex {v.index}\t{v.rule}\t{name}\t{v.detail}")
    return EXIT_VIOLATION if bad else EXIT_OK


def cmd_decode(a: argparse.Namespace) -> int:
    grammar = load_grammar_config(a.grammar)
    tokens, _ = read_tokens(a.input)
    try:
        cmds = decode_tokens(tokens, grammar.vocab)
    except GrammarError as exc:
        print(f"{a.input}: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    names = load_model(a.plan).plan.names
    for k, c in enumerate(cmds):
        vals = [f"{v:.4g}" for v in c.values(grammar)]
        if c.primitive == Primitive.ALIGN:
            vals[0] = names[c.bins[0]] if c.bins[0] < len(names) else f"reserved {c.bins[0]}"
        print(f"{k:3d} {c.primitive.value:5s} bins={list(c.bins)} ({', '.join(vals)})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kneecut", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, plan=True):
        if plan:
            p.add_argument("--plan", help="resection plan YAML (default: shipped plan)")
        p.add_argument("--grammar", help="grammar YAML (default: shipped grammar)")

    g = sub.add_parser("gen-data", help="write synthetic raw episodes")
    common(g)
    g.add_argument("--episodes", type=int, default=7)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--gaps", type=int, default=1, help="dropouts injected per episode")
    g.add_argument("--gap-ms", type=float, default=500.0)
    g.add_argument("--tracking-sigma", type=float, default=0.0, help="tracker noise, mm")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("resample", help="align raw streams to the reference grid")
    r.add_argument("inputs", nargs="+", help="episode files or directories")
    r.add_argument("--step-ms", type=float, default=GRID_STEP_US / 1000)
    r.add_argument("--max-staleness", action="append", metavar="[KIND=]MS",
                   help="staleness bound in ms, per kind or stream id (repeatable)")
    r.add_argument("--grammar", help="grammar YAML (default: shipped grammar)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_resample)

    s = sub.add_parser("simulate", help="run episodes on the bench simulator")
    common(s)
    s.add_argument("--config", help="YAML file whose keys provide defaults for these flags")
    s.add_argument("--noise", default="0", help="pose jitter sigma in mm, or a noise YAML file")
    s.add_argument("--runs", type=int, default=7)
    s.add_argument("--backend", choices=("oracle", "random", "remote"), default="oracle")
    s.add_argument("--endpoint", help="tcp://host:port or http://host:port/path")
    s.add_argument("--timeout-ms", type=float, default=5000.0)
    s.add_argument("--retries", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--decode-mode", choices=("greedy", "temperature", "top_p"), default="greedy")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--top-p", type=float, default=0.9)
    s.add_argument("--budget", type=int, default=512, help="token budget per episode")
    s.add_argument("--samples", type=int, default=2048, help="points per surface patch")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="SR/SPL tables from episode results")
    e.add_argument("results")
    e.add_argument("--plan", help="override the plan embedded in the results")
    e.add_argument("--delta", type=float, default=1.5, help="success threshold, mm")
    e.add_argument("--samples", type=int, help="planned-patch samples (default: as simulated)")
    e.add_argument("--runs", type=int, help="use the first N episodes")
    e.add_argument("--label", default="policy")
    e.add_argument("--out", help="report directory (default: results dir)")
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("validate", help="check token sequences against grammar and safety rules")
    v.add_argument("inputs", nargs="+")
    common(v)
    v.add_argument("--strict", action="store_true", help="treat a truncated final command as a violation")
    v.set_defaults(func=cmd_validate)

    d = sub.add_parser("decode", help="print the commands in a token file")
    d.add_argument("input")
    common(d)
    d.set_defaults(func=cmd_decode)
    return ap


def _apply_config_file(ap: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = ap.parse_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return args
    data = load_yaml(path)
    sub = ap._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    known = {a.dest for a in sub._actions}  # noqa: SLF001
    unknown = sorted(k for k in data if k.replace("-", "_") not in known)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}", path)
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in data.items()})
    return ap.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config_file(ap, argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
