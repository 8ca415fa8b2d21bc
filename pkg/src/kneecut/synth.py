"""Synthetic raw episodes: tracked poses, robot state, frame references and command events.

Streams follow a noiseless oracle run of the bench model. Timestamps are
``epoch + round(k * 1e6 / rate)`` so rates are exact up to microsecond
rounding. Dropouts are injected by deleting samples; the header records
each gap as the pair of kept samples around it, which is exactly what
:func:`kneecut.timeline.detect_dropouts` should report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .config import SCHEMA_VERSION
from .geometry import SE3Transform, compose
from .grammar import GrammarConfig, encode_command
from .timeline import infer_kind
from .sim import NoiseModel, ProsthesisModel, SimState, apply_action, oracle_commands, robot_state

DEFAULT_RATES_HZ = {"pose": 60.0, "robot_state": 120.0, "frame": 30.0}
POSE_STREAMS = ("pose/end_effector", "pose/femur", "pose/tibia")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    epoch_us: int = 1_700_000_000_000_000
    rates_hz: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_RATES_HZ))
    lead_s: float = 1.0  # idle time before the first and after the last command
    gaps: int = 1  # injected dropouts per episode
    gap_ms: float = 500.0
    tracking_sigma_mm: float = 0.0

    def __post_init__(self):
        for k, r in self.rates_hz.items():
            if r <= 0:
                raise ValueError(f"rate for {k} must be positive")
        if self.gaps < 0 or self.gap_ms <= 0:
            raise ValueError("gap count must be >= 0 and gap length > 0")


def sample_times(epoch_us: int, rate_hz: float, duration_us: int) -> np.ndarray:
    n = int(np.floor(duration_us * rate_hz / 1e6)) + 1
    return epoch_us + np.round(np.arange(n) * 1e6 / rate_hz).astype(np.int64)


def tool_keyframes(model: ProsthesisModel, grammar: GrammarConfig, lead_s: float):
    """Times (s), tool poses and command start times of a noiseless oracle run."""
    state = SimState.initial(model)
    rng = np.random.default_rng(0)  # unused with zero noise
    noise = NoiseModel()
    times, poses, starts = [0.0, lead_s], [state.tool_pose, state.tool_pose], []
    cmds = oracle_commands(model, grammar)
    for cmd in cmds:
        t0 = lead_s + state.exec_time
        starts.append(t0)
        state, _ = apply_action(state, cmd, model, noise, rng, grammar)
        times.append(lead_s + state.exec_time)
        poses.append(state.tool_pose)
    times.append(times[-1] + lead_s)
    poses.append(state.tool_pose)
    return np.array(times), poses, cmds, starts


def _interp_poses(times: np.ndarray, poses: list[SE3Transform], query: np.ndarray) -> list[SE3Transform]:
    # drop zero-length segments so interpolation is well defined
    keep = np.concatenate([[True], np.diff(times) > 0])
    t = times[keep]
    P = [p for p, k in zip(poses, keep) if k]
    trans = np.stack([p.translation for p in P])
    quats = np.stack([p.rotation for p in P])
    rots = Rotation.from_quat(quats[:, [1, 2, 3, 0]])
    qc = np.clip(query, t[0], t[-1])
    slerp = Slerp(t, rots)
    qout = slerp(qc).as_quat()[:, [3, 0, 1, 2]]
    tout = np.stack([np.interp(qc, t, trans[:, i]) for i in range(3)], axis=1)
    return [SE3Transform(q, x) for q, x in zip(qout, tout)]


def _inject_gaps(t: np.ndarray, rng: np.random.Generator, n: int, gap_us: int,
                 margin_us: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    keep = np.ones(len(t), dtype=bool)
    gaps: list[tuple[int, int]] = []
    lo, hi = t[0] + margin_us, t[-1] - margin_us - gap_us
    if n == 0 or hi <= lo:
        return keep, gaps
    # one gap per equal slot so gaps never overlap
    edges = np.linspace(lo, hi, n + 1)
    for a, b in zip(edges[:-1], edges[1:]):
        start = int(rng.integers(int(a), max(int(a) + 1, int(b) - gap_us)))
        inside = (t > start) & (t < start + gap_us)
        if not inside.any():
            continue
        keep &= ~inside
        first = int(np.flatnonzero(inside)[0])
        last = int(np.flatnonzero(inside)[-1])
        gaps.append((int(t[first - 1]), int(t[last + 1])))
    return keep, gaps


def generate_episode(model: ProsthesisModel, grammar: GrammarConfig, episode_id: int,
                     cfg: SynthConfig = SynthConfig()) -> list[dict[str, Any]]:
    """Header plus ``{stream, t_us, payload}`` records sorted by time then stream."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, episode_id]))
    key_t, key_p, cmds, starts = tool_keyframes(model, grammar, cfg.lead_s)
    duration_us = int(round(key_t[-1] * 1e6))
    epoch = cfg.epoch_us
    vocab = grammar.vocab

    streams: dict[str, tuple[np.ndarray, list[Any]]] = {}
    pose_t = sample_times(epoch, cfg.rates_hz["pose"], duration_us)
    rel_s = (pose_t - epoch) / 1e6
    tool = _interp_poses(key_t, key_p, rel_s)
    femur = model.femur_in_camera
    tibia = compose(femur, model.tibia_in_femur)
    for sid in POSE_STREAMS:
        obj = sid.split("/", 1)[1]
        payloads = []
        for k in range(len(pose_t)):
            if obj == "end_effector":
                T = compose(femur, tool[k])
            else:
                T = femur if obj == "femur" else tibia
            if cfg.tracking_sigma_mm > 0:
                T = SE3Transform(T.rotation, T.translation + rng.normal(0.0, cfg.tracking_sigma_mm, 3))
            payloads.append(T.to_dict())
        streams[sid] = (pose_t, payloads)

    rs_t = sample_times(epoch, cfg.rates_hz["robot_state"], duration_us)
    rs_tool = _interp_poses(key_t, key_p, (rs_t - epoch) / 1e6)
    q = np.stack([robot_state(p, grammar.n_joints) for p in rs_tool])
    dt = 1.0 / cfg.rates_hz["robot_state"]
    qd = np.vstack([np.zeros((1, q.shape[1])), np.diff(q, axis=0) / dt])
    streams["robot/state"] = (rs_t, [{"q": a.tolist(), "qd": b.tolist(), "tau": [0.0] * grammar.n_joints}
                                     for a, b in zip(q, qd)])

    fr_t = sample_times(epoch, cfg.rates_hz["frame"], duration_us)
    streams["frame/rgbd"] = (fr_t, [{"frame_id": k, "uri": f"rgbd/{episode_id:04d}/{k:06d}.png"}
                                    for k in range(len(fr_t))])

    gap_records = []
    gap_us = int(round(cfg.gap_ms * 1000))
    targets = sorted(streams)
    counts = np.bincount(rng.integers(len(targets), size=cfg.gaps), minlength=len(targets))
    for sid, n in zip(targets, counts):
        if n == 0:
            continue
        t, p = streams[sid]
        keep, gaps = _inject_gaps(t, rng, int(n), gap_us, margin_us=int(cfg.lead_s * 1e6 / 2))
        streams[sid] = (t[keep], [x for x, k in zip(p, keep) if k])
        gap_records += [{"stream": sid, "prev_us": a, "next_us": b} for a, b in gaps]

    ev_t = epoch + np.round(np.array(starts) * 1e6).astype(np.int64)
    for i in range(1, len(ev_t)):  # zero-length commands still need distinct stamps
        ev_t[i] = max(ev_t[i], ev_t[i - 1] + 1)
    streams["event/command"] = (ev_t, [{"index": k, "primitive": c.primitive.value, "bins": list(c.bins),
                                        "tokens": encode_command(c, vocab)} for k, c in enumerate(cmds)])

    header = {
        "schema_version": SCHEMA_VERSION, "kind": "raw_episode", "episode_id": episode_id,
        "seed": cfg.seed, "epoch_us": epoch, "duration_us": duration_us,
        "rates_hz": {sid: cfg.rates_hz[infer_kind(sid)] for sid in streams if infer_kind(sid) != "event"},
        "gaps": sorted(gap_records, key=lambda r: (r["stream"], r["prev_us"])),
        "tokens": [tok for c in cmds for tok in encode_command(c, vocab)] + [vocab.control("EOS")],
    }
    rows = [(int(t), sid, p) for sid, (ts, ps) in streams.items() for t, p in zip(ts, ps)]
    rows.sort(key=lambda r: (r[0], r[1]))
    return [header] + [{"stream": sid, "t_us": t, "payload": p} for t, sid, p in rows]
