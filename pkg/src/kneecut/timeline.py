"""Zero-order-hold alignment of heterogeneous streams onto a 25 ms grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .geometry import OBJECTS, PoseGraph, SE3Transform, compose, invert
from .grammar import GrammarConfig, QuantSpec, encode_robot_state, quantize_array

log = logging.getLogger(__name__)

GRID_STEP_US = 25_000
# defaults per payload kind; events are sparse and never required
DEFAULT_MAX_STALENESS_US = {"pose": 100_000, "robot_state": 100_000, "frame": 250_000}


@dataclass(frozen=True, eq=False)
class StampedStream:
    stream_id: str
    kind: str  # "pose" | "robot_state" | "frame" | "event"
    timestamps: np.ndarray  # int64 microseconds, strictly increasing
    payloads: Sequence[Any]
    rate_hz: float | None = None

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=np.int64)
        if t.ndim != 1 or len(t) != len(self.payloads):
            raise ValueError(f"stream {self.stream_id}: timestamps and payloads differ in length")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError(f"stream {self.stream_id}: timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", t)

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass(frozen=True)
class ReferenceGrid:
    epoch_us: int
    length: int
    step_us: int = GRID_STEP_US

    def __post_init__(self):
        if self.step_us <= 0:
            raise ValueError("grid step must be positive")
        if self.length < 0:
            raise ValueError("grid length must be >= 0")

    @property
    def times(self) -> np.ndarray:
        return self.epoch_us + np.arange(self.length, dtype=np.int64) * self.step_us

    @classmethod
    def covering(cls, start_us: int, end_us: int, step_us: int = GRID_STEP_US) -> "ReferenceGrid":
        """Grid anchored at ``start_us`` with every point ``<= end_us``."""
        return cls(int(start_us), int((end_us - start_us) // step_us) + 1, step_us)


@dataclass(frozen=True, eq=False)
class ResampledStream:
    stream: StampedStream
    grid: ReferenceGrid
    source_index: np.ndarray  # -1 where missing
    staleness_us: np.ndarray  # -1 where no earlier sample exists
    missing: np.ndarray

    def source_times(self) -> np.ndarray:
        out = np.full(self.grid.length, -1, dtype=np.int64)
        ok = self.source_index >= 0
        out[ok] = self.stream.timestamps[self.source_index[ok]]
        return out

    def payload(self, k: int) -> Any:
        i = self.source_index[k]
        return None if i < 0 else self.stream.payloads[i]


def resample(stream: StampedStream, grid: ReferenceGrid, max_staleness_us: int) -> ResampledStream:
    """Hold the latest sample with timestamp ``<=`` each grid time.

    Grid points whose latest sample is older than ``max_staleness_us`` (or
    that precede the first sample) are marked missing.
    """
    times = grid.times
    if len(stream) == 0:
        log.warning("stream %s is empty; all %d grid points missing", stream.stream_id, grid.length)
        neg = np.full(grid.length, -1, dtype=np.int64)
        return ResampledStream(stream, grid, neg, neg.copy(), np.ones(grid.length, dtype=bool))
    idx = np.searchsorted(stream.timestamps, times, side="right") - 1
    staleness = np.where(idx >= 0, times - stream.timestamps[np.maximum(idx, 0)], -1)
    missing = (idx < 0) | (staleness > max_staleness_us)
    src = np.where(missing, -1, idx)
    return ResampledStream(stream, grid, src.astype(np.int64), staleness.astype(np.int64), missing)


def detect_dropouts(stream: StampedStream, max_staleness_us: int) -> list[tuple[int, int]]:
    """Intervals ``(last sample before, first sample after)`` whose gap exceeds the bound."""
    t = stream.timestamps
    if len(t) < 2:
        return []
    gaps = np.flatnonzero(np.diff(t) > max_staleness_us)
    return [(int(t[i]), int(t[i + 1])) for i in gaps]


# ---------------------------------------------------------------------------
# frames and windows

@dataclass(frozen=True, eq=False)
class AlignedFrame:
    index: int
    t_us: int
    samples: Mapping[str, tuple[Any, int] | None]  # stream id -> (payload, staleness) or None
    state_tokens: tuple[int, ...]
    vis_codes: tuple[int, ...]
    graph_codes: tuple[int, ...]
    poses: Mapping[str, SE3Transform]  # object -> camera
    missing: tuple[str, ...] = ()

    @property
    def degraded(self) -> bool:
        return bool(self.missing)

    def to_record(self) -> dict[str, Any]:
        return {
            "t": self.index,
            "t_us": self.t_us,
            "degraded": self.degraded,
            "missing": list(self.missing),
            "streams": {
                sid: None if s is None else {"staleness_us": s[1], "payload": s[0]}
                for sid, s in self.samples.items()
            },
            "state_tokens": list(self.state_tokens),
            "vis_codes": list(self.vis_codes),
            "graph_codes": list(self.graph_codes),
        }


@dataclass(frozen=True)
class ObservationWindow:
    frames: tuple[AlignedFrame, ...]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def last(self) -> AlignedFrame:
        return self.frames[-1]


def window(frames: Sequence[AlignedFrame], t: int, k: int = 4) -> ObservationWindow:
    if k < 1:
        raise ValueError("window length must be >= 1")
    if t < k - 1:
        raise IndexError(f"window of {k} frames needs t >= {k - 1}, got t={t}")
    if t >= len(frames):
        raise IndexError(f"t={t} beyond last frame {len(frames) - 1}")
    return ObservationWindow(tuple(frames[t - k + 1:t + 1]))


def graph_codes(poses: Mapping[str, SE3Transform], grammar: GrammarConfig,
                reference: str = "femur") -> tuple[int, ...]:
    """Opaque graph-block codes from object poses.

    Stand-in for a learned graph embedding: translations and quaternion
    vector parts of every object relative to ``reference`` binned into the
    feature codebook, padded/truncated to the configured length.
    """
    K = grammar.feature_codebook
    tspec = QuantSpec(-250.0, 250.0, K)
    qspec = QuantSpec(-1.0, 1.0, K)
    codes: list[int] = []
    ref = poses.get(reference)
    for obj in OBJECTS:
        if obj in (reference, "camera"):
            continue
        T = poses.get(obj)
        if ref is None or T is None:
            codes += [0] * 6
            continue
        rel = compose(invert(ref), T)
        q = rel.rotation if rel.rotation[0] >= 0 else -rel.rotation
        codes += quantize_array(rel.translation, tspec)[0].tolist()
        codes += quantize_array(q[1:], qspec)[0].tolist()
    codes = (codes + [0] * grammar.graph_len)[: grammar.graph_len]
    return tuple(int(c) for c in codes)


def vis_codes(frame_payload: Mapping[str, Any] | None, grammar: GrammarConfig) -> tuple[int, ...]:
    """Placeholder visual codes derived from the referenced frame id."""
    fid = 0 if frame_payload is None else int(frame_payload.get("frame_id", 0))
    return (fid % grammar.feature_codebook,) * grammar.vis_len


def _pose_object(stream: StampedStream) -> str:
    return stream.stream_id.split("/", 1)[1] if "/" in stream.stream_id else stream.stream_id


def align_episode(streams: Sequence[StampedStream], grid: ReferenceGrid, grammar: GrammarConfig,
                  max_staleness_us: Mapping[str, int] | None = None,
                  required: Iterable[str] | None = None) -> list[AlignedFrame]:
    """Merge resampled streams into one :class:`AlignedFrame` per grid index.

    ``max_staleness_us`` is keyed by stream id or by payload kind. Streams in
    ``required`` (default: every non-event stream) mark a frame degraded when
    missing.
    """
    bounds = dict(DEFAULT_MAX_STALENESS_US)
    bounds.update(max_staleness_us or {})
    if required is None:
        required = [s.stream_id for s in streams if s.kind != "event"]
    required = set(required)
    resampled = {}
    for s in streams:
        if s.kind == "event":
            continue
        limit = bounds.get(s.stream_id, bounds.get(s.kind, DEFAULT_MAX_STALENESS_US["pose"]))
        resampled[s.stream_id] = resample(s, grid, limit)
    zeros = np.zeros(grammar.n_joints)
    frames = []
    for k, t in enumerate(grid.times):
        samples: dict[str, tuple[Any, int] | None] = {}
        poses: dict[str, SE3Transform] = {}
        state = None
        frame_payload = None
        for sid, r in resampled.items():
            if r.missing[k]:
                samples[sid] = None
                continue
            payload = r.payload(k)
            samples[sid] = (payload, int(r.staleness_us[k]))
            kind = r.stream.kind
            if kind == "pose":
                poses[_pose_object(r.stream)] = SE3Transform.from_dict(payload)
            elif kind == "robot_state":
                state = payload
            elif kind == "frame":
                frame_payload = payload
        missing = tuple(sorted(sid for sid in required if samples.get(sid) is None))
        if state is None:
            tokens = encode_robot_state(zeros, zeros, zeros, grammar)
        else:
            tokens = encode_robot_state(state["q"], state["qd"], state["tau"], grammar)
        frames.append(AlignedFrame(
            index=k, t_us=int(t), samples=samples, state_tokens=tokens,
            vis_codes=vis_codes(frame_payload, grammar),
            graph_codes=graph_codes(poses, grammar),
            poses=poses, missing=missing,
        ))
    return frames


def pose_graph_from_streams(streams: Sequence[StampedStream], max_staleness_us: int = 100_000) -> PoseGraph:
    """Camera-centric pose graph from ``pose/<object>`` streams."""
    g = PoseGraph(max_staleness_us=max_staleness_us)
    for s in streams:
        if s.kind != "pose":
            continue
        obj = _pose_object(s)
        for t, p in zip(s.timestamps, s.payloads):
            g.add_edge(obj, "camera", int(t), SE3Transform.from_dict(p))
    return g


def streams_from_records(records: Iterable[Mapping[str, Any]], kinds: Mapping[str, str] | None = None,
                         rates: Mapping[str, float] | None = None) -> list[StampedStream]:
    """Group raw ``{stream, t_us, payload}`` records into sorted streams."""
    grouped: dict[str, list[tuple[int, Any]]] = {}
    for rec in records:
        grouped.setdefault(rec["stream"], []).append((int(rec["t_us"]), rec["payload"]))
    out = []
    for sid, items in grouped.items():
        items.sort(key=lambda x: x[0])
        kind = (kinds or {}).get(sid) or infer_kind(sid)
        out.append(StampedStream(sid, kind, np.array([t for t, _ in items], dtype=np.int64),
                                 [p for _, p in items], (rates or {}).get(sid)))
    return out


def infer_kind(stream_id: str) -> str:
    head = stream_id.split("/", 1)[0]
    return {"pose": "pose", "robot": "robot_state", "frame": "frame", "event": "event"}.get(head, head)


def records_from_aligned(frames: Iterable[Mapping[str, Any]]) -> list[dict[str, Any]]:
    """Recover raw ``{stream, t_us, payload}`` records from aligned frame records.

    Each held sample is restored at ``t_us - staleness``; resampling the result
    on the same grid reproduces the frames.
    """
    seen: dict[tuple[str, int], Any] = {}
    for fr in frames:
        for sid, s in fr["streams"].items():
            if s is None:
                continue
            seen.setdefault((sid, int(fr["t_us"]) - int(s["staleness_us"])), s["payload"])
    return [{"stream": sid, "t_us": t, "payload": p} for (sid, t), p in sorted(seen.items(), key=lambda kv: (kv[0][1], kv[0][0]))]
