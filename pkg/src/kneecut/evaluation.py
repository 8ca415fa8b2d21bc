"""Surface-deviation metrics, episode success, SR and SPL tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PLANE_NAMES, ResectionPlan, SurfacePatch, planned_patch


def _points(p: SurfacePatch | np.ndarray) -> np.ndarray:
    pts = p.points if isinstance(p, SurfacePatch) else np.asarray(p, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty patch")
    return pts


def chamfer_bidirectional(a: SurfacePatch | np.ndarray, b: SurfacePatch | np.ndarray) -> float:
    """Mean of the two directed mean nearest-neighbour distances, in mm."""
    pa, pb = _points(a), _points(b)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def chamfer_bruteforce(a: SurfacePatch | np.ndarray, b: SurfacePatch | np.ndarray, chunk: int = 1024) -> float:
    """O(|A||B|) reference for :func:`chamfer_bidirectional`."""
    pa, pb = _points(a), _points(b)

    def directed(x, y):
        total = 0.0
        for i in range(0, len(x), chunk):
            d = np.sqrt(((x[i:i + chunk, None, :] - y[None, :, :]) ** 2).sum(-1))
            total += d.min(axis=1).sum()
        return total / len(x)

    return 0.5 * (directed(pa, pb) + directed(pb, pa))


@dataclass(frozen=True)
class EvalConfig:
    delta: float = 1.5  # mm
    samples: int = 2048
    runs: int = 7

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if self.samples < 16:
            raise ValueError("need at least 16 samples per patch")
        if self.runs < 1:
            raise ValueError("need at least one run")


def episode_success(chamfers: Sequence[float], planes_cut: Sequence[bool], delta: float) -> int:
    """1 iff every plane is cut and the mean deviation is within ``delta`` (inclusive)."""
    if not all(planes_cut):
        return 0
    return int(float(np.mean(chamfers)) <= delta)


@dataclass
class EpisodeScore:
    chamfers: tuple[float, ...]  # +inf for uncut planes
    planes_cut: tuple[bool, ...]
    success: int
    path_length: float
    shortest_path: float
    episode_id: int = 0
    aborted: bool = False

    @property
    def mean_deviation(self) -> float:
        """Mean over cut planes only (nan if none)."""
        vals = [c for c, ok in zip(self.chamfers, self.planes_cut) if ok]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def path_ratio(self) -> float:
        return self.shortest_path / max(self.path_length, self.shortest_path)

    @property
    def spl_term(self) -> float:
        return self.success * self.path_ratio

    def plane_success(self, m: int, delta: float) -> int:
        return int(self.planes_cut[m] and self.chamfers[m] <= delta)

    def plane_spl_term(self, m: int, delta: float) -> float:
        return self.plane_success(m, delta) * self.path_ratio


def score_episode(result, plan: ResectionPlan, cfg: EvalConfig = EvalConfig(),
                  samples: int | None = None) -> EpisodeScore:
    """Score an :class:`~kneecut.sim.EpisodeResult` against the plan.

    Planned patches are regenerated with the episode's patch seed; pass
    ``samples`` to override the sample count recorded in the episode.
    """
    n = result.samples if samples is None else samples
    chamfers = []
    for m, patch in enumerate(result.patches):
        if patch is None:
            chamfers.append(math.inf)
            continue
        chamfers.append(chamfer_bidirectional(patch, planned_patch(plan, m, n, result.patch_seed)))
    cut = result.planes_cut
    if result.shortest_path <= 0:
        raise ValueError(f"episode {result.episode_id}: shortest path must be > 0")
    return EpisodeScore(tuple(chamfers), cut, episode_success(chamfers, cut, cfg.delta),
                        result.path_length, result.shortest_path, result.episode_id, result.aborted)


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample SD (n - 1 denominator; 0 for a single value)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), sd


def spl(scores: Sequence[EpisodeScore]) -> tuple[float, float]:
    for s in scores:
        if s.shortest_path <= 0:
            raise ValueError(f"episode {s.episode_id}: shortest path must be > 0")
    return mean_sd([s.spl_term for s in scores])


def format_sr(k: int, n: int) -> str:
    return f"{k / n:.2f} ({k}/{n})"


def format_mean_sd(mean: float, sd: float) -> str:
    return f"{mean:.2f} ± {sd:.2f}"


@dataclass
class EvalReport:
    plane_names: tuple[str, ...]
    delta: float
    n: int
    plane_successes: tuple[int, ...]  # per-plane criterion: cut and own chamfer <= delta
    plane_spl: tuple[tuple[float, float], ...]
    episode_successes: int  # six-plane mean criterion
    episode_spl: tuple[float, float]
    plane_chamfer: tuple[tuple[float, float], ...]  # mean, sd over episodes where cut
    episodes: list[EpisodeScore] = field(default_factory=list)
    label: str = "policy"

    def plane_sr(self, m: int) -> float:
        return self.plane_successes[m] / self.n

    @property
    def episode_sr(self) -> float:
        return self.episode_successes / self.n

    def table1_row(self) -> list[str]:
        return [self.label] + [format_sr(k, self.n) for k in self.plane_successes]

    def table2_row(self) -> list[str]:
        return [self.label] + [format_mean_sd(*ms) for ms in self.plane_spl]

    def to_csv(self, table: int = 1) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", *self.plane_names])
        w.writerow(self.table1_row() if table == 1 else self.table2_row())
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        def num(x):
            return None if x is None or not math.isfinite(x) else x

        return {
            "schema_version": 1,
            "label": self.label,
            "delta_mm": self.delta,
            "runs": self.n,
            "plane_order": list(self.plane_names),
            "per_plane_sr": {name: {"k": k, "n": self.n, "sr": k / self.n, "text": format_sr(k, self.n)}
                             for name, k in zip(self.plane_names, self.plane_successes)},
            "per_plane_spl": {name: {"mean": ms[0], "sd": ms[1], "text": format_mean_sd(*ms)}
                              for name, ms in zip(self.plane_names, self.plane_spl)},
            "per_plane_chamfer_mm": {name: {"mean": num(ms[0]), "sd": num(ms[1])}
                                     for name, ms in zip(self.plane_names, self.plane_chamfer)},
            "episode_sr": {"k": self.episode_successes, "n": self.n, "sr": self.episode_sr,
                           "text": format_sr(self.episode_successes, self.n)},
            "episode_spl": {"mean": self.episode_spl[0], "sd": self.episode_spl[1],
                            "text": format_mean_sd(*self.episode_spl)},
            "episodes": [
                {"episode_id": s.episode_id, "success": s.success, "aborted": s.aborted,
                 "chamfers_mm": [num(c) for c in s.chamfers], "planes_cut": list(s.planes_cut),
                 "mean_deviation_mm": num(s.mean_deviation), "path_length_mm": s.path_length,
                 "shortest_path_mm": s.shortest_path, "spl_term": s.spl_term}
                for s in self.episodes
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def aggregate(scores: Sequence[EpisodeScore], plane_names: Sequence[str] | None = None,
              cfg: EvalConfig = EvalConfig(), label: str = "policy",
              order: Sequence[int] | None = None) -> EvalReport:
    """Per-plane SR/SPL and episode-level SR/SPL over runs.

    ``order`` picks and orders plane columns (default: plan order).
    """
    if not scores:
        raise ValueError("need at least one episode")
    n_planes = len(scores[0].chamfers)
    names = tuple(plane_names) if plane_names is not None else PLANE_NAMES[:n_planes]
    cols = list(range(n_planes)) if order is None else list(order)
    d = cfg.delta
    plane_k = tuple(sum(s.plane_success(m, d) for s in scores) for m in cols)
    plane_spl = tuple(mean_sd([s.plane_spl_term(m, d) for s in scores]) for m in cols)
    plane_cd = tuple(mean_sd([s.chamfers[m] for s in scores if s.planes_cut[m]]) for m in cols)
    return EvalReport(
        plane_names=tuple(names[m] for m in cols), delta=d, n=len(scores),
        plane_successes=plane_k, plane_spl=plane_spl,
        episode_successes=sum(s.success for s in scores), episode_spl=spl(scores),
        plane_chamfer=plane_cd, episodes=list(scores), label=label,
    )
