"""Rigid transforms, the tracked-object pose graph, and resection planes.

Transform convention: ``T^{a->b}`` maps the coordinates of a point expressed
in frame ``a`` into frame ``b``. Composition ``compose(T_bc, T_ab)`` gives
``T_ac``. Quaternions are stored scalar-first ``(w, x, y, z)``.
"""

from __future__ import annotations

import bisect
import math
import os
from collections import deque
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .config import ConfigError, default_config_path, load_yaml

OBJECTS = ("end_effector", "femur", "tibia", "camera")

PLANE_NAMES = (
    "anterior chamfer",
    "distal femur",
    "anterior condyle",
    "posterior condyle",
    "tibial",
    "posterior chamfer",
)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a unit quaternion with w >= 0."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True, eq=False)
class SE3Transform:
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray  # mm

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("rotation quaternion must be finite and non-zero")
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        q = q / n
        q.flags.writeable = False
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Transform":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, rotation: np.ndarray, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "SE3Transform":
        return cls(matrix_to_quat(rotation), np.asarray(translation, dtype=float))

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], angle_rad: float,
                        translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "SE3Transform":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        h = 0.5 * angle_rad
        return cls(np.concatenate([[math.cos(h)], math.sin(h) * axis]), np.asarray(translation, dtype=float))

    @classmethod
    def from_euler_zyx(cls, yaw_deg: float, pitch_deg: float, roll_deg: float,
                       translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "SE3Transform":
        """Intrinsic z-y'-x'' rotation (yaw about z, then pitch, then roll)."""
        qz = cls.from_axis_angle((0, 0, 1), math.radians(yaw_deg)).rotation
        qy = cls.from_axis_angle((0, 1, 0), math.radians(pitch_deg)).rotation
        qx = cls.from_axis_angle((1, 0, 0), math.radians(roll_deg)).rotation
        return cls(quat_multiply(quat_multiply(qz, qy), qx), np.asarray(translation, dtype=float))

    @classmethod
    def random(cls, rng: np.random.Generator, translation_scale: float = 100.0) -> "SE3Transform":
        q = rng.standard_normal(4)
        return cls(q, rng.uniform(-translation_scale, translation_scale, 3))

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "SE3Transform") -> "SE3Transform":
        return compose(self, other)

    def __repr__(self) -> str:
        return f"SE3Transform(q={np.round(self.rotation, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"

    def to_dict(self) -> dict[str, list[float]]:
        return {"q": [float(x) for x in self.rotation], "t": [float(x) for x in self.translation]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Sequence[float]]) -> "SE3Transform":
        return cls(np.asarray(d["q"], dtype=float), np.asarray(d["t"], dtype=float))


def compose(a: SE3Transform, b: SE3Transform) -> SE3Transform:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return SE3Transform(quat_multiply(a.rotation, b.rotation),
                        a.rotation_matrix @ b.translation + a.translation)


def invert(a: SE3Transform) -> SE3Transform:
    q_inv = a.rotation * np.array([1.0, -1.0, -1.0, -1.0])
    return SE3Transform(q_inv, -(quat_to_matrix(q_inv) @ a.translation))


def apply(a: SE3Transform, points: np.ndarray) -> np.ndarray:
    """Transform a point ``(3,)`` or a point array ``(N, 3)``."""
    p = np.asarray(points, dtype=float)
    return p @ a.rotation_matrix.T + a.translation


def rotation_angle_deg(a: SE3Transform) -> float:
    # atan2 keeps precision for near-identity rotations, where acos does not
    return math.degrees(2.0 * math.atan2(float(np.linalg.norm(a.rotation[1:])), abs(float(a.rotation[0]))))


def is_close(a: SE3Transform, b: SE3Transform, atol: float = 1e-9) -> bool:
    dq = min(np.abs(a.rotation - b.rotation).max(), np.abs(a.rotation + b.rotation).max())
    return bool(dq <= atol and np.abs(a.translation - b.translation).max() <= atol)


class UnobservableError(LookupError):
    """An object has no sufficiently fresh pose at the query time."""

    def __init__(self, obj: str, t: int):
        self.obj = obj
        self.t = t
        super().__init__(f"{obj} unobservable at t={t} us")


class PoseGraph:
    """Timestamped rigid transforms between tracked objects.

    Edges are stored as ``T^{src->dst}`` (for optical tracking, object to
    camera). A query at time ``t`` uses, per edge, the latest sample with
    timestamp ``<= t`` that is no older than ``max_staleness_us``.
    """

    def __init__(self, nodes: Iterable[str] = OBJECTS, max_staleness_us: int = 100_000):
        self.nodes = tuple(nodes)
        self.max_staleness_us = int(max_staleness_us)
        self._edges: dict[tuple[str, str], tuple[list[int], list[SE3Transform]]] = {}

    def add_edge(self, src: str, dst: str, t_us: int, transform: SE3Transform) -> None:
        for n in (src, dst):
            if n not in self.nodes:
                raise KeyError(f"unknown object {n!r}")
        if (dst, src) in self._edges:
            src, dst, transform = dst, src, invert(transform)
        times, values = self._edges.setdefault((src, dst), ([], []))
        k = bisect.bisect_left(times, t_us)
        if k < len(times) and times[k] == t_us:
            raise ValueError(f"duplicate edge {src}->{dst} at t={t_us}")
        times.insert(k, int(t_us))
        values.insert(k, transform)

    def _fresh(self, t_us: int) -> dict[str, list[tuple[str, SE3Transform]]]:
        adj: dict[str, list[tuple[str, SE3Transform]]] = {n: [] for n in self.nodes}
        for (src, dst), (times, values) in self._edges.items():
            k = bisect.bisect_right(times, t_us) - 1
            if k < 0 or t_us - times[k] > self.max_staleness_us:
                continue
            T = values[k]
            adj[src].append((dst, T))
            adj[dst].append((src, invert(T)))
        return adj

    def observable(self, obj: str, t_us: int) -> bool:
        return bool(self._fresh(t_us)[obj])

    def relative_transform(self, frm: str, to: str, t_us: int) -> SE3Transform:
        """``T^{frm->to}`` composed along the BFS tree path at time ``t_us``."""
        if frm == to:
            return SE3Transform.identity()
        adj = self._fresh(t_us)
        for obj in (frm, to):
            if not adj.get(obj):
                raise UnobservableError(obj, t_us)
        # BFS from frm; acc[n] = T^{frm->n}
        acc = {frm: SE3Transform.identity()}
        queue = deque([frm])
        while queue:
            cur = queue.popleft()
            for nxt, T in adj[cur]:
                if nxt not in acc:
                    acc[nxt] = compose(T, acc[cur])
                    queue.append(nxt)
        if to not in acc:
            raise UnobservableError(to, t_us)
        return acc[to]

    def snapshot(self, t_us: int, reference: str = "camera") -> dict[str, SE3Transform]:
        """Poses ``T^{obj->reference}`` of every object reachable at ``t_us``."""
        out = {}
        for obj in self.nodes:
            if obj == reference:
                continue
            try:
                out[obj] = self.relative_transform(obj, reference, t_us)
            except UnobservableError:
                pass
        return out


# ---------------------------------------------------------------------------
# planes and plans

@dataclass(frozen=True, eq=False)
class ResectionPlane:
    """Planned cut ``{x : n·x = b}`` with a rectangular window in the bone frame.

    The window is centred at ``center`` with edges along ``axis_u`` (the
    sweep direction) and ``axis_v = n × u``. The canonical tool frame sits on
    the window's entry edge with its z-axis along the normal.
    """

    id: int
    name: str
    normal: np.ndarray
    offset: float
    center: np.ndarray
    axis_u: np.ndarray
    extents: tuple[float, float]

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError(f"plane {self.name!r}: normal must be non-zero")
        n = n / norm
        c = np.asarray(self.center, dtype=float)
        c = c - (n @ c - self.offset) * n
        u = np.asarray(self.axis_u, dtype=float)
        u = u - (n @ u) * n
        if np.linalg.norm(u) < 1e-9:
            raise ValueError(f"plane {self.name!r}: axis_u is parallel to the normal")
        u = u / np.linalg.norm(u)
        if min(self.extents) < 0:
            raise ValueError(f"plane {self.name!r}: window extents must be >= 0")
        for name, value in (("normal", n), ("center", c), ("axis_u", u)):
            value.flags.writeable = False
            object.__setattr__(self, name, value)
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "extents", (float(self.extents[0]), float(self.extents[1])))

    @property
    def axis_v(self) -> np.ndarray:
        return np.cross(self.normal, self.axis_u)

    @property
    def entry_point(self) -> np.ndarray:
        return self.center - 0.5 * self.extents[0] * self.axis_u

    @property
    def exit_point(self) -> np.ndarray:
        return self.entry_point + self.extents[0] * self.axis_u

    @property
    def sweep_length(self) -> float:
        return self.extents[0]

    def canonical_frame(self) -> SE3Transform:
        """Tool pose (tool->bone) that is exactly aligned at the entry edge."""
        R = np.column_stack([self.axis_u, self.axis_v, self.normal])
        return SE3Transform.from_matrix(R, self.entry_point)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal - self.offset

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id, "name": self.name,
            "normal": self.normal.tolist(), "offset": self.offset,
            "window": {"center": self.center.tolist(), "axis_u": self.axis_u.tolist(),
                       "extents": list(self.extents)},
        }


@dataclass(frozen=True)
class Landmark:
    id: str
    position: tuple[float, float, float]

    def __post_init__(self):
        pos = tuple(float(x) for x in self.position)
        if len(pos) != 3 or not all(math.isfinite(x) for x in pos):
            raise ValueError(f"landmark {self.id!r} needs 3 finite coordinates")
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True, eq=False)
class ResectionPlan:
    planes: tuple[ResectionPlane, ...]
    landmarks: tuple[Landmark, ...] = ()
    workspace_lo: tuple[float, float, float] = (-200.0, -200.0, -200.0)
    workspace_hi: tuple[float, float, float] = (200.0, 200.0, 200.0)
    tolerance_deg: float = 1.0
    tolerance_mm: float = 0.5
    order: tuple[int, ...] = ()  # plane indices in execution order

    def __post_init__(self):
        if not self.order:
            object.__setattr__(self, "order", tuple(range(len(self.planes))))
        if sorted(self.order) != list(range(len(self.planes))):
            raise ValueError("plan order must be a permutation of the plane indices")
        if any(lo >= hi for lo, hi in zip(self.workspace_lo, self.workspace_hi)):
            raise ValueError("workspace bounds must satisfy lo < hi")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.planes)

    def index_of(self, name: str) -> int:
        return self.names.index(name)

    def in_workspace(self, p: np.ndarray) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.workspace_lo) and np.all(p <= self.workspace_hi))

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": 1,
            "planes": [p.to_dict() for p in self.planes],
            "landmarks": [{"id": lm.id, "position": list(lm.position)} for lm in self.landmarks],
            "workspace": {"lo": list(self.workspace_lo), "hi": list(self.workspace_hi)},
            "tolerance": {"angle_deg": self.tolerance_deg, "distance_mm": self.tolerance_mm},
            "order": [self.planes[i].name for i in self.order],
        }


def plan_from_dict(data: Mapping[str, Any], path: str | None = None) -> ResectionPlan:
    try:
        planes = []
        for k, p in enumerate(data["planes"]):
            w = p["window"]
            n = np.asarray(p["normal"], dtype=float)
            n = n / np.linalg.norm(n)
            c = np.asarray(w["center"], dtype=float)
            if abs(n @ c - float(p["offset"])) > 1e-6:
                raise ConfigError(f"plane {p['name']!r}: window centre is not on the plane", path)
            planes.append(ResectionPlane(
                id=int(p.get("id", k + 1)), name=str(p["name"]), normal=n, offset=float(p["offset"]),
                center=c, axis_u=w["axis_u"], extents=tuple(w["extents"]),
            ))
        names = [p.name for p in planes]
        order = data.get("order")
        order_idx = tuple(names.index(n) for n in order) if order else ()
        ws = data.get("workspace", {})
        tol = data.get("tolerance", {})
        return ResectionPlan(
            planes=tuple(planes),
            landmarks=tuple(Landmark(str(lm["id"]), lm["position"]) for lm in data.get("landmarks", [])),
            workspace_lo=tuple(float(x) for x in ws.get("lo", (-200.0,) * 3)),
            workspace_hi=tuple(float(x) for x in ws.get("hi", (200.0,) * 3)),
            tolerance_deg=float(tol.get("angle_deg", 1.0)),
            tolerance_mm=float(tol.get("distance_mm", 0.5)),
            order=order_idx,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad plan: {exc!r}", path) from exc


def load_plan(path: str | os.PathLike | None = None) -> ResectionPlan:
    path = default_config_path("plan.yaml") if path is None else path
    return plan_from_dict(load_yaml(path), str(path))


def alignment_error(tool_pose: SE3Transform, plane: ResectionPlane) -> tuple[float, float]:
    """``(angle_deg, distance_mm)`` between the blade and the planned plane.

    The blade normal is the tool z-axis, the contact point is the tool
    origin. The angle ignores the normal's sign.
    """
    bx, by, bz = tool_pose.rotation_matrix[:, 2].tolist()
    nx, ny, nz = plane.normal.tolist()
    c = abs(bx * nx + by * ny + bz * nz)
    # |b x n| via atan2 stays accurate near alignment, where acos(c) does not
    s = math.hypot(by * nz - bz * ny, bz * nx - bx * nz, bx * ny - by * nx)
    angle = math.degrees(math.atan2(s, c))
    distance = abs(float(plane.signed_distance(tool_pose.translation)))
    return angle, distance


@dataclass(frozen=True, eq=False)
class SurfacePatch:
    points: np.ndarray
    plane_id: int | None = None
    n_samples: int = 0
    seed: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if not self.n_samples:
            object.__setattr__(self, "n_samples", len(pts))

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, T: SE3Transform) -> "SurfacePatch":
        return SurfacePatch(apply(T, self.points), self.plane_id, self.n_samples, self.seed)


def sample_plane_patch(plane: ResectionPlane, n: int, seed: int) -> SurfacePatch:
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    eu, ev = plane.extents
    st = rng.uniform(-0.5, 0.5, size=(n, 2)) * np.array([eu, ev])
    pts = plane.center + st[:, :1] * plane.axis_u + st[:, 1:] * plane.axis_v
    return SurfacePatch(pts, plane.id, n, seed)


def save_patch(path: str | os.PathLike, patch: SurfacePatch) -> None:
    """Write one ``x y z`` record per line."""
    np.savetxt(path, patch.points, fmt="%.17g")


def load_patch(path: str | os.PathLike) -> SurfacePatch:
    return SurfacePatch(np.loadtxt(path, ndmin=2))


def patch_seed(base_seed: int, plane_index: int) -> int:
    return int(np.random.SeedSequence([base_seed, plane_index]).generate_state(1)[0])


def planned_patch(plan: ResectionPlan, plane_index: int, n: int, base_seed: int = 0) -> SurfacePatch:
    """The reference sampling of a planned plane shared by simulator and evaluator."""
    return sample_plane_patch(plan.planes[plane_index], n, patch_seed(base_seed, plane_index))
