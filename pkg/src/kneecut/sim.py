"""Kinematic bench simulator for the six-plane resection sequence.

The simulator executes completed :class:`~kneecut.grammar.ActionCommand`
values against a :class:`ProsthesisModel`:

* MOVE teleports the tool to the target bin centres and meters the
  straight-line distance.
* ALIGN snaps the tool to the plane's canonical frame composed with the
  orientation offset, then perturbs it with pose jitter. The plane becomes
  aligned only if the perturbed pose is within tolerance.
* CUT sweeps the aligned window. The executed patch is the planned patch
  moved by the tool's residual pose error, by a cut-time instability offset
  along the normal (scaled per plane), and by small per-point jitter.

Random streams per episode derive from ``SeedSequence([seed, episode])``:
child 0 drives sim noise, child 1 tracker dropout. Decoding draws from
``SeedSequence([decode_seed, episode])``.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .backends import BackendError, PolicyRequest
from .config import ConfigError, default_config_path, load_yaml
from .decoding import (
    DecodeConfig, DecodeError, GrammarState, MaskError, PlaneStatus, SafetyContext,
    advance, grammar_mask, nominal_pose_after, safety_mask, step,
)
from .geometry import (
    ResectionPlan, SE3Transform, SurfacePatch, alignment_error,
    compose, invert, plan_from_dict, planned_patch, quat_multiply,
)
from .grammar import (
    ActionCommand, GrammarConfig, PITBlock, Primitive, encode_robot_state, make_align, make_cut,
    make_move, serialize_prefix,
)
from .timeline import graph_codes

log = logging.getLogger(__name__)

# per-point jitter as a fraction of the cut-time instability sigma
POINT_JITTER_FRACTION = 0.1


@dataclass(frozen=True)
class NoiseModel:
    sigma_translation: float = 0.0  # mm
    sigma_rotation: float = 0.0  # deg
    dropout: float = 0.0  # per-step probability of losing tracker markers
    seed: int = 0
    align_bias_mm: float = 0.0  # deterministic ALIGN offset along the plane normal

    def __post_init__(self):
        if self.sigma_translation < 0 or self.sigma_rotation < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not 0 <= self.dropout <= 1:
            raise ValueError("dropout probability must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], path: str | None = None) -> "NoiseModel":
        try:
            return cls(
                sigma_translation=float(d.get("sigma_translation_mm", 0.0)),
                sigma_rotation=float(d.get("sigma_rotation_deg", 0.0)),
                dropout=float(d.get("dropout", 0.0)),
                seed=int(d.get("seed", 0)),
                align_bias_mm=float(d.get("align_bias_mm", 0.0)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad noise config: {exc}", path) from exc

    def to_dict(self) -> dict[str, Any]:
        return {"sigma_translation_mm": self.sigma_translation, "sigma_rotation_deg": self.sigma_rotation,
                "dropout": self.dropout, "seed": self.seed, "align_bias_mm": self.align_bias_mm}


def load_noise(spec: str | os.PathLike | float | None) -> NoiseModel:
    """Noise from a YAML file, or a bare number meaning translational sigma in mm."""
    if spec is None:
        return NoiseModel()
    try:
        return NoiseModel(sigma_translation=float(spec))
    except (TypeError, ValueError):
        pass
    return NoiseModel.from_dict(load_yaml(spec), str(spec))


@dataclass(frozen=True, eq=False)
class ProsthesisModel:
    plan: ResectionPlan
    initial_tool_pose: SE3Transform = field(default_factory=SE3Transform.identity)
    difficulty: tuple[float, ...] = ()  # instability multiplier per plane
    move_speed: float = 20.0  # mm/s
    align_time: float = 1.0  # s
    cut_speed: float = 5.0  # mm/s, oracle feed
    samples: int = 2048
    patch_seed: int = 0
    femur_in_camera: SE3Transform = field(
        default_factory=lambda: SE3Transform.from_euler_zyx(0.0, 90.0, 0.0, (0.0, 0.0, 1200.0)))
    tibia_in_femur: SE3Transform = field(default_factory=SE3Transform.identity)

    def __post_init__(self):
        n = len(self.plan.planes)
        if not self.difficulty:
            object.__setattr__(self, "difficulty", (1.0,) * n)
        if len(self.difficulty) != n:
            raise ValueError("one difficulty multiplier per plane")
        object.__setattr__(self, "_cache", {})

    def planned(self, m: int) -> SurfacePatch:
        key = ("planned", m)
        if key not in self._cache:
            self._cache[key] = planned_patch(self.plan, m, self.samples, self.patch_seed)
        return self._cache[key]

    def with_samples(self, samples: int, patch_seed: int | None = None) -> "ProsthesisModel":
        return replace(self, samples=samples, patch_seed=self.patch_seed if patch_seed is None else patch_seed)

    def to_dict(self) -> dict[str, Any]:
        d = self.plan.to_dict()
        d["bench"] = {
            "initial_tool_pose": self.initial_tool_pose.to_dict(),
            "move_speed_mm_s": self.move_speed, "align_time_s": self.align_time,
            "cut_speed_mm_s": self.cut_speed,
            "difficulty": {p.name: k for p, k in zip(self.plan.planes, self.difficulty)},
        }
        return d


def model_from_dict(data: Mapping[str, Any], path: str | None = None, samples: int = 2048,
                    patch_seed: int = 0) -> ProsthesisModel:
    plan = plan_from_dict(data, path)
    bench = data.get("bench", {}) or {}
    try:
        if "initial_tool_pose" in bench:
            pose = SE3Transform.from_dict(bench["initial_tool_pose"])
        else:
            pose = SE3Transform(np.array([1.0, 0, 0, 0]), bench.get("initial_tool_position", (0.0, 0.0, 150.0)))
        diff = bench.get("difficulty", {}) or {}
        unknown = set(diff) - set(plan.names)
        if unknown:
            raise ConfigError(f"difficulty names unknown planes: {sorted(unknown)}", path)
        model = ProsthesisModel(
            plan=plan, initial_tool_pose=pose,
            difficulty=tuple(float(diff.get(n, 1.0)) for n in plan.names),
            move_speed=float(bench.get("move_speed_mm_s", 20.0)),
            align_time=float(bench.get("align_time_s", 1.0)),
            cut_speed=float(bench.get("cut_speed_mm_s", 5.0)),
            samples=samples, patch_seed=patch_seed,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad bench section: {exc!r}", path) from exc
    if not plan.in_workspace(pose.translation):
        raise ConfigError("initial tool position lies outside the workspace", path)
    return model


def load_model(path: str | os.PathLike | None = None, samples: int = 2048, patch_seed: int = 0) -> ProsthesisModel:
    path = default_config_path("plan.yaml") if path is None else path
    return model_from_dict(load_yaml(path), str(path), samples, patch_seed)


# ---------------------------------------------------------------------------
# state and actions

@dataclass(frozen=True, eq=False)
class SimState:
    tool_pose: SE3Transform
    statuses: tuple[PlaneStatus, ...]
    patches: tuple[SurfacePatch | None, ...]
    path_length: float = 0.0
    exec_time: float = 0.0  # s of simulated robot motion
    step_count: int = 0
    violations: tuple[str, ...] = ()
    last_command: ActionCommand | None = None

    @classmethod
    def initial(cls, model: ProsthesisModel) -> "SimState":
        n = len(model.plan.planes)
        return cls(model.initial_tool_pose, (PlaneStatus.PENDING,) * n, (None,) * n)

    @property
    def aligned_plane(self) -> int | None:
        for i, s in enumerate(self.statuses):
            if s == PlaneStatus.ALIGNED:
                return i
        return None

    @property
    def all_cut(self) -> bool:
        return all(s == PlaneStatus.CUT for s in self.statuses)


def _jitter_rotation(rng: np.random.Generator, sigma_deg: float) -> np.ndarray:
    rv = rng.normal(0.0, math.radians(sigma_deg), 3)
    angle = float(np.linalg.norm(rv))
    if angle == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return SE3Transform.from_axis_angle(rv / angle, angle).rotation


def apply_action(state: SimState, cmd: ActionCommand, model: ProsthesisModel, noise: NoiseModel,
                 rng: np.random.Generator, grammar: GrammarConfig) -> tuple[SimState, list[str]]:
    """Execute one command; returns the new state and event labels."""
    cmd.check(grammar)
    plan = model.plan
    statuses = list(state.statuses)
    aligned = state.aligned_plane
    pose = state.tool_pose
    path = state.path_length
    exec_time = state.exec_time
    patches = list(state.patches)
    violations = list(state.violations)
    events: list[str] = []

    if cmd.primitive == Primitive.MOVE:
        target = nominal_pose_after(cmd, pose, plan, grammar)
        if not plan.in_workspace(target.translation):
            violations.append("move-out-of-workspace")
            events.append("violation:move-out-of-workspace")
        else:
            dist = float(np.linalg.norm(target.translation - pose.translation))
            path += dist
            exec_time += dist / model.move_speed
            pose = target
            if aligned is not None:
                statuses[aligned] = PlaneStatus.PENDING
            events.append("move")
    elif cmd.primitive == Primitive.ALIGN:
        m = cmd.bins[0]
        if m >= len(plan.planes) or statuses[m] == PlaneStatus.CUT:
            violations.append("align-invalid-plane")
            events.append("violation:align-invalid-plane")
        else:
            target = nominal_pose_after(cmd, pose, plan, grammar)
            q, t = target.rotation, target.translation
            if noise.sigma_rotation > 0:
                q = quat_multiply(_jitter_rotation(rng, noise.sigma_rotation), q)
            if noise.sigma_translation > 0:
                t = t + rng.normal(0.0, noise.sigma_translation, 3)
            if noise.align_bias_mm:
                t = t + noise.align_bias_mm * plan.planes[m].normal
            new_pose = SE3Transform(q, t)
            dist = float(np.linalg.norm(new_pose.translation - pose.translation))
            path += dist
            exec_time += model.align_time
            pose = new_pose
            if aligned is not None:
                statuses[aligned] = PlaneStatus.PENDING
            angle, d = alignment_error(pose, plan.planes[m])
            if angle <= plan.tolerance_deg and d <= plan.tolerance_mm:
                statuses[m] = PlaneStatus.ALIGNED
                events.append("align")
            else:
                events.append("align-failed")
    else:
        if aligned is None:
            violations.append("cut-without-align")
            events.append("violation:cut-without-align")
        else:
            plane = plan.planes[aligned]
            residual = compose(pose, invert(plane.canonical_frame()))
            pts = model.planned(aligned).points
            executed = pts @ residual.rotation_matrix.T + residual.translation
            sigma = noise.sigma_translation * model.difficulty[aligned]
            if sigma > 0:
                executed = executed + rng.normal(0.0, sigma) * plane.normal
                jitter = rng.normal(0.0, POINT_JITTER_FRACTION * sigma, len(pts))
                executed = executed + jitter[:, None] * plane.normal
            patches[aligned] = SurfacePatch(executed, plane.id, len(pts), model.planned(aligned).seed)
            statuses[aligned] = PlaneStatus.CUT
            speed = cmd.values(grammar)[0]
            path += plane.sweep_length
            exec_time += plane.sweep_length / speed
            pose = nominal_pose_after(cmd, pose, plan, grammar, aligned)
            events.append("cut")

    new = SimState(pose, tuple(statuses), tuple(patches), path, exec_time, state.step_count + 1,
                   tuple(violations), cmd)
    return new, events


def oracle_commands(model: ProsthesisModel, grammar: GrammarConfig) -> list[ActionCommand]:
    """MOVE to the entry bin, ALIGN with zero offset, CUT, for each plane in order."""
    out = []
    for m in model.plan.order:
        plane = model.plan.planes[m]
        out.append(make_move(grammar, plane.entry_point))
        out.append(make_align(grammar, m))
        out.append(make_cut(grammar, model.cut_speed))
    return out


def shortest_path_length(model: ProsthesisModel, grammar: GrammarConfig) -> float:
    """Noise-free path of the reference sequence, in mm.

    Per plane, in plan order: travel to the entry bin centre, settle onto the
    entry point, sweep the window. Accumulated in the same order as the
    simulator so the oracle reproduces it bit-for-bit.
    """
    hit = model._cache.get(("shortest_path", id(grammar)))
    if hit is None or hit[0] is not grammar:  # keep the grammar alive so its id stays unique
        hit = (grammar, _shortest_path(model, grammar))
        model._cache[("shortest_path", id(grammar))] = hit
    return hit[1]


def _shortest_path(model: ProsthesisModel, grammar: GrammarConfig) -> float:
    pos = model.initial_tool_pose.translation
    total = 0.0
    for m in model.plan.order:
        plane = model.plan.planes[m]
        target = np.array(make_move(grammar, plane.entry_point).values(grammar))
        total += float(np.linalg.norm(target - pos))
        total += float(np.linalg.norm(plane.canonical_frame().translation - target))
        total += plane.sweep_length
        pos = plane.canonical_frame().translation + plane.sweep_length * plane.axis_u
    return total


# ---------------------------------------------------------------------------
# episodes

@dataclass(frozen=True, eq=False)
class SimObservation:
    """What a policy backend may look at besides the serialized prefix."""

    state: SimState
    grammar_state: GrammarState
    model: ProsthesisModel
    grammar: GrammarConfig
    tracking_ok: bool = True


@dataclass
class SimFrame:
    vis_codes: tuple[int, ...]
    graph_codes: tuple[int, ...]
    state_tokens: tuple[int, ...]


def _rotvec(q: np.ndarray) -> np.ndarray:
    q = q if q[0] >= 0 else -q
    s = float(np.linalg.norm(q[1:]))
    if s < 1e-12:
        return 2.0 * q[1:]
    return 2.0 * math.atan2(s, q[0]) * q[1:] / s


def robot_state(pose: SE3Transform, n_joints: int) -> np.ndarray:
    """Stand-in joint vector for the kinematic sim (no IK): scaled position and rotation vector."""
    q = np.zeros(n_joints)
    vals = np.concatenate([pose.translation / 100.0, _rotvec(pose.rotation)])
    q[: min(n_joints, 6)] = vals[: min(n_joints, 6)]
    return np.clip(q, -math.pi, math.pi)


def sim_frame(state: SimState, prev_q: np.ndarray | None, model: ProsthesisModel, grammar: GrammarConfig,
              step_index: int, tracking_ok: bool) -> tuple[SimFrame, np.ndarray]:
    poses = {"femur": model.femur_in_camera,
             "tibia": compose(model.femur_in_camera, model.tibia_in_femur)}
    if tracking_ok:
        poses["end_effector"] = compose(model.femur_in_camera, state.tool_pose)
    q = robot_state(state.tool_pose, grammar.n_joints)
    qd = np.zeros_like(q) if prev_q is None else q - prev_q
    tau = np.zeros_like(q)
    frame = SimFrame(
        vis_codes=(step_index % grammar.feature_codebook,) * grammar.vis_len,
        graph_codes=graph_codes(poses, grammar),
        state_tokens=encode_robot_state(q, qd, tau, grammar),
    )
    return frame, q


@dataclass
class EpisodeResult:
    episode_id: int
    seed: int
    decode_seed: int
    status: str  # "completed" | "budget" | "aborted"
    tokens: list[int]
    commands: list[ActionCommand]
    statuses: tuple[PlaneStatus, ...]
    patches: tuple[SurfacePatch | None, ...]
    path_length: float
    shortest_path: float
    violations: list[str]
    events: list[str]
    exec_time: float
    samples: int
    patch_seed: int
    backend: str = ""
    abort_reason: str = ""
    retries: int = 0
    timings: list[tuple[float, float]] = field(default_factory=list)  # (policy ms, decode ms)

    @property
    def planes_cut(self) -> tuple[bool, ...]:
        return tuple(s == PlaneStatus.CUT for s in self.statuses)

    @property
    def aborted(self) -> bool:
        return self.status == "aborted"

    def to_records(self, model: ProsthesisModel | None = None) -> list[dict[str, Any]]:
        """JSONL records; wall-clock timings are excluded so files are reproducible."""
        header = {
            "schema_version": 1, "kind": "episode_result",
            "episode_id": self.episode_id, "seed": self.seed, "decode_seed": self.decode_seed,
            "backend": self.backend, "status": self.status, "abort_reason": self.abort_reason,
            "retries": self.retries,
            "path_length_mm": self.path_length, "shortest_path_mm": self.shortest_path,
            "exec_time_s": self.exec_time, "samples": self.samples, "patch_seed": self.patch_seed,
            "statuses": [s.value for s in self.statuses],
            "violations": list(self.violations), "events": list(self.events),
            "tokens": list(self.tokens),
        }
        if model is not None:
            header["model"] = model.to_dict()
        recs = [header]
        for k, c in enumerate(self.commands):
            recs.append({"kind": "command", "index": k, "primitive": c.primitive.value, "bins": list(c.bins)})
        for m, p in enumerate(self.patches):
            if p is not None:
                recs.append({"kind": "patch", "plane": m, "points": p.points.tolist()})
        return recs

    @classmethod
    def from_records(cls, header: Mapping[str, Any], records: Sequence[Mapping[str, Any]]) -> "EpisodeResult":
        n = len(header["statuses"])
        patches: list[SurfacePatch | None] = [None] * n
        commands = []
        for r in records:
            if r.get("kind") == "patch":
                patches[r["plane"]] = SurfacePatch(np.asarray(r["points"], dtype=float))
            elif r.get("kind") == "command":
                commands.append(ActionCommand(Primitive(r["primitive"]), tuple(r["bins"])))
        return cls(
            episode_id=header["episode_id"], seed=header["seed"], decode_seed=header["decode_seed"],
            status=header["status"], tokens=list(header["tokens"]), commands=commands,
            statuses=tuple(PlaneStatus(s) for s in header["statuses"]), patches=tuple(patches),
            path_length=header["path_length_mm"], shortest_path=header["shortest_path_mm"],
            violations=list(header["violations"]), events=list(header["events"]),
            exec_time=header["exec_time_s"], samples=header["samples"], patch_seed=header["patch_seed"],
            backend=header.get("backend", ""), abort_reason=header.get("abort_reason", ""),
            retries=header.get("retries", 0),
        )


def run_episode(policy, model: ProsthesisModel, noise: NoiseModel, cfg: DecodeConfig, budget: int,
                grammar: GrammarConfig, episode_id: int = 0, use_masks: bool = True) -> EpisodeResult:
    """Drive one episode: prefix -> logits -> masked step -> FSM -> simulator.

    Terminates on ``<EOS>``, when every plane is cut, or after ``budget``
    tokens. A backend failure aborts the episode (status ``"aborted"``);
    that is distinct from failing the success metric. ``use_masks=False``
    disables the grammar/safety masks and only exists to show they matter.
    """
    vocab = grammar.vocab
    eos = vocab.control("EOS")
    sim_rng, drop_rng = (np.random.default_rng(s) for s in
                         np.random.SeedSequence([noise.seed, episode_id]).spawn(2))
    dec_rng = cfg.rng(episode_id)
    state = SimState.initial(model)
    gstate = GrammarState()
    pit = PITBlock.from_plan(model.plan, grammar)
    l_ref = shortest_path_length(model, grammar)
    tokens: list[int] = []
    commands: list[ActionCommand] = []
    events: list[str] = []
    timings: list[tuple[float, float]] = []
    status = "budget"
    reason = ""
    retries = 0
    prev_q = None
    prefix = None
    generated: list[int] = []
    if hasattr(policy, "reset"):
        policy.reset(episode_id)

    for k in range(budget):
        tracking_ok = not (noise.dropout > 0 and drop_rng.random() < noise.dropout)
        if gstate.phase == "primitive" or prefix is None:
            frame, prev_q = sim_frame(state, prev_q, model, grammar, k, tracking_ok)
            prefix = serialize_prefix(pit, frame, state.last_command, grammar)
            generated = []
        ctx = SafetyContext(model.plan, state.statuses, state.tool_pose, tracking_ok)
        obs = SimObservation(state, gstate, model, grammar, tracking_ok)
        req = PolicyRequest(prefix.tokens, tuple(generated), vocab.size, episode_id, k)
        t0 = time.perf_counter()
        try:
            resp = policy.query(req, obs)
        except BackendError as exc:
            status, reason = "aborted", str(exc)
            retries += getattr(exc, "retries", 0)
            break
        t1 = time.perf_counter()
        retries += resp.retries
        if use_masks:
            masks = [grammar_mask(gstate, vocab), safety_mask(gstate, ctx, vocab)]
        else:
            masks = [np.ones(vocab.size, dtype=bool)]
        if resp.token is not None:
            tok = int(resp.token)
            if not np.logical_and.reduce(masks)[tok]:
                status, reason = "aborted", f"backend sampled inadmissible token {vocab.token_name(tok)}"
                break
        else:
            try:
                tok = step(resp.logits, masks, cfg, dec_rng)
            except MaskError as exc:  # safety invariant; surface loudly
                raise RuntimeError(f"episode {episode_id} step {k}: {exc}") from exc
        t2 = time.perf_counter()
        timings.append(((t1 - t0) * 1e3, (t2 - t1) * 1e3))
        tokens.append(tok)
        generated.append(tok)
        try:
            gstate = advance(gstate, tok, vocab)
        except DecodeError:
            if use_masks:
                raise
            status, reason = "aborted", f"unparsable token {vocab.token_name(tok)} at {k}"
            break
        if tok == eos:
            status = "completed"
            break
        if gstate.completed is not None:
            cmd = gstate.completed
            commands.append(cmd)
            state, ev = apply_action(state, cmd, model, noise, sim_rng, grammar)
            events += ev
            if state.all_cut:
                status = "completed"
                break

    return EpisodeResult(
        episode_id=episode_id, seed=noise.seed, decode_seed=cfg.seed, status=status,
        tokens=tokens, commands=commands, statuses=state.statuses, patches=state.patches,
        path_length=state.path_length, shortest_path=l_ref, violations=list(state.violations),
        events=events, exec_time=state.exec_time, samples=model.samples, patch_seed=model.patch_seed,
        backend=getattr(policy, "name", type(policy).__name__), abort_reason=reason,
        retries=retries, timings=timings,
    )
