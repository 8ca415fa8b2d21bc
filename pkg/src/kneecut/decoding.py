"""Grammar- and safety-constrained decoding over per-step logits.

Masks are boolean vectors over the vocabulary. The grammar mask encodes the
command FSM; the safety mask encodes plan/state rules:

* ``<CUT>`` only when a plane is aligned and the tool is within tolerance,
* ``<ALIGN>`` never names an already-cut (or reserved) plane,
* ``<MOVE>`` targets stay inside the workspace.

``<MOVE>`` with in-bounds bins is never removed by the safety mask, so the
conjunction of both masks is always non-empty.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .geometry import ResectionPlan, SE3Transform, alignment_error, compose
from .grammar import (
    PRIMITIVE_SLOTS, ActionCommand, GrammarConfig, Primitive, Vocabulary, dequantize,
)


class PlaneStatus(str, Enum):
    PENDING = "pending"
    ALIGNED = "aligned"
    CUT = "cut"


class DecodeError(RuntimeError):
    """Harness bug: an inadmissible token reached ``advance``."""


class MaskError(RuntimeError):
    """The combined mask admits nothing. Never recovered silently."""


# ---------------------------------------------------------------------------
# FSM

@dataclass(frozen=True)
class GrammarState:
    phase: str = "primitive"  # "primitive" | "param" | "terminal"
    primitive: Primitive | None = None
    slot: int = 0
    partial: tuple[int, ...] = ()
    n_commands: int = 0
    completed: ActionCommand | None = None  # command finished by the last token

    def __post_init__(self):
        if self.phase == "param":
            if self.primitive is None or not 0 <= self.slot < len(PRIMITIVE_SLOTS[self.primitive]):
                raise ValueError(f"invalid param state {self.primitive}/{self.slot}")
        elif self.phase not in ("primitive", "terminal"):
            raise ValueError(f"unknown phase {self.phase!r}")

    @property
    def expected_slot(self) -> str | None:
        if self.phase != "param":
            return None
        return PRIMITIVE_SLOTS[self.primitive][self.slot]


def _tables(vocab: Vocabulary) -> dict:
    cache = getattr(vocab, "_mask_tables", None)
    if cache is not None:
        return cache
    size = vocab.size
    prim = np.zeros(size, dtype=bool)
    for name in ("MOVE", "ALIGN", "CUT", "EOS"):
        prim[vocab.control(name)] = True
    eos = np.zeros(size, dtype=bool)
    eos[vocab.control("EOS")] = True
    slots = {}
    for p, names in PRIMITIVE_SLOTS.items():
        for k, name in enumerate(names):
            m = np.zeros(size, dtype=bool)
            start, stop = vocab.range(name)
            m[start:stop] = True
            slots[(p, k)] = m
    cache = {"primitive": prim, "terminal": eos, "slots": slots, "workspace": {}}
    vocab._mask_tables = cache
    return cache


def grammar_mask(state: GrammarState, vocab: Vocabulary) -> np.ndarray:
    t = _tables(vocab)
    if state.phase == "primitive":
        return t["primitive"]
    if state.phase == "terminal":
        return t["terminal"]
    return t["slots"][(state.primitive, state.slot)]


def advance(state: GrammarState, token: int, vocab: Vocabulary) -> GrammarState:
    if not grammar_mask(state, vocab)[token]:
        raise DecodeError(f"token {vocab.token_name(token)} inadmissible in state {state.phase}"
                          f"/{state.expected_slot}")
    if state.phase == "terminal":
        return replace(state, completed=None)
    if state.phase == "primitive":
        if token == vocab.control("EOS"):
            return GrammarState("terminal", n_commands=state.n_commands)
        prim = Primitive(vocab.lookup(token)[1])
        return GrammarState("param", prim, 0, (), state.n_commands)
    b = vocab.lookup(token)[1][1]
    partial = state.partial + (b,)
    if len(partial) == len(PRIMITIVE_SLOTS[state.primitive]):
        cmd = ActionCommand(state.primitive, partial)
        return GrammarState("primitive", n_commands=state.n_commands + 1, completed=cmd)
    return GrammarState("param", state.primitive, state.slot + 1, partial, state.n_commands)


# ---------------------------------------------------------------------------
# safety context

@dataclass(frozen=True, eq=False)
class SafetyContext:
    plan: ResectionPlan
    statuses: tuple[PlaneStatus, ...]
    tool_pose: SE3Transform
    tracking_ok: bool = True
    tolerance_deg: float | None = None
    tolerance_mm: float | None = None

    def __post_init__(self):
        if len(self.statuses) != len(self.plan.planes):
            raise ValueError("one status per plane required")
        if sum(s == PlaneStatus.ALIGNED for s in self.statuses) > 1:
            raise ValueError("at most one plane may be aligned")
        if self.tolerance_deg is None:
            object.__setattr__(self, "tolerance_deg", self.plan.tolerance_deg)
        if self.tolerance_mm is None:
            object.__setattr__(self, "tolerance_mm", self.plan.tolerance_mm)

    @classmethod
    def fresh(cls, plan: ResectionPlan, tool_pose: SE3Transform | None = None, **kw) -> "SafetyContext":
        return cls(plan, (PlaneStatus.PENDING,) * len(plan.planes),
                   SE3Transform.identity() if tool_pose is None else tool_pose, **kw)

    @property
    def aligned_plane(self) -> int | None:
        for i, s in enumerate(self.statuses):
            if s == PlaneStatus.ALIGNED:
                return i
        return None

    @property
    def all_cut(self) -> bool:
        return all(s == PlaneStatus.CUT for s in self.statuses)

    def within_tolerance(self, plane_index: int, pose: SE3Transform | None = None) -> bool:
        angle, dist = alignment_error(self.tool_pose if pose is None else pose, self.plan.planes[plane_index])
        return angle <= self.tolerance_deg and dist <= self.tolerance_mm

    def cut_ready(self) -> bool:
        m = self.aligned_plane
        return m is not None and self.tracking_ok and self.within_tolerance(m)


def nominal_pose_after(cmd: ActionCommand, pose: SE3Transform, plan: ResectionPlan,
                       grammar: GrammarConfig, aligned: int | None = None) -> SE3Transform:
    """Noise-free tool pose after executing ``cmd`` from ``pose``.

    MOVE keeps orientation and translates to the target bin centres; ALIGN
    sets the plane's canonical frame composed with the orientation offset;
    CUT sweeps the aligned plane's window along its u-axis.
    """
    vals = cmd.values(grammar)
    if cmd.primitive == Primitive.MOVE:
        return SE3Transform(pose.rotation, np.array(vals))
    if cmd.primitive == Primitive.ALIGN:
        if cmd.bins[0] >= len(plan.planes):  # reserved plane: no motion
            return pose
        plane = plan.planes[cmd.bins[0]]
        offset = SE3Transform.from_euler_zyx(*vals[1:])
        return compose(plane.canonical_frame(), offset)
    if aligned is None:
        return pose
    plane = plan.planes[aligned]
    return SE3Transform(pose.rotation, pose.translation + plane.sweep_length * plane.axis_u)


def apply_semantics(ctx: SafetyContext, cmd: ActionCommand, grammar: GrammarConfig) -> SafetyContext:
    """Update plane statuses and the nominal tool pose after a completed command."""
    statuses = list(ctx.statuses)
    aligned = ctx.aligned_plane
    pose = nominal_pose_after(cmd, ctx.tool_pose, ctx.plan, grammar, aligned)
    if cmd.primitive == Primitive.MOVE:
        if aligned is not None:
            statuses[aligned] = PlaneStatus.PENDING
    elif cmd.primitive == Primitive.ALIGN:
        if aligned is not None:
            statuses[aligned] = PlaneStatus.PENDING
        m = cmd.bins[0]
        if m < len(statuses) and statuses[m] != PlaneStatus.CUT and ctx.within_tolerance(m, pose):
            statuses[m] = PlaneStatus.ALIGNED
    elif aligned is not None:
        statuses[aligned] = PlaneStatus.CUT
    return replace(ctx, statuses=tuple(statuses), tool_pose=pose)


def _workspace_bins(vocab: Vocabulary, plan: ResectionPlan) -> dict[str, np.ndarray]:
    key = (tuple(plan.workspace_lo), tuple(plan.workspace_hi))
    cache = _tables(vocab)["workspace"]
    if key not in cache:
        out = {}
        for k, name in enumerate(PRIMITIVE_SLOTS[Primitive.MOVE]):
            c = vocab.grammar.specs[name].centers
            ok = (c >= plan.workspace_lo[k]) & (c <= plan.workspace_hi[k])
            if not ok.any():
                raise ValueError(f"workspace excludes every {name} bin")
            out[name] = ok
        cache[key] = out
    return cache[key]


def safety_mask(state: GrammarState, ctx: SafetyContext, vocab: Vocabulary) -> np.ndarray:
    mask = np.ones(vocab.size, dtype=bool)
    if state.phase == "primitive":
        if not ctx.cut_ready():
            mask[vocab.control("CUT")] = False
        if ctx.all_cut:
            mask[vocab.control("ALIGN")] = False
    elif state.phase == "param":
        slot = state.expected_slot
        start, stop = vocab.range(slot)
        if state.primitive == Primitive.MOVE:
            mask[start:stop] = _workspace_bins(vocab, ctx.plan)[slot]
        elif state.primitive == Primitive.ALIGN and slot == "plane":
            ok = np.zeros(stop - start, dtype=bool)
            for i, s in enumerate(ctx.statuses[: stop - start]):
                ok[i] = s != PlaneStatus.CUT
            mask[start:stop] = ok
    return mask


def combined_mask(state: GrammarState, ctx: SafetyContext, vocab: Vocabulary) -> np.ndarray:
    return grammar_mask(state, vocab) & safety_mask(state, ctx, vocab)


# ---------------------------------------------------------------------------
# sampling

@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"  # "greedy" | "temperature" | "top_p"
    seed: int = 0
    temperature: float = 1.0
    top_p: float = 1.0

    def __post_init__(self):
        if self.mode not in ("greedy", "temperature", "top_p"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    def rng(self, *stream: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, *stream]))


def step(logits: np.ndarray, masks: Sequence[np.ndarray], cfg: DecodeConfig,
         rng: np.random.Generator | None = None) -> int:
    """Pick one token from ``logits`` restricted to the conjunction of ``masks``.

    Greedy ties go to the lowest id. Sampling modes draw one uniform from
    ``rng`` per call.
    """
    logits = np.asarray(logits, dtype=float)
    allowed = masks[0]
    for m in masks[1:]:
        allowed = allowed & m
    if allowed.shape != logits.shape:
        raise ValueError(f"mask length {allowed.shape} != logits length {logits.shape}")
    idx = np.flatnonzero(allowed)
    if idx.size == 0:
        raise MaskError("combined mask admits no token")
    z = logits[idx]
    if cfg.mode == "greedy":
        return int(idx[int(np.argmax(z))])
    if rng is None:
        raise ValueError("sampling modes need an rng")
    z = (z - z.max()) / cfg.temperature
    p = np.exp(z)
    p /= p.sum()
    if cfg.mode == "top_p" and cfg.top_p < 1:
        order = np.argsort(-p, kind="stable")
        cum = np.cumsum(p[order])
        keep = order[: int(np.searchsorted(cum, cfg.top_p)) + 1]
        keep.sort()
        idx, p = idx[keep], p[keep] / p[keep].sum()
    u = rng.random()
    k = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return int(idx[min(k, idx.size - 1)])


@dataclass
class DecodeTrace:
    tokens: list[int]
    commands: list[ActionCommand]
    ctx: SafetyContext
    status: str  # "eos" | "all-cut" | "budget" | "unparsable"


def decode_episode(logits_fn: Callable[[int, GrammarState, SafetyContext], np.ndarray], ctx: SafetyContext,
                   grammar: GrammarConfig, cfg: DecodeConfig, budget: int,
                   rng: np.random.Generator | None = None, use_masks: bool = True) -> DecodeTrace:
    """Decode against the nominal command semantics, without a simulator.

    ``logits_fn(k, state, ctx)`` supplies step ``k``'s logits. With
    ``use_masks=False`` the first token the FSM cannot parse is kept and
    ends the episode.
    """
    vocab = grammar.vocab
    eos = vocab.control("EOS")
    rng = cfg.rng() if rng is None else rng
    state = GrammarState()
    tokens: list[int] = []
    commands: list[ActionCommand] = []
    everything = np.ones(vocab.size, dtype=bool)
    for k in range(budget):
        masks = [grammar_mask(state, vocab), safety_mask(state, ctx, vocab)] if use_masks else [everything]
        tok = step(logits_fn(k, state, ctx), masks, cfg, rng)
        tokens.append(tok)
        try:
            state = advance(state, tok, vocab)
        except DecodeError:
            if use_masks:
                raise
            return DecodeTrace(tokens, commands, ctx, "unparsable")
        if tok == eos:
            return DecodeTrace(tokens, commands, ctx, "eos")
        if state.completed is not None:
            commands.append(state.completed)
            ctx = apply_semantics(ctx, state.completed, grammar)
            if ctx.all_cut:
                return DecodeTrace(tokens, commands, ctx, "all-cut")
    return DecodeTrace(tokens, commands, ctx, "budget")


# ---------------------------------------------------------------------------
# offline checker

@dataclass(frozen=True)
class Violation:
    index: int
    rule: str
    detail: str = ""


def validate_sequence(tokens: Sequence[int], ctx: SafetyContext, grammar: GrammarConfig,
                      require_complete: bool = False) -> Violation | None:
    """Replay ``tokens`` against the grammar and safety rules.

    Written as explicit rule checks rather than by reusing the mask vectors
    so it can serve as an independent oracle for the decoder. Returns the
    first violation, or ``None``. A command cut off at the end of the stream
    is only a violation with ``require_complete``.
    """
    vocab = grammar.vocab
    plan = ctx.plan
    prim: Primitive | None = None
    bins: list[int] = []
    ended = False
    for i, tok in enumerate(tokens):
        try:
            kind, payload = vocab.lookup(tok)
        except KeyError:
            return Violation(i, "unknown-token", str(tok))
        if ended:
            return Violation(i, "after-eos")
        if prim is None:
            if kind != "control" or payload not in ("MOVE", "ALIGN", "CUT", "EOS"):
                return Violation(i, "expected-primitive", vocab.token_name(tok))
            if payload == "EOS":
                ended = True
                continue
            if payload == "CUT":
                m = ctx.aligned_plane
                if m is None:
                    return Violation(i, "cut-before-align")
                if not ctx.tracking_ok:
                    return Violation(i, "cut-without-tracking")
                angle, dist = alignment_error(ctx.tool_pose, plan.planes[m])
                if angle > ctx.tolerance_deg or dist > ctx.tolerance_mm:
                    return Violation(i, "cut-misaligned", f"{angle:.3f} deg, {dist:.3f} mm")
            if payload == "ALIGN" and all(s == PlaneStatus.CUT for s in ctx.statuses):
                return Violation(i, "align-no-pending-plane")
            prim, bins = Primitive(payload), []
            continue
        slot = PRIMITIVE_SLOTS[prim][len(bins)]
        if kind != "bin" or payload[0] != slot:
            return Violation(i, f"expected-{slot}", vocab.token_name(tok))
        b = payload[1]
        if prim == Primitive.MOVE:
            k = len(bins)
            x = dequantize(b, grammar.specs[slot])
            if not plan.workspace_lo[k] <= x <= plan.workspace_hi[k]:
                return Violation(i, "move-out-of-workspace", f"{slot}={x:.3f}")
        elif prim == Primitive.ALIGN and slot == "plane":
            if b >= len(plan.planes):
                return Violation(i, "align-reserved-plane", str(b))
            if ctx.statuses[b] == PlaneStatus.CUT:
                return Violation(i, "align-cut-plane", plan.planes[b].name)
        bins.append(b)
        if len(bins) == len(PRIMITIVE_SLOTS[prim]):
            ctx = apply_semantics(ctx, ActionCommand(prim, tuple(bins)), grammar)
            prim = None
    if require_complete and prim is not None:
        return Violation(len(tokens), "truncated-command", prim.value)
    return None
