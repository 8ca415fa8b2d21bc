"""Action grammar: quantization, vocabulary, command codec and prefix layout.

Commands are a primitive token followed by a fixed number of parameter-bin
tokens::

    <MOVE>  pos_x pos_y pos_z
    <ALIGN> plane yaw pitch roll
    <CUT>   speed

Every parameter slot owns its own contiguous id range so a bin token always
identifies both the slot and the bin.
"""

from __future__ import annotations

import bisect
import logging
import math
import os
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .config import ConfigError, default_config_path, load_yaml

log = logging.getLogger(__name__)

CONTROL_TOKENS = (
    "BOS", "MOVE", "ALIGN", "CUT", "EOS", "SEP", "NULL", "PIT", "VIS", "GRAPH", "STATE",
)
SEGMENTS = ("C", "v", "n", "r", "y")


class Primitive(str, Enum):
    MOVE = "MOVE"
    ALIGN = "ALIGN"
    CUT = "CUT"


# slot order per primitive; each slot names the QuantSpec it is binned with
PRIMITIVE_SLOTS: dict[Primitive, tuple[str, ...]] = {
    Primitive.MOVE: ("pos_x", "pos_y", "pos_z"),
    Primitive.ALIGN: ("plane", "yaw", "pitch", "roll"),
    Primitive.CUT: ("speed",),
}

REQUIRED_SPECS = (
    "pos_x", "pos_y", "pos_z", "yaw", "pitch", "roll", "plane", "speed",
    "normal", "offset", "joint_pos", "joint_vel", "joint_tau",
)


class GrammarError(ValueError):
    """Token stream does not parse. ``index`` is the first offending position."""

    def __init__(self, message: str, index: int | None = None, expected: str | None = None):
        self.index = index
        self.expected = expected
        prefix = "" if index is None else f"token {index}: "
        super().__init__(prefix + message)


@dataclass(frozen=True)
class QuantSpec:
    lo: float
    hi: float
    bins: int

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or not self.lo < self.hi:
            raise ValueError(f"QuantSpec needs finite lo < hi, got [{self.lo}, {self.hi}]")
        if int(self.bins) != self.bins or self.bins < 2:
            raise ValueError(f"QuantSpec needs bins >= 2, got {self.bins}")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.bins

    @property
    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.bins) + 0.5) * self.width


def quantize(x: float, spec: QuantSpec) -> tuple[int, bool]:
    """Bin ``x``; returns ``(bin, clamped)``.

    Values outside ``[lo, hi]`` land in the boundary bins with ``clamped``
    set. ``x == hi`` falls in the last bin without being flagged.
    """
    clamped = bool(x < spec.lo or x > spec.hi)
    if math.isnan(x):
        return 0, True
    b = math.floor((x - spec.lo) / spec.width)
    return min(max(b, 0), spec.bins - 1), clamped


def quantize_array(x: np.ndarray, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    nan = np.isnan(x)
    clamped = (x < spec.lo) | (x > spec.hi) | nan
    b = np.floor((np.where(nan, spec.lo, x) - spec.lo) / spec.width)
    return np.clip(b, 0, spec.bins - 1).astype(np.int64), clamped


def dequantize(b: int, spec: QuantSpec) -> float:
    if not 0 <= b < spec.bins:
        raise ValueError(f"bin {b} outside [0, {spec.bins})")
    return spec.lo + (b + 0.5) * spec.width


@dataclass(frozen=True)
class GrammarConfig:
    specs: Mapping[str, QuantSpec]
    pit_global: int = 16
    pit_view: int = 4
    vis_len: int = 32
    graph_len: int = 16
    n_joints: int = 7
    feature_codebook: int = 64
    token_budget: int = 2048

    def __post_init__(self):
        missing = [k for k in REQUIRED_SPECS if k not in self.specs]
        if missing:
            raise ConfigError(f"grammar config lacks specs: {', '.join(missing)}")
        for name in ("pit_global", "pit_view", "vis_len", "graph_len", "n_joints", "feature_codebook"):
            if getattr(self, name) < 1:
                raise ConfigError(f"grammar config: {name} must be >= 1")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], path: str | None = None) -> "GrammarConfig":
        try:
            specs = {name: QuantSpec(float(s["lo"]), float(s["hi"]), int(s["bins"]))
                     for name, s in data["specs"].items()}
            blocks = data.get("blocks", {})
            return cls(
                specs=specs,
                pit_global=int(blocks.get("pit_global", 16)),
                pit_view=int(blocks.get("pit_view", 4)),
                vis_len=int(blocks.get("vis", 32)),
                graph_len=int(blocks.get("graph", 16)),
                n_joints=int(data.get("n_joints", 7)),
                feature_codebook=int(data.get("feature_codebook", 64)),
                token_budget=int(data.get("token_budget", 2048)),
            )
        except ConfigError as exc:
            raise ConfigError(str(exc), path) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad grammar config: {exc!r}", path) from exc

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": 1,
            "specs": {k: {"lo": s.lo, "hi": s.hi, "bins": s.bins} for k, s in self.specs.items()},
            "blocks": {"pit_global": self.pit_global, "pit_view": self.pit_view,
                       "vis": self.vis_len, "graph": self.graph_len},
            "n_joints": self.n_joints,
            "feature_codebook": self.feature_codebook,
            "token_budget": self.token_budget,
        }

    def slot_specs(self, primitive: Primitive) -> tuple[QuantSpec, ...]:
        return tuple(self.specs[s] for s in PRIMITIVE_SLOTS[primitive])

    @cached_property
    def vocab(self) -> "Vocabulary":
        return Vocabulary(self)


def load_grammar_config(path: str | os.PathLike | None = None) -> GrammarConfig:
    path = default_config_path("grammar.yaml") if path is None else path
    return GrammarConfig.from_dict(load_yaml(path), str(path))


_DEFAULT: GrammarConfig | None = None


def default_grammar() -> GrammarConfig:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_grammar_config()
    return _DEFAULT


class Vocabulary:
    """Dense token-id layout: control tokens, one range per spec, feature codebook."""

    def __init__(self, grammar: GrammarConfig):
        self.grammar = grammar
        self._control = {name: i for i, name in enumerate(CONTROL_TOKENS)}
        self._ranges: dict[str, tuple[int, int]] = {}
        start = len(CONTROL_TOKENS)
        for name, spec in grammar.specs.items():
            self._ranges[name] = (start, start + spec.bins)
            start += spec.bins
        self.feature_range = (start, start + grammar.feature_codebook)
        self.size = self.feature_range[1]
        # id -> spec name lookup for bins
        self._starts = [r[0] for r in self._ranges.values()]
        self._names = list(self._ranges)

    def __len__(self) -> int:
        return self.size

    def control(self, name: str) -> int:
        return self._control[name]

    def primitive_token(self, primitive: Primitive) -> int:
        return self._control[Primitive(primitive).value]

    def range(self, spec_name: str) -> tuple[int, int]:
        return self._ranges[spec_name]

    def bin_token(self, spec_name: str, b: int) -> int:
        start, stop = self._ranges[spec_name]
        if not 0 <= b < stop - start:
            raise ValueError(f"bin {b} outside spec {spec_name!r}")
        return start + b

    def feature_token(self, code: int) -> int:
        start, stop = self.feature_range
        if not 0 <= code < stop - start:
            raise ValueError(f"feature code {code} outside codebook")
        return start + code

    def lookup(self, token: int) -> tuple[str, Any]:
        """Map an id to ``("control", name)``, ``("bin", (spec, bin))`` or ``("feature", code)``."""
        token = int(token)
        if not 0 <= token < self.size:
            raise KeyError(token)
        if token < len(CONTROL_TOKENS):
            return "control", CONTROL_TOKENS[token]
        if token >= self.feature_range[0]:
            return "feature", token - self.feature_range[0]
        k = bisect.bisect_right(self._starts, token) - 1
        name = self._names[k]
        return "bin", (name, token - self._ranges[name][0])

    def token_name(self, token: int) -> str:
        kind, payload = self.lookup(token)
        if kind == "control":
            return f"<{payload}>"
        if kind == "bin":
            return f"{payload[0]}[{payload[1]}]"
        return f"feat[{payload}]"


@dataclass(frozen=True)
class ActionCommand:
    primitive: Primitive
    bins: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "primitive", Primitive(self.primitive))
        object.__setattr__(self, "bins", tuple(int(b) for b in self.bins))
        arity = len(PRIMITIVE_SLOTS[self.primitive])
        if len(self.bins) != arity:
            raise ValueError(f"{self.primitive.value} takes {arity} parameters, got {len(self.bins)}")

    def check(self, grammar: GrammarConfig) -> None:
        for slot, spec, b in zip(PRIMITIVE_SLOTS[self.primitive], grammar.slot_specs(self.primitive), self.bins):
            if not 0 <= b < spec.bins:
                raise ValueError(f"{self.primitive.value}.{slot} bin {b} outside [0, {spec.bins})")

    def values(self, grammar: GrammarConfig) -> tuple[float, ...]:
        """Dequantized parameter values (bin centres)."""
        return tuple(dequantize(b, s) for b, s in zip(self.bins, grammar.slot_specs(self.primitive)))

    def __str__(self) -> str:
        return f"<{self.primitive.value}>" + "".join(f"[{b}]" for b in self.bins)


def make_move(grammar: GrammarConfig, position: Sequence[float]) -> ActionCommand:
    bins = [quantize(float(x), grammar.specs[s])[0] for x, s in zip(position, PRIMITIVE_SLOTS[Primitive.MOVE])]
    return ActionCommand(Primitive.MOVE, tuple(bins))


def make_align(grammar: GrammarConfig, plane_index: int, ypr_deg: Sequence[float] = (0.0, 0.0, 0.0)) -> ActionCommand:
    specs = grammar.slot_specs(Primitive.ALIGN)
    bins = [quantize(float(plane_index), specs[0])[0]]
    bins += [quantize(float(a), s)[0] for a, s in zip(ypr_deg, specs[1:])]
    return ActionCommand(Primitive.ALIGN, tuple(bins))


def make_cut(grammar: GrammarConfig, speed: float) -> ActionCommand:
    return ActionCommand(Primitive.CUT, (quantize(float(speed), grammar.specs["speed"])[0],))


def encode_command(cmd: ActionCommand, vocab: Vocabulary) -> list[int]:
    tokens = [vocab.primitive_token(cmd.primitive)]
    tokens += [vocab.bin_token(s, b) for s, b in zip(PRIMITIVE_SLOTS[cmd.primitive], cmd.bins)]
    return tokens


def encode_commands(cmds: Iterable[ActionCommand], vocab: Vocabulary) -> list[int]:
    out: list[int] = []
    for c in cmds:
        out += encode_command(c, vocab)
    return out


def decode_tokens(tokens: Sequence[int], vocab: Vocabulary, allow_eos: bool = True) -> list[ActionCommand]:
    """Parse a flat token list into commands.

    A trailing ``<EOS>`` ends parsing; anything after it is an error. Raises
    :class:`GrammarError` carrying the first offending index and the token
    class that was expected there.
    """
    cmds: list[ActionCommand] = []
    i = 0
    n = len(tokens)
    while i < n:
        try:
            kind, payload = vocab.lookup(tokens[i])
        except KeyError:
            raise GrammarError(f"unknown token id {tokens[i]}", i, "primitive") from None
        if kind == "control" and payload == "EOS" and allow_eos:
            if i != n - 1:
                raise GrammarError("tokens after <EOS>", i + 1, "end of sequence")
            break
        if kind != "control" or payload not in Primitive.__members__:
            raise GrammarError(f"expected primitive, got {vocab.token_name(tokens[i])}", i, "primitive")
        prim = Primitive(payload)
        slots = PRIMITIVE_SLOTS[prim]
        bins = []
        for k, slot in enumerate(slots):
            j = i + 1 + k
            expected = f"{slot} bin"
            if j >= n:
                raise GrammarError(f"{prim.value} truncated, expected {expected}", j, expected)
            try:
                kind, payload = vocab.lookup(tokens[j])
            except KeyError:
                raise GrammarError(f"unknown token id {tokens[j]}", j, expected) from None
            if kind != "bin" or payload[0] != slot:
                raise GrammarError(f"expected {expected}, got {vocab.token_name(tokens[j])}", j, expected)
            bins.append(payload[1])
        cmds.append(ActionCommand(prim, tuple(bins)))
        i += 1 + len(slots)
    return cmds


# ---------------------------------------------------------------------------
# model-input prefix

@dataclass(frozen=True)
class PITBlock:
    """Preoperative context block.

    ``global_codes`` and ``view_codes`` are opaque feature codes standing in
    for learned embeddings; landmark and plane anchors are real quantized
    geometry.
    """

    global_codes: tuple[int, ...]
    view_codes: tuple[tuple[int, ...], ...]
    landmark_bins: tuple[tuple[int, int, int], ...]
    normal_bins: tuple[tuple[int, int, int], ...]
    offset_bins: tuple[int, ...]

    @property
    def n_planes(self) -> int:
        return len(self.offset_bins)

    @classmethod
    def from_plan(cls, plan, grammar: GrammarConfig,
                  global_codes: Sequence[int] | None = None,
                  view_codes: Sequence[Sequence[int]] | None = None) -> "PITBlock":
        """Quantize a :class:`~kneecut.geometry.ResectionPlan`'s anchors."""
        specs = grammar.specs
        n_planes = len(plan.planes)
        if global_codes is None:
            global_codes = [0] * grammar.pit_global
        if view_codes is None:
            view_codes = [[0] * grammar.pit_view for _ in range(n_planes)]
        landmarks = tuple(
            tuple(quantize(float(x), specs[s])[0] for x, s in zip(lm.position, ("pos_x", "pos_y", "pos_z")))
            for lm in plan.landmarks
        )
        normals = tuple(tuple(quantize(float(c), specs["normal"])[0] for c in p.normal) for p in plan.planes)
        offsets = tuple(quantize(float(p.offset), specs["offset"])[0] for p in plan.planes)
        return cls(tuple(global_codes), tuple(tuple(v) for v in view_codes), landmarks, normals, offsets)

    def tokens(self, grammar: GrammarConfig) -> list[int]:
        vocab = grammar.vocab
        if len(self.global_codes) != grammar.pit_global:
            raise GrammarError(f"PIT global run has {len(self.global_codes)} codes, config wants {grammar.pit_global}")
        if len(self.view_codes) != self.n_planes or len(self.normal_bins) != self.n_planes:
            raise GrammarError("PIT plane count mismatch between views, normals and offsets")
        out = [vocab.control("BOS"), vocab.control("PIT")]
        out += [vocab.feature_token(c) for c in self.global_codes]
        for run in self.view_codes:
            if len(run) != grammar.pit_view:
                raise GrammarError(f"PIT view run has {len(run)} codes, config wants {grammar.pit_view}")
            out += [vocab.feature_token(c) for c in run]
        for lm in self.landmark_bins:
            out += [vocab.bin_token(s, b) for s, b in zip(("pos_x", "pos_y", "pos_z"), lm)]
        for nb, ob in zip(self.normal_bins, self.offset_bins):
            out += [vocab.bin_token("normal", b) for b in nb]
            out.append(vocab.bin_token("offset", ob))
        return out


def encode_robot_state(q, qd, tau, grammar: GrammarConfig) -> tuple[int, ...]:
    """Quantize joint angles, velocities and torques into state-token bins (no marker)."""
    parts = []
    for values, name in ((q, "joint_pos"), (qd, "joint_vel"), (tau, "joint_tau")):
        values = np.asarray(values, dtype=float)
        if values.shape != (grammar.n_joints,):
            raise GrammarError(f"{name} needs {grammar.n_joints} values, got shape {values.shape}")
        bins, _ = quantize_array(values, grammar.specs[name])
        parts += [grammar.vocab.bin_token(name, int(b)) for b in bins]
    return tuple(parts)


@dataclass(frozen=True)
class PrefixSequence:
    tokens: tuple[int, ...]
    offsets: tuple[int, ...]  # len(SEGMENTS) + 1 boundaries, offsets[-1] == len(tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def segment(self, name: str) -> tuple[int, ...]:
        k = SEGMENTS.index(name)
        return self.tokens[self.offsets[k]:self.offsets[k + 1]]


def serialize_prefix(pit: PITBlock, frame, prev: ActionCommand | None, grammar: GrammarConfig) -> PrefixSequence:
    """Lay out ``C | v | n | r | y`` for one decoding step.

    ``frame`` is anything exposing ``vis_codes``, ``graph_codes`` (feature
    codes) and ``state_tokens`` (from :func:`encode_robot_state`).
    """
    vocab = grammar.vocab
    c = pit.tokens(grammar)
    vis = list(frame.vis_codes)
    graph = list(frame.graph_codes)
    state = list(frame.state_tokens)
    if len(vis) != grammar.vis_len:
        raise GrammarError(f"visual block has {len(vis)} codes, config wants {grammar.vis_len}")
    if len(graph) != grammar.graph_len:
        raise GrammarError(f"graph block has {len(graph)} codes, config wants {grammar.graph_len}")
    if len(state) != 3 * grammar.n_joints:
        raise GrammarError(f"state block has {len(state)} tokens, config wants {3 * grammar.n_joints}")
    v = [vocab.control("VIS")] + [vocab.feature_token(x) for x in vis]
    n = [vocab.control("GRAPH")] + [vocab.feature_token(x) for x in graph]
    r = [vocab.control("STATE")] + state
    y = [vocab.control("NULL")] if prev is None else encode_command(prev, vocab)
    offsets = [0]
    for seg in (c, v, n, r, y):
        offsets.append(offsets[-1] + len(seg))
    return PrefixSequence(tuple(c + v + n + r + y), tuple(offsets))


def pack_windows(prefixes: Sequence[PrefixSequence | Sequence[int]], budget: int, vocab: Vocabulary) -> list[list[int]]:
    """First-fit pack windows into sequences of at most ``budget`` tokens.

    Windows inside a pack are separated by a single ``<SEP>``; a window is
    never split.
    """
    sep = vocab.control("SEP")
    packs: list[list[int]] = []
    for k, p in enumerate(prefixes):
        toks = list(p.tokens if isinstance(p, PrefixSequence) else p)
        if sep in toks:
            raise ValueError(f"window {k} contains <SEP>")
        if len(toks) > budget:
            raise ValueError(f"window {k} has {len(toks)} tokens, budget is {budget}")
        for pack in packs:
            if len(pack) + 1 + len(toks) <= budget:
                pack.append(sep)
                pack.extend(toks)
                break
        else:
            packs.append(toks)
    return packs


def unpack_windows(packs: Iterable[Sequence[int]], vocab: Vocabulary) -> list[tuple[int, ...]]:
    sep = vocab.control("SEP")
    out: list[tuple[int, ...]] = []
    for pack in packs:
        cur: list[int] = []
        for t in pack:
            if t == sep:
                out.append(tuple(cur))
                cur = []
            else:
                cur.append(t)
        out.append(tuple(cur))
    return out


def shift_targets(steps: Sequence[tuple[Any, Any]], dt: int) -> list[tuple[Any, Any]]:
    """Pair observation t with the target originally at t + dt (latency compensation)."""
    if dt < 0 or int(dt) != dt:
        raise ValueError(f"dt must be a non-negative integer number of grid steps, got {dt}")
    if dt >= len(steps):
        if steps:
            log.warning("shift of %d steps empties a sequence of length %d", dt, len(steps))
        return []
    return [(steps[t][0], steps[t + dt][1]) for t in range(len(steps) - dt)]
