import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kneecut.geometry import load_plan
from kneecut.grammar import (CONTROL_TOKENS, SEGMENTS, ActionCommand, GrammarError, PITBlock, Primitive, QuantSpec,
                             decode_tokens, default_grammar, dequantize, encode_command, encode_commands,
                             encode_robot_state, make_align, make_cut, make_move, pack_windows, quantize,
                             quantize_array, serialize_prefix, shift_targets, unpack_windows, PRIMITIVE_SLOTS)

G = default_grammar()
V = G.vocab


def commands(grammar=G):
    def build(prim):
        specs = grammar.slot_specs(prim)
        return st.tuples(*[st.integers(0, s.bins - 1) for s in specs]).map(lambda b: ActionCommand(prim, b))
    return st.sampled_from(list(Primitive)).flatmap(build)


specs = st.builds(
    lambda lo, span, bins: QuantSpec(lo, lo + span, bins),
    st.floats(-1e3, 1e3, allow_nan=False), st.floats(1e-3, 1e3, allow_nan=False), st.integers(2, 4096),
)


# --- quantization ---------------------------------------------------------

def test_quantize_examples():
    s = QuantSpec(0.0, 100.0, 100)
    assert quantize(0.0, s) == (0, False)
    assert quantize(37.4, s) == (37, False)
    assert quantize(110.0, s) == (99, True)
    assert quantize(-5.0, s) == (0, True)
    assert quantize(100.0, s) == (99, False)
    assert dequantize(37, s) == 37.5


def test_dequantize_rejects_out_of_range():
    with pytest.raises(ValueError):
        dequantize(100, QuantSpec(0.0, 100.0, 100))
    with pytest.raises(ValueError):
        dequantize(-1, QuantSpec(0.0, 100.0, 100))


@pytest.mark.parametrize("lo,hi,bins", [(1.0, 1.0, 4), (2.0, 1.0, 4), (0.0, 1.0, 1), (0.0, math.inf, 4)])
def test_quantspec_invariants(lo, hi, bins):
    with pytest.raises(ValueError):
        QuantSpec(lo, hi, bins)


@given(specs, st.data())
def test_bin_centre_round_trip(spec, data):
    b = data.draw(st.integers(0, spec.bins - 1))
    assert quantize(dequantize(b, spec), spec)[0] == b


@given(specs, st.floats(0.0, 1.0))
def test_quantization_error_bound(spec, u):
    x = spec.lo + u * (spec.hi - spec.lo)
    b, clamped = quantize(x, spec)
    assert not clamped
    assert abs(x - dequantize(b, spec)) <= spec.width / 2 + 1e-9 * max(1.0, abs(x))


@given(specs, st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=50))
def test_quantize_array_matches_scalar(spec, xs):
    bins, clamped = quantize_array(np.array(xs), spec)
    for x, b, c in zip(xs, bins, clamped):
        assert (int(b), bool(c)) == quantize(x, spec)


def test_orientation_zero_is_a_bin_centre():
    for name in ("yaw", "pitch", "roll"):
        s = G.specs[name]
        assert dequantize(quantize(0.0, s)[0], s) == 0.0


# --- vocabulary -----------------------------------------------------------

def test_vocabulary_is_a_bijection():
    seen = set()
    for tok in range(V.size):
        kind, payload = V.lookup(tok)
        if kind == "control":
            back = V.control(payload)
        elif kind == "bin":
            back = V.bin_token(*payload)
        else:
            back = V.feature_token(payload)
        assert back == tok
        seen.add((kind, payload))
    assert len(seen) == V.size
    with pytest.raises(KeyError):
        V.lookup(V.size)


def test_vocabulary_layout_is_dense_and_stable():
    assert [V.control(n) for n in CONTROL_TOKENS] == list(range(len(CONTROL_TOKENS)))
    ranges = sorted(V.range(n) for n in G.specs)
    assert ranges[0][0] == len(CONTROL_TOKENS)
    for (a0, a1), (b0, _) in zip(ranges, ranges[1:]):
        assert a1 == b0
    assert ranges[-1][1] == V.feature_range[0]
    assert default_grammar().vocab.size == V.size


# --- commands -------------------------------------------------------------

def test_cut_encoding_is_two_tokens():
    cmd = make_cut(G, 5.0)
    k = cmd.bins[0]
    assert encode_command(cmd, V) == [V.control("CUT"), V.bin_token("speed", k)]


def test_move_is_four_tokens_and_align_five():
    assert len(encode_command(make_move(G, (1.0, 2.0, 3.0)), V)) == 4
    assert len(encode_command(make_align(G, 2), V)) == 5


def test_command_arity_enforced():
    with pytest.raises(ValueError):
        ActionCommand(Primitive.CUT, (1, 2))
    with pytest.raises(ValueError):
        ActionCommand(Primitive.MOVE, (1, 2, 99999)).check(G)


@settings(max_examples=300)
@given(st.lists(commands(), max_size=20))
def test_encode_decode_round_trip(cmds):
    toks = encode_commands(cmds, V)
    assert decode_tokens(toks, V) == cmds
    assert decode_tokens(toks + [V.control("EOS")], V) == cmds


def test_decode_empty():
    assert decode_tokens([], V) == []


def test_decode_reports_position_and_expected_class():
    with pytest.raises(GrammarError) as exc:
        decode_tokens([V.control("CUT"), V.control("MOVE")], V)
    assert exc.value.index == 1
    assert exc.value.expected == "speed bin"
    assert "expected speed bin" in str(exc.value)


@pytest.mark.parametrize("tokens,index", [
    ([V.size + 3], 0),
    ([V.bin_token("speed", 3)], 0),
    ([V.control("MOVE"), V.bin_token("pos_x", 1)], 2),
    ([V.control("EOS"), V.control("CUT")], 1),
    ([V.control("ALIGN"), V.bin_token("yaw", 0)], 1),
])
def test_decode_errors(tokens, index):
    with pytest.raises(GrammarError) as exc:
        decode_tokens(tokens, V)
    assert exc.value.index == index


def test_make_align_quantizes_offsets():
    cmd = make_align(G, 3, (2.0, -1.0, 0.0))
    plane, yaw, pitch, roll = cmd.values(G)
    assert cmd.bins[0] == 3
    assert abs(yaw - 2.0) <= G.specs["yaw"].width / 2
    assert abs(pitch + 1.0) <= G.specs["pitch"].width / 2
    assert roll == 0.0


# --- prefix ---------------------------------------------------------------

class _Frame:
    def __init__(self, vis=None, graph=None, state=None):
        z = np.zeros(G.n_joints)
        self.vis_codes = vis if vis is not None else (1,) * G.vis_len
        self.graph_codes = graph if graph is not None else (2,) * G.graph_len
        self.state_tokens = state if state is not None else encode_robot_state(z, z, z, G)


@pytest.fixture(scope="module")
def pit():
    return PITBlock.from_plan(load_plan(), G)


def test_prefix_layout(pit):
    p = serialize_prefix(pit, _Frame(), None, G)
    assert all(a < b for a, b in zip(p.offsets, p.offsets[1:]))
    assert p.offsets[0] == 0 and p.offsets[-1] == len(p)
    assert p.segment("y") == (V.control("NULL"),)
    assert p.segment("v")[0] == V.control("VIS") and len(p.segment("v")) == 1 + G.vis_len
    assert p.segment("n")[0] == V.control("GRAPH") and len(p.segment("n")) == 1 + G.graph_len
    assert p.segment("r")[0] == V.control("STATE") and len(p.segment("r")) == 1 + 3 * G.n_joints
    c = p.segment("C")
    assert c[:2] == (V.control("BOS"), V.control("PIT"))
    assert len(c) == 2 + G.pit_global + 6 * G.pit_view + 3 * len(load_plan().landmarks) + 6 * 4
    assert tuple(SEGMENTS) == ("C", "v", "n", "r", "y")


def test_prefix_is_deterministic_and_ends_with_prev(pit):
    cut = make_cut(G, 5.0)
    a = serialize_prefix(pit, _Frame(), cut, G)
    b = serialize_prefix(pit, _Frame(), cut, G)
    assert a == b
    assert list(a.tokens[-2:]) == encode_command(cut, V)


def test_prefix_segment_length_checked(pit):
    with pytest.raises(GrammarError):
        serialize_prefix(pit, _Frame(vis=(0,) * 3), None, G)
    with pytest.raises(GrammarError):
        serialize_prefix(pit, _Frame(state=(V.bin_token("joint_pos", 0),)), None, G)


def test_pit_anchors_round_trip(pit):
    plan = load_plan()
    assert pit.n_planes == 6
    for plane, nb, ob in zip(plan.planes, pit.normal_bins, pit.offset_bins):
        ns, os_ = G.specs["normal"], G.specs["offset"]
        assert np.allclose([dequantize(b, ns) for b in nb], plane.normal, atol=ns.width / 2)
        assert abs(dequantize(ob, os_) - plane.offset) <= os_.width / 2


# --- packing and target shift ---------------------------------------------

def test_pack_examples():
    sep = V.control("SEP")
    a, b = [V.control("BOS")] * 10, [V.control("PIT")] * 10
    assert pack_windows([a], 25, V) == [a]
    packs = pack_windows([a, b], 25, V)
    assert len(packs) == 1 and len(packs[0]) == 21 and packs[0].count(sep) == 1
    with pytest.raises(ValueError):
        pack_windows([[V.control("BOS")] * 30], 25, V)


@given(st.lists(st.integers(1, 40), min_size=1, max_size=30), st.integers(40, 120))
def test_packing_conserves_windows(lengths, budget):
    wins = [[V.feature_token(i % G.feature_codebook)] * n for i, n in enumerate(lengths)]
    packs = pack_windows(wins, budget, V)
    assert all(len(p) <= budget for p in packs)
    assert sorted(unpack_windows(packs, V)) == sorted(tuple(w) for w in wins)


def test_shift_targets(caplog):
    steps = [(i, f"a{i}") for i in range(10)]
    assert shift_targets(steps, 0) == steps
    out = shift_targets(steps, 3)
    assert len(out) == 7 and out[0] == (0, "a3")
    with caplog.at_level(logging.WARNING):
        assert shift_targets(steps, 10) == []
    assert "empties" in caplog.text
    with pytest.raises(ValueError):
        shift_targets(steps, -1)


def test_slot_tables_consistent_with_specs():
    for prim, slots in PRIMITIVE_SLOTS.items():
        assert len(G.slot_specs(prim)) == len(slots)
