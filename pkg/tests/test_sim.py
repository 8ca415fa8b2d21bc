import dataclasses

import numpy as np
import pytest

from conftest import NoisyOracleBackend, adversarial_backends
from kneecut.backends import BackendUnavailable, OracleBackend
from kneecut.config import ConfigError
from kneecut.decoding import DecodeConfig, PlaneStatus, SafetyContext, validate_sequence
from kneecut.evaluation import chamfer_bidirectional, chamfer_bruteforce
from kneecut.grammar import ActionCommand, Primitive, dequantize, make_align, make_cut, make_move
from kneecut.sim import (EpisodeResult, NoiseModel, SimState, apply_action, load_noise, model_from_dict,
                         oracle_commands, run_episode, shortest_path_length)

RNG = np.random.default_rng


def single_plane_model(start, centre, extents, tolerance_mm=0.5):
    return model_from_dict({
        "planes": [{"name": "p", "normal": [0.0, 0.0, 1.0], "offset": centre[2],
                    "window": {"center": list(centre), "axis_u": [1.0, 0.0, 0.0], "extents": list(extents)}}],
        "tolerance": {"angle_deg": 1.0, "distance_mm": tolerance_mm},
        "bench": {"initial_tool_position": list(start)},
    }, samples=512)


def bin_centre(grammar, k):
    return dequantize(k, grammar.specs["pos_x"])


def run(model, cmds, grammar, noise=NoiseModel(), seed=0):
    state, events = SimState.initial(model), []
    rng = RNG(seed)
    for c in cmds:
        state, ev = apply_action(state, c, model, noise, rng, grammar)
        events += ev
    return state, events


# --- apply_action ---------------------------------------------------------

def test_noiseless_align_cut_reproduces_plan(model, grammar):
    for m in range(6):
        plane = model.plan.planes[m]
        state, events = run(model, [make_move(grammar, plane.entry_point), make_align(grammar, m),
                                    make_cut(grammar, 5.0)], grammar)
        assert events == ["move", "align", "cut"]
        assert state.statuses[m] == PlaneStatus.CUT
        assert chamfer_bidirectional(state.patches[m], model.planned(m)) < 1e-9


def test_offset_align_gives_offset_chamfer(grammar):
    c = bin_centre(grammar, 300)
    model = single_plane_model((c, c, 100.0), (c + 25.0, c, 0.0), (50.0, 50.0), tolerance_mm=3.0)
    state, events = run(model, [make_align(grammar, 0), make_cut(grammar, 5.0)], grammar,
                        NoiseModel(align_bias_mm=2.0))
    assert events == ["align", "cut"]
    a, b = state.patches[0], model.planned(0)
    assert chamfer_bidirectional(a, b) == pytest.approx(2.0, abs=1e-9)
    assert chamfer_bruteforce(a, b) == pytest.approx(2.0, abs=1e-9)


def test_offset_beyond_tolerance_fails_alignment(model, grammar):
    state, events = run(model, [make_align(grammar, 1), make_cut(grammar, 5.0)], grammar,
                        NoiseModel(align_bias_mm=2.0))
    assert events == ["align-failed", "violation:cut-without-align"]
    assert state.patches[1] is None


def test_cut_with_all_pending_is_a_violation(model, grammar):
    state, events = run(model, [make_cut(grammar, 5.0)], grammar)
    assert state.violations == ("cut-without-align",)
    assert all(p is None for p in state.patches)
    assert state.tool_pose is model.initial_tool_pose
    assert state.path_length == 0.0


def test_move_out_of_workspace_is_refused(model, grammar):
    state, _ = run(model, [make_move(grammar, (240.0, 0.0, 0.0))], grammar)
    assert state.violations == ("move-out-of-workspace",)
    assert state.path_length == 0.0


def test_move_clears_alignment_and_cut_is_absorbing(model, grammar):
    p = model.plan.planes[0]
    state, _ = run(model, [make_align(grammar, 0), make_move(grammar, p.entry_point)], grammar)
    assert state.statuses[0] == PlaneStatus.PENDING
    state, events = run(model, [make_align(grammar, 0), make_cut(grammar, 5.0), make_align(grammar, 0)], grammar)
    assert state.statuses[0] == PlaneStatus.CUT
    assert events[-1] == "violation:align-invalid-plane"


def test_realign_switches_plane(model, grammar):
    state, _ = run(model, [make_align(grammar, 0), make_align(grammar, 2)], grammar)
    assert state.statuses[0] == PlaneStatus.PENDING
    assert state.statuses[2] == PlaneStatus.ALIGNED


def test_path_length_non_decreasing(model, grammar):
    rng = RNG(5)
    state = SimState.initial(model)
    for _ in range(200):
        kind = rng.integers(3)
        if kind == 0:
            cmd = make_move(grammar, rng.uniform(-220, 220, 3))
        elif kind == 1:
            cmd = make_align(grammar, int(rng.integers(6)), rng.normal(0, 1, 3))
        else:
            cmd = make_cut(grammar, float(rng.uniform(1, 50)))
        new, _ = apply_action(state, cmd, model, NoiseModel(0.3, 0.2), rng, grammar)
        assert new.path_length >= state.path_length
        assert all(not (a == PlaneStatus.CUT and b != PlaneStatus.CUT) for a, b in zip(state.statuses, new.statuses))
        assert all((s == PlaneStatus.CUT) == (p is not None) for s, p in zip(new.statuses, new.patches))
        state = new


def test_malformed_command_rejected(model, grammar):
    with pytest.raises(ValueError):
        apply_action(SimState.initial(model), ActionCommand(Primitive.CUT, (999,)), model, NoiseModel(), RNG(0),
                     grammar)


def test_noise_model_validation(tmp_path):
    with pytest.raises(ValueError):
        NoiseModel(sigma_translation=-1.0)
    with pytest.raises(ValueError):
        NoiseModel(dropout=1.5)
    assert load_noise("0.5").sigma_translation == 0.5
    assert load_noise(None) == NoiseModel()
    f = tmp_path / "noise.yaml"
    f.write_text("sigma_translation_mm: 1.0\nsigma_rotation_deg: 0.2\ndropout: 0.1\nseed: 4\n")
    assert load_noise(f) == NoiseModel(1.0, 0.2, 0.1, 4)
    f.write_text("sigma_translation_mm: [1, 2]\n")
    with pytest.raises(ConfigError):
        load_noise(f)


def test_bad_bench_section():
    with pytest.raises(ConfigError):
        single_plane_model((0.0, 0.0, 500.0), (0.0, 0.0, 0.0), (10.0, 10.0))


# --- shortest path --------------------------------------------------------

def test_shortest_path_single_plane(grammar):
    c = bin_centre(grammar, 256)
    entry = np.array([c, c, c])
    model = single_plane_model(entry + [0.0, 0.0, 100.0], entry + [25.0, 0.0, 0.0], (50.0, 10.0))
    assert shortest_path_length(model, grammar) == pytest.approx(150.0, abs=1e-12)


def test_shortest_path_degenerate(grammar):
    c = bin_centre(grammar, 256)
    model = single_plane_model((c, c, c), (c, c, c), (0.0, 0.0))
    assert shortest_path_length(model, grammar) == 0.0


def test_shortest_path_cache_tracks_grammar(model, grammar):
    assert shortest_path_length(model, grammar) == shortest_path_length(model, grammar)
    assert shortest_path_length(model, grammar) > sum(p.sweep_length for p in model.plan.planes)


def test_oracle_commands_follow_plan_order(model, grammar):
    cmds = oracle_commands(model, grammar)
    assert len(cmds) == 18
    assert [c.bins[0] for c in cmds[1::3]] == list(model.plan.order)


# --- episodes -------------------------------------------------------------

def test_oracle_episode(model, grammar):
    res = run_episode(OracleBackend(grammar), model, NoiseModel(), DecodeConfig(), 500, grammar)
    assert res.status == "completed"
    assert all(res.planes_cut) and res.violations == []
    assert res.path_length == res.shortest_path
    for m in range(6):
        assert chamfer_bidirectional(res.patches[m], model.planned(m)) < 1e-9
    ctx = SafetyContext(model.plan, (PlaneStatus.PENDING,) * 6, model.initial_tool_pose)
    assert validate_sequence(res.tokens, ctx, grammar, require_complete=True) is None


def test_zero_budget_is_empty(model, grammar):
    res = run_episode(OracleBackend(grammar), model, NoiseModel(), DecodeConfig(), 0, grammar)
    assert res.status == "budget" and res.tokens == [] and not any(res.planes_cut)
    assert res.path_length == 0.0


def test_noisy_paths_undercut_reference_by_at_most_the_settle_legs(small_model, grammar):
    # a jittered ALIGN can land nearer the MOVE target than the entry point does,
    # so p >= l only holds up to the reference's settle legs (target bin -> entry)
    settle = 0.0
    for m in small_model.plan.order:
        plane = small_model.plan.planes[m]
        target = np.array(make_move(grammar, plane.entry_point).values(grammar))
        settle += float(np.linalg.norm(plane.entry_point - target))
    seen = 0
    for ep in range(30):
        res = run_episode(OracleBackend(grammar), small_model, NoiseModel(0.3, 0.3, seed=ep), DecodeConfig(), 600,
                          grammar, ep)
        if all(res.planes_cut):
            seen += 1
            assert res.path_length >= res.shortest_path - settle - 1e-9
    assert seen > 10


def test_random_policies_never_violate(small_model, grammar):
    for backend in adversarial_backends(grammar, 11):
        for ep in range(10):
            res = run_episode(backend, small_model, NoiseModel(0.5, seed=ep), DecodeConfig("temperature", ep), 300,
                              grammar, ep)
            assert res.violations == []
            ctx = SafetyContext(small_model.plan, (PlaneStatus.PENDING,) * 6, small_model.initial_tool_pose)
            assert validate_sequence(res.tokens, ctx, grammar) is None


def test_unmasked_random_policy_violates(small_model, grammar):
    bad = 0
    for ep in range(20):
        res = run_episode(NoisyOracleBackend(grammar, 0, beta=0.0), small_model, NoiseModel(), DecodeConfig(), 300,
                          grammar, ep, use_masks=False)
        ctx = SafetyContext(small_model.plan, (PlaneStatus.PENDING,) * 6, small_model.initial_tool_pose)
        bad += validate_sequence(res.tokens, ctx, grammar) is not None
    assert bad >= 19


def test_backend_failure_aborts(model, grammar):
    class Flaky:
        name = "flaky"

        def query(self, request, observation):
            if request.step == 3:
                raise BackendUnavailable("connection refused", retries=2)
            return OracleBackend(grammar).query(request, observation)

    res = run_episode(Flaky(), model, NoiseModel(), DecodeConfig(), 100, grammar)
    assert res.aborted and "refused" in res.abort_reason
    assert len(res.tokens) == 3 and res.retries == 2


def test_episode_determinism(small_model, grammar):
    def go():
        b = NoisyOracleBackend(grammar, 2)
        r = run_episode(b, small_model, NoiseModel(0.5, 0.2, 0.05, seed=9), DecodeConfig("temperature", 4), 400,
                        grammar, 3)
        return r.to_records(small_model)
    assert go() == go()


def test_episode_records_round_trip(model, grammar):
    res = run_episode(OracleBackend(grammar), model, NoiseModel(0.2, seed=1), DecodeConfig(), 500, grammar)
    recs = res.to_records()
    back = EpisodeResult.from_records(recs[0], recs[1:])
    assert back.to_records() == recs
    for a, b in zip(back.patches, res.patches):
        assert (a is None) == (b is None)
        if a is not None:
            assert np.array_equal(a.points, b.points)
    assert "timings" not in recs[0]


def test_mean_chamfer_non_decreasing_in_sigma(small_model, grammar):
    means = []
    for sigma in (0.0, 0.5, 1.0, 2.0):
        vals = []
        for ep in range(20):
            res = run_episode(OracleBackend(grammar), small_model, NoiseModel(sigma, seed=ep), DecodeConfig(), 600,
                              grammar, ep)
            vals += [chamfer_bidirectional(p, small_model.planned(m)) for m, p in enumerate(res.patches)
                     if p is not None]
        means.append(np.mean(vals))
    assert means[0] < 1e-9
    assert all(a <= b for a, b in zip(means, means[1:]))


def test_difficulty_multipliers(model):
    d = dict(zip(model.plan.names, model.difficulty))
    assert d["tibial"] > d["distal femur"] and d["posterior chamfer"] > d["anterior chamfer"]
    assert dataclasses.replace(model, difficulty=()).difficulty == (1.0,) * 6
