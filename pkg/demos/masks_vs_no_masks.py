"""Same random logits, decoded with and without the grammar/safety masks.

    python demos/masks_vs_no_masks.py [--episodes 20]
"""

import argparse

from kneecut.backends import RandomBackend
from kneecut.decoding import DecodeConfig, SafetyContext, validate_sequence
from kneecut.grammar import default_grammar
from kneecut.sim import NoiseModel, load_model, run_episode


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=20)
    ap.add_argument("--budget", type=int, default=200)
    args = ap.parse_args()

    grammar = default_grammar()
    model = load_model(samples=256)
    for masked in (True, False):
        bad, cut = 0, 0
        for ep in range(args.episodes):
            res = run_episode(RandomBackend(ep), model, NoiseModel(), DecodeConfig("temperature", ep),
                              args.budget, grammar, ep, use_masks=masked)
            fresh = SafetyContext.fresh(model.plan, model.initial_tool_pose)
            v = validate_sequence(res.tokens, fresh, grammar)
            bad += v is not None or bool(res.violations)
            cut += sum(res.planes_cut)
            if ep == 0:
                first = "none" if v is None else f"index {v.index}: {v.rule}"
        label = "masked  " if masked else "unmasked"
        print(f"{label} episodes with a violation: {bad}/{args.episodes}, planes cut: {cut}, "
              f"episode 0 first violation: {first}")
    print(f"vocabulary size {grammar.vocab.size}")


if __name__ == "__main__":
    main()
