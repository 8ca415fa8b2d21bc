"""Oracle policy under increasing pose noise: per-plane success rate and SPL.

    python demos/noise_sweep.py [--runs 20] [--sigmas 0 0.5 1 2]
"""

import argparse

from kneecut.backends import OracleBackend
from kneecut.decoding import DecodeConfig
from kneecut.evaluation import EvalConfig, aggregate, format_mean_sd, score_episode
from kneecut.grammar import default_grammar
from kneecut.sim import NoiseModel, load_model, run_episode


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=20)
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.5, 1.0, 2.0])
    ap.add_argument("--samples", type=int, default=1024)
    args = ap.parse_args()

    grammar = default_grammar()
    model = load_model(samples=args.samples)
    cfg = EvalConfig(delta=1.5)
    print("sigma_mm," + ",".join(model.plan.names) + ",episode SPL")
    for sigma in args.sigmas:
        scores = [score_episode(run_episode(OracleBackend(grammar), model, NoiseModel(sigma, seed=s),
                                            DecodeConfig(), 1024, grammar, s), model.plan, cfg)
                  for s in range(args.runs)]
        rep = aggregate(scores, model.plan.names, label=f"{sigma:g}")
        print(",".join(rep.table1_row()) + "," + format_mean_sd(*rep.episode_spl))


if __name__ == "__main__":
    main()
