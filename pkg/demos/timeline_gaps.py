"""Synthetic multi-rate episode with injected dropouts, put on the 25 ms grid.

    python demos/timeline_gaps.py [--gaps 3] [--seed 0]
"""

import argparse

import numpy as np

from kneecut.grammar import default_grammar
from kneecut.sim import load_model
from kneecut.synth import SynthConfig, generate_episode
from kneecut.timeline import ReferenceGrid, detect_dropouts, resample, streams_from_records

BOUNDS_US = {"pose": 100_000, "robot": 100_000, "frame": 250_000}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--gaps", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    recs = generate_episode(load_model(samples=64), default_grammar(), 0, SynthConfig(seed=args.seed, gaps=args.gaps))
    header = recs[0]
    grid = ReferenceGrid.covering(header["epoch_us"], header["epoch_us"] + header["duration_us"])
    print(f"{header['duration_us'] / 1e6:.1f} s episode, {grid.length} grid frames")
    for s in streams_from_records(recs[1:]):
        if s.kind == "event":
            continue
        bound = BOUNDS_US.get(s.stream_id.split("/")[0], 100_000)
        r = resample(s, grid, bound)
        ok = ~r.missing
        print(f"{s.stream_id:20s} {len(s):6d} samples  staleness p50 {np.median(r.staleness_us[ok]) / 1e3:5.1f} ms"
              f"  max {r.staleness_us[ok].max() / 1e3:5.1f} ms  missing frames {int(r.missing.sum())}")
        for a, b in detect_dropouts(s, bound):
            print(f"{'':20s} dropout {(a - header['epoch_us']) / 1e6:.3f}-{(b - header['epoch_us']) / 1e6:.3f} s")
    print("injected:", [(g["stream"], round((g["next_us"] - g["prev_us"]) / 1e3, 1)) for g in header["gaps"]])


if __name__ == "__main__":
    main()
