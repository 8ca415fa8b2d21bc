"""A toy policy server behind the wire protocol, driven by the masked decoder.

The server answers every request with uniform logits; the client masks
them, so the episode stays admissible no matter what comes back.

    python demos/remote_policy.py [--protocol tcp|http]
"""

import argparse

from kneecut.backends import PolicyServer, RemoteBackend, uniform_handler
from kneecut.decoding import DecodeConfig
from kneecut.grammar import default_grammar
from kneecut.sim import NoiseModel, load_model, run_episode


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--protocol", choices=["tcp", "http"], default="tcp")
    ap.add_argument("--budget", type=int, default=60)
    args = ap.parse_args()

    grammar = default_grammar()
    model = load_model(samples=256)
    seen = []

    def handler(req):
        seen.append(req["step"])
        return uniform_handler(req)

    with PolicyServer(handler, args.protocol) as srv:
        print(f"serving on {srv.endpoint}")
        res = run_episode(RemoteBackend(srv.endpoint), model, NoiseModel(), DecodeConfig("temperature", 1),
                          args.budget, grammar)
    print(f"{len(seen)} requests, status {res.status}, {len(res.commands)} commands, "
          f"violations {res.violations or 'none'}")
    for c in res.commands[:5]:
        print(f"  {c}")


if __name__ == "__main__":
    main()
