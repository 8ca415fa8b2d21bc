import sys

import numpy as np
import pytest

from kneecut.backends import OracleBackend, PolicyResponse, RandomBackend
from kneecut.grammar import default_grammar
from kneecut.sim import load_model


@pytest.fixture(scope="session")
def grammar():
    return default_grammar()


@pytest.fixture(scope="session")
def model():
    return load_model()


@pytest.fixture(scope="session")
def small_model():
    return load_model(samples=256)


class BiasedRandomBackend:
    """Standard-normal logits plus fixed per-token biases (e.g. push CUT, suppress EOS)."""

    name = "biased-random"

    def __init__(self, seed, bias):
        self.seed = seed
        self.bias = bias
        self._rngs = {}

    def reset(self, episode_id):
        self._rngs[episode_id] = np.random.default_rng([self.seed, episode_id])

    def query(self, request, observation=None):
        rng = self._rngs.get(request.episode_id)
        if rng is None:
            self.reset(request.episode_id)
            rng = self._rngs[request.episode_id]
        return PolicyResponse(logits=rng.standard_normal(request.vocab_size) + self.bias)


class NoisyOracleBackend:
    """Oracle logits of height ``beta`` buried in standard-normal noise.

    Often close enough to the expert to align and cut planes, often not; a
    useful adversary for the safety masks.
    """

    name = "noisy-oracle"

    def __init__(self, grammar, seed, beta=4.0):
        self.oracle = OracleBackend(grammar, beta)
        self.seed = seed
        self._rngs = {}

    def reset(self, episode_id):
        self.oracle.reset(episode_id)
        self._rngs[episode_id] = np.random.default_rng([self.seed, episode_id, 1])

    def query(self, request, observation):
        rng = self._rngs.get(request.episode_id)
        if rng is None:
            self.reset(request.episode_id)
            rng = self._rngs[request.episode_id]
        base = self.oracle.query(request, observation).logits
        return PolicyResponse(logits=base + rng.standard_normal(request.vocab_size))


def adversarial_backends(grammar, seed=0):
    """The three random-logit families used by the soundness checks."""
    vocab = grammar.vocab
    bias = np.zeros(vocab.size)
    bias[vocab.control("CUT")] = 6.0
    bias[vocab.control("EOS")] = -np.inf
    return [RandomBackend(seed), BiasedRandomBackend(seed, bias), NoisyOracleBackend(grammar, seed)]


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
