"""Smoke test for the steerlm extension module."""

import math
import sys
from pathlib import Path

import steerlm

ROOT = Path(__file__).resolve().parent.parent


def close(a, b, tol=1e-9):
    return all(abs(x - y) <= tol for x, y in zip(a, b, strict=True))


def main():
    lines = (ROOT / "data" / "toy" / "corpus.txt").read_text().splitlines()
    vocab = steerlm.Vocabulary.build(lines)
    lm = steerlm.MarkovLm.train(lines, vocab, order=1, smoothing_k=0.5)
    t = vocab.id("t")
    dfa = steerlm.DfaAttribute.contains_token(t, len(vocab))
    prompt = vocab.encode("a")

    table = steerlm.OracleTable.build(lm, dfa, 6, 1.0)
    assert table.martingale_residual() <= 1e-12
    value, conditional = steerlm.enumerate_check(lm, dfa, 6, 1.0, prompt, [])
    assert abs(value - table.value(prompt, [])) <= 1e-12
    assert close(conditional, table.exact_conditional(prompt, []), 1e-12)

    base = [0.5, 0.3, 0.2]
    assert close(steerlm.reweight(base, [0, 1], [2.0, 1.0]), [0.6154, 0.1846, 0.2], 1e-4)
    assert close(steerlm.gae_advantages(steerlm.td_errors([0.2, 0.4, 0.7], 1.0), 1.0, 1.0), [0.8, 0.6, 0.3], 1e-12)

    steered = steerlm.decode(lm, prompt, table, k=len(vocab), strategy="greedy", max_len=6)
    plain = steerlm.decode(lm, prompt, strategy="greedy", max_len=6)
    assert dfa.reward(prompt + steered) == 1.0
    assert len(plain) >= 1

    critic = steerlm.Critic.init(vocab, 1, 6, hidden_dim=4, seed=1)
    assert 0.0 < critic.value(prompt, plain) < 1.0
    sampled = steerlm.decode(lm, prompt, critic, k=4, strategy="top_k_sample", sample_k=4, seed=3)
    assert sampled == steerlm.decode(lm, prompt, critic, k=4, strategy="top_k_sample", sample_k=4, seed=3)

    uniform = steerlm.MarkovLm.train(["x y z"], steerlm.Vocabulary.build(["x y z"]), order=2, smoothing_k=1e9)
    assert math.isclose(steerlm.perplexity([([0], [1, 2, 3])], uniform), 6.0, rel_tol=1e-6)
    assert steerlm.distinct_n([[0, 1, 0, 1]], 2) == 0.5
    assert steerlm.success_rate([1.0, 0.0, 1.0, 0.0]) == 0.5
    assert steerlm.run_cli(["no-such-command"]) == 1

    print("steerlm smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
