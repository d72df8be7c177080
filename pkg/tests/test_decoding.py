"""Guidance blend identities against hand-computed values, and beam search
against exhaustive enumeration."""

import itertools
import math

import numpy as np
import pytest

from zerommt import decoding as dec
from zerommt import model as m
from zerommt.decoding import GuidanceScale, Hypothesis


# ---------------------------------------------------------------------------
# cfg_distribution


def _rand_dist(rng, n):
    p = rng.random(n) + 1e-3
    return p / p.sum()


def test_cfg_gamma_one_reproduces_multimodal():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pt, pm = _rand_dist(rng, 8), _rand_dist(rng, 8)
        out = dec.cfg_distribution(pt, pm, 1.0)
        assert np.allclose(out, pm, atol=1e-12)


def test_cfg_gamma_zero_reproduces_text():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pt, pm = _rand_dist(rng, 8), _rand_dist(rng, 8)
        out = dec.cfg_distribution(pt, pm, 0.0)
        assert np.allclose(out, pt, atol=1e-12)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 1.0, 2.0, 3.0])
@pytest.mark.parametrize("space", ["log", "prob_clip"])
def test_cfg_output_is_a_distribution(gamma, space):
    rng = np.random.default_rng(2)
    for _ in range(10):
        pt, pm = _rand_dist(rng, 6), _rand_dist(rng, 6)
        out = dec.cfg_distribution(pt, pm, gamma, space=space)
        assert abs(out.sum() - 1.0) < 1e-12
        assert np.all(out >= 0.0)


def test_cfg_log_space_hand_value():
    # p_t * (p_m / p_t)^2 = p_m^2 / p_t = [1.28, 0.08] -> [16/17, 1/17]
    out = dec.cfg_distribution(
        np.array([0.5, 0.5]), np.array([0.8, 0.2]), 2.0, space="log"
    )
    assert np.allclose(out, [16 / 17, 1 / 17], atol=1e-12)


def test_cfg_prob_clip_hand_value():
    # 0.6 + 2*(0.1-0.6) = -0.4 -> clipped to 0; 0.4 + 2*(0.9-0.4) = 1.4
    out = dec.cfg_distribution(
        np.array([0.6, 0.4]), np.array([0.1, 0.9]), 2.0, space="prob_clip"
    )
    assert np.allclose(out, [0.0, 1.0], atol=1e-12)


def test_cfg_prob_clip_degenerate_falls_back_to_text():
    out = dec.cfg_distribution(
        np.array([0.7, 0.3]), np.array([0.7, 0.3]), 0.0, space="prob_clip"
    )
    assert np.allclose(out, [0.7, 0.3], atol=1e-12)
    # all-zero inputs exercise the fallback branch: uniform over the floor
    zeros = np.zeros(4)
    out = dec.cfg_distribution(zeros, zeros, 1.0, space="prob_clip")
    assert np.allclose(out, 0.25, atol=1e-12)


def test_cfg_input_validation():
    with pytest.raises(ValueError):
        dec.cfg_distribution(np.ones(3) / 3, np.ones(4) / 4, 1.0)
    with pytest.raises(ValueError):
        dec.cfg_distribution(np.ones(3) / 3, np.ones(3) / 3, 1.0, space="geo")
    with pytest.raises(ValueError):
        GuidanceScale(gamma=-0.5)
    with pytest.raises(ValueError):
        GuidanceScale(gamma=float("inf"))
    assert GuidanceScale().gamma == 1.0


# ---------------------------------------------------------------------------
# beam search vs exhaustive enumeration


def _random_step_fn(seed, vocab):
    """Deterministic stochastic next-token table keyed by the prefix."""

    def step(prefix):
        key = [seed, len(prefix)] + list(prefix)
        p = np.random.default_rng(key).random(vocab) + 1e-3
        return p / p.sum()

    return step


def _exhaustive_best(step_fn, vocab, max_len, eos_id, forbidden):
    """Enumerate every decode path and apply the same ranking rules."""
    allowed = [t for t in range(vocab) if t not in forbidden]
    finished = []
    unfinished = []

    def walk(tokens, logp):
        if len(tokens) == max_len:
            unfinished.append(Hypothesis(tuple(tokens), logp))
            return
        probs = step_fn((m.BOS,) + tuple(tokens))
        logs = np.log(np.maximum(probs, dec.PROB_FLOOR))
        for tok in allowed:
            lp = logp + float(logs[tok])
            if tok == eos_id:
                finished.append(Hypothesis(tuple(tokens), lp, finished=True))
            else:
                walk(tokens + [tok], lp)

    walk([], 0.0)
    pool = finished if finished else unfinished
    pool.sort(key=lambda h: (-h.logp, h.tokens))
    return pool[0]


@pytest.mark.parametrize("seed", range(12))
def test_beam_equals_exhaustive_enumeration(seed):
    vocab, max_len = 5, 4
    step = _random_step_fn(seed, vocab)
    # width >= the 4^3 * 5 candidates at the last depth: nothing is pruned
    got = dec.beam_search_steps(step, width=512, max_len=max_len,
                                eos_id=2, forbidden=())
    want = _exhaustive_best(step, vocab, max_len, eos_id=2, forbidden=())
    assert got.tokens == want.tokens
    assert abs(got.logp - want.logp) < 1e-12
    assert got.finished == want.finished


def test_beam_respects_forbidden_tokens():
    step = _random_step_fn(99, 6)
    hyp = dec.beam_search_steps(step, width=8, max_len=5)
    assert all(t not in (m.PAD, m.BOS, m.MASK) for t in hyp.tokens)


def test_beam_hand_example_prefers_high_probability_path():
    # token 4 carries 0.9 each step, EOS 0.05: one step of 4 then EOS beats
    # immediate EOS (0.9*0.05 > 0.05 is false; check the actual argmax)
    table = {
        (m.BOS,): np.array([0.0, 0.0, 0.3, 0.0, 0.7]),
        (m.BOS, 4): np.array([0.0, 0.0, 0.8, 0.0, 0.2]),
        (m.BOS, 4, 4): np.array([0.0, 0.0, 1.0, 0.0, 0.0]),
    }

    def step(prefix):
        return table[prefix]

    hyp = dec.beam_search_steps(step, width=4, max_len=3)
    # candidates: () at log 0.3 ~ -1.20, (4,) at log(0.7*0.8) ~ -0.58,
    # (4,4) at log(0.7*0.2*1.0) ~ -1.97
    assert hyp.tokens == (4,)
    assert hyp.finished
    assert abs(hyp.logp - math.log(0.7 * 0.8)) < 1e-12


def test_beam_uniform_distribution_breaks_ties_lexicographically():
    def step(prefix):
        return np.full(8, 1.0 / 8)

    hyp = dec.beam_search_steps(step, width=4, max_len=3)
    # every candidate has equal score; EOS (token 2) wins by token order
    assert hyp.tokens == ()
    assert hyp.finished


def test_beam_returns_unfinished_when_eos_unreachable():
    def step(prefix):
        p = np.zeros(6)
        p[5] = 1.0
        return p

    # width 1 keeps only the probability-1 token, so EOS never enters
    hyp = dec.beam_search_steps(step, width=1, max_len=4)
    assert not hyp.finished
    assert hyp.tokens == (5, 5, 5, 5)


def test_beam_rejects_bad_width():
    with pytest.raises(ValueError):
        dec.beam_search_steps(lambda p: np.ones(4) / 4, width=0, max_len=2)


# ---------------------------------------------------------------------------
# model-level wrappers


def test_cfg_beam_endpoints_bit_exact(tiny_params):
    from zerommt import model as mm

    mm.randomize_extras(tiny_params, seed=3)
    src = [5, 6, 7]
    img = np.random.default_rng(4).standard_normal(tiny_params.config.image_dim)

    base_hyp = dec.beam_search(tiny_params, src, image=None, width=3,
                               use_extras=False)
    mm_hyp = dec.beam_search(tiny_params, src, image=img, width=3)
    g0 = dec.cfg_beam_search(tiny_params, tiny_params, src, img, 0.0, width=3)
    g1 = dec.cfg_beam_search(tiny_params, tiny_params, src, img, 1.0, width=3)
    assert g0.tokens == base_hyp.tokens and g0.logp == base_hyp.logp
    assert g1.tokens == mm_hyp.tokens and g1.logp == mm_hyp.logp


def test_cfg_beam_rejects_vocab_mismatch(tiny_params, tiny_config):
    import dataclasses

    from zerommt import model as mm

    other_config = dataclasses.replace(tiny_config, vocab_size=32)
    other = mm.build_model(other_config, seed=0)
    img = np.zeros(tiny_params.config.image_dim)
    with pytest.raises(ValueError):
        dec.cfg_beam_search(tiny_params, other, [5], img, 2.0)


def test_beam_search_emits_valid_translation(tiny_params):
    hyp = dec.beam_search(tiny_params, [5, 6], image=None, width=4,
                          use_extras=False)
    assert all(0 <= t < tiny_params.config.vocab_size for t in hyp.tokens)
    assert all(t not in (m.PAD, m.BOS, m.MASK) for t in hyp.tokens)
