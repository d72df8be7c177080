"""Beam search and classifier-free guidance over next-token distributions.

The guidance blend interpolates (or extrapolates, for gamma > 1) between
the text-only and multimodal models. Done in log space and renormalized,
so the output stays a valid distribution for every gamma while the
gamma=0 and gamma=1 endpoints reproduce the inputs exactly. A clipped
probability-space variant is available behind ``space='prob_clip'``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import model as m
from .model import ModelParams, EncoderStates

PROB_FLOOR = 1e-12

StepFn = Callable[[tuple[int, ...]], np.ndarray]


@dataclass
class GuidanceScale:
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and nonnegative: {self.gamma}")


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    logp: float
    finished: bool = False


@dataclass
class Beam:
    width: int = 4
    hypotheses: list[Hypothesis] = field(default_factory=list)


def cfg_distribution(
    p_text: np.ndarray,
    p_mm: np.ndarray,
    gamma: float,
    space: str = "log",
) -> np.ndarray:
    """Blend the text-only and multimodal next-token distributions."""
    p_text = np.asarray(p_text, dtype=np.float64)
    p_mm = np.asarray(p_mm, dtype=np.float64)
    if p_text.shape != p_mm.shape:
        raise ValueError(f"vocab mismatch: {p_text.shape} vs {p_mm.shape}")
    if space == "log":
        lt = np.log(np.maximum(p_text, PROB_FLOOR))
        lm = np.log(np.maximum(p_mm, PROB_FLOOR))
        blended = lt + gamma * (lm - lt)
        blended -= blended.max()
        out = np.exp(blended)
    elif space == "prob_clip":
        out = np.maximum(p_text + gamma * (p_mm - p_text), 0.0)
        if out.sum() <= 0.0:
            out = np.maximum(p_text, PROB_FLOOR)
    else:
        raise ValueError(f"unknown cfg space {space!r}")
    return out / out.sum()


def beam_search_steps(
    step_fn: StepFn,
    width: int,
    max_len: int,
    eos_id: int = m.EOS,
    forbidden: tuple[int, ...] = (m.PAD, m.BOS, m.MASK),
) -> Hypothesis:
    """Length-unnormalized beam search over a next-token distribution.

    ``step_fn`` maps a BOS-led prefix to a probability vector. Hypotheses
    that emit EOS are retired; the best finished hypothesis (cumulative
    log-probability, ties broken by token ids) is returned. If nothing
    finishes within ``max_len`` generated tokens, the best unfinished
    hypothesis is returned with ``finished=False``.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    live: list[Hypothesis] = [Hypothesis(tokens=(), logp=0.0)]
    done: list[Hypothesis] = []
    for _ in range(max_len):
        candidates: list[Hypothesis] = []
        for hyp in live:
            probs = step_fn((m.BOS,) + hyp.tokens)
            logs = np.log(np.maximum(probs, PROB_FLOOR))
            for tok in range(len(probs)):
                if tok in forbidden:
                    continue
                candidates.append(
                    Hypothesis(hyp.tokens + (tok,), hyp.logp + float(logs[tok]))
                )
        candidates.sort(key=lambda h: (-h.logp, h.tokens))
        live = []
        for cand in candidates[: width]:
            if cand.tokens[-1] == eos_id:
                done.append(
                    Hypothesis(cand.tokens[:-1], cand.logp, finished=True)
                )
            else:
                live.append(cand)
        if not live:
            break
        if done:
            best_done = max(done, key=lambda h: h.logp)
            # scores only fall as length grows, so no live path can win
            if best_done.logp >= live[0].logp:
                break
    if done:
        done.sort(key=lambda h: (-h.logp, h.tokens))
        return done[0]
    live.sort(key=lambda h: (-h.logp, h.tokens))
    return live[0]


def _model_step_fn(
    params: ModelParams, enc: EncoderStates, use_extras: bool
) -> StepFn:
    def step(prefix: tuple[int, ...]) -> np.ndarray:
        return m.decode_step(enc, list(prefix), params, use_extras=use_extras)

    return step


def beam_search(
    params: ModelParams,
    source: list[int],
    image: np.ndarray | None = None,
    width: int = 4,
    max_len: int | None = None,
    use_extras: bool = True,
) -> Hypothesis:
    """Translate one source sentence with plain beam search."""
    if max_len is None:
        max_len = params.config.max_len
    enc = m.encode(source, image, params, use_extras=use_extras)
    return beam_search_steps(
        _model_step_fn(params, enc, use_extras), width, max_len
    )


def cfg_beam_search(
    base_params: ModelParams,
    mm_params: ModelParams,
    source: list[int],
    image: np.ndarray,
    gamma: float,
    width: int = 4,
    max_len: int | None = None,
    space: str = "log",
) -> Hypothesis:
    """Beam search over the guidance blend of base and multimodal models."""
    if base_params.config.vocab_size != mm_params.config.vocab_size:
        raise ValueError("base and multimodal models must share the vocabulary")
    if max_len is None:
        max_len = mm_params.config.max_len
    enc_text = m.encode(source, None, base_params, use_extras=False)
    enc_mm = m.encode(source, image, mm_params, use_extras=True)
    text_step = _model_step_fn(base_params, enc_text, use_extras=False)
    mm_step = _model_step_fn(mm_params, enc_mm, use_extras=True)

    # the endpoints reproduce the single models exactly, bit for bit
    if gamma == 0.0:
        return beam_search_steps(text_step, width, max_len)
    if gamma == 1.0:
        return beam_search_steps(mm_step, width, max_len)

    def step(prefix: tuple[int, ...]) -> np.ndarray:
        return cfg_distribution(text_step(prefix), mm_step(prefix), gamma, space)

    return beam_search_steps(step, width, max_len)
