"""Training objectives: visually conditioned MLM, KL anchor, combination.

The VMLM term is teacher-forced negative log-likelihood of the target
under the multimodal model given a partially masked source plus the image.
The KL term anchors the multimodal model's next-token distributions to the
frozen base model's, computed on the unmasked source. Both reduce to a
mean over target tokens so the mixing weight transfers across lengths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (
    BOS,
    EOS,
    MASK,
    PAD,
    ModelParams,
    decoder_logits,
    encode_batch,
)

LOG_FLOOR = 1e-12


@dataclass
class BatchExample:
    """One teacher-forced training triple.

    ``tgt`` must begin with BOS and end with EOS. ``mask_set`` holds the
    source positions the VMLM term replaces with MASK.
    """

    src: list[int]
    tgt: list[int]
    image: np.ndarray | None = None
    mask_set: tuple[int, ...] = ()

    def validate(self) -> None:
        if len(self.tgt) < 2 or self.tgt[0] != BOS or self.tgt[-1] != EOS:
            raise ValueError("target must be BOS-led and EOS-terminated")
        if any(j < 0 or j >= len(self.src) for j in self.mask_set):
            raise ValueError("mask_set index outside the source sequence")


@dataclass
class Batch:
    examples: list[BatchExample] = field(default_factory=list)

    def __post_init__(self) -> None:
        for ex in self.examples:
            ex.validate()

    def __len__(self) -> int:
        return len(self.examples)


@dataclass
class LossWeights:
    lam: float = 0.1

    def __post_init__(self) -> None:
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and nonnegative, got {self.lam}")


def _pad_sources(
    examples: list[BatchExample], masked: bool
) -> tuple[np.ndarray, np.ndarray]:
    smax = max(len(ex.src) for ex in examples)
    ids = np.full((len(examples), smax), PAD, dtype=np.int64)
    valid = np.zeros((len(examples), smax), dtype=bool)
    for b, ex in enumerate(examples):
        row = list(ex.src)
        if masked:
            for j in ex.mask_set:
                row[j] = MASK
        ids[b, : len(row)] = row
        valid[b, : len(row)] = True
    return ids, valid


def _pad_targets(
    examples: list[BatchExample],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    tmax = max(len(ex.tgt) for ex in examples) - 1
    tgt_in = np.full((len(examples), tmax), PAD, dtype=np.int64)
    tgt_out = np.full((len(examples), tmax), PAD, dtype=np.int64)
    valid = np.zeros((len(examples), tmax), dtype=bool)
    weights = np.zeros((len(examples), tmax), dtype=np.float64)
    for b, ex in enumerate(examples):
        t = len(ex.tgt) - 1
        tgt_in[b, :t] = ex.tgt[:-1]
        tgt_out[b, :t] = ex.tgt[1:]
        valid[b, :t] = True
        weights[b, :t] = 1.0
    return tgt_in, tgt_out, valid, weights


def _stack_images(examples: list[BatchExample]) -> np.ndarray:
    if any(ex.image is None for ex in examples):
        raise ValueError("every example needs an image for this objective")
    return np.stack([np.asarray(ex.image, dtype=np.float64) for ex in examples])


def _weighted_token_mean(per_token: Tensor, weights: np.ndarray) -> Tensor:
    return ad.scale(ad.tsum(ad.mul(per_token, weights)), 1.0 / weights.sum())


def vmlm_loss(batch: Batch, params: ModelParams) -> Tensor:
    """Mean over target tokens of -log p(y_j | y_<j, masked source, image)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    src, src_valid = _pad_sources(batch.examples, masked=True)
    tgt_in, tgt_out, tgt_valid, w = _pad_targets(batch.examples)
    images = _stack_images(batch.examples)
    enc = encode_batch(params, src, src_valid, images, use_extras=True)
    lp = ad.log_softmax(decoder_logits(params, enc, tgt_in, tgt_valid), axis=-1)
    gold = ad.gather(lp, tgt_out)
    return ad.scale(_weighted_token_mean(gold, w), -1.0)


def text_nll(batch: Batch, params: ModelParams) -> Tensor:
    """Text-only teacher-forced NLL (no images, no extras); used to
    pretrain the base translation model."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    src, src_valid = _pad_sources(batch.examples, masked=False)
    tgt_in, tgt_out, tgt_valid, w = _pad_targets(batch.examples)
    enc = encode_batch(params, src, src_valid, None, use_extras=False)
    lp = ad.log_softmax(
        decoder_logits(params, enc, tgt_in, tgt_valid, use_extras=False), axis=-1
    )
    return ad.scale(_weighted_token_mean(ad.gather(lp, tgt_out), w), -1.0)


def base_teacher_logprobs(
    frozen_params: ModelParams, examples: list[BatchExample]
) -> list[np.ndarray]:
    """Frozen-base next-token log-probabilities, one (m-1, V) array per
    example. The base never sees images or masks, so these are constants
    that can be computed once per corpus and reused every epoch."""
    out: list[np.ndarray] = []
    for ex in examples:
        src, src_valid = _pad_sources([ex], masked=False)
        tgt_in, _, tgt_valid, _ = _pad_targets([ex])
        enc = encode_batch(frozen_params, src, src_valid, None, use_extras=False)
        logits = decoder_logits(frozen_params, enc, tgt_in, tgt_valid,
                                use_extras=False)
        lp = ad.log_softmax(logits, axis=-1)
        out.append(lp.data[0])
    return out


def _padded_base_logprobs(
    frozen_params: ModelParams,
    examples: list[BatchExample],
    tmax: int,
    cache: list[np.ndarray] | None,
) -> np.ndarray:
    vocab = frozen_params.config.vocab_size
    per_ex = cache if cache is not None else base_teacher_logprobs(
        frozen_params, examples
    )
    out = np.zeros((len(examples), tmax, vocab))
    for b, lp in enumerate(per_ex):
        out[b, : lp.shape[0]] = lp
    return out


def kl_penalty(
    batch: Batch,
    frozen_params: ModelParams,
    params: ModelParams,
    kl_mode: str = "full",
    base_lp: list[np.ndarray] | None = None,
) -> Tensor:
    """KL(base || multimodal) per teacher-forced position, token-mean.

    ``kl_mode='full'`` sums over the whole vocabulary (the default reading
    of the divergence); ``'realized'`` keeps only the gold-token term.
    The base side is evaluated without gradient; the multimodal side sees
    the unmasked source plus the image and is floored at 1e-12 inside the
    log.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if kl_mode not in ("full", "realized"):
        raise ValueError(f"unknown kl_mode {kl_mode!r}")
    src, src_valid = _pad_sources(batch.examples, masked=False)
    tgt_in, tgt_out, tgt_valid, w = _pad_targets(batch.examples)
    images = _stack_images(batch.examples)

    q_lp = _padded_base_logprobs(frozen_params, batch.examples, tgt_in.shape[1],
                                 base_lp)
    enc = encode_batch(params, src, src_valid, images, use_extras=True)
    p_lp = ad.clip_min(
        ad.log_softmax(decoder_logits(params, enc, tgt_in, tgt_valid), axis=-1),
        np.log(LOG_FLOOR),
    )
    if kl_mode == "full":
        q = np.exp(q_lp)
        per_pos = ad.tsum(ad.mul(q, ad.sub(q_lp, p_lp)), axis=-1)
    else:
        q_gold = np.exp(np.take_along_axis(q_lp, tgt_out[..., None], axis=-1))[..., 0]
        lq_gold = np.take_along_axis(q_lp, tgt_out[..., None], axis=-1)[..., 0]
        per_pos = ad.mul(q_gold, ad.sub(lq_gold, ad.gather(p_lp, tgt_out)))
    return _weighted_token_mean(per_pos, w)


def mmt_loss(batch: Batch, params: ModelParams) -> Tensor:
    """Plain teacher-forced NLL on the unmasked source plus image; the
    ablation replacement for the KL anchor."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    src, src_valid = _pad_sources(batch.examples, masked=False)
    tgt_in, tgt_out, tgt_valid, w = _pad_targets(batch.examples)
    images = _stack_images(batch.examples)
    enc = encode_batch(params, src, src_valid, images, use_extras=True)
    lp = ad.log_softmax(decoder_logits(params, enc, tgt_in, tgt_valid), axis=-1)
    return ad.scale(_weighted_token_mean(ad.gather(lp, tgt_out), w), -1.0)


def combined_loss(
    batch: Batch,
    frozen_params: ModelParams,
    params: ModelParams,
    weights: LossWeights,
    kl_mode: str = "full",
    base_lp: list[np.ndarray] | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """total = vmlm + lambda * kl, returned with both parts."""
    vmlm = vmlm_loss(batch, params)
    kl = kl_penalty(batch, frozen_params, params, kl_mode=kl_mode, base_lp=base_lp)
    total = ad.add(vmlm, ad.scale(kl, weights.lam))
    return total, vmlm, kl
