"""Optimization: Adam with base freezing, pretraining, adaptation loop.

The base model is pretrained on text-only parallel data, then frozen byte
for byte. The adaptation phase updates only the extras (adapters plus
visual projector) on the two-term objective; ablation modes drop or
replace either term. Everything is a deterministic function of
(config, corpus, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoding
from . import evaluation as ev
from . import model as m
from .model import ModelParams
from . import objectives as obj
from .objectives import Batch, BatchExample, LossWeights

TRAIN_MODES = ("full", "no_vmlm", "no_kl", "mmt_no_kl")


class FreezingViolation(RuntimeError):
    """A gradient arrived for a frozen tensor."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps_adam: float = 1e-8
    batch_size: int = 32
    max_steps: int = 600
    seed: int = 0
    lam: float = 0.1
    mask_rate: float = 0.25
    eval_every: int = 100
    mode: str = "full"
    kl_mode: str = "full"
    beam_width: int = 4

    def validate(self) -> None:
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("batch_size and max_steps must be positive")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")


@dataclass
class PretrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps_adam: float = 1e-8
    batch_size: int = 32
    max_steps: int = 800
    seed: int = 0


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Checkpoint:
    step: int
    extras: dict[str, np.ndarray]
    contrastive_acc: float
    bleu: float
    selection_score: float = float("nan")


@dataclass
class TrainData:
    mmt_train: list
    val_contrastive: list
    val_translation: list


@dataclass
class TrainResult:
    params: ModelParams
    best: Checkpoint
    checkpoints: list[Checkpoint]
    log_rows: list[dict]


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config,
) -> None:
    """One bias-corrected Adam update on the trainable tensors."""
    for name in grads:
        if not params.tensors[name].requires_grad:
            raise FreezingViolation(f"gradient arrived for frozen tensor {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name in params.trainable_names():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1**t)
        v_hat = state.v[name] / (1 - b2**t)
        tensor = params.tensors[name]
        tensor.data = tensor.data - config.lr * m_hat / (
            np.sqrt(v_hat) + config.eps_adam
        )


def clone_params(params: ModelParams) -> ModelParams:
    tensors = {}
    for n, t in params.tensors.items():
        nt = ad.Tensor(t.data.copy(), requires_grad=t.requires_grad)
        tensors[n] = nt
    return ModelParams(
        config=params.config, tensors=tensors, is_extra=dict(params.is_extra)
    )


def _collect_grads(params: ModelParams) -> dict[str, np.ndarray]:
    out = {}
    for n in params.trainable_names():
        g = params.tensors[n].grad
        if g is not None:
            out[n] = g
    return out


def _batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Deterministic epoch shuffling: a fresh permutation per epoch, fixed
    batch order within it."""
    order: list[int] = []
    produced = 0
    while produced < steps:
        perm = [int(i) for i in rng.permutation(n)]
        order.extend(perm)
        while len(order) >= batch_size and produced < steps:
            yield order[:batch_size]
            order = order[batch_size:]
            produced += 1


# ---------------------------------------------------------------------------
# base pretraining (text-only, stands in for a pretrained MT system)


def pretrain_base(
    parallel_corpus: list,
    model_config: m.ModelConfig,
    config: PretrainConfig,
) -> ModelParams:
    """Train the base encoder-decoder on text-only pairs, then freeze it."""
    if not parallel_corpus:
        raise ValueError("empty pretraining corpus")
    params = m.build_model(model_config, seed=config.seed)
    params.unfreeze_base()
    state = AdamState()
    rng = np.random.default_rng([config.seed, 17])
    n = len(parallel_corpus)
    for step, idxs in enumerate(
        _batches(n, min(config.batch_size, n), config.max_steps, rng), start=1
    ):
        batch = Batch(
            [
                BatchExample(src=parallel_corpus[k].src, tgt=parallel_corpus[k].tgt)
                for k in idxs
            ]
        )
        loss = obj.text_nll(batch, params)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"pretraining diverged at step {step}: loss={loss.data}")
        ad.backward(loss)
        grads = _collect_grads(params)
        adam_step(params, grads, state, config)
        params.zero_grads()
    params.freeze_base()
    return params


# ---------------------------------------------------------------------------
# adaptation (extras only)


def _step_losses(
    batch: Batch,
    params: ModelParams,
    weights: LossWeights,
    mode: str,
    kl_mode: str,
    base_lp: list[np.ndarray],
):
    """Return (total Tensor, vmlm float, other float) for one step."""
    if mode == "full":
        total, vmlm, kl = obj.combined_loss(
            batch, params, params, weights, kl_mode=kl_mode, base_lp=base_lp
        )
        return total, float(vmlm.data), float(kl.data)
    if mode == "no_vmlm":
        kl = obj.kl_penalty(batch, params, params, kl_mode=kl_mode, base_lp=base_lp)
        total = ad.scale(kl, weights.lam)
        return total, 0.0, float(kl.data)
    if mode == "no_kl":
        vmlm = obj.vmlm_loss(batch, params)
        return vmlm, float(vmlm.data), 0.0
    if mode == "mmt_no_kl":
        vmlm = obj.vmlm_loss(batch, params)
        mmt = obj.mmt_loss(batch, params)
        total = ad.add(vmlm, ad.scale(mmt, weights.lam))
        return total, float(vmlm.data), float(mmt.data)
    raise ValueError(f"unknown training mode {mode!r}")


def evaluate_checkpoint(
    params: ModelParams,
    val_contrastive: list,
    val_translation: list,
    beam_width: int = 4,
) -> tuple[float, float]:
    """Contrastive accuracy and BLEU of the current multimodal model."""
    scorer = ev.MultimodalScorer(params)
    acc = ev.commute_accuracy(scorer, val_contrastive)
    hyps, refs = [], []
    for ex in val_translation:
        hyp = decoding.beam_search(
            params, ex.src, image=ex.image, width=beam_width
        )
        hyps.append(list(hyp.tokens))
        refs.append(ex.tgt[1:-1])
    return acc, ev.bleu(hyps, refs)


def train(
    config: TrainConfig,
    corpus: TrainData,
    frozen_base: ModelParams,
) -> TrainResult:
    """Adapt the frozen base on multimodal data; only extras move."""
    config.validate()
    if not corpus.mmt_train:
        raise ValueError("empty training corpus")
    params = clone_params(frozen_base)
    params.freeze_base()
    m.reinit_extras(params, seed=config.seed)
    weights = LossWeights(lam=config.lam)
    examples = corpus.mmt_train

    batch_examples = [
        BatchExample(src=ex.src, tgt=ex.tgt, image=ex.image) for ex in examples
    ]
    needs_base = config.mode in ("full", "no_vmlm")
    base_cache = (
        obj.base_teacher_logprobs(params, batch_examples) if needs_base else None
    )

    state = AdamState()
    rng = np.random.default_rng([config.seed, 29])
    n = len(examples)
    log_rows: list[dict] = []
    checkpoints: list[Checkpoint] = []

    def snapshot(step: int) -> Checkpoint:
        acc, bleu_score = evaluate_checkpoint(
            params, corpus.val_contrastive, corpus.val_translation,
            beam_width=config.beam_width,
        )
        return Checkpoint(
            step=step, extras=params.copy_extras(),
            contrastive_acc=acc, bleu=bleu_score,
        )

    for step, idxs in enumerate(
        _batches(n, min(config.batch_size, n), config.max_steps, rng), start=1
    ):
        batch_list = []
        cache_list = []
        for k in idxs:
            ex = batch_examples[k]
            _, mask_set = m.apply_source_mask(ex.src, config.mask_rate, rng)
            batch_list.append(
                BatchExample(src=ex.src, tgt=ex.tgt, image=ex.image,
                             mask_set=mask_set)
            )
            if base_cache is not None:
                cache_list.append(base_cache[k])
        batch = Batch(batch_list)
        total, vmlm_val, other_val = _step_losses(
            batch, params, weights, config.mode, config.kl_mode,
            cache_list if base_cache is not None else None,
        )
        if not np.isfinite(total.data):
            raise RuntimeError(f"training diverged at step {step}: loss={total.data}")
        ad.backward(total)
        grads = _collect_grads(params)
        adam_step(params, grads, state, config)
        params.zero_grads()

        row = {
            "step": step,
            "vmlm": vmlm_val,
            "kl": other_val,
            "total": float(total.data),
            "val_contrastive": "",
            "val_bleu": "",
        }
        if step % config.eval_every == 0 or step == config.max_steps:
            if not checkpoints or checkpoints[-1].step != step:
                cp = snapshot(step)
                checkpoints.append(cp)
                row["val_contrastive"] = cp.contrastive_acc
                row["val_bleu"] = cp.bleu
        log_rows.append(row)

    best = select_model(checkpoints)
    final = clone_params(params)
    final.load_extras(best.extras)
    return TrainResult(
        params=final, best=best, checkpoints=checkpoints, log_rows=log_rows
    )


def select_model(checkpoints: list[Checkpoint]) -> Checkpoint:
    """Equal-weight sum of min-max normalized contrastive accuracy and
    BLEU; ties go to the earliest step."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    accs = [c.contrastive_acc for c in checkpoints]
    bleus = [c.bleu for c in checkpoints]

    def norm(vals: list[float]) -> list[float]:
        lo, hi = min(vals), max(vals)
        if hi == lo:
            return [0.5] * len(vals)
        return [(v - lo) / (hi - lo) for v in vals]

    na, nb = norm(accs), norm(bleus)
    best = None
    for cp, a, b in zip(checkpoints, na, nb):
        cp.selection_score = 0.5 * a + 0.5 * b
        if best is None or cp.selection_score > best.selection_score:
            best = cp
    return best


def log_rows_to_csv(rows: list[dict]) -> str:
    lines = ["step,vmlm,kl,total,val_contrastive,val_bleu"]
    for r in rows:
        vc = r["val_contrastive"]
        vb = r["val_bleu"]
        lines.append(
            f"{r['step']},{r['vmlm']!r},{r['kl']!r},{r['total']!r},"
            f"{vc if vc == '' else repr(vc)},{vb if vb == '' else repr(vb)}"
        )
    return "\n".join(lines) + "\n"
