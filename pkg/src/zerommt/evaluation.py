"""Contrastive disambiguation scoring, perplexity, and corpus BLEU.

A scorer is anything that maps (source, image, target) to per-position
next-token distributions under teacher forcing. Three scorers are
provided: the frozen text-only base (image-blind), the multimodal model,
and a guidance blend of the two.
"""

from __future__ import annotations

import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import model as m
from .decoding import cfg_distribution
from .model import ModelParams


def max_threads() -> int:
    """Instance-level parallelism cap, from ZEROMMT_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("ZEROMMT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ContrastiveInstance:
    """One ambiguous source with two (image, translation) pairs.

    ``tgt_a`` is the correct translation under ``img_a`` and ``tgt_b``
    under ``img_b``. Each instance is scored twice, once per orientation,
    so an image-blind model lands on exactly 50%.
    """

    id: int
    src: list[int]
    img_a: np.ndarray
    tgt_a: list[int]
    img_b: np.ndarray
    tgt_b: list[int]


@dataclass
class InstanceRow:
    id: int
    orientation: str
    ppl_correct: float
    ppl_wrong: float
    score: int


@dataclass
class EvalReport:
    contrastive_accuracy: float
    bleu: float
    mean_ppl_correct: float
    mean_ppl_wrong: float
    n_ties: int
    rows: list[InstanceRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rows"] = [asdict(r) for r in self.rows]
        return d

    def rows_csv(self) -> str:
        lines = ["id,orientation,ppl_correct,ppl_wrong,score"]
        for r in self.rows:
            lines.append(
                f"{r.id},{r.orientation},{r.ppl_correct!r},{r.ppl_wrong!r},{r.score}"
            )
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# scorers


class TextOnlyScorer:
    """Frozen base model; ignores the image entirely."""

    def __init__(self, params: ModelParams):
        self.params = params

    def distributions(self, src, image, tgt) -> np.ndarray:
        enc = m.encode(src, None, self.params, use_extras=False)
        ids = np.asarray([tgt[:-1]], dtype=np.int64)
        valid = np.ones_like(ids, dtype=bool)
        logits = m.decoder_logits(self.params, enc, ids, valid, use_extras=False)
        return ad.softmax(logits, axis=-1).data[0]


class MultimodalScorer:
    def __init__(self, params: ModelParams):
        self.params = params

    def distributions(self, src, image, tgt) -> np.ndarray:
        enc = m.encode(src, image, self.params, use_extras=True)
        ids = np.asarray([tgt[:-1]], dtype=np.int64)
        valid = np.ones_like(ids, dtype=bool)
        logits = m.decoder_logits(self.params, enc, ids, valid, use_extras=True)
        return ad.softmax(logits, axis=-1).data[0]


class CfgScorer:
    """Guidance blend of a text-only and a multimodal scorer."""

    def __init__(self, text_scorer, mm_scorer, gamma: float, space: str = "log"):
        self.text_scorer = text_scorer
        self.mm_scorer = mm_scorer
        self.gamma = gamma
        self.space = space

    def distributions(self, src, image, tgt) -> np.ndarray:
        pt = self.text_scorer.distributions(src, image, tgt)
        pm = self.mm_scorer.distributions(src, image, tgt)
        return np.stack(
            [
                cfg_distribution(pt[j], pm[j], self.gamma, self.space)
                for j in range(pt.shape[0])
            ]
        )


# ---------------------------------------------------------------------------
# perplexity and the contrastive protocol


def sequence_perplexity(scorer, x: list[int], i, y: list[int]) -> float:
    """exp of the mean per-token negative log-probability of ``y``."""
    if len(y) < 2 or y[-1] != m.EOS:
        raise ValueError("target must be nonempty and EOS-terminated")
    dists = scorer.distributions(x, i, y)
    gold = np.asarray(y[1:])
    probs = dists[np.arange(len(gold)), gold]
    nll = -np.log(np.maximum(probs, 1e-300)).mean()
    return float(np.exp(nll))


def contrastive_score(
    scorer, x: list[int], i, y_correct: list[int], y_wrong: list[int]
) -> int:
    """1 iff the correct translation has strictly lower perplexity."""
    ppl_c = sequence_perplexity(scorer, x, i, y_correct)
    ppl_w = sequence_perplexity(scorer, x, i, y_wrong)
    return 1 if ppl_c < ppl_w else 0


def _score_instance(scorer, inst: ContrastiveInstance) -> list[InstanceRow]:
    rows = []
    for orientation, img, y_c, y_w in (
        ("a", inst.img_a, inst.tgt_a, inst.tgt_b),
        ("b", inst.img_b, inst.tgt_b, inst.tgt_a),
    ):
        ppl_c = sequence_perplexity(scorer, inst.src, img, y_c)
        ppl_w = sequence_perplexity(scorer, inst.src, img, y_w)
        rows.append(
            InstanceRow(
                id=inst.id,
                orientation=orientation,
                ppl_correct=ppl_c,
                ppl_wrong=ppl_w,
                score=1 if ppl_c < ppl_w else 0,
            )
        )
    return rows


def commute_rows(
    scorer, instances: list[ContrastiveInstance]
) -> list[InstanceRow]:
    if not instances:
        raise ValueError("no contrastive instances")
    workers = max_threads()
    if workers == 1:
        nested = [_score_instance(scorer, inst) for inst in instances]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            nested = list(pool.map(lambda it: _score_instance(scorer, it), instances))
    return [row for rows in nested for row in rows]


def commute_accuracy(scorer, instances: list[ContrastiveInstance]) -> float:
    """Mean contrastive score over both orientations of every instance, x100."""
    rows = commute_rows(scorer, instances)
    return 100.0 * sum(r.score for r in rows) / len(rows)


def evaluate_contrastive(
    scorer, instances: list[ContrastiveInstance], bleu_score: float = float("nan")
) -> EvalReport:
    rows = commute_rows(scorer, instances)
    n_ties = sum(1 for r in rows if r.ppl_correct == r.ppl_wrong)
    return EvalReport(
        contrastive_accuracy=100.0 * sum(r.score for r in rows) / len(rows),
        bleu=bleu_score,
        mean_ppl_correct=float(np.mean([r.ppl_correct for r in rows])),
        mean_ppl_wrong=float(np.mean([r.ppl_wrong for r in rows])),
        n_ties=n_ties,
        rows=rows,
    )


# ---------------------------------------------------------------------------
# corpus BLEU


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[k : k + n]) for k in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100]: clipped n-gram precision, geometric mean,
    brevity penalty.

    For toy corpora whose longest hypothesis is shorter than ``max_n``, the
    geometric mean runs over the achievable n-gram orders only, instead of
    degenerating to zero.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference lists differ in length")
    if not hypotheses:
        raise ValueError("empty corpus")
    max_hyp_len = max(len(h) for h in hypotheses)
    orders = min(max_n, max_hyp_len)
    if orders == 0:
        return 0.0
    hyp_len = sum(len(h) for h in hypotheses)
    ref_len = sum(len(r) for r in references)

    log_precisions = []
    for n in range(1, orders + 1):
        matched = 0
        total = 0
        for h, r in zip(hypotheses, references):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            total += sum(hc.values())
            matched += sum(min(c, rc[g]) for g, c in hc.items())
        if total == 0 or matched == 0:
            return 0.0
        log_precisions.append(math.log(matched / total))

    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    return 100.0 * bp * math.exp(sum(log_precisions) / orders)
