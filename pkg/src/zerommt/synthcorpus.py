"""Synthetic bilingual multimodal world.

Source sentences are bags of toy source-language words; the target side is
a deterministic word-for-word mapping. A subset of source words is
ambiguous: each has two sense-dependent translations. Images are sense
centroids plus Gaussian noise, so the visual channel carries exactly the
information needed to disambiguate. Optional cue tokens reveal the sense
textually, mirroring captions that are unambiguous in context. The caption
split draws plain words from a restricted sub-lexicon, mirroring the
domain gap between caption corpora and translation benchmarks.

All artifacts are pure functions of (spec, sizes, seed): each example gets
its own seed stream keyed by (seed, split, index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .evaluation import ContrastiveInstance
from .model import BOS, EOS, SPECIAL_TOKENS, ModelParams
from . import decoding

N_SPECIALS = len(SPECIAL_TOKENS)


@dataclass
class WorldSpec:
    n_plain_words: int = 10
    n_ambiguous_words: int = 8
    sent_len_min: int = 3
    sent_len_max: int = 7
    ambiguity_rate: float = 0.5
    context_cue_rate: float = 0.8
    # None: captions share context_cue_rate
    caption_cue_rate: float | None = None
    caption_domain_fraction: float = 1.0
    image_dim: int = 16
    sense_cluster_separation: float = 1.0
    image_noise_sigma: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.n_plain_words < 1:
            raise ValueError("need at least one plain word")
        if self.n_ambiguous_words < 0:
            raise ValueError("n_ambiguous_words must be nonnegative")
        if not 1 <= self.sent_len_min <= self.sent_len_max:
            raise ValueError("bad sentence length range")
        for name in ("ambiguity_rate", "context_cue_rate", "caption_cue_rate"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if not 0.0 < self.caption_domain_fraction <= 1.0:
            raise ValueError("caption_domain_fraction must be in (0, 1]")
        if self.sense_cluster_separation <= 0:
            raise ValueError("sense_cluster_separation must be positive")
        if self.image_noise_sigma < 0:
            raise ValueError("image_noise_sigma must be nonnegative")


@dataclass
class World:
    spec: WorldSpec
    plain_src: list[int]
    plain_tgt: dict[int, int]
    amb_src: list[int]
    amb_tgt: dict[int, tuple[int, int]]
    cue: dict[tuple[int, int], int]
    centroids: dict[str, list[float]]
    vocab_used: int

    @property
    def has_ambiguity(self) -> bool:
        return bool(self.amb_src)

    @property
    def caption_plain_src(self) -> list[int]:
        """Plain words the caption domain draws from. Captions cover only
        the leading fraction of the plain lexicon, so translation test
        sentences contain words never seen during adaptation."""
        n = max(1, int(np.ceil(self.spec.caption_domain_fraction
                               * len(self.plain_src))))
        return self.plain_src[:n]

    def centroid(self, word: int | None, sense: int | None) -> np.ndarray:
        key = "neutral" if word is None else f"{word}:{sense}"
        return np.asarray(self.centroids[key])

    def sample_image(
        self, word: int | None, sense: int | None, rng: np.random.Generator
    ) -> np.ndarray:
        sigma = self.spec.image_noise_sigma / self.spec.sense_cluster_separation
        return self.centroid(word, sense) + sigma * rng.standard_normal(
            self.spec.image_dim
        )

    def translate_token(self, tok: int, sense: int | None) -> int | None:
        """Target token for one source token; cues translate to nothing."""
        if tok in self.plain_tgt:
            return self.plain_tgt[tok]
        if tok in self.amb_tgt:
            if sense is None:
                raise ValueError("ambiguous token needs a sense to translate")
            return self.amb_tgt[tok][sense]
        return None

    def sense_tokens(self, word: int) -> tuple[int, int]:
        return self.amb_tgt[word]


@dataclass
class Example:
    id: int
    src: list[int]
    tgt: list[int]
    image: np.ndarray | None = None
    # diagnostics, not serialized
    amb_word: int | None = None
    sense: int | None = None
    has_cue: bool = False


@dataclass
class SplitSizes:
    pretrain_parallel: int = 3000
    mmt_train: int = 1000
    val_contrastive: int = 32
    val_translation: int = 24
    test_contrastive: int = 256
    test_translation: int = 64

    def validate(self) -> None:
        for name, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"split size {name} must be positive")


@dataclass
class Splits:
    pretrain_parallel: list[Example] = field(default_factory=list)
    mmt_train: list[Example] = field(default_factory=list)
    val_contrastive: list[ContrastiveInstance] = field(default_factory=list)
    val_translation: list[Example] = field(default_factory=list)
    test_contrastive: list[ContrastiveInstance] = field(default_factory=list)
    test_translation: list[Example] = field(default_factory=list)


def generate_world(spec: WorldSpec, vocab_budget: int = 64) -> World:
    """Lay out the lexicons and draw per-sense image centroids."""
    spec.validate()
    p, a = spec.n_plain_words, spec.n_ambiguous_words
    needed = N_SPECIALS + 2 * p + 5 * a
    if needed > vocab_budget:
        raise ValueError(
            f"world needs {needed} vocabulary entries, budget is {vocab_budget}"
        )
    nxt = N_SPECIALS
    plain_src = list(range(nxt, nxt + p)); nxt += p
    plain_tgt_ids = list(range(nxt, nxt + p)); nxt += p
    amb_src = list(range(nxt, nxt + a)); nxt += a
    amb_tgt_ids = list(range(nxt, nxt + 2 * a)); nxt += 2 * a
    cue_ids = list(range(nxt, nxt + 2 * a)); nxt += 2 * a

    plain_tgt = dict(zip(plain_src, plain_tgt_ids))
    amb_tgt = {
        w: (amb_tgt_ids[2 * k], amb_tgt_ids[2 * k + 1])
        for k, w in enumerate(amb_src)
    }
    cue = {
        (w, s): cue_ids[2 * k + s]
        for k, w in enumerate(amb_src)
        for s in (0, 1)
    }

    rng = np.random.default_rng([spec.seed, 0])
    centroids: dict[str, list[float]] = {
        "neutral": [0.0] * spec.image_dim,
    }
    for w in amb_src:
        for s in (0, 1):
            vec = rng.standard_normal(spec.image_dim) * spec.sense_cluster_separation
            centroids[f"{w}:{s}"] = [float(v) for v in vec]
    return World(
        spec=spec,
        plain_src=plain_src,
        plain_tgt=plain_tgt,
        amb_src=amb_src,
        amb_tgt=amb_tgt,
        cue=cue,
        centroids=centroids,
        vocab_used=nxt,
    )


def _sample_example(
    world: World,
    ex_id: int,
    rng: np.random.Generator,
    force_ambiguous: bool = False,
    forbid_ambiguous: bool = False,
    cue_allowed: bool = True,
    with_image: bool = False,
    caption_domain: bool = False,
    cue_rate: float | None = None,
) -> Example:
    spec = world.spec
    if cue_rate is None:
        cue_rate = spec.context_cue_rate
    pool = world.caption_plain_src if caption_domain else world.plain_src
    n = int(rng.integers(spec.sent_len_min, spec.sent_len_max + 1))
    src = [int(rng.choice(pool)) for _ in range(n)]
    word = sense = None
    has_cue = False
    ambiguous = force_ambiguous or (
        not forbid_ambiguous
        and world.has_ambiguity
        and rng.random() < spec.ambiguity_rate
    )
    if ambiguous and world.has_ambiguity:
        pos = int(rng.integers(n))
        word = int(rng.choice(world.amb_src))
        sense = int(rng.integers(2))
        src[pos] = word
        if cue_allowed and rng.random() < cue_rate:
            cue_pos = int(rng.integers(n + 1))
            src.insert(cue_pos, world.cue[(word, sense)])
            has_cue = True
    tgt = [BOS]
    for tok in src:
        out = world.translate_token(tok, sense)
        if out is not None:
            tgt.append(out)
    tgt.append(EOS)
    image = None
    if with_image:
        image = world.sample_image(word, sense, rng)
    return Example(
        id=ex_id, src=src, tgt=tgt, image=image,
        amb_word=word, sense=sense, has_cue=has_cue,
    )


def _sample_contrastive(
    world: World, ex_id: int, rng: np.random.Generator
) -> ContrastiveInstance:
    spec = world.spec
    n = int(rng.integers(spec.sent_len_min, spec.sent_len_max + 1))
    src = [int(rng.choice(world.plain_src)) for _ in range(n)]
    pos = int(rng.integers(n))
    word = int(rng.choice(world.amb_src))
    src[pos] = word

    def tgt_for(sense: int) -> list[int]:
        out = [BOS]
        for tok in src:
            t = world.translate_token(tok, sense)
            if t is not None:
                out.append(t)
        out.append(EOS)
        return out

    return ContrastiveInstance(
        id=ex_id,
        src=src,
        img_a=world.sample_image(word, 0, rng),
        tgt_a=tgt_for(0),
        img_b=world.sample_image(word, 1, rng),
        tgt_b=tgt_for(1),
    )


_SPLIT_TAGS = {
    "pretrain_parallel": 1,
    "mmt_train": 2,
    "val_contrastive": 3,
    "val_translation": 4,
    "test_contrastive": 5,
    "test_translation": 6,
}


def generate_splits(world: World, sizes: SplitSizes) -> Splits:
    sizes.validate()
    needs_contrastive = sizes.val_contrastive > 0 or sizes.test_contrastive > 0
    if needs_contrastive and not world.has_ambiguity:
        raise ValueError(
            "no ambiguous words in this world: contrastive sets cannot be built"
        )
    seed = world.spec.seed

    def rng_for(split: str, idx: int) -> np.random.Generator:
        return np.random.default_rng([seed, _SPLIT_TAGS[split], idx])

    splits = Splits()
    # Uncued ambiguous pretraining sentences are emitted as same-source
    # pairs covering both senses, so the base learns a genuine 50/50 split
    # instead of memorizing one arbitrary sense per sentence.
    draw = 0
    while len(splits.pretrain_parallel) < sizes.pretrain_parallel:
        ex = _sample_example(
            world, len(splits.pretrain_parallel),
            rng_for("pretrain_parallel", draw),
        )
        draw += 1
        splits.pretrain_parallel.append(ex)
        if (
            ex.amb_word is not None
            and not ex.has_cue
            and len(splits.pretrain_parallel) < sizes.pretrain_parallel
        ):
            flipped = 1 - ex.sense
            twin_tgt = [BOS]
            for tok in ex.src:
                out = world.translate_token(tok, flipped)
                if out is not None:
                    twin_tgt.append(out)
            twin_tgt.append(EOS)
            splits.pretrain_parallel.append(
                Example(
                    id=len(splits.pretrain_parallel), src=list(ex.src),
                    tgt=twin_tgt, amb_word=ex.amb_word, sense=flipped,
                )
            )
    for k in range(sizes.mmt_train):
        splits.mmt_train.append(
            _sample_example(
                world, k, rng_for("mmt_train", k),
                with_image=True, caption_domain=True,
                cue_rate=world.spec.caption_cue_rate,
            )
        )
    for k in range(sizes.val_contrastive):
        splits.val_contrastive.append(
            _sample_contrastive(world, k, rng_for("val_contrastive", k))
        )
    for k in range(sizes.val_translation):
        splits.val_translation.append(
            _sample_example(
                world, k, rng_for("val_translation", k),
                forbid_ambiguous=True, with_image=True,
            )
        )
    for k in range(sizes.test_contrastive):
        splits.test_contrastive.append(
            _sample_contrastive(world, k, rng_for("test_contrastive", k))
        )
    for k in range(sizes.test_translation):
        splits.test_translation.append(
            _sample_example(
                world, k, rng_for("test_translation", k),
                forbid_ambiguous=True, with_image=True,
            )
        )
    return splits


# ---------------------------------------------------------------------------
# pseudo-translation with the frozen base


@dataclass
class PseudoTranslateReport:
    n_total: int = 0
    n_dropped: int = 0
    unambiguous_total: int = 0
    unambiguous_match: int = 0
    cued_total: int = 0
    cued_sense_match: int = 0
    uncued_sense_counts: dict[str, int] = field(default_factory=dict)

    @property
    def unambiguous_match_rate(self) -> float:
        return self.unambiguous_match / max(1, self.unambiguous_total)

    @property
    def cued_sense_match_rate(self) -> float:
        return self.cued_sense_match / max(1, self.cued_total)


def _realized_sense(world: World, word: int, tgt: list[int]) -> int | None:
    t0, t1 = world.sense_tokens(word)
    has0, has1 = t0 in tgt, t1 in tgt
    if has0 == has1:
        return None
    return 0 if has0 else 1


def pseudo_translate(
    base_params: ModelParams,
    examples: list[Example],
    world: World,
    width: int = 4,
) -> tuple[list[Example], PseudoTranslateReport]:
    """Replace gold targets with the frozen base's beam translations."""
    report = PseudoTranslateReport(n_total=len(examples))
    out: list[Example] = []
    for ex in examples:
        hyp = decoding.beam_search(
            base_params, ex.src, image=None, width=width, use_extras=False
        )
        if not hyp.finished:
            report.n_dropped += 1
            continue
        tgt = [BOS] + list(hyp.tokens) + [EOS]
        if ex.amb_word is None:
            report.unambiguous_total += 1
            if tgt == ex.tgt:
                report.unambiguous_match += 1
        else:
            realized = _realized_sense(world, ex.amb_word, tgt)
            if ex.has_cue:
                report.cued_total += 1
                if realized == ex.sense:
                    report.cued_sense_match += 1
            else:
                key = "none" if realized is None else str(realized)
                report.uncued_sense_counts[key] = (
                    report.uncued_sense_counts.get(key, 0) + 1
                )
        out.append(
            Example(
                id=ex.id, src=ex.src, tgt=tgt, image=ex.image,
                amb_word=ex.amb_word, sense=ex.sense, has_cue=ex.has_cue,
            )
        )
    return out, report


# ---------------------------------------------------------------------------
# JSONL round-trip


def _float_list(vec: np.ndarray) -> list[float]:
    return [float(v) for v in vec]


def write_examples(path, examples: list[Example]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            obj: dict = {"id": ex.id, "src": ex.src, "tgt": ex.tgt}
            if ex.image is not None:
                obj["img"] = _float_list(ex.image)
            fh.write(json.dumps(obj) + "\n")


def read_examples(path) -> list[Example]:
    out: list[Example] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                img = obj.get("img")
                out.append(
                    Example(
                        id=int(obj["id"]),
                        src=[int(t) for t in obj["src"]],
                        tgt=[int(t) for t in obj["tgt"]],
                        image=None if img is None else np.asarray(img, dtype=np.float64),
                    )
                )
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
                raise ValueError(f"{path}: malformed line {lineno}: {e}") from e
    return out


def write_contrastive(path, instances: list[ContrastiveInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            obj = {
                "id": inst.id,
                "src": inst.src,
                "img_a": _float_list(inst.img_a),
                "tgt_a": inst.tgt_a,
                "img_b": _float_list(inst.img_b),
                "tgt_b": inst.tgt_b,
            }
            fh.write(json.dumps(obj) + "\n")


def read_contrastive(path) -> list[ContrastiveInstance]:
    out: list[ContrastiveInstance] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(
                    ContrastiveInstance(
                        id=int(obj["id"]),
                        src=[int(t) for t in obj["src"]],
                        img_a=np.asarray(obj["img_a"], dtype=np.float64),
                        tgt_a=[int(t) for t in obj["tgt_a"]],
                        img_b=np.asarray(obj["img_b"], dtype=np.float64),
                        tgt_b=[int(t) for t in obj["tgt_b"]],
                    )
                )
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
                raise ValueError(f"{path}: malformed line {lineno}: {e}") from e
    return out


def world_to_dict(world: World) -> dict:
    return {
        "spec": asdict(world.spec),
        "plain_src": world.plain_src,
        "plain_tgt": {str(k): v for k, v in world.plain_tgt.items()},
        "amb_src": world.amb_src,
        "amb_tgt": {str(k): list(v) for k, v in world.amb_tgt.items()},
        "cue": {f"{w}:{s}": c for (w, s), c in world.cue.items()},
        "centroids": world.centroids,
        "vocab_used": world.vocab_used,
    }


def world_from_dict(obj: dict) -> World:
    cue = {}
    for key, c in obj["cue"].items():
        w, s = key.split(":")
        cue[(int(w), int(s))] = int(c)
    return World(
        spec=WorldSpec(**obj["spec"]),
        plain_src=[int(v) for v in obj["plain_src"]],
        plain_tgt={int(k): int(v) for k, v in obj["plain_tgt"].items()},
        amb_src=[int(v) for v in obj["amb_src"]],
        amb_tgt={int(k): (int(v[0]), int(v[1])) for k, v in obj["amb_tgt"].items()},
        cue=cue,
        centroids=obj["centroids"],
        vocab_used=int(obj["vocab_used"]),
    )
