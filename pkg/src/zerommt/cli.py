"""Command-line pipeline: gen | pretrain | translate | train | eval | sweep.

Every stage reads and writes inside one run directory, so a full
experiment is a chain of commands sharing ``--out``. JSON reports embed
the resolved configuration and code version; CSV outputs get a sidecar
``.meta.json`` with the same payload.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import decoding
from . import evaluation as ev
from . import model as m
from . import synthcorpus as sc
from . import training as tr

DEFAULT_GAMMAS = [1.0, 1.25, 1.5, 2.0, 2.5, 3.0]
DEFAULT_LAMBDAS = [0.01, 0.05, 0.1, 0.5, 1.0, 10.0]


@dataclass
class RunConfig:
    world: sc.WorldSpec = field(default_factory=sc.WorldSpec)
    sizes: sc.SplitSizes = field(default_factory=sc.SplitSizes)
    model: m.ModelConfig = field(default_factory=m.ModelConfig)
    pretrain: tr.PretrainConfig = field(default_factory=tr.PretrainConfig)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    gamma_list: list[float] = field(default_factory=lambda: list(DEFAULT_GAMMAS))
    lambda_list: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    targets: str = "pseudo"
    cfg_space: str = "log"
    eval_beam_width: int = 4

    def validate(self) -> None:
        if self.targets not in ("pseudo", "gold"):
            raise ValueError(f"targets must be pseudo or gold, got {self.targets!r}")
        if self.cfg_space not in ("log", "prob_clip"):
            raise ValueError(f"unknown cfg_space {self.cfg_space!r}")


def _fill_dataclass(cls, obj: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(obj) - set(fields)
    if unknown:
        raise ValueError(f"unknown config keys at {path}: {sorted(unknown)}")
    kwargs = {}
    for key, value in obj.items():
        ftype = fields[key].type
        if isinstance(value, dict):
            sub = _DATACLASS_FIELDS.get((cls, key))
            if sub is None:
                raise ValueError(f"unexpected object at {path}.{key}")
            kwargs[key] = _fill_dataclass(sub, value, f"{path}.{key}")
        else:
            kwargs[key] = value
        del ftype
    return cls(**kwargs)


_DATACLASS_FIELDS = {
    (RunConfig, "world"): sc.WorldSpec,
    (RunConfig, "sizes"): sc.SplitSizes,
    (RunConfig, "model"): m.ModelConfig,
    (RunConfig, "pretrain"): tr.PretrainConfig,
    (RunConfig, "train"): tr.TrainConfig,
}


def load_config(path: str | None, seed: int | None) -> RunConfig:
    if path is None:
        config = RunConfig()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        config = _fill_dataclass(RunConfig, raw, "config")
    if seed is not None:
        config.world.seed = seed
        config.pretrain.seed = seed
        config.train.seed = seed
    config.validate()
    return config


def _meta(config: RunConfig, **extra) -> dict:
    payload = {"version": __version__, "config": asdict(config)}
    payload.update(extra)
    return payload


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _write_csv(path: Path, text: str, config: RunConfig, **extra) -> None:
    path.write_text(text, encoding="utf-8")
    _write_json(path.with_suffix(path.suffix + ".meta.json"),
                _meta(config, **extra))


# ---------------------------------------------------------------------------
# stage helpers


def _corpus_dir(out: Path) -> Path:
    return out / "corpus"


def _load_world(out: Path) -> sc.World:
    payload = json.loads((_corpus_dir(out) / "world.json").read_text())
    return sc.world_from_dict(payload["world"])


def _load_split_examples(out: Path, name: str) -> list[sc.Example]:
    return sc.read_examples(_corpus_dir(out) / f"{name}.jsonl")


def _load_split_contrastive(out: Path, name: str) -> list[ev.ContrastiveInstance]:
    return sc.read_contrastive(_corpus_dir(out) / f"{name}.jsonl")


def _load_base(out: Path) -> m.ModelParams:
    params, _ = m.load_checkpoint(out / "base.ckpt")
    params.freeze_base()
    return params


def _train_data(out: Path, config: RunConfig) -> tr.TrainData:
    pseudo_path = _corpus_dir(out) / "mmt_train_pseudo.jsonl"
    if config.targets == "pseudo":
        if not pseudo_path.exists():
            raise FileNotFoundError(
                f"{pseudo_path} missing: run the translate stage first "
                "(or set targets=gold)"
            )
        train_examples = sc.read_examples(pseudo_path)
    else:
        train_examples = _load_split_examples(out, "mmt_train")
    return tr.TrainData(
        mmt_train=train_examples,
        val_contrastive=_load_split_contrastive(out, "val_contrastive"),
        val_translation=_load_split_examples(out, "val_translation"),
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gen(config: RunConfig, out: Path) -> None:
    world = sc.generate_world(config.world, vocab_budget=config.model.vocab_size)
    splits = sc.generate_splits(world, config.sizes)
    cdir = _corpus_dir(out)
    cdir.mkdir(parents=True, exist_ok=True)
    _write_json(cdir / "world.json", _meta(config, world=sc.world_to_dict(world)))
    sc.write_examples(cdir / "pretrain_parallel.jsonl", splits.pretrain_parallel)
    sc.write_examples(cdir / "mmt_train.jsonl", splits.mmt_train)
    sc.write_contrastive(cdir / "val_contrastive.jsonl", splits.val_contrastive)
    sc.write_examples(cdir / "val_translation.jsonl", splits.val_translation)
    sc.write_contrastive(cdir / "test_contrastive.jsonl", splits.test_contrastive)
    sc.write_examples(cdir / "test_translation.jsonl", splits.test_translation)
    for name, n in (
        ("pretrain_parallel", len(splits.pretrain_parallel)),
        ("mmt_train", len(splits.mmt_train)),
        ("val_contrastive", len(splits.val_contrastive)),
        ("val_translation", len(splits.val_translation)),
        ("test_contrastive", len(splits.test_contrastive)),
        ("test_translation", len(splits.test_translation)),
    ):
        print(f"{name}: {n}")


def cmd_pretrain(config: RunConfig, out: Path) -> None:
    corpus = _load_split_examples(out, "pretrain_parallel")
    params = tr.pretrain_base(corpus, config.model, config.pretrain)
    m.save_checkpoint(out / "base.ckpt", params, meta=_meta(config, stage="pretrain"))
    print(f"pretrained base saved to {out / 'base.ckpt'}")


def cmd_translate(config: RunConfig, out: Path) -> None:
    base = _load_base(out)
    world = _load_world(out)
    gold = _load_split_examples(out, "mmt_train")
    # sense/cue diagnostics need the generator's metadata, which files do
    # not carry; regenerate it deterministically from the world
    regen = sc.generate_splits(world, sc.SplitSizes(
        **{**asdict(config.sizes)}
    )).mmt_train
    by_id = {ex.id: ex for ex in regen}
    enriched = []
    for ex in gold:
        meta = by_id.get(ex.id)
        if meta is not None:
            ex.amb_word, ex.sense, ex.has_cue = meta.amb_word, meta.sense, meta.has_cue
        enriched.append(ex)
    pseudo, report = sc.pseudo_translate(
        base, enriched, world, width=config.eval_beam_width
    )
    sc.write_examples(_corpus_dir(out) / "mmt_train_pseudo.jsonl", pseudo)
    _write_json(out / "translate_report.json", _meta(
        config,
        n_total=report.n_total,
        n_dropped=report.n_dropped,
        unambiguous_match_rate=report.unambiguous_match_rate,
        cued_sense_match_rate=report.cued_sense_match_rate,
        uncued_sense_counts=report.uncued_sense_counts,
    ))
    print(
        f"pseudo-translated {report.n_total - report.n_dropped}/{report.n_total} "
        f"(unambiguous match {report.unambiguous_match_rate:.3f}, "
        f"cued sense match {report.cued_sense_match_rate:.3f})"
    )


def cmd_train(config: RunConfig, out: Path, mode: str) -> None:
    base = _load_base(out)
    data = _train_data(out, config)
    train_config = dataclasses.replace(config.train, mode=mode)
    result = tr.train(train_config, data, base)
    run_dir = out / f"train_{mode}"
    run_dir.mkdir(parents=True, exist_ok=True)
    m.save_checkpoint(
        run_dir / "best.ckpt", result.params,
        meta=_meta(config, stage="train", mode=mode, best_step=result.best.step),
    )
    _write_csv(run_dir / "train_log.csv", tr.log_rows_to_csv(result.log_rows),
               config, stage="train", mode=mode)
    print(
        f"mode={mode} best step {result.best.step}: "
        f"val contrastive {result.best.contrastive_acc:.1f}, "
        f"val BLEU {result.best.bleu:.2f}"
    )


def _generation_bleu(
    base: m.ModelParams,
    mm: m.ModelParams | None,
    examples: list[sc.Example],
    gamma: float,
    width: int,
    space: str,
) -> float:
    hyps, refs = [], []
    for ex in examples:
        if mm is None:
            hyp = decoding.beam_search(base, ex.src, image=None, width=width,
                                       use_extras=False)
        elif gamma == 1.0:
            hyp = decoding.beam_search(mm, ex.src, image=ex.image, width=width)
        else:
            hyp = decoding.cfg_beam_search(base, mm, ex.src, ex.image, gamma,
                                           width=width, space=space)
        hyps.append(list(hyp.tokens))
        refs.append(ex.tgt[1:-1])
    return ev.bleu(hyps, refs)


def _sense_accuracy(
    base: m.ModelParams,
    mm: m.ModelParams | None,
    world: sc.World,
    instances: list[ev.ContrastiveInstance],
    gamma: float,
    width: int,
    space: str,
) -> float:
    hits = total = 0
    for inst in instances:
        word = next(t for t in inst.src if t in world.amb_tgt)
        for sense, img in ((0, inst.img_a), (1, inst.img_b)):
            if mm is None:
                hyp = decoding.beam_search(base, inst.src, image=None, width=width,
                                           use_extras=False)
            elif gamma == 1.0:
                hyp = decoding.beam_search(mm, inst.src, image=img, width=width)
            else:
                hyp = decoding.cfg_beam_search(base, mm, inst.src, img, gamma,
                                               width=width, space=space)
            want = world.sense_tokens(word)[sense]
            hits += int(want in hyp.tokens)
            total += 1
    return 100.0 * hits / max(1, total)


def cmd_eval(
    config: RunConfig,
    out: Path,
    ckpt: Path | None,
    gamma: float,
    text_only: bool,
) -> None:
    base = _load_base(out)
    world = _load_world(out)
    instances = _load_split_contrastive(out, "test_contrastive")
    translation = _load_split_examples(out, "test_translation")
    width = config.eval_beam_width

    if text_only:
        mm = None
        scorer = ev.TextOnlyScorer(base)
        plain_scorer = scorer
        tag = "base"
    else:
        ckpt_path = ckpt if ckpt is not None else out / "train_full" / "best.ckpt"
        mm, _ = m.load_checkpoint(ckpt_path)
        mm.freeze_base()
        plain_scorer = ev.MultimodalScorer(mm)
        if gamma == 1.0:
            scorer = plain_scorer
        else:
            scorer = ev.CfgScorer(ev.TextOnlyScorer(base), plain_scorer, gamma,
                                  config.cfg_space)
        tag = f"gamma{gamma:g}"

    report = ev.evaluate_contrastive(scorer, instances)
    report.bleu = _generation_bleu(base, mm, translation, gamma, width,
                                   config.cfg_space)
    plain_acc = ev.commute_accuracy(plain_scorer, instances)
    sense_acc = _sense_accuracy(base, mm, world, instances, gamma, width,
                                config.cfg_space)

    run_dir = out / f"eval_{tag}"
    run_dir.mkdir(parents=True, exist_ok=True)
    payload = _meta(
        config,
        gamma=gamma,
        text_only=text_only,
        contrastive_accuracy=report.contrastive_accuracy,
        contrastive_accuracy_no_cfg=plain_acc,
        bleu=report.bleu,
        sense_accuracy=sense_acc,
        n_ties=report.n_ties,
        mean_ppl_correct=report.mean_ppl_correct,
        mean_ppl_wrong=report.mean_ppl_wrong,
    )
    _write_json(run_dir / "eval_report.json", payload)
    _write_csv(run_dir / "eval_rows.csv", report.rows_csv(), config,
               gamma=gamma, text_only=text_only)
    print(
        f"contrastive {report.contrastive_accuracy:.1f} "
        f"(no CFG {plain_acc:.1f}), BLEU {report.bleu:.2f}, "
        f"sense accuracy {sense_acc:.1f}, ties {report.n_ties}"
    )


def cmd_sweep(
    config: RunConfig,
    out: Path,
    param: str,
    values: list[float],
    ckpt: Path | None,
) -> None:
    if not values:
        raise ValueError("sweep needs at least one value")
    base = _load_base(out)
    world = _load_world(out)
    instances = _load_split_contrastive(out, "test_contrastive")
    translation = _load_split_examples(out, "test_translation")
    width = config.eval_beam_width
    rows = []

    if param == "gamma":
        ckpt_path = ckpt if ckpt is not None else out / "train_full" / "best.ckpt"
        mm, _ = m.load_checkpoint(ckpt_path)
        mm.freeze_base()
        text_scorer = ev.TextOnlyScorer(base)
        mm_scorer = ev.MultimodalScorer(mm)
        for gamma in values:
            scorer = mm_scorer if gamma == 1.0 else ev.CfgScorer(
                text_scorer, mm_scorer, gamma, config.cfg_space
            )
            acc = ev.commute_accuracy(scorer, instances)
            bleu_score = _generation_bleu(base, mm, translation, gamma, width,
                                          config.cfg_space)
            rows.append((gamma, acc, bleu_score))
    elif param == "lambda":
        data = _train_data(out, config)
        for lam in values:
            train_config = dataclasses.replace(config.train, lam=lam, mode="full")
            result = tr.train(train_config, data, base)
            scorer = ev.MultimodalScorer(result.params)
            acc = ev.commute_accuracy(scorer, instances)
            bleu_score = _generation_bleu(base, result.params, translation, 1.0,
                                          width, config.cfg_space)
            rows.append((lam, acc, bleu_score))
        del world
    else:
        raise ValueError(f"unknown sweep parameter {param!r}")

    run_dir = out / f"sweep_{param}"
    run_dir.mkdir(parents=True, exist_ok=True)
    lines = ["value,contrastive_accuracy,bleu"]
    for value, acc, bleu_score in rows:
        lines.append(f"{value!r},{acc!r},{bleu_score!r}")
    _write_csv(run_dir / "sweep.csv", "\n".join(lines) + "\n", config,
               param=param, values=values)
    for value, acc, bleu_score in rows:
        print(f"{param}={value:g}: contrastive {acc:.1f}, BLEU {bleu_score:.2f}")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zerommt",
        description="Zero-shot multimodal MT at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=str, default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override all seeds")
        p.add_argument("--out", type=str, required=True, help="run directory")

    common(sub.add_parser("gen", help="generate the synthetic corpus"))
    common(sub.add_parser("pretrain", help="pretrain and freeze the base model"))
    common(sub.add_parser("translate", help="pseudo-translate the multimodal set"))

    p_train = sub.add_parser("train", help="adapt the frozen base")
    common(p_train)
    p_train.add_argument("--mode", choices=tr.TRAIN_MODES, default="full")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--ckpt", type=str, default=None)
    p_eval.add_argument("--gamma", type=float, default=1.0)
    p_eval.add_argument("--text-only", action="store_true",
                        help="evaluate the frozen base instead")

    p_sweep = sub.add_parser("sweep", help="lambda or gamma sweep")
    common(p_sweep)
    p_sweep.add_argument("--param", choices=("lambda", "gamma"), required=True)
    p_sweep.add_argument("--values", type=str, default=None,
                         help="comma-separated override of the config grid")
    p_sweep.add_argument("--ckpt", type=str, default=None)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    stage = args.command
    try:
        config = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if stage == "gen":
            cmd_gen(config, out)
        elif stage == "pretrain":
            cmd_pretrain(config, out)
        elif stage == "translate":
            cmd_translate(config, out)
        elif stage == "train":
            cmd_train(config, out, args.mode)
        elif stage == "eval":
            cmd_eval(config, out,
                     Path(args.ckpt) if args.ckpt else None,
                     args.gamma, args.text_only)
        elif stage == "sweep":
            if args.values is not None:
                values = [float(v) for v in args.values.split(",") if v]
            elif args.param == "gamma":
                values = config.gamma_list
            else:
                values = config.lambda_list
            cmd_sweep(config, out, args.param, values,
                      Path(args.ckpt) if args.ckpt else None)
    except Exception as e:  # noqa: BLE001 - report the failing stage and exit nonzero
        print(f"stage {stage!r} failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
