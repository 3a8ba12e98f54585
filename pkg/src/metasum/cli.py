"""Operator commands for the full pipeline.

One structured YAML config file drives every subcommand; ``--set a.b=c``
overrides win over the file. Each command validates the whole config
before touching the output directory. Exit codes: 0 success, 1 config
validation failure, 2 numerical failure (divergence or gradient overflow).

Subcommands: pretrain, rank, meta-train, finetune-eval, grad-report.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import evalrouge, metatrain, model as model_mod, similarity
from .data import Corpus, Vocabulary, load_corpus
from .evalrouge import DecodeConfig
from .metatrain import (
    DivergenceError,
    GradientOverflowError,
    MetaTrainConfig,
)
from .model import ModelConfig, Summarizer

OUTPUT_DIR_ENV = "METASUM_OUTPUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2


class ConfigError(ValueError):
    """Carries every validation problem found, not just the first."""

    def __init__(self, problems: list[str]):
        super().__init__("\n".join(f"  - {p}" for p in problems))
        self.problems = problems


@dataclass
class PretrainOptions:
    steps: int = 200
    lr: float = 3e-3
    batch_size: int = 16


@dataclass
class FinetuneOptions:
    steps: int = 300
    lr: float = 1e-2
    n_examples: int = 10
    mode: str = "adapter-only"
    batch_size: int = 4


@dataclass
class DataOptions:
    corpus_cap: int = 40_000


@dataclass
class RunPaths:
    pretrain_corpus: str | None = None
    source_corpora: list[str] = field(default_factory=list)
    validation_corpus: str | None = None
    target_corpus: str | None = None
    target_test_corpus: str | None = None
    vocab: str | None = None
    checkpoint: str | None = None
    output_dir: str = "out"


@dataclass
class RunConfig:
    model: ModelConfig
    train: MetaTrainConfig
    decode: DecodeConfig
    pretrain: PretrainOptions
    finetune: FinetuneOptions
    data: DataOptions
    paths: RunPaths
    seed: int = 0


_SECTIONS = {
    "model": ModelConfig,
    "train": MetaTrainConfig,
    "decode": DecodeConfig,
    "pretrain": PretrainOptions,
    "finetune": FinetuneOptions,
    "data": DataOptions,
    "paths": RunPaths,
}


def _build_section(cls, raw: dict, section: str, problems: list[str]):
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            problems.append(f"{section}.{key}: unknown option")
    kwargs = {k: v for k, v in raw.items() if k in known}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{section}: {exc}")
        return None


def load_run_config(path, overrides: list[str] | None = None) -> RunConfig:
    """Parse the YAML config plus dotted-key overrides; collect all problems."""
    problems: list[str] = []
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"config file is not valid YAML: {exc}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a mapping"])

    for item in overrides or []:
        if "=" not in item:
            problems.append(f"--set {item}: expected key=value")
            continue
        dotted, value = item.split("=", 1)
        keys = dotted.split(".")
        target = raw
        for k in keys[:-1]:
            target = target.setdefault(k, {})
            if not isinstance(target, dict):
                problems.append(f"--set {dotted}: {k} is not a section")
                break
        else:
            target[keys[-1]] = yaml.safe_load(value)

    known_top = set(_SECTIONS) | {"seed"}
    for key in raw:
        if key not in known_top:
            problems.append(f"{key}: unknown section")

    sections = {}
    for name, cls in _SECTIONS.items():
        section_raw = raw.get(name, {}) or {}
        if not isinstance(section_raw, dict):
            problems.append(f"{name}: must be a mapping")
            section_raw = {}
        sections[name] = _build_section(cls, section_raw, name, problems)

    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        problems.append("seed: must be an integer")
        seed = 0

    if problems or any(v is None for v in sections.values()):
        raise ConfigError(problems)
    cfg = RunConfig(seed=seed, **sections)
    if os.environ.get(OUTPUT_DIR_ENV):
        cfg.paths.output_dir = os.environ[OUTPUT_DIR_ENV]
    return cfg


def _require_paths(cfg: RunConfig, names: list[str], problems: list[str]) -> None:
    for name in names:
        value = getattr(cfg.paths, name)
        if not value:
            problems.append(f"paths.{name}: required for this command")
        elif not Path(value).exists():
            problems.append(f"paths.{name}: file not found: {value}")


def _validate_common(cfg: RunConfig, problems: list[str]) -> None:
    resolved_sources = {Path(p).resolve() for p in cfg.paths.source_corpora}
    for label in ("validation_corpus", "target_corpus"):
        value = getattr(cfg.paths, label)
        if value and Path(value).resolve() in resolved_sources:
            problems.append(f"paths.{label}: must not be one of the source corpora")
    for p in cfg.paths.source_corpora:
        if not Path(p).exists():
            problems.append(f"paths.source_corpora: file not found: {p}")


def _load_vocab(cfg: RunConfig, problems: list[str], allow_build: bool = False) -> Vocabulary | None:
    if cfg.paths.vocab:
        if not Path(cfg.paths.vocab).exists():
            problems.append(f"paths.vocab: file not found: {cfg.paths.vocab}")
            return None
        vocab = Vocabulary.load(cfg.paths.vocab)
        if vocab.size != cfg.model.vocab_size:
            problems.append(
                f"model.vocab_size ({cfg.model.vocab_size}) does not match "
                f"vocabulary file size ({vocab.size})"
            )
            return None
        return vocab
    if not allow_build:
        problems.append("paths.vocab: required for this command")
    return None


def _corpus(cfg: RunConfig, path, vocab: Vocabulary, name: str | None = None) -> Corpus:
    return load_corpus(
        path, vocab, name=name, max_examples=cfg.data.corpus_cap,
        max_src_len=cfg.model.max_src_len, max_tgt_len=cfg.model.max_tgt_len,
    )


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model_from_checkpoint(path) -> tuple[Summarizer, dict]:
    arrays, cfg, extra = model_mod.load_checkpoint(path)
    model = Summarizer.build(cfg, seed=0)
    model.store.load_arrays(arrays)
    return model, extra


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_pretrain(cfg: RunConfig, extractive_encoder: bool = False) -> int:
    problems: list[str] = []
    if extractive_encoder:
        problems.append(
            "--extractive-encoder: the extractive-objective encoder "
            "fine-tuning stage is out of scope for this implementation"
        )
    _require_paths(cfg, ["pretrain_corpus"], problems)
    _validate_common(cfg, problems)
    vocab = _load_vocab(cfg, problems, allow_build=True)
    if problems:
        raise ConfigError(problems)

    built_vocab = vocab is None
    if built_vocab:
        texts = []
        for line in Path(cfg.paths.pretrain_corpus).read_text(encoding="utf-8").splitlines():
            if line.strip():
                obj = json.loads(line)
                texts.append(obj.get("article", "") + " " + obj.get("summary", ""))
        vocab = Vocabulary.build(texts, size_cap=cfg.model.vocab_size)
        if vocab.size != cfg.model.vocab_size:
            cfg = RunConfig(**{**cfg.__dict__,
                               "model": ModelConfig.from_dict(
                                   {**cfg.model.to_dict(), "vocab_size": vocab.size})})
    corpus = _corpus(cfg, cfg.paths.pretrain_corpus, vocab)

    out = _out_dir(cfg)
    if built_vocab:
        vocab.save(out / "vocab.txt")
        print(f"built vocabulary ({vocab.size} tokens) -> {out / 'vocab.txt'}")

    model = Summarizer.build(cfg.model, seed=cfg.seed)
    try:
        log = metatrain.pretrain_base(
            model, corpus, steps=cfg.pretrain.steps, lr=cfg.pretrain.lr,
            batch_size=cfg.pretrain.batch_size, seed=cfg.seed,
        )
    except DivergenceError as exc:
        if exc.log is not None:
            exc.log.write_csv(out / "pretrain_loss.csv")
        model_mod.save_checkpoint(out / "pretrain_checkpoint.bin", model.store.all(),
                                  cfg.model, extra={"stage": "pretrain-recovered",
                                                    "steps": exc.restored_step})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    log.write_csv(out / "pretrain_loss.csv")
    model_mod.save_checkpoint(out / "pretrain_checkpoint.bin", model.store.all(),
                              cfg.model, extra={"stage": "pretrain",
                                                "steps": cfg.pretrain.steps})
    print(f"pretrained {cfg.pretrain.steps} steps; "
          f"final loss {log.records[-1].outer_loss:.4f}" if log.records
          else "pretrained 0 steps")
    print(f"wrote {out / 'pretrain_checkpoint.bin'} and {out / 'pretrain_loss.csv'}")
    return EXIT_OK


def cmd_rank(cfg: RunConfig, k: int, sections: bool, sections_criterion: str) -> int:
    problems: list[str] = []
    _require_paths(cfg, ["target_corpus"], problems)
    _validate_common(cfg, problems)
    if not cfg.paths.source_corpora:
        problems.append("paths.source_corpora: at least one candidate required")
    if k > len(cfg.paths.source_corpora):
        problems.append(f"k={k} exceeds the {len(cfg.paths.source_corpora)} candidates")
    stems = [Path(p).stem for p in cfg.paths.source_corpora]
    if len(set(stems)) != len(stems):
        problems.append("paths.source_corpora: duplicate corpus names (file stems)")
    if sections and len(cfg.paths.source_corpora) < 9:
        problems.append("--sections needs at least 9 candidates (rank section [7-9])")
    vocab = _load_vocab(cfg, problems)
    if cfg.paths.checkpoint and not Path(cfg.paths.checkpoint).exists():
        problems.append(f"paths.checkpoint: file not found: {cfg.paths.checkpoint}")
    if problems:
        raise ConfigError(problems)

    target = _corpus(cfg, cfg.paths.target_corpus, vocab)
    candidates = [_corpus(cfg, p, vocab) for p in cfg.paths.source_corpora]

    if cfg.paths.checkpoint:
        model, _ = _load_model_from_checkpoint(cfg.paths.checkpoint)
        embed_fn = similarity.model_document_embedder(model)
        trained = True
    else:
        model = Summarizer.build(cfg.model, seed=cfg.seed)
        embed_fn = similarity.model_document_embedder(model)
        trained = False

    report = similarity.rank_and_select(
        target, candidates, k, embed_fn=embed_fn, seed=cfg.seed,
        encoder_trained=trained,
    )
    out = _out_dir(cfg)
    similarity.write_report_csv(report, out / "rank_report.csv")
    similarity.write_report_text(report, out / "rank_report.txt")
    written = ["rank_report.csv", "rank_report.txt"]
    if sections:
        if sections_criterion == "average":
            order = sorted(report.average_rank,
                           key=lambda n: (report.average_rank[n], n))
        else:
            order = report.orderings[sections_criterion]
        by_path = {c.name: str(p) for c, p in zip(candidates, cfg.paths.source_corpora)}
        for label, members in similarity.section_manifests(order).items():
            manifest = {
                "section": label,
                "criterion": sections_criterion,
                "corpora": members,
                "paths": [by_path[m] for m in members],
            }
            name = f"meta_dataset_section_{label.replace('-', '_')}.json"
            (out / name).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
            written.append(name)
    print(f"selected top-{k}: {', '.join(report.selected)}")
    for flag in report.flags:
        print(f"note: {flag}")
    print(f"wrote {', '.join(written)} in {out}")
    return EXIT_OK


def cmd_meta_train(cfg: RunConfig, from_random: bool, resume: str | None) -> int:
    problems: list[str] = []
    _validate_common(cfg, problems)
    if not cfg.paths.source_corpora:
        problems.append("paths.source_corpora: at least one source required")
    vocab = _load_vocab(cfg, problems)
    start_from = resume or cfg.paths.checkpoint
    if not from_random and not resume:
        if not cfg.paths.checkpoint:
            problems.append("paths.checkpoint: required (or pass --from-random)")
        elif not Path(cfg.paths.checkpoint).exists():
            problems.append(f"paths.checkpoint: file not found: {cfg.paths.checkpoint}")
    if resume and not Path(resume).exists():
        problems.append(f"--resume: file not found: {resume}")
    if problems:
        raise ConfigError(problems)

    start_step = 0
    if resume:
        model, extra = _load_model_from_checkpoint(resume)
        start_step = int(extra.get("meta_step", 0))
    elif from_random:
        model = Summarizer.build(cfg.model, seed=cfg.seed)
    else:
        model, _ = _load_model_from_checkpoint(start_from)

    sources = [_corpus(cfg, p, vocab) for p in cfg.paths.source_corpora]
    val = _corpus(cfg, cfg.paths.validation_corpus, vocab) \
        if cfg.paths.validation_corpus else None

    out = _out_dir(cfg)

    def periodic_checkpoint(step: int) -> None:
        model_mod.save_checkpoint(
            out / f"meta_checkpoint_step{step}.bin", model.store.all(), model.cfg,
            extra={"stage": "meta", "meta_step": step,
                   "trainable_mode": cfg.train.trainable_mode},
        )

    try:
        log = metatrain.meta_train(
            model, sources, cfg.train, seed=cfg.seed, val_corpus=val,
            start_step=start_step, stream_path=out / "train_log.csv",
            checkpoint_fn=periodic_checkpoint,
        )
    except GradientOverflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"partial log streamed to {out / 'train_log.csv'}", file=sys.stderr)
        return EXIT_NUMERICAL
    if log.val_records:
        log.write_val_csv(out / "meta_val.csv")
    final_step = start_step + cfg.train.meta_steps
    model_mod.save_checkpoint(
        out / "meta_checkpoint.bin", model.store.all(), model.cfg,
        extra={"stage": "meta", "meta_step": final_step,
               "trainable_mode": cfg.train.trainable_mode},
    )
    print(f"meta-trained steps {start_step + 1}..{final_step} "
          f"({cfg.train.trainable_mode}); final outer loss "
          f"{log.records[-1].outer_loss:.4f}")
    print(f"wrote {out / 'meta_checkpoint.bin'} and {out / 'train_log.csv'}")
    return EXIT_OK


def cmd_finetune_eval(cfg: RunConfig, n_examples: int | None, paired: bool) -> int:
    problems: list[str] = []
    _require_paths(cfg, ["target_corpus"], problems)
    _validate_common(cfg, problems)
    vocab = _load_vocab(cfg, problems)
    if not cfg.paths.checkpoint:
        problems.append("paths.checkpoint: required")
    elif not Path(cfg.paths.checkpoint).exists():
        problems.append(f"paths.checkpoint: file not found: {cfg.paths.checkpoint}")
    if cfg.paths.target_test_corpus and not Path(cfg.paths.target_test_corpus).exists():
        problems.append(
            f"paths.target_test_corpus: file not found: {cfg.paths.target_test_corpus}")
    n = n_examples if n_examples is not None else cfg.finetune.n_examples
    if n < 1:
        problems.append("finetune.n_examples must be >= 1")
    if problems:
        raise ConfigError(problems)

    target = _corpus(cfg, cfg.paths.target_corpus, vocab)
    if len(target) < n:
        raise ConfigError(
            [f"target corpus has {len(target)} examples, needs >= {n}"])

    # seeded first-n of a shuffled index, recorded alongside the report
    order = np.random.default_rng((cfg.seed, 5)).permutation(len(target))
    train_idx = sorted(int(i) for i in order[:n])
    train_examples = [target.examples[i] for i in train_idx]
    eval_on_train = False
    if cfg.paths.target_test_corpus:
        test_examples = _corpus(cfg, cfg.paths.target_test_corpus, vocab).examples
    else:
        rest = [target.examples[int(i)] for i in order[n:]]
        if rest:
            test_examples = rest
        else:
            test_examples = train_examples
            eval_on_train = True

    out = _out_dir(cfg)

    def run_variant(model: Summarizer, tag: str) -> dict:
        log = metatrain.finetune(
            model, train_examples, steps=cfg.finetune.steps, lr=cfg.finetune.lr,
            mode=cfg.finetune.mode, batch_size=cfg.finetune.batch_size, seed=cfg.seed,
        )
        rows, mean = evalrouge.evaluate_corpus(model, test_examples, cfg.decode)
        suffix = "" if tag == "meta" else f"_{tag}"
        evalrouge.write_eval_csv(rows, mean, out / f"rouge_report{suffix}.csv")
        if log.records:
            log.write_csv(out / f"finetune_log{suffix}.csv")
        model_mod.save_checkpoint(
            out / f"finetuned_checkpoint{suffix}.bin", model.store.all(), model.cfg,
            extra={"stage": "finetune", "init": tag, "n_examples": n,
                   "mode": cfg.finetune.mode},
        )
        return {"r1_f": mean.rouge1.f1, "r2_f": mean.rouge2.f1, "rl_f": mean.rougeL.f1}

    model, _ = _load_model_from_checkpoint(cfg.paths.checkpoint)
    results = {"meta": run_variant(model, "meta")}
    if paired:
        base_model, _ = _load_model_from_checkpoint(cfg.paths.checkpoint)
        fresh = Summarizer.build(base_model.cfg, seed=cfg.seed + 1)
        for name, tensor in base_model.store.meta.items():
            tensor.data[...] = fresh.store.meta[name].data  # meta set back to init
        results["random_init"] = run_variant(base_model, "random_init")

    selection = {
        "seed": cfg.seed,
        "n_examples": n,
        "train_indices": train_idx,
        "eval_on_train": eval_on_train,
        "test_size": len(test_examples),
        "results": results,
    }
    (out / "finetune_selection.json").write_text(
        json.dumps(selection, indent=2) + "\n", encoding="utf-8")
    for tag, scores in results.items():
        print(f"{tag}: R1/R2/RL F1 = "
              f"{scores['r1_f']:.4f}/{scores['r2_f']:.4f}/{scores['rl_f']:.4f}")
    if eval_on_train:
        print("note: no held-out target examples; evaluated on the finetuning set")
    print(f"wrote reports in {out}")
    return EXIT_OK


def _sparkline(values: list[float], width: int = 60) -> str:
    blocks = " .:-=+*#%@"
    if not values:
        return ""
    if len(values) > width:
        chunk = len(values) / width
        values = [float(np.mean(values[int(i * chunk):max(int(i * chunk) + 1, int((i + 1) * chunk))]))
                  for i in range(width)]
    lo, hi = min(values), max(values)
    span = (hi - lo) or 1.0
    return "".join(blocks[int((v - lo) / span * (len(blocks) - 1))] for v in values)


def cmd_grad_report(cfg: RunConfig, log_path: str | None, fmt: str) -> int:
    out = Path(cfg.paths.output_dir)
    path = Path(log_path) if log_path else out / "train_log.csv"
    if not path.exists():
        raise ConfigError([f"training log not found: {path}"])
    records = metatrain.read_train_csv(path)
    if not records:
        raise ConfigError([f"training log is empty: {path}"])
    out.mkdir(parents=True, exist_ok=True)
    norms = [r.grad_norm for r in records]
    steps = [r.step for r in records]
    if fmt == "png":
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(8, 4))
        ax.plot(steps, norms, lw=0.8)
        ax.set_xlabel("meta-step")
        ax.set_ylabel("trainable-gradient norm")
        ax.set_yscale("log")
        fig.tight_layout()
        target = out / "grad_report.png"
        fig.savefig(target, dpi=120)
        plt.close(fig)
    else:
        lines = [
            f"gradient norm over {len(norms)} steps "
            f"(min {min(norms):.4g}, max {max(norms):.4g}, "
            f"mean {float(np.mean(norms)):.4g}, var {float(np.var(norms)):.4g})",
            _sparkline(norms),
        ]
        target = out / "grad_report.txt"
        target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {target}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metasum",
        description="Meta-transfer learning for low-resource abstractive summarization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", required=True, help="YAML run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       dest="overrides", help="override a config entry (dotted key)")

    p_pre = sub.add_parser("pretrain", help="train the base model on the pretrain corpus")
    common(p_pre)
    p_pre.add_argument("--extractive-encoder", action="store_true",
                       help="refused: the extractive encoder stage is out of scope")

    p_rank = sub.add_parser("rank", help="rank candidate source corpora against the target")
    common(p_rank)
    p_rank.add_argument("--k", type=int, default=3, help="how many corpora to select")
    p_rank.add_argument("--sections", action="store_true",
                        help="emit the five ranking-section meta-dataset manifests")
    p_rank.add_argument("--sections-criterion", default="average",
                        choices=("average",) + similarity.CRITERIA)

    p_meta = sub.add_parser("meta-train", help="MAML-train the trainable parameter set")
    common(p_meta)
    p_meta.add_argument("--from-random", action="store_true",
                        help="start from random parameters instead of a checkpoint")
    p_meta.add_argument("--resume", metavar="CHECKPOINT",
                        help="continue from a meta checkpoint (keeps step numbering)")
    p_meta.add_argument("--trainable", choices=("adapter-only", "full"),
                        help="override train.trainable_mode")

    p_ft = sub.add_parser("finetune-eval",
                          help="finetune on n target examples and report ROUGE")
    common(p_ft)
    p_ft.add_argument("--n-examples", type=int, help="override finetune.n_examples")
    p_ft.add_argument("--mode", choices=("adapter-only", "full"),
                      help="override finetune.mode (full = TL-FULL baseline)")
    p_ft.add_argument("--paired", action="store_true",
                      help="also run a random-init variant for comparison")

    p_gr = sub.add_parser("grad-report", help="render a training log's gradient norms")
    common(p_gr)
    p_gr.add_argument("--log", help="path to a train_log.csv (default: output dir)")
    p_gr.add_argument("--format", choices=("png", "text"), default="text")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.overrides)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, extractive_encoder=args.extractive_encoder)
        if args.command == "rank":
            return cmd_rank(cfg, args.k, args.sections, args.sections_criterion)
        if args.command == "meta-train":
            if args.trainable:
                cfg.train = MetaTrainConfig(
                    **{**cfg.train.__dict__, "trainable_mode": args.trainable})
            return cmd_meta_train(cfg, args.from_random, args.resume)
        if args.command == "finetune-eval":
            if args.mode:
                cfg.finetune = FinetuneOptions(
                    **{**cfg.finetune.__dict__, "mode": args.mode})
            return cmd_finetune_eval(cfg, args.n_examples, args.paired)
        if args.command == "grad-report":
            return cmd_grad_report(cfg, args.log, args.format)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"configuration invalid:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GradientOverflowError, DivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
