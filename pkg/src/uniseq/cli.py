"""``uniseq`` command-line entry point.

Exit status: 0 success, 1 usage or validation error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .decoding import generate
from .errors import (
    BoxError, CompatibilityError, ConfigError, ContractError, DataError, LengthError, TemplateError,
    TokenRangeError, UniseqError,
)
from .harness import METRICS, evaluate, headline, truncation_ablation, zero_shot_eval
from .io_utils import atomic_write_text
from .model import PRESETS, ModelConfig, param_count, param_shapes, preset
from .tasks import Limits, make_mim, make_mlm, read_manifest, resolve_image, serialize
from .tokenization import BpeModel, UnifiedVocabulary, assemble, train_bpe
from .training import TrainPlan, grid_search, train
from .vision import Codebook, patchify, subsample_patches, train_codebook

VALIDATION_ERRORS = (ConfigError, DataError, TemplateError, ContractError, BoxError, TokenRangeError,
                     LengthError, CompatibilityError, FileNotFoundError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- output helpers ------------------------------------------------------------

def _jsonl(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records)


def _summary(args, body: dict) -> dict:
    out = {"type": "summary", "command": args.command, "seed": args.seed, **body}
    if not args.no_timestamp:
        out["timestamp"] = datetime.now(timezone.utc).isoformat()
    return out


def _emit(args, records: Sequence[dict]) -> None:
    text = _jsonl(records)
    if getattr(args, "report", None):
        atomic_write_text(args.report, text)
    else:
        sys.stdout.write(text)


def _figure_dir(args) -> Path | None:
    if getattr(args, "figures", None):
        path = Path(args.figures)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return None


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"no such file: {p}")


# -- config assembly -----------------------------------------------------------

def _overrides(pairs: Sequence[str] | None) -> dict:
    out = {}
    types = {f: type(v) for f, v in ModelConfig().to_dict().items()}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or key not in types:
            raise ConfigError(f"bad model override {item!r}; expected field=value with field in {sorted(types)}")
        out[key] = types[key](value)
    return out


def _model_config(args, vocab: UnifiedVocabulary) -> ModelConfig:
    overrides = {**getattr(args, "model", {}), **_overrides(args.set)}
    return preset(args.preset, **overrides).with_vocab(vocab).validate()


def _plan(args, init: str) -> TrainPlan:
    return TrainPlan(init=init, lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                     warmup_ratio=args.warmup, label_smoothing=args.smoothing, seed=args.seed,
                     workers=args.workers, max_steps=args.max_steps).validate()


def _pairs(episodes, vocab, limits, seed) -> list:
    return [serialize(ep, vocab, limits, seed + i) for i, ep in enumerate(episodes)]


def _by_task(pairs) -> dict:
    out: dict = {}
    for p in pairs:
        out.setdefault(p.task, []).append(p)
    return out


# -- subcommands ---------------------------------------------------------------

def cmd_bpe_train(args) -> None:
    _require(*args.corpus)
    lines = [ln for path in args.corpus for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    model = train_bpe(lines, args.merges)
    model.save(args.out)
    _emit(args, [_summary(args, {"merges": len(model.merges), "text_tokens": model.size, "out": str(args.out)})])


def cmd_vocab_build(args) -> None:
    _require(args.bpe)
    vocab = assemble(BpeModel.load(args.bpe), args.locations, args.vision)
    vocab.save(args.out)
    _emit(args, [_summary(args, {"text": vocab.num_text, "locations": vocab.num_locations,
                                 "vision": vocab.num_vision, "total": vocab.total, "out": str(args.out)})])


def cmd_vq_train(args) -> None:
    _require(args.manifest)
    episodes = read_manifest(args.manifest)
    vectors = []
    for i, ep in enumerate(episodes):
        for img in ep.images:
            grid = subsample_patches(patchify(resolve_image(img), args.patch_size), args.max_patches, args.seed + i)
            vectors.append(grid.vectors)
    if not vectors:
        raise DataError("manifest lists no images")
    book = train_codebook(np.concatenate(vectors), args.k, args.iterations, args.seed)
    book.save(args.out)
    _emit(args, [_summary(args, {"k": args.k, "patches": int(sum(len(v) for v in vectors)),
                                 "distortion": book.distortion_history, "out": str(args.out)})])
    figs = _figure_dir(args)
    if figs is not None:
        from .plotting import loss_curve
        loss_curve(book.distortion_history, figs / "vq_distortion.png", "k-means distortion")


def _train_and_report(args, data, config: ModelConfig, plan: TrainPlan) -> None:
    ckpt = train(plan, data, config)
    save_checkpoint(args.out, ckpt)
    records = [{"type": "step", "step": i + 1, "loss": loss} for i, loss in enumerate(ckpt.history)]
    records.append(_summary(args, {"steps": ckpt.step, "final_loss": ckpt.history[-1] if ckpt.history else None,
                                   "plan": plan.digest(), "init": ckpt.provenance.get("init"),
                                   "params": param_count(config), "out": str(args.out)}))
    _emit(args, records)
    figs = _figure_dir(args)
    if figs is not None:
        from .plotting import loss_curve
        loss_curve(ckpt.history, figs / f"{args.command}_loss.png", f"{args.command} loss")


def cmd_pretrain(args) -> None:
    _require(args.vocab, args.text, args.manifest, args.codebook)
    vocab = UnifiedVocabulary.load(args.vocab)
    config = _model_config(args, vocab)
    limits = Limits.for_config(config, args.max_patches)
    episodes = []
    if args.text:
        lines = [ln for ln in Path(args.text).read_text(encoding="utf-8").splitlines() if ln.strip()]
        episodes += [make_mlm(ln, args.mask_ratio, args.seed + i) for i, ln in enumerate(lines)]
    if args.manifest:
        manifest = read_manifest(args.manifest)
        episodes += manifest
        if args.codebook:
            book = Codebook.load(args.codebook)
            for i, ep in enumerate(manifest):
                for img in ep.images:
                    episodes.append(make_mim(resolve_image(img), args.mask_ratio, args.seed + i, book, vocab,
                                             config.patch_size, args.max_patches))
    if not episodes:
        raise DataError("pretraining needs --text and/or --manifest")
    data = _by_task(_pairs(episodes, vocab, limits, args.seed))
    _train_and_report(args, data, config, _plan(args, "scratch"))


def _finetune_like(args) -> None:
    _require(args.vocab, args.manifest)
    vocab = UnifiedVocabulary.load(args.vocab)
    if args.init != "scratch":
        _require(args.init)
        config = load_checkpoint(args.init).config
        if args.set:
            config = replace(config, **_overrides(args.set)).validate()
    else:
        config = _model_config(args, vocab)
    limits = Limits.for_config(config, args.max_patches)
    pairs = _pairs(read_manifest(args.manifest), vocab, limits, args.seed)
    _train_and_report(args, pairs, config, _plan(args, args.init))


def _load_eval_inputs(args):
    _require(args.ckpt, args.vocab, args.manifest)
    ckpt = load_checkpoint(args.ckpt)
    vocab = UnifiedVocabulary.load(args.vocab)
    if ckpt.config.vocab_size != vocab.total:
        raise CompatibilityError(f"checkpoint vocabulary {ckpt.config.vocab_size} != vocab file total {vocab.total}")
    episodes = read_manifest(args.manifest)
    return ckpt, vocab, episodes, Limits.for_config(ckpt.config, args.max_patches)


def cmd_eval(args) -> None:
    ckpt, vocab, episodes, limits = _load_eval_inputs(args)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    records, summary = evaluate(ckpt.params, episodes, vocab, metrics, args.beam, limits, args.seed,
                                constrained=not args.open_vocabulary)
    _emit(args, [{"type": "episode", **r} for r in records] + [_summary(args, summary)])
    figs = _figure_dir(args)
    if figs is not None:
        from .plotting import metric_bars
        metric_bars({m: headline(summary, m) for m in metrics if m != "cider"}, figs / "eval_metrics.png", "evaluation")


def cmd_generate(args) -> None:
    ckpt, vocab, episodes, limits = _load_eval_inputs(args)
    records = []
    for i, ep in enumerate(episodes):
        pair = serialize(ep, vocab, limits, args.seed + i)
        answers = ep.answer_set if ep.answer_set and not args.open_vocabulary else None
        if args.beam is None:
            out = generate(ckpt.params, pair, vocab, answer_set=answers, greedy=answers is None, max_len=args.max_len)
        else:
            out = generate(ckpt.params, pair, vocab, beam=args.beam, answer_set=answers, max_len=args.max_len)
        records.append({"type": "episode", "index": i, "task": ep.task, "digest": pair.digest(),
                        "generated": out.text, "tokens": out.tokens, "score": out.score})
    _emit(args, records + [_summary(args, {"episodes": len(records), "beam": args.beam or 1})])


def cmd_gridsearch(args) -> None:
    _require(args.vocab, args.manifest, args.dev)
    vocab = UnifiedVocabulary.load(args.vocab)
    config = _model_config(args, vocab)
    limits = Limits.for_config(config, args.max_patches)
    train_pairs = _pairs(read_manifest(args.manifest), vocab, limits, args.seed)
    dev = read_manifest(args.dev)
    grid = {"lr": args.lrs, "batch_size": args.batch_sizes, "epochs": args.epoch_list, "warmup_ratio": args.warmups}

    def metric(ckpt, dev_eps):
        _, summary = evaluate(ckpt.params, dev_eps, vocab, [args.metric], args.beam, limits, args.seed)
        return headline(summary, args.metric)

    best, rows = grid_search(grid, _plan(args, "scratch"), train_pairs, dev, config, metric)
    records = [{"type": "cell", **{k: v for k, v in r.items() if k != "plan"}} for r in rows]
    best_row = {k: getattr(best, k) for k in ("lr", "batch_size", "epochs", "warmup_ratio")}
    _emit(args, records + [_summary(args, {"cells": len(rows), "metric": args.metric, "best": best_row})])
    figs = _figure_dir(args)
    if figs is not None:
        from .plotting import grid_heatmap
        grid_heatmap(rows, figs / "gridsearch.png")


def cmd_ablate_truncation(args) -> None:
    ckpt, vocab, episodes, limits = _load_eval_inputs(args)
    result = truncation_ablation(ckpt.params, episodes, vocab, args.cap, args.metric, args.beam, limits, args.seed)
    _emit(args, [_summary(args, result)])
    figs = _figure_dir(args)
    if figs is not None:
        from .plotting import metric_bars
        metric_bars({"full": result["full"], f"cap {args.cap}": result["truncated"]},
                    figs / "truncation_ablation.png", f"{args.metric}: full vs truncated")


def cmd_zero_shot(args) -> None:
    ckpt, vocab, episodes, limits = _load_eval_inputs(args)
    classes = {}
    if args.classes:
        _require(args.classes)
        classes = json.loads(Path(args.classes).read_text(encoding="utf-8"))
    report = zero_shot_eval(ckpt.params, episodes, vocab, classes, args.beam, limits, args.seed)
    _emit(args, [{"type": "task", "task": t, **r} for t, r in report.items()] + [_summary(args, {"tasks": len(report)})])


def cmd_param_count(args) -> None:
    names = PRESETS if args.preset == "all" else [args.preset]
    records = []
    for name in names:
        cfg = preset(name, **{**getattr(args, "model", {}), **_overrides(args.set)})
        enumerated = sum(int(np.prod(s)) for s in param_shapes(cfg).values())
        records.append({"type": "preset", "preset": name, "params": param_count(cfg), "enumerated": enumerated})
    _emit(args, records + [_summary(args, {"presets": len(records)})])


# -- parser ----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file of option defaults (flags override it)")
    p.add_argument("--report", help="write the JSONL report here instead of stdout")
    p.add_argument("--figures", help="directory for PNG figures")
    p.add_argument("--no-timestamp", action="store_true", help="omit the timestamp field from reports")


def _model_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="tiny", choices=sorted(PRESETS))
    p.add_argument("--set", action="append", metavar="FIELD=VALUE", help="override a model config field")
    p.add_argument("--max-patches", type=int, default=196)


def _train_opts(p: argparse.ArgumentParser, epochs: int = 1, out: bool = True) -> None:
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--warmup", type=float, default=0.0)
    p.add_argument("--smoothing", type=float, default=0.1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-steps", type=int)
    if out:
        p.add_argument("--out", required=True)


def _eval_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--max-patches", type=int, default=196)


def build_parser() -> Parser:
    parser = Parser(prog="uniseq", description="Unified multimodal seq2seq pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("bpe-train", help="learn BPE merges from text files")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--merges", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bpe_train)

    p = sub.add_parser("vocab-build", help="assemble the unified vocabulary")
    p.add_argument("--bpe", required=True)
    p.add_argument("--locations", type=int, default=1000)
    p.add_argument("--vision", type=int, default=8192)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab_build)

    p = sub.add_parser("vq-train", help="k-means image codebook from manifest images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--max-patches", type=int, default=196)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vq_train)

    p = sub.add_parser("pretrain", help="multitask pretraining (MLM, MIM and manifest tasks)")
    p.add_argument("--vocab", required=True)
    p.add_argument("--text", help="plain-text file, one MLM document per line")
    p.add_argument("--manifest", help="JSONL episodes (their images also feed MIM)")
    p.add_argument("--codebook")
    p.add_argument("--mask-ratio", type=float, default=0.3)
    _model_opts(p)
    _train_opts(p)
    p.set_defaults(func=cmd_pretrain)

    for name, epochs, helptext in (("finetune", 1, "task fine-tuning"), ("instruct", 20, "instruction tuning")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--vocab", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--init", default="scratch", help="'scratch' or a checkpoint path")
        _model_opts(p)
        _train_opts(p, epochs)
        p.set_defaults(func=_finetune_like)

    p = sub.add_parser("eval", help="generate and score a manifest")
    _eval_opts(p)
    p.add_argument("--metrics", default="accuracy", help=f"comma-separated subset of {','.join(METRICS)}")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--open-vocabulary", action="store_true", help="ignore answer sets")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="decode every manifest episode")
    _eval_opts(p)
    p.add_argument("--beam", type=int, help="beam width (omit for greedy decoding)")
    p.add_argument("--max-len", type=int)
    p.add_argument("--open-vocabulary", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("gridsearch", help="exhaustive hyperparameter search")
    p.add_argument("--vocab", required=True)
    p.add_argument("--manifest", required=True, help="training split")
    p.add_argument("--dev", required=True, help="dev split")
    p.add_argument("--lrs", type=float, nargs="+", default=[1e-3])
    p.add_argument("--batch-sizes", type=int, nargs="+", default=[8])
    p.add_argument("--epoch-list", type=int, nargs="+", default=[1])
    p.add_argument("--warmups", type=float, nargs="+", default=[0.0])
    p.add_argument("--metric", default="accuracy", choices=METRICS[:2])
    p.add_argument("--beam", type=int, default=1)
    _model_opts(p)
    _train_opts(p, out=False)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("ablate-truncation", help="full-length vs truncated text fields")
    _eval_opts(p)
    p.add_argument("--cap", type=int, default=50)
    p.add_argument("--metric", default="accuracy", choices=METRICS[:2])
    p.add_argument("--beam", type=int, default=1)
    p.set_defaults(func=cmd_ablate_truncation)

    p = sub.add_parser("zero-shot", help="open-vocabulary evaluation of an instruction-tuned model")
    _eval_opts(p)
    p.add_argument("--classes", help="JSON object: task -> list of class names")
    p.add_argument("--beam", type=int, default=1)
    p.set_defaults(func=cmd_zero_shot)

    p = sub.add_parser("param-count", help="parameter counts of the shipped presets")
    p.add_argument("--preset", default="all", choices=["all", *sorted(PRESETS)])
    p.add_argument("--set", action="append", metavar="FIELD=VALUE")
    p.set_defaults(func=cmd_param_count)

    for p in sub.choices.values():
        _common(p)
    return parser


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    """Values from ``--config`` become subcommand defaults, so explicit flags still win."""
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    subcommands = parser._subparsers._group_actions[0].choices
    command = next((a for a in rest if not a.startswith("-")), None)
    model: dict = {}
    if known.config and command in subcommands:
        _require(known.config)
        try:
            values = json.loads(Path(known.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{known.config}: invalid JSON ({exc.msg})") from None
        if not isinstance(values, dict):
            raise ConfigError(f"{known.config}: expected a JSON object")
        model = values.pop("model", {})
        sub = subcommands[command]
        known_dests = {a.dest for a in sub._actions}
        unknown = set(values) - known_dests
        if unknown:
            raise ConfigError(f"{known.config}: unknown options {sorted(unknown)}")
        for action in sub._actions:
            if action.dest in values:
                action.required = False
        sub.set_defaults(**values)
    args = parser.parse_args(argv)
    args.model = model
    return args


def run_command(argv: Sequence[str]) -> int:
    try:
        args = parse_args(list(argv))
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"uniseq: error: {exc}", file=sys.stderr)
        return 1
    except (UniseqError, OSError, ValueError) as exc:
        print(f"uniseq: runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
