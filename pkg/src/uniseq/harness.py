"""Evaluation, the truncation ablation, zero-shot scoring and continual-vs-scratch runs."""
from __future__ import annotations

import statistics
from dataclasses import replace
from pathlib import Path
from typing import Mapping, Sequence

from .checkpoint import Checkpoint, save_checkpoint
from .decoding import generate
from .errors import DataError
from .metrics import accuracy, cider, metric_parameters, normalize_answer, rouge_l
from .model import ModelConfig, Parameters
from .tasks import Episode, Limits, serialize, truncate_fields
from .tokenization import UnifiedVocabulary
from .training import TrainPlan, steps_to_target, train

METRICS = ("accuracy", "rouge_l", "cider")


def evaluate(params: Parameters, episodes: Sequence[Episode], vocab: UnifiedVocabulary,
             metrics: Sequence[str] = ("accuracy",), beam: int = 1, limits: Limits | None = None,
             seed: int = 0, constrained: bool = True, base_dir: Path | None = None) -> tuple[list[dict], dict]:
    """Generate for every episode and score it.

    Episodes with an answer set are decoded in constrained mode unless
    ``constrained`` is False. Returns per-episode records and a summary.
    """
    if not episodes:
        raise DataError("nothing to evaluate")
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise DataError(f"unknown metrics {sorted(unknown)}")
    limits = limits or Limits.for_config(params.config)
    records = []
    for i, ep in enumerate(episodes):
        pair = serialize(ep, vocab, limits, seed + i, base_dir)
        answers = ep.answer_set if constrained and ep.answer_set else None
        out = generate(params, pair, vocab, beam=beam, answer_set=answers)
        records.append({"index": i, "task": ep.task, "digest": pair.digest(), "generated": out.text,
                        "reference": ep.target, "score": out.score})
    summary: dict = {"episodes": len(records), "beam": beam, "metric_params": metric_parameters()}
    if "accuracy" in metrics:
        for r in records:
            r["accuracy"] = float(normalize_answer(r["generated"]) == normalize_answer(r["reference"]))
        summary["accuracy"] = accuracy([r["generated"] for r in records], [r["reference"] for r in records])
    if "rouge_l" in metrics:
        for r in records:
            r["rouge_l"] = rouge_l(r["generated"], r["reference"])
        summary["rouge_l"] = {k: statistics.fmean(r["rouge_l"][k] for r in records)
                              for k in ("precision", "recall", "f")}
    if "cider" in metrics:
        per_item, mean = cider([r["generated"] for r in records], [[r["reference"]] for r in records])
        for r, s in zip(records, per_item):
            r["cider"] = s
        summary["cider"] = mean
    return records, summary


def headline(summary: dict, metric: str) -> float:
    value = summary[metric]
    return value["f"] if metric == "rouge_l" else float(value)


def truncation_ablation(params: Parameters, episodes: Sequence[Episode], vocab: UnifiedVocabulary,
                        cap: int = 50, metric: str = "accuracy", beam: int = 1,
                        limits: Limits | None = None, seed: int = 0) -> dict:
    """Score the same evaluation with text fields untouched and cut to ``cap`` BPE tokens."""
    truncated = [truncate_fields(ep, vocab.bpe, cap) for ep in episodes]
    _, full = evaluate(params, episodes, vocab, [metric], beam, limits, seed)
    _, short = evaluate(params, truncated, vocab, [metric], beam, limits, seed)
    full_score, short_score = headline(full, metric), headline(short, metric)
    longest = max((len(vocab.encode(v)) for ep in truncated for v in ep.text.values()), default=0)
    return {"metric": metric, "cap": cap, "full": full_score, "truncated": short_score,
            "delta": short_score - full_score, "max_truncated_field_tokens": longest}


def map_to_class(generated: str, classes: Sequence[str]) -> str | None:
    """Normalized exact match, else the unique class contained in the text, else None."""
    text = normalize_answer(generated)
    norm = {normalize_answer(c): c for c in classes}
    if text in norm:
        return norm[text]
    hits = [c for n, c in norm.items() if n and f" {n} " in f" {text} "]
    return hits[0] if len(hits) == 1 else None


CAPTION_TASKS = ("captioning", "multi_captioning")


def zero_shot_eval(params: Parameters, episodes: Sequence[Episode], vocab: UnifiedVocabulary,
                   class_map: Mapping[str, Sequence[str]], beam: int = 1,
                   limits: Limits | None = None, seed: int = 0) -> dict[str, dict]:
    """Open-vocabulary generation scored per task.

    Tasks in ``class_map`` are prompt-based classification; captioning tasks get
    ROUGE-L and CIDEr; everything else normalized accuracy.
    """
    by_task: dict[str, list[Episode]] = {}
    for ep in episodes:
        by_task.setdefault(ep.task, []).append(ep)
    report = {}
    for task, eps in sorted(by_task.items()):
        records, _ = evaluate(params, eps, vocab, ["accuracy"], beam, limits, seed, constrained=False)
        gens = [r["generated"] for r in records]
        golds = [ep.target for ep in eps]
        if task in class_map:
            mapped = [map_to_class(g, class_map[task]) for g in gens]
            hits = [m is not None and normalize_answer(m) == normalize_answer(g) for m, g in zip(mapped, golds)]
            report[task] = {"kind": "classification", "accuracy": sum(hits) / len(hits),
                            "unmapped": sum(m is None for m in mapped), "n": len(eps)}
        elif task in CAPTION_TASKS:
            rl = statistics.fmean(rouge_l(g, t)["f"] for g, t in zip(gens, golds))
            _, cd = cider(gens, [[t] for t in golds])
            report[task] = {"kind": "captioning", "rouge_l": rl, "cider": cd, "n": len(eps)}
        else:
            report[task] = {"kind": "accuracy", "accuracy": accuracy(gens, golds), "n": len(eps)}
    return report


def continual_vs_scratch(config: ModelConfig, donor: Checkpoint | str | Path, finetune_data,
                         plan: TrainPlan, target_loss: float, seeds: Sequence[int],
                         workdir: str | Path) -> dict:
    """Steps-to-target-loss when fine-tuning from ``donor`` versus from random init.

    Runs that never reach the target count as the run length plus one.
    """
    path = Path(donor) if not isinstance(donor, Checkpoint) else Path(workdir) / "donor.ummc"
    if isinstance(donor, Checkpoint):
        save_checkpoint(path, donor)
    out = {"target_loss": target_loss, "seeds": list(seeds), "continual": [], "scratch": []}
    for seed in seeds:
        for label, init in (("continual", str(path)), ("scratch", "scratch")):
            ckpt = train(replace(plan, init=init, seed=seed), finetune_data, config,
                         callback=lambda step, loss, _p: loss <= target_loss)
            hit = steps_to_target(ckpt.history, target_loss)
            out[label].append(hit if hit is not None else len(ckpt.history) + 1)
    out["median_continual"] = statistics.median(out["continual"])
    out["median_scratch"] = statistics.median(out["scratch"])
    return out
