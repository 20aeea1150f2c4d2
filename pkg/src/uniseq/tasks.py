"""Instruction templates and serialization of task episodes into model inputs.

An :class:`Episode` is one task instance. :func:`serialize` renders its
instruction, expands every ``[Image]`` placeholder into that image's patches in
place, BPE-encodes the remaining text and frames the target with BOS/EOS.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, TemplateError
from .model import SourceItem
from .tokenization import BOS, EOS, MASK, SEP, Box, BpeModel, UnifiedVocabulary, box_to_tokens, pretokenize
from .vision import Codebook, Image, load_image, patchify, quantize, subsample_patches

IMAGE = "[Image]"
MASK_MARKER = "<mask>"

TEMPLATES = {
    "image_classification": "[Image] What does the image describe?",
    "nli": "Can text1 “ {Text1} ” imply text2 “ {Text2} ”?",
    "treatment_suggestion": "Please provide treatment suggestion given the patient’s information: “ {Text} ”.",
    "trial_matching": ("Please determine the patient’s eligibility by comparing the given patient "
                       "note: “ {Text1} ” and trial details: “ {Text2} ”."),
    "mortality": "What is the predicted outcome for the patient before discharge: “{Text}”?",
    "summarization": "What is the summary of the text “{Text}”?",
    "qa_context": ("Your task is to answer biomedical questions using the given context. Only output "
                   "yes, no, or maybe as answer. \n Context: “{Context}” Question: “{Question}”"),
    "mcqa": "{Question} “{Options}”",
    "vqa": "[Image]{Question}",
    "captioning": "[Image] What does the image describe?",
    "multi_captioning": "[Image] [Image] What does the images describe?",
    # pretraining and instruction-tuning tasks
    "mlm": "What is the complete text of “{Text}”?",
    "mim": "[Image] What is the content of the masked image regions?",
    "od": "[Image] What are the objects in the image?",
    "instruct_round": "[Image]{History}{Question}",
}

FINETUNE_TASKS = ("image_classification", "nli", "treatment_suggestion", "trial_matching", "mortality",
                  "summarization", "qa_context", "mcqa", "vqa", "captioning", "multi_captioning")
TASKS = tuple(TEMPLATES)

_FIELD = re.compile(r"\{(\w+)\}")


def template_fields(task: str) -> list[str]:
    return _FIELD.findall(TEMPLATES[task])


def placeholder_count(task: str) -> int:
    return TEMPLATES[task].count(IMAGE)


@dataclass
class Episode:
    task: str
    text: dict[str, str] = field(default_factory=dict)
    target: str = ""
    images: list = field(default_factory=list)           # Image objects or file paths
    answer_set: list[str] | None = None
    objects: list[tuple[Box, str]] | None = None
    target_ids: list[int] | None = None                   # precomputed targets (MIM)
    patch_keep: list[np.ndarray] | None = None            # per image, kept raster indices
    patch_mask: list[np.ndarray] | None = None            # per image, masked raster indices

    def validate(self) -> "Episode":
        if self.task not in TEMPLATES:
            raise DataError(f"unknown task kind {self.task!r}")
        if len(self.images) != placeholder_count(self.task):
            raise DataError(f"{self.task} expects {placeholder_count(self.task)} image(s), "
                            f"got {len(self.images)}")
        if self.answer_set is not None and not self.answer_set:
            raise DataError("answer_set must be non-empty when present")
        if self.task == "od" and not self.objects:
            raise DataError("object detection episodes need at least one object")
        return self


def _substitute(segment: str, values: dict[str, str], task: str) -> str:
    def fill(match):
        name = match.group(1)
        if name not in values:
            raise TemplateError(f"{task} template needs field {name!r}")
        return values[name]
    return _FIELD.sub(fill, segment)


def render_segments(episode: Episode) -> list[str | None]:
    """Rendered instruction split at image placeholders; ``None`` marks an image slot."""
    template = TEMPLATES.get(episode.task)
    if template is None:
        raise DataError(f"unknown task kind {episode.task!r}")
    out: list[str | None] = []
    for i, part in enumerate(template.split(IMAGE)):
        if i:
            out.append(None)
        out.append(_substitute(part, episode.text, episode.task))
    return out


def render_instruction(episode: Episode) -> str:
    return "".join(IMAGE if s is None else s for s in render_segments(episode))


# ----------------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Limits:
    max_src: int = 512
    max_tgt: int = 64
    patch_size: int = 8
    channels: int = 1
    max_patches: int = 196

    @classmethod
    def for_config(cls, config, max_patches: int = 196) -> "Limits":
        return cls(config.max_src, config.max_tgt, config.patch_size, config.channels, max_patches)


@dataclass(eq=False)
class RenderedPair:
    source: list[SourceItem]
    target: list[int]
    task: str = ""

    def digest(self) -> str:
        h = hashlib.sha256()
        for it in self.source:
            h.update(it.kind.encode())
            if it.kind == "patch":
                h.update(np.ascontiguousarray(it.patch, dtype="<f8").tobytes())
            h.update(str(it.token if it.kind == "text" else it.raster).encode())
        h.update(b"|" + ",".join(map(str, self.target)).encode())
        return h.hexdigest()[:16]


def resolve_image(img, base_dir: Path | None = None) -> Image:
    if isinstance(img, Image):
        return img
    path = Path(img)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    try:
        return load_image(path)
    except OSError as exc:
        raise OSError(f"cannot load image {path}: {exc}") from exc


def _encode_text(segment: str, bpe: BpeModel, with_masks: bool) -> list[int]:
    if not with_masks:
        return bpe.encode(segment)
    ids: list[int] = []
    for i, part in enumerate(segment.split(MASK_MARKER)):
        if i:
            ids.append(MASK)
        ids.extend(bpe.encode(part))
    return ids


def od_target(objects: Sequence[tuple[Box, str]], vocab: UnifiedVocabulary) -> list[int]:
    """Objects sorted by (y1, x1): four location ids then the label, SEP between objects."""
    ids: list[int] = []
    ordered = sorted(objects, key=lambda o: (o[0].y1, o[0].x1))
    for i, (box, label) in enumerate(ordered):
        if i:
            ids.append(SEP)
        ids.extend(box_to_tokens(box, vocab))
        ids.extend(vocab.encode(label))
    return ids


def serialize(episode: Episode, vocab: UnifiedVocabulary, limits: Limits = Limits(),
              seed: int = 0, base_dir: Path | None = None) -> RenderedPair:
    episode.validate()
    segments = render_segments(episode)
    source: list[SourceItem] = []
    image_no = 0
    for seg in segments:
        if seg is None:
            image = resolve_image(episode.images[image_no], base_dir)
            if image.channels != limits.channels:
                raise DataError(f"image has {image.channels} channel(s), model expects {limits.channels}")
            grid = patchify(image, limits.patch_size)
            if episode.patch_keep is not None:
                kept = np.asarray(episode.patch_keep[image_no])
            else:
                kept = subsample_patches(grid, limits.max_patches, seed + image_no).kept
            masked = set()
            if episode.patch_mask is not None:
                masked = {int(i) for i in episode.patch_mask[image_no]}
            for r in kept:
                r = int(r)
                if r in masked:
                    source.append(SourceItem.masked_patch(r))
                else:
                    source.append(SourceItem.image_patch(grid.patches[r], r))
            image_no += 1
        elif seg:
            source.extend(SourceItem.text(t) for t in _encode_text(seg, vocab.bpe, episode.task == "mlm"))
    source = source[:limits.max_src]

    if episode.target_ids is not None:
        body = list(episode.target_ids)
    elif episode.task == "od":
        body = od_target(episode.objects, vocab)
    else:
        body = vocab.encode(episode.target)
    if not body:
        raise DataError(f"{episode.task} episode has an empty target")
    target = [BOS] + body[:max(limits.max_tgt - 2, 0)] + [EOS]
    return RenderedPair(source, target, episode.task)


# ----------------------------------------------------------------------------
# pretraining episode builders
# ----------------------------------------------------------------------------

def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_mlm(text: str, mask_ratio: float, seed: int) -> Episode:
    """Mask round(ratio * n) whitespace-delimited words; the target is the full text."""
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError("mask_ratio must lie in [0, 1]")
    pieces = pretokenize(text)
    words = [i for i, p in enumerate(pieces) if not p.isspace()]
    k = round_half_up(mask_ratio * len(words))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(words), size=k, replace=False) if k else []
    for j in chosen:
        pieces[words[int(j)]] = MASK_MARKER
    return Episode("mlm", {"Text": "".join(pieces)}, target=text)


def make_mim(image: Image, mask_ratio: float, seed: int, codebook: Codebook,
             vocab: UnifiedVocabulary, patch_size: int, max_patches: int = 196) -> Episode:
    """Mask round(ratio * kept) patches; targets are their vision tokens in raster order."""
    if not 0.0 < mask_ratio <= 1.0:
        raise ValueError("mask_ratio must lie in (0, 1]")
    grid = subsample_patches(patchify(image, patch_size), max_patches, seed)
    kept = grid.kept
    if len(kept) == 0:
        raise DataError("image produced no patches")
    k = round_half_up(mask_ratio * len(kept))
    if k == 0:
        raise DataError("mask ratio too small: no patch would be masked")
    rng = np.random.default_rng(seed + 1)
    masked = np.sort(rng.choice(kept, size=k, replace=False))
    targets = quantize(grid.patches[masked], codebook, vocab)
    return Episode("mim", images=[image], target_ids=targets, patch_keep=[kept], patch_mask=[masked])


def make_od(image: Image, objects: Iterable[tuple[Box, str]]) -> Episode:
    objects = list(objects)
    if not objects:
        raise DataError("object detection needs at least one object")
    for box, _ in objects:
        box.validate()
    return Episode("od", images=[image], objects=objects)


def flatten_dialogue(image, rounds: Sequence[tuple[str, str]], bpe: BpeModel | None = None,
                     history_budget: int | None = None) -> list[Episode]:
    """One episode per round; earlier rounds' question/answer text is prepended as history.

    With ``history_budget`` (in BPE tokens) the oldest rounds are dropped first.
    """
    episodes = []
    for i, (question, answer) in enumerate(rounds):
        prior = [f"{q} {a} " for q, a in rounds[:i]]
        if history_budget is not None and bpe is not None:
            while prior and len(bpe.encode("".join(prior))) > history_budget:
                prior.pop(0)
        episodes.append(Episode("instruct_round", {"History": "".join(prior), "Question": question},
                                target=answer, images=[image]))
    return episodes


def truncate_fields(episode: Episode, bpe: BpeModel, cap: int) -> Episode:
    """Copy of ``episode`` with every text field cut to its first ``cap`` BPE tokens."""
    fields_ = {k: bpe.decode(bpe.encode(v)[:cap]) for k, v in episode.text.items()}
    return replace(episode, text=fields_)


# ----------------------------------------------------------------------------
# manifests
# ----------------------------------------------------------------------------

def episode_from_record(record: dict, base_dir: Path | None = None) -> Episode:
    try:
        task = record["task"]
    except KeyError:
        raise DataError("manifest record without 'task'") from None
    images = list(record.get("images", []))
    objects = None
    if record.get("objects"):
        if not images:
            raise DataError("objects given without an image")
        img = resolve_image(images[0], base_dir)
        objects = [(Box(o["x1"], o["y1"], o["x2"], o["y2"], img.width, img.height).validate(), o["label"])
                   for o in record["objects"]]
    if base_dir is not None:
        images = [str(Path(base_dir) / p) if not Path(p).is_absolute() else p for p in images]
    ep = Episode(task, dict(record.get("text", {})), record.get("target", ""), images,
                 record.get("answer_set"), objects)
    return ep.validate()


def read_manifest(path: str | Path) -> list[Episode]:
    path = Path(path)
    episodes = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            episodes.append(episode_from_record(record, path.parent))
    return episodes


def episode_to_record(episode: Episode) -> dict:
    record: dict = {"task": episode.task, "text": episode.text, "target": episode.target}
    if episode.images:
        if not all(isinstance(i, (str, Path)) for i in episode.images):
            raise DataError("only episodes with image paths can be written to a manifest")
        record["images"] = [str(i) for i in episode.images]
    if episode.answer_set is not None:
        record["answer_set"] = list(episode.answer_set)
    if episode.objects:
        record["objects"] = [{"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2, "label": lab}
                             for b, lab in episode.objects]
    return record


def write_manifest(episodes: Iterable[Episode], path: str | Path) -> None:
    from .io_utils import atomic_write_text
    lines = [json.dumps(episode_to_record(e), ensure_ascii=False, sort_keys=True) for e in episodes]
    atomic_write_text(path, "\n".join(lines) + "\n")
