"""Seq2seq sample construction for pre-training and downstream tasks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .media import (
    CAPTION_PROMPT,
    FOM_CON_PROMPT,
    FOM_GEN_PROMPT,
    MATCH_PROMPT,
    ManifestRecord,
    TextTokenizer,
    VideoClip,
    normalize_text,
)

TASK_TAGS = ("caption", "match", "fom_gen", "fom_con", "qa")
FOM_VARIANTS = ("contrastive", "generative", "both")


@dataclass
class Seq2SeqSample:
    source_tokens: list[int]
    frames: VideoClip
    target_tokens: list[int]
    task_tag: str
    frame_order: list[int] | None = None
    references: list[str] = field(default_factory=list)

    @property
    def clip_id(self) -> str:
        return self.frames.clip_id

    def to_json(self) -> dict:
        return {
            "task_tag": self.task_tag,
            "source_tokens": list(self.source_tokens),
            "target_tokens": list(self.target_tokens),
            "clip_id": self.clip_id,
            "frame_order": self.frame_order,
        }


def _sample(tok: TextTokenizer, clip, source: str, target: str, tag: str, **kw) -> Seq2SeqSample:
    target_ids = tok.tokenize(target)
    if not target_ids:
        raise ValueError(f"{tag}: empty target")
    return Seq2SeqSample(tok.tokenize(source), clip, tok.frame_target(target_ids), tag, **kw)


def make_caption_sample(clip: VideoClip, caption: str, tok: TextTokenizer) -> Seq2SeqSample:
    if not caption.strip():
        raise ValueError("caption must be non-empty")
    return _sample(tok, clip, CAPTION_PROMPT, caption, "caption", references=[caption])


def make_matching_sample(
    clip: VideoClip, caption: str, corpus: Sequence[str], rng: np.random.Generator, tok: TextTokenizer
) -> Seq2SeqSample:
    """Positive (true caption, "yes") or negative (random corpus caption, "no") with equal odds."""
    if not any(c != caption for c in corpus):
        raise ValueError("matching needs a corpus with at least two distinct captions")
    if rng.random() < 0.5:
        return _sample(tok, clip, MATCH_PROMPT.format(caption), "yes", "match")
    while True:
        negative = corpus[int(rng.integers(len(corpus)))]
        if negative != caption:
            break
    return _sample(tok, clip, MATCH_PROMPT.format(negative), "no", "match")


def num_shuffled(n: int) -> int:
    return max(2, math.floor(0.25 * n + 0.5))


def shuffle_frames(
    n: int, rng: np.random.Generator, k: int | None = None, positions: Sequence[int] | None = None
) -> list[int]:
    """Frame order after moving ``k`` frames: entry i is the original position of new frame i.

    ``k`` positions (default ``max(2, round(n/4))``) are permuted without fixed points;
    the rest stay put. ``positions`` pins which positions move.
    """
    if positions is None:
        k = num_shuffled(n) if k is None else k
        positions = sorted(int(p) for p in rng.choice(n, size=k, replace=False)) if k else []
    positions = list(positions)
    order = list(range(n))
    if len(positions) < 2:
        return order
    while True:
        perm = rng.permutation(len(positions))
        if not np.any(perm == np.arange(len(positions))):
            break
    for j, src in enumerate(perm):
        order[positions[j]] = positions[int(src)]
    return order


def _check_fom_clip(clip: VideoClip, tag: str) -> None:
    if clip.num_frames < 4:
        raise ValueError(f"{tag}: clip {clip.clip_id!r} has {clip.num_frames} frames, need >= 4")


def make_fom_generative_sample(
    clip: VideoClip,
    rng: np.random.Generator,
    tok: TextTokenizer,
    k: int | None = None,
    positions: Sequence[int] | None = None,
) -> Seq2SeqSample:
    _check_fom_clip(clip, "fom_gen")
    order = shuffle_frames(clip.num_frames, rng, k, positions)
    target = " ".join(str(p) for p in order)
    return _sample(tok, clip.with_frames(clip.frames[order]), FOM_GEN_PROMPT, target, "fom_gen", frame_order=order)


def make_fom_contrastive_sample(
    clip: VideoClip, rng: np.random.Generator, tok: TextTokenizer, k: int | None = None
) -> Seq2SeqSample:
    _check_fom_clip(clip, "fom_con")
    if rng.random() < 0.5:
        order = list(range(clip.num_frames))
        return _sample(tok, clip, FOM_CON_PROMPT, "yes", "fom_con", frame_order=order)
    order = shuffle_frames(clip.num_frames, rng, k)
    return _sample(tok, clip.with_frames(clip.frames[order]), FOM_CON_PROMPT, "no", "fom_con", frame_order=order)


def make_qa_sample(clip: VideoClip, question: str, answer: str, tok: TextTokenizer) -> Seq2SeqSample:
    if not question.strip() or not answer.strip():
        raise ValueError("question and answer must be non-empty")
    return _sample(tok, clip, question, answer, "qa", references=[answer])


@dataclass
class MixSchedule:
    """Samples per source instance: ``caption`` and ``match`` each, one FOM per ``fom_every``."""

    caption: int = 1
    match: int = 1
    fom_every: int = 8
    fom_variant: str = "contrastive"

    def __post_init__(self):
        if min(self.caption, self.match, self.fom_every) < 0:
            raise ValueError("schedule counts must be >= 0")
        if self.fom_variant not in FOM_VARIANTS:
            raise ValueError(f"fom_variant must be one of {FOM_VARIANTS}")

    @classmethod
    def from_tasks(cls, tasks: Iterable[str]) -> "MixSchedule":
        """Schedule from a task list such as ``["caption", "match", "fom_con"]``."""
        tasks = set(tasks)
        unknown = tasks - {"caption", "match", "fom_con", "fom_gen"}
        if unknown:
            raise ValueError(f"unknown IPT tasks {sorted(unknown)}")
        gen, con = "fom_gen" in tasks, "fom_con" in tasks
        variant = "both" if gen and con else "generative" if gen else "contrastive"
        return cls(int("caption" in tasks), int("match" in tasks), 8 if gen or con else 0, variant)

    def counts(self, n: int) -> dict[str, int]:
        fom = n // self.fom_every if self.fom_every else 0
        out = {"caption": self.caption * n, "match": self.match * n, "fom_con": 0, "fom_gen": 0}
        if self.fom_variant in ("contrastive", "both"):
            out["fom_con"] = fom
        if self.fom_variant in ("generative", "both"):
            out["fom_gen"] = fom
        return out


Instance = tuple[VideoClip, ManifestRecord]


def schedule_epoch(
    instances: Sequence[Instance], schedule: MixSchedule, rng: np.random.Generator, tok: TextTokenizer
) -> list[Seq2SeqSample]:
    """One IPT epoch: per-instance caption and matching samples plus FOM every ``fom_every``, shuffled."""
    corpus = [c for _, rec in instances for c in rec.captions]
    samples: list[Seq2SeqSample] = []
    for clip, rec in instances:
        if not rec.captions:
            continue
        for _ in range(schedule.caption):
            caption = rec.captions[int(rng.integers(len(rec.captions)))]
            samples.append(make_caption_sample(clip, caption, tok))
        for _ in range(schedule.match):
            caption = rec.captions[int(rng.integers(len(rec.captions)))]
            samples.append(make_matching_sample(clip, caption, corpus, rng, tok))
    counts = schedule.counts(len(instances))
    for tag, maker in (("fom_con", make_fom_contrastive_sample), ("fom_gen", make_fom_generative_sample)):
        if counts[tag]:
            picks = rng.choice(len(instances), size=counts[tag], replace=False)
            samples.extend(maker(instances[int(i)][0], rng, tok) for i in picks)
    order = rng.permutation(len(samples))
    return [samples[int(i)] for i in order]


def caption_samples(instances: Sequence[Instance], tok: TextTokenizer) -> list[Seq2SeqSample]:
    """Downstream captioning: one sample per reference caption, all references attached."""
    out = []
    for clip, rec in instances:
        for caption in rec.captions:
            s = make_caption_sample(clip, caption, tok)
            s.references = list(rec.captions)
            out.append(s)
    return out


def qa_samples(instances: Sequence[Instance], tok: TextTokenizer) -> list[Seq2SeqSample]:
    return [make_qa_sample(clip, qa["question"], qa["answer"], tok) for clip, rec in instances for qa in rec.qa]


def write_shard(samples: Iterable[Seq2SeqSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")


def prompt_for(task_tag: str, caption: str = "") -> str:
    return {
        "caption": CAPTION_PROMPT,
        "match": MATCH_PROMPT.format(normalize_text(caption)),
        "fom_gen": FOM_GEN_PROMPT,
        "fom_con": FOM_CON_PROMPT,
    }[task_tag]
