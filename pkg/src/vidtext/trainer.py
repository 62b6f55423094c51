"""Staged training, SCST fine-tuning and evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng as rng_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .media import (
    CAPTION_PROMPT,
    DatasetManifest,
    TextTokenizer,
    load_clip,
    resize_shorter_side,
    sample_frames_linear,
    split_words,
)
from .metrics import CiderD, bleu4, cider_d, exact_match_accuracy, rouge_l
from .model import (
    IGNORE,
    Batch,
    ModelConfig,
    VideoToTextModel,
    beam_search,
    caption_loss,
    collate,
    decode_logits,
    encode,
    greedy_decode,
    sample_decode,
)
from .optim import AdamWState, optimizer_step
from .tasks import Instance, MixSchedule, Seq2SeqSample, caption_samples, qa_samples, schedule_epoch
from .tensor import Tape, Tensor, apply_primitive, backpropagate

log = logging.getLogger(__name__)

STAGES = ("image_text", "ipt", "finetune")


class DivergenceError(RuntimeError):
    """Training loss became NaN or infinite."""


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected an object")
    extra = set(d) - set(cls.__dataclass_fields__)
    if extra:
        raise ValueError(f"{where}: unknown keys {sorted(extra)}")
    return cls(**d)


@dataclass
class StageSpec:
    stage: str
    datasets: list[str] = field(default_factory=list)
    schedule: dict | None = None  # MixSchedule fields, ipt only
    ipt_tasks: list[str] | None = None  # shorthand for schedule
    task: str = "caption"  # finetune: caption or qa
    epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    scst: bool = False
    eval_every: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.scst and self.stage != "finetune":
            raise ValueError("scst is only allowed in the finetune stage")
        if self.task not in ("caption", "qa"):
            raise ValueError("task must be 'caption' or 'qa'")
        if self.scst and self.task != "caption":
            raise ValueError("scst needs caption references")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.datasets:
            self.datasets = {"image_text": ["image_text"], "ipt": ["ipt"], "finetune": ["train"]}[self.stage]

    def mix_schedule(self) -> MixSchedule:
        if self.schedule is not None:
            return MixSchedule(**self.schedule)
        if self.ipt_tasks is not None:
            return MixSchedule.from_tasks(self.ipt_tasks)
        return MixSchedule()

    @classmethod
    def from_dict(cls, d: dict) -> "StageSpec":
        return _strict(cls, d, "stage")


@dataclass
class DataSection:
    image_text: str | None = None
    ipt: str | None = None
    train: str | None = None
    val: str | None = None
    test: str | None = None
    frames: int = 8
    image_size: int = 32


@dataclass
class EvalSection:
    beam: int = 4
    max_len: int = 24
    length_penalty: float = 1.0
    split: str = "val"
    task: str = "caption"


@dataclass
class RunConfig:
    data: DataSection
    model: dict
    stages: list[StageSpec]
    eval: EvalSection
    seed: int = 0
    out_dir: str = "run"
    checkpoint_every: int = 0
    log_every: int = 10

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"config: unknown keys {sorted(extra)}")
        missing = {"data", "stages"} - set(d)
        if missing:
            raise ValueError(f"config: missing sections {sorted(missing)}")
        model = dict(d.get("model", {}))
        bad = set(model) - set(ModelConfig.__dataclass_fields__) - {"vocab_size"}
        if bad:
            raise ValueError(f"model: unknown keys {sorted(bad)}")
        return cls(
            data=_strict(DataSection, d["data"], "data"),
            model=model,
            stages=[StageSpec.from_dict(s) for s in d["stages"]],
            eval=_strict(EvalSection, d.get("eval", {}), "eval"),
            seed=int(d.get("seed", 0)),
            out_dir=d.get("out_dir", "run"),
            checkpoint_every=int(d.get("checkpoint_every", 0)),
            log_every=int(d.get("log_every", 10)),
        )

    def to_dict(self) -> dict:
        return {
            "data": asdict(self.data),
            "model": dict(self.model),
            "stages": [asdict(s) for s in self.stages],
            "eval": asdict(self.eval),
            "seed": self.seed,
            "out_dir": self.out_dir,
            "checkpoint_every": self.checkpoint_every,
            "log_every": self.log_every,
        }


# ---------------------------------------------------------------------------
# data


def preprocess(clip, n_frames: int, image_size: int):
    return sample_frames_linear(resize_shorter_side(clip, image_size), n_frames)


def load_instances(manifest: DatasetManifest, n_frames: int, image_size: int) -> list[Instance]:
    out = []
    for rec in manifest.records:
        clip = load_clip(manifest.frames_file(rec), rec.clip_id)
        out.append((preprocess(clip, n_frames, image_size), rec))
    return out


# ---------------------------------------------------------------------------
# losses


def compute_loss(samples: Sequence[Seq2SeqSample], model: VideoToTextModel) -> Tensor:
    """Mean token cross-entropy of the teacher-forced targets."""
    if not samples:
        raise ValueError("empty batch")
    batch = collate(samples, model.config, model.tokenizer.pad_id if model.tokenizer else 0)
    if not (batch.labels != IGNORE).any():
        raise ValueError("batch has no target tokens")
    return caption_loss(model, batch)


def sequence_logprobs(model: VideoToTextModel, batch: Batch, sequences: Sequence[Sequence[int]], finished: Sequence[bool]) -> np.ndarray:
    """log P(sequence | clip, prompt) per item, EOS included for finished sequences."""
    loss_inputs = _scst_targets(model, sequences, finished)
    logits = decode_logits(model, encode(model, batch), loss_inputs[0])
    flat = logits.data.astype(np.float64)
    m = flat.max(axis=-1, keepdims=True)
    lp = flat - m - np.log(np.exp(flat - m).sum(axis=-1, keepdims=True))
    labels = loss_inputs[1]
    keep = labels != IGNORE
    picked = np.take_along_axis(lp, np.where(keep, labels, 0)[..., None], axis=-1)[..., 0]
    return (picked * keep).sum(axis=1)


def _scst_targets(model, sequences, finished):
    tok = model.tokenizer
    bos, eos = (tok.bos_id, tok.eos_id) if tok else (1, 2)
    rows_in, rows_out = [], []
    for seq, fin in zip(sequences, finished):
        full = [bos, *seq] + ([eos] if fin else [])
        rows_in.append(full[:-1])
        rows_out.append(full[1:])
    width = max(len(r) for r in rows_in)
    dec_in = np.full((len(rows_in), width), tok.pad_id if tok else 0, dtype=np.int64)
    labels = np.full((len(rows_in), width), IGNORE, dtype=np.int64)
    for i, (a, b) in enumerate(zip(rows_in, rows_out)):
        dec_in[i, : len(a)] = a
        labels[i, : len(b)] = b
    return dec_in, labels


def scst_loss(
    model: VideoToTextModel,
    batch: Batch,
    sequences: Sequence[Sequence[int]],
    advantages: Sequence[float],
    finished: Sequence[bool] | None = None,
) -> Tensor:
    """Surrogate ``-mean_i advantage_i * log P(sequence_i)``; gradients flow only through log-probs."""
    finished = [True] * len(sequences) if finished is None else finished
    dec_in, labels = _scst_targets(model, sequences, finished)
    logits = decode_logits(model, encode(model, batch), dec_in)
    weights = np.repeat(np.asarray(advantages, dtype=np.float64)[:, None], labels.shape[1], axis=1)
    total = apply_primitive(
        "cross_entropy_from_logits",
        [logits],
        {"targets": labels, "ignore_index": IGNORE, "weights": weights, "reduction": "sum"},
    )
    return apply_primitive("scale", [total], {"factor": 1.0 / len(sequences)})


def scst_step(
    samples: Sequence[Seq2SeqSample],
    model: VideoToTextModel,
    scorer: CiderD,
    rng: np.random.Generator,
    max_len: int = 24,
) -> tuple[Tensor | None, dict]:
    """Self-critical loss for a batch: sampled decode vs greedy baseline, CIDEr-D reward.

    Call inside an active :class:`~vidtext.tensor.Tape`. Returns ``(loss, info)``;
    ``loss`` is None when every sample had to be skipped.
    """
    tok = model.tokenizer
    cfg = model.config
    batch = collate(samples, cfg, tok.pad_id, with_targets=False)
    sampled = sample_decode(model, batch, rng, max_len, return_finished=True)
    retry = [i for i, (s, _) in enumerate(sampled) if not s]
    if retry:
        again = sample_decode(model, _subset(batch, retry), rng, max_len, return_finished=True)
        for i, s in zip(retry, again):
            sampled[i] = s
    greedy = greedy_decode(model, batch, max_len)
    keep = [i for i, (s, _) in enumerate(sampled) if s]
    info = {"skipped": len(samples) - len(keep), "reward_sample": 0.0, "reward_greedy": 0.0}
    if not keep:
        return None, info
    adv, rs, rg = [], [], []
    for i in keep:
        refs = [split_words(r) for r in samples[i].references]
        r_s = scorer.score_item([tok.words[t] for t in sampled[i][0]], refs)
        r_g = scorer.score_item([tok.words[t] for t in greedy[i]], refs)
        adv.append(r_s - r_g)
        rs.append(r_s)
        rg.append(r_g)
    info.update(reward_sample=float(np.mean(rs)), reward_greedy=float(np.mean(rg)))
    sub = _subset(batch, keep)
    loss = scst_loss(model, sub, [sampled[i][0] for i in keep], adv, [sampled[i][1] for i in keep])
    return loss, info


def _subset(batch: Batch, index: Sequence[int]) -> Batch:
    idx = np.asarray(index, dtype=np.int64)
    return Batch(batch.patches[idx], batch.src[idx], batch.src_valid[idx])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    dataset: str
    split: str
    step: int
    metrics: dict
    beam: int
    n_items: int
    seed: int
    excluded_metrics: list[str] = field(default_factory=lambda: ["meteor"])

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def score_captions(predictions: Sequence[str], references: Sequence[Sequence[str]]) -> dict:
    hyps = [split_words(p) for p in predictions]
    refs = [[split_words(r) for r in rs] for rs in references]
    return {"bleu4": bleu4(hyps, refs), "rouge_l": rouge_l(hyps, refs), "cider_d": cider_d(hyps, refs)}


def decode_one(model: VideoToTextModel, clip, prompt: str, beam: int = 4, max_len: int = 24, length_penalty: float = 1.0):
    tok = model.tokenizer
    sample = Seq2SeqSample(tok.tokenize(prompt), clip, [tok.bos_id, tok.eos_id], "caption")
    batch = collate([sample], model.config, tok.pad_id, with_targets=False)
    return beam_search(model, batch, beam, max_len, length_penalty)


def predict(model, items: Sequence[tuple], beam: int = 4, max_len: int = 24, length_penalty: float = 1.0) -> list[str]:
    """Decode ``(clip, prompt)`` pairs to strings."""
    return [model.tokenizer.detokenize(decode_one(model, c, p, beam, max_len, length_penalty).tokens) for c, p in items]


def evaluate_split(
    model: VideoToTextModel | None,
    instances: Sequence[Instance],
    task: str = "caption",
    beam: int = 4,
    max_len: int = 24,
    length_penalty: float = 1.0,
    dataset: str = "synthetic",
    split: str = "val",
    step: int = 0,
    seed: int = 0,
    predictor: Callable[[Sequence[tuple]], list[str]] | None = None,
) -> EvalReport:
    """Decode every item and score it. ``predictor`` replaces model decoding when given."""
    if task == "caption":
        items = [(clip, CAPTION_PROMPT) for clip, rec in instances if rec.captions]
        refs = [rec.captions for _, rec in instances if rec.captions]
    elif task == "qa":
        items = [(clip, qa["question"]) for clip, rec in instances for qa in rec.qa]
        refs = [[qa["answer"]] for _, rec in instances for qa in rec.qa]
        if not items:
            raise ValueError("qa evaluation needs records with a 'qa' field; none found")
    else:
        raise ValueError(f"unknown task {task!r}")
    if predictor is None:
        preds = predict(model, items, beam, max_len, length_penalty)
    else:
        preds = list(predictor(items))
    if task == "caption":
        metrics = score_captions(preds, refs)
    else:
        metrics = {"accuracy": exact_match_accuracy(preds, [r[0] for r in refs])}
    return EvalReport(dataset, split, step, metrics, beam, len(items), seed)


def selection_metric(report: EvalReport) -> float:
    return report.metrics.get("cider_d", report.metrics.get("accuracy", 0.0))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    model: VideoToTextModel
    optimizer: AdamWState
    seed: int = 0
    step: int = 0
    stage_index: int = 0
    epoch: int = 0
    batch_index: int = 0
    best_metric: float = -math.inf
    history: list = field(default_factory=list)

    def position(self) -> dict:
        return {
            "seed": self.seed,
            "step": self.step,
            "stage_index": self.stage_index,
            "epoch": self.epoch,
            "batch_index": self.batch_index,
            "best_metric": None if self.best_metric == -math.inf else self.best_metric,
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.optimizer, self.position())

    @classmethod
    def load(cls, path) -> "TrainState":
        ck = load_checkpoint(path)
        pos = ck.state
        best = pos.get("best_metric")
        return cls(
            ck.model,
            ck.optimizer or AdamWState(),
            pos.get("seed", 0),
            pos.get("step", 0),
            pos.get("stage_index", 0),
            pos.get("epoch", 0),
            pos.get("batch_index", 0),
            -math.inf if best is None else best,
        )


def epoch_samples(
    spec: StageSpec, stage_index: int, epoch: int, datasets: dict, tok: TextTokenizer, seed: int
) -> list[Seq2SeqSample]:
    """Samples of one epoch, in their final order; a pure function of its arguments."""
    instances = [inst for name in spec.datasets for inst in datasets[name]]
    r = rng_mod.stream(seed, f"stage{stage_index}/{spec.stage}", epoch)
    if spec.stage == "ipt":
        for clip, _ in instances:
            if clip.num_frames < 4:
                raise ValueError(f"ipt needs clips with >= 4 frames; {clip.clip_id!r} has {clip.num_frames}")
        return schedule_epoch(instances, spec.mix_schedule(), r, tok)
    if spec.stage == "image_text":
        instances = [(c.with_frames(c.frames[:1]), rec) for c, rec in instances]
        samples = caption_samples(instances, tok)
    elif spec.task == "qa":
        samples = qa_samples(instances, tok)
    else:
        samples = caption_samples(instances, tok)
    order = r.permutation(len(samples))
    return [samples[int(i)] for i in order]


@dataclass
class Hooks:
    """Optional callbacks fired by :func:`run_stage`."""

    on_step: Callable[[TrainState, float], None] | None = None
    on_eval: Callable[[TrainState, EvalReport], None] | None = None
    on_best: Callable[[TrainState], None] | None = None
    on_checkpoint: Callable[[TrainState], None] | None = None
    evaluate: Callable[[TrainState], EvalReport] | None = None
    checkpoint_every: int = 0
    max_steps: int | None = None  # stop (resumably) after this many total steps


def _param_grads(model: VideoToTextModel, grads: dict) -> dict[str, np.ndarray]:
    return {name: grads[p.node_id] for name, p in model.params.items() if p.node_id in grads}


def train_step(state: TrainState, loss_fn: Callable[[], Tensor | None]) -> float | None:
    with Tape():
        loss = loss_fn()
        if loss is None:
            return None
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"loss is {value} at step {state.step}")
        grads = backpropagate(loss, state.model.params.values())
    optimizer_step(state.model.params, _param_grads(state.model, grads), state.optimizer)
    return value


def run_stage(
    state: TrainState,
    spec: StageSpec,
    datasets: dict,
    hooks: Hooks | None = None,
    scorer: CiderD | None = None,
    max_len: int = 24,
) -> TrainState:
    """Run (or resume) stage ``state.stage_index`` described by ``spec``."""
    hooks = hooks or Hooks()
    model, tok = state.model, state.model.tokenizer
    state.optimizer.lr = spec.lr
    state.optimizer.weight_decay = spec.weight_decay
    if spec.scst and scorer is None:
        refs = [[split_words(c) for c in rec.captions] for name in spec.datasets for _, rec in datasets[name]]
        scorer = CiderD(refs)
    last_evaluated = False
    while state.epoch < spec.epochs:
        samples = epoch_samples(spec, state.stage_index, state.epoch, datasets, tok, state.seed)
        n_batches = math.ceil(len(samples) / spec.batch_size)
        while state.batch_index < n_batches:
            if hooks.max_steps is not None and state.step >= hooks.max_steps:
                return state
            chunk = samples[state.batch_index * spec.batch_size : (state.batch_index + 1) * spec.batch_size]
            if spec.scst:
                r = rng_mod.stream(state.seed, f"scst/{state.stage_index}", state.step)
                value = train_step(state, lambda: scst_step(chunk, model, scorer, r, max_len)[0])
            else:
                value = train_step(state, lambda: compute_loss(chunk, model))
            state.step += 1
            state.batch_index += 1
            if hooks.on_step and value is not None:
                hooks.on_step(state, value)
            # eval_every counts steps within the stage; epochs of a stage have equal size
            stage_step = state.epoch * n_batches + state.batch_index
            last_evaluated = bool(spec.eval_every and hooks.evaluate and stage_step % spec.eval_every == 0)
            if last_evaluated:
                _evaluate(state, hooks)
            if hooks.checkpoint_every and state.step % hooks.checkpoint_every == 0 and hooks.on_checkpoint:
                hooks.on_checkpoint(state)
        state.epoch += 1
        state.batch_index = 0
    if spec.eval_every and hooks.evaluate and spec.epochs and not last_evaluated:
        _evaluate(state, hooks)
    return state


def _evaluate(state: TrainState, hooks: Hooks) -> None:
    report = hooks.evaluate(state)
    if hooks.on_eval:
        hooks.on_eval(state, report)
    metric = selection_metric(report)
    if metric > state.best_metric:
        state.best_metric = metric
        if hooks.on_best:
            hooks.on_best(state)


def init_state(model_cfg: ModelConfig, tok: TextTokenizer, seed: int, lr: float = 1e-3) -> TrainState:
    model = VideoToTextModel(model_cfg, tok)
    return TrainState(model, AdamWState(lr=lr).init(model.params), seed)


def run_stages(
    state: TrainState,
    stages: Sequence[StageSpec],
    datasets: dict,
    hooks: Hooks | None = None,
    on_stage_end: Callable[[TrainState, int, StageSpec], None] | None = None,
    max_len: int = 24,
) -> TrainState:
    """Run stages from ``state.stage_index`` onward; resumes mid-stage when the state says so."""
    hooks = hooks or Hooks()
    while state.stage_index < len(stages):
        spec = stages[state.stage_index]
        if state.epoch == 0 and state.batch_index == 0:
            state.optimizer = AdamWState(lr=spec.lr, weight_decay=spec.weight_decay).init(state.model.params)
        run_stage(state, spec, datasets, hooks, max_len=max_len)
        if hooks.max_steps is not None and state.step >= hooks.max_steps and state.epoch < spec.epochs:
            return state
        if on_stage_end:
            on_stage_end(state, state.stage_index, spec)
        state.stage_index += 1
        state.epoch = 0
        state.batch_index = 0
    return state


# ---------------------------------------------------------------------------
# full run driven by a RunConfig


class Run:
    """Materialises a :class:`RunConfig`: loads data, builds the model, writes artifacts."""

    def __init__(self, config: RunConfig, instances: dict | None = None, tokenizer: TextTokenizer | None = None):
        self.config = config
        self.out = Path(config.out_dir)
        self.datasets = instances if instances is not None else self._load_data()
        self.tokenizer = tokenizer or self._vocab()

    def _load_data(self) -> dict:
        from .media import load_manifest

        d = self.config.data
        out = {}
        for name in ("image_text", "ipt", "train", "val", "test"):
            path = getattr(d, name)
            if path:
                frames = 1 if name == "image_text" else d.frames
                out[name] = load_instances(load_manifest(path), frames, d.image_size)
        return out

    def _vocab(self) -> TextTokenizer:
        from .media import build_vocab

        manifests = [DatasetManifest([rec for _, rec in insts]) for insts in self.datasets.values()]
        return build_vocab(manifests)

    def model_config(self) -> ModelConfig:
        fields = dict(self.config.model)
        fields["vocab_size"] = len(self.tokenizer)
        fields.setdefault("seed", self.config.seed)
        return ModelConfig.from_dict(fields)

    def _report(self, state: TrainState) -> EvalReport:
        ev = self.config.eval
        report = evaluate_split(
            state.model,
            self.datasets[ev.split],
            ev.task,
            ev.beam,
            ev.max_len,
            ev.length_penalty,
            split=ev.split,
            step=state.step,
            seed=self.config.seed,
        )
        report.dump(self.out / f"report_{state.step}.json")
        return report

    def execute(self, resume: str | os.PathLike | None = None, max_steps: int | None = None) -> TrainState:
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / "config.json", "w") as fh:
            json.dump(self.config.to_dict(), fh, indent=2, sort_keys=True)
        if resume:
            state = TrainState.load(resume)
            if state.model.tokenizer != self.tokenizer or state.model.config != self.model_config():
                raise ValueError("checkpoint does not match the run configuration")
        else:
            state = init_state(self.model_config(), self.tokenizer, self.config.seed)
        curve_mode = "a" if resume else "w"
        curve = open(self.out / "curve.jsonl", curve_mode)
        metric_at: dict[int, float] = {}

        def on_step(st: TrainState, loss: float):
            if st.step % max(self.config.log_every, 1) == 0:
                curve.write(json.dumps({"step": st.step, "loss": loss, "metric": metric_at.get(st.step)}) + "\n")

        def on_eval(st: TrainState, report: EvalReport):
            m = selection_metric(report)
            metric_at[st.step] = m
            curve.write(json.dumps({"step": st.step, "loss": None, "metric": m}) + "\n")

        hooks = Hooks(
            on_step=on_step,
            on_eval=on_eval,
            on_best=lambda st: st.save(self.out / "ckpt_best.vofa"),
            on_checkpoint=lambda st: st.save(self.out / "ckpt_last.vofa"),
            evaluate=self._report if self.config.eval.split in self.datasets else None,
            checkpoint_every=self.config.checkpoint_every,
            max_steps=max_steps,
        )

        def on_stage_end(st: TrainState, index: int, spec: StageSpec):
            st.save(self.out / f"ckpt_stage{index}_{spec.stage}.vofa")

        try:
            run_stages(state, self.config.stages, self.datasets, hooks, on_stage_end, self.config.eval.max_len)
        finally:
            curve.close()
        state.save(self.out / "ckpt_last.vofa")
        if not (self.out / "ckpt_best.vofa").exists():
            state.save(self.out / "ckpt_best.vofa")
        return state
