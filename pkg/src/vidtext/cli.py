"""Command-line entry point: ``vidtext {synth,train,eval,caption,qa,score}``.

Machine output is JSON on standard output. Exit codes: 0 success, 2 bad input
(unreadable or invalid files, bad arguments), 3 training diverged, 4 the
checkpoint does not fit the data or configuration it is used with.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .media import CAPTION_PROMPT, DataError, VideoClip, load_clip, load_manifest, normalize_answer, write_raw_frames
from .metrics import exact_match_accuracy
from .synthetic import SyntheticSpec, corpus_summary, generate_synthetic_corpus, split_manifest
from .trainer import DivergenceError, Run, RunConfig, decode_one, evaluate_split, load_instances, preprocess, score_captions

log = logging.getLogger("vidtext")

EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_INPUT, f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens: list[str]) -> dict[str, object]:
    """``["--eval.beam", "2", "--seed", "3"]`` -> ``{"eval.beam": 2, "seed": 3}``."""
    out: dict[str, object] = {}
    i = 0
    while i < len(tokens):
        key = tokens[i]
        if not key.startswith("--") or len(key) == 2:
            raise CliError(EXIT_INPUT, f"unexpected argument {key!r}")
        key = key[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(tokens):
            value = tokens[i + 1]
            i += 2
        else:
            raise CliError(EXIT_INPUT, f"--{key} needs a value")
        out[key.replace("-", "_")] = _parse_value(value)
    return out


def apply_overrides(config: dict, overrides: dict[str, object], sections=("data", "model", "eval")) -> dict:
    """Set ``section.key`` or top-level ``key`` entries; a bare key that names a
    field of exactly one section goes there."""
    from .model import ModelConfig
    from .trainer import DataSection, EvalSection

    fields = {
        "data": set(DataSection.__dataclass_fields__),
        "model": set(ModelConfig.__dataclass_fields__),
        "eval": set(EvalSection.__dataclass_fields__),
    }
    top = set(RunConfig.__dataclass_fields__)
    config = json.loads(json.dumps(config))
    for key, value in overrides.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in sections:
                raise CliError(EXIT_INPUT, f"--{key}: unknown section {section!r}")
            config.setdefault(section, {})[name] = value
        elif key in top and key not in sections:
            config[key] = value
        else:
            owners = [s for s in sections if key in fields[s]]
            if len(owners) != 1:
                raise CliError(EXIT_INPUT, f"--{key}: not a config key" if not owners else f"--{key}: ambiguous, use one of {[f'{s}.{key}' for s in owners]}")
            config.setdefault(owners[0], {})[key] = value
    return config


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, extra) -> int:
    spec_dict = _read_json(args.spec) if args.spec else {}
    spec_dict.update(parse_overrides(extra))
    try:
        spec = SyntheticSpec.from_dict(spec_dict)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"synthetic spec: {exc}") from None
    out = Path(args.out_dir)
    clips, manifest = generate_synthetic_corpus(spec)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
        for clip, rec in zip(clips, manifest.records):
            write_raw_frames(out / rec.frames_path, clip.frames)
        manifest.dump(out / "manifest.jsonl")
        written = {"all": str(out / "manifest.jsonl")}
        for name, part in split_manifest(manifest, spec.splits).items():
            part.dump(out / f"{name}.jsonl")
            written[name] = str(out / f"{name}.jsonl")
        with open(out / "spec.json", "w") as fh:
            json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot write corpus to {out}: {exc.strerror}") from None
    summary = corpus_summary(manifest)
    summary.update(kind=spec.kind, seed=spec.seed, manifests=written)
    _emit(summary)
    return 0


def cmd_train(args, extra) -> int:
    raw = _read_json(args.config)
    raw = apply_overrides(raw, parse_overrides(extra))
    if "VOFA_SEED" in os.environ:
        raw["seed"] = int(os.environ["VOFA_SEED"])
    if args.ipt_tasks is not None:
        tasks = [t for t in args.ipt_tasks.split(",") if t]
        for stage in raw.get("stages", []):
            if stage.get("stage") == "ipt":
                stage["ipt_tasks"] = tasks
                stage.pop("schedule", None)
    if args.out_dir:
        raw["out_dir"] = args.out_dir
    try:
        config = RunConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"{args.config}: {exc}") from None
    try:
        run = Run(config)
    except (DataError, OSError) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    try:
        state = run.execute(resume=args.resume, max_steps=args.max_steps)
    except DivergenceError as exc:
        raise CliError(EXIT_DIVERGED, f"training diverged: {exc}") from None
    except CheckpointError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    except ValueError as exc:
        if "does not match" in str(exc):
            raise CliError(EXIT_MISMATCH, str(exc)) from None
        raise
    _emit({"out_dir": str(run.out), "step": state.step, "best_metric": state.position()["best_metric"]})
    return 0


def _load_model(path):
    try:
        ck = load_checkpoint(path)
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc.strerror}") from None
    except CheckpointError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    if ck.model.tokenizer is None:
        raise CliError(EXIT_MISMATCH, f"{path}: checkpoint has no vocabulary")
    return ck.model


def _check_fits(model, frames: int, image_size: int) -> None:
    cfg = model.config
    if frames > cfg.max_frames:
        raise CliError(EXIT_MISMATCH, f"--frames {frames} exceeds the checkpoint's max_frames={cfg.max_frames}")
    if image_size != cfg.image_size:
        raise CliError(EXIT_MISMATCH, f"--image-size {image_size} differs from the checkpoint's image_size={cfg.image_size}")


def cmd_eval(args, extra) -> int:
    model = _load_model(args.checkpoint)
    image_size = args.image_size or model.config.image_size
    _check_fits(model, args.frames, image_size)
    try:
        manifest = load_manifest(args.manifest)
        instances = load_instances(manifest, args.frames, image_size)
        report = evaluate_split(
            model, instances, args.task, args.beam, args.max_len, args.length_penalty, dataset=args.dataset, split=args.split, seed=args.seed
        )
    except (DataError, OSError) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    if args.out:
        report.dump(args.out)
    _emit(report.to_json())
    return 0


def _load_frames(path, frames: int, image_size: int) -> VideoClip:
    try:
        clip = load_clip(path)
    except (DataError, OSError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read frames from {path}: {exc}") from None
    return preprocess(clip, frames, image_size)


def _decode_and_print(model, clip, prompt, args, post=lambda s: s) -> int:
    result = decode_one(model, clip, prompt, args.beam, args.max_len, args.length_penalty)
    tok = model.tokenizer
    text = post(tok.detokenize(result.tokens))
    if args.json:
        hyps = [
            {
                "text": post(tok.detokenize([t for t in h.tokens if t != tok.eos_id])),
                "score": h.score(args.length_penalty),
                "logprob": h.logprob,
                "finished": h.finished,
            }
            for h in result.hypotheses
        ]
        _emit({"text": text, "beam": args.beam, "finished": result.finished, "hypotheses": hyps})
    else:
        print(text)
    return 0


def cmd_caption(args, extra) -> int:
    model = _load_model(args.checkpoint)
    _check_fits(model, args.frames, model.config.image_size)
    clip = _load_frames(args.frames_path, args.frames, model.config.image_size)
    return _decode_and_print(model, clip, CAPTION_PROMPT, args)


def cmd_qa(args, extra) -> int:
    model = _load_model(args.checkpoint)
    _check_fits(model, args.frames, model.config.image_size)
    clip = _load_frames(args.frames_path, args.frames, model.config.image_size)
    return _decode_and_print(model, clip, args.question, args, post=normalize_answer)


def cmd_score(args, extra) -> int:
    """Score a predictions file (JSON lines ``{"clip_id", "text"}``) against a manifest."""
    try:
        manifest = load_manifest(args.manifest)
    except (DataError, OSError) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None
    preds = {}
    try:
        with open(args.predictions) as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    obj = json.loads(line)
                    preds[obj["clip_id"]] = obj["text"]
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"{args.predictions}: {exc.strerror}") from None
    except (json.JSONDecodeError, KeyError, TypeError):
        raise CliError(EXIT_INPUT, f"{args.predictions}:{lineno}: expected {{\"clip_id\", \"text\"}}") from None
    if args.task == "caption":
        records = [r for r in manifest.records if r.captions]
        missing = [r.clip_id for r in records if r.clip_id not in preds]
        if missing:
            raise CliError(EXIT_INPUT, f"no prediction for clip {missing[0]!r}")
        metrics = score_captions([preds[r.clip_id] for r in records], [r.captions for r in records])
        n = len(records)
    else:
        pairs = [(preds.get(r.clip_id, ""), qa["answer"]) for r in manifest.records for qa in r.qa]
        if not pairs:
            raise CliError(EXIT_INPUT, f"{args.manifest}: no record has a 'qa' field")
        metrics = {"accuracy": exact_match_accuracy([p for p, _ in pairs], [a for _, a in pairs])}
        n = len(pairs)
    _emit({"metrics": metrics, "n_items": n, "excluded_metrics": ["meteor"]})
    return 0


# ---------------------------------------------------------------------------
# parser


def _decoding_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-len", type=int, default=24)
    p.add_argument("--length-penalty", type=float, default=1.0)
    p.add_argument("--frames", type=int, default=8, help="frames sampled per clip")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidtext", description="Video-to-text training, evaluation and inference on frame clips.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic video-caption corpus")
    p.add_argument("spec", nargs="?", help="JSON synthetic spec (defaults when omitted)")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the stages of a JSON run config")
    p.add_argument("config")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--ipt-tasks", help="comma-separated IPT tasks, e.g. caption,match,fom_con")
    p.add_argument("--max-steps", type=int, help="stop (resumably) after this many steps")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--task", choices=("caption", "qa"), default="caption")
    p.add_argument("--image-size", type=int)
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the report here")
    _decoding_args(p)
    p.set_defaults(func=cmd_eval)

    for name, helptext in (("caption", "caption one clip"), ("qa", "answer a question about one clip")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint")
        p.add_argument("frames_path", help=".vofr file or directory of PNG frames")
        if name == "qa":
            p.add_argument("question")
        p.add_argument("--json", action="store_true", help="print all beam hypotheses with scores")
        _decoding_args(p)
        p.set_defaults(func=cmd_caption if name == "caption" else cmd_qa)

    p = sub.add_parser("score", help="score predictions against a manifest")
    p.add_argument("predictions", help='JSON lines of {"clip_id", "text"}')
    p.add_argument("manifest")
    p.add_argument("--task", choices=("caption", "qa"), default="caption")
    p.set_defaults(func=cmd_score)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if extra and args.command not in ("synth", "train"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        return args.func(args, extra)
    except CliError as exc:
        print(f"vidtext {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
