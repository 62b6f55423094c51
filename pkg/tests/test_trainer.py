import json
import math

import numpy as np
import pytest

from conftest import tiny_config
from vidtext.media import CAPTION_PROMPT, DatasetManifest, ManifestRecord, VideoClip, build_vocab
from vidtext.model import VideoToTextModel, collate
from vidtext.optim import AdamWState, optimizer_step
from vidtext.tasks import MixSchedule, Seq2SeqSample, caption_samples
from vidtext.tensor import Tape, backpropagate, precision
from vidtext.trainer import (
    DivergenceError,
    Hooks,
    EvalReport,
    RunConfig,
    StageSpec,
    TrainState,
    compute_loss,
    epoch_samples,
    evaluate_split,
    init_state,
    run_stages,
    scst_loss,
    sequence_logprobs,
    train_step,
)


def test_loss_invariant_to_duplication(tokenizer, instances):
    model = VideoToTextModel(tiny_config(len(tokenizer)), tokenizer)
    samples = caption_samples(instances[:3], tokenizer)
    a = compute_loss(samples, model).item()
    b = compute_loss(samples + samples, model).item()
    assert a == pytest.approx(b, rel=1e-6)


def test_loss_errors(tokenizer):
    model = VideoToTextModel(tiny_config(len(tokenizer)), tokenizer)
    with pytest.raises(ValueError, match="empty"):
        compute_loss([], model)


def test_loss_decreases_monotonically_on_fixed_batch(tokenizer, instances):
    state = init_state(tiny_config(len(tokenizer)), tokenizer, 0, lr=1e-3)
    state.optimizer.weight_decay = 0.0
    samples = caption_samples(instances[:4], tokenizer)
    losses = [train_step(state, lambda: compute_loss(samples, state.model)) for _ in range(50)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_divergence_guard(tokenizer, instances):
    state = init_state(tiny_config(len(tokenizer)), tokenizer, 0)
    state.model["head.w"].data[0, 0] = np.nan
    samples = caption_samples(instances[:2], tokenizer)
    with pytest.raises(DivergenceError):
        train_step(state, lambda: compute_loss(samples, state.model))


def ipt_epoch_counts(n: int) -> tuple[int, int, int]:
    """(caption, match, fom_con) sample counts of one default IPT epoch over ``n`` instances."""
    frames = np.zeros((8, 4, 4, 3), dtype=np.uint8)
    insts = [(VideoClip(frames, f"c{i}"), ManifestRecord(f"c{i}", "x", [f"caption {i % 7}"], [])) for i in range(n)]
    tok = build_vocab([DatasetManifest([r for _, r in insts])])
    tags = [s.task_tag for s in epoch_samples(StageSpec("ipt"), 1, 0, {"ipt": insts}, tok, 0)]
    return tags.count("caption"), tags.count("match"), tags.count("fom_con")


def test_ipt_epoch_counts():
    assert ipt_epoch_counts(800) == (800, 800, 100)


def test_image_text_stage_uses_single_frames(tokenizer, instances):
    samples = epoch_samples(StageSpec("image_text"), 0, 0, {"image_text": instances}, tokenizer, 0)
    assert {s.frames.num_frames for s in samples} == {1}
    assert {s.task_tag for s in samples} == {"caption"}


def test_ipt_rejects_short_clips(tokenizer, instances):
    short = [(c.with_frames(c.frames[:3]), r) for c, r in instances]
    with pytest.raises(ValueError, match=">= 4 frames"):
        epoch_samples(StageSpec("ipt"), 1, 0, {"ipt": short}, tokenizer, 0)


def test_stage_spec_validation():
    with pytest.raises(ValueError, match="scst"):
        StageSpec("ipt", scst=True)
    assert StageSpec("ipt", ipt_tasks=["caption", "match"]).mix_schedule() == MixSchedule(1, 1, 0)
    assert StageSpec("finetune").datasets == ["train"]


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown keys"):
        RunConfig.from_dict({"data": {}, "stages": [], "bogus": 1})
    with pytest.raises(ValueError, match="stage: unknown keys"):
        RunConfig.from_dict({"data": {}, "stages": [{"stage": "ipt", "epoch": 1}]})


def _stages():
    return [
        StageSpec("image_text", epochs=1, batch_size=4),
        StageSpec("ipt", epochs=1, batch_size=8),
        StageSpec("finetune", epochs=2, batch_size=4),
    ]


def test_resume_is_bit_exact(tmp_path, tokenizer, instances):
    datasets = {"image_text": instances, "ipt": instances, "train": instances}
    cfg = tiny_config(len(tokenizer))
    full = run_stages(init_state(cfg, tokenizer, 5), _stages(), datasets)

    part = run_stages(init_state(cfg, tokenizer, 5), _stages(), datasets, Hooks(max_steps=7))
    assert part.step == 7
    part.save(tmp_path / "mid.vofa")
    resumed = run_stages(TrainState.load(tmp_path / "mid.vofa"), _stages(), datasets)
    assert resumed.step == full.step
    for name in full.model.params:
        assert full.model[name].data.tobytes() == resumed.model[name].data.tobytes(), name


def test_skipping_ipt_changes_the_run(tokenizer, instances):
    datasets = {"image_text": instances, "ipt": instances, "train": instances}
    cfg = tiny_config(len(tokenizer))
    with_ipt = run_stages(init_state(cfg, tokenizer, 1), _stages(), datasets)
    without = run_stages(init_state(cfg, tokenizer, 1), [_stages()[0], _stages()[2]], datasets)
    assert without.step == with_ipt.step - math.ceil((16 + 16 + 2) / 8)
    assert with_ipt.model["tok_emb"].data.tobytes() != without.model["tok_emb"].data.tobytes()


def scst_sign_case(tok, seed: int) -> bool:
    """One small AdamW step on the SCST surrogate moves log P(sequence) in the
    direction of the advantage's sign."""
    rng = np.random.default_rng(seed)
    with precision("float64"):
        model = VideoToTextModel(tiny_config(len(tok), seed=seed), tok)
        frames = rng.integers(0, 256, size=(8, 32, 32, 3), dtype=np.uint8)
        sample = Seq2SeqSample(tok.tokenize(CAPTION_PROMPT), VideoClip(frames), [tok.bos_id, tok.eos_id], "caption")
        batch = collate([sample], model.config, tok.pad_id, with_targets=False)
        seq = [int(x) for x in rng.integers(4, len(tok), size=int(rng.integers(1, 8)))]
        finished = bool(rng.random() < 0.5)
        adv = float(rng.choice([-1, 1]) * rng.uniform(0.1, 5.0))
        before = sequence_logprobs(model, batch, [seq], [finished])[0]
        with Tape():
            loss = scst_loss(model, batch, [seq], [adv], [finished])
            grads = backpropagate(loss, model.params.values())
        g = {n: grads[p.node_id] for n, p in model.params.items()}
        optimizer_step(model.params, g, AdamWState(lr=1e-5, weight_decay=0.0))
        after = sequence_logprobs(model, batch, [seq], [finished])[0]
    return (after - before) * adv > 0


def test_scst_sign(tokenizer):
    assert all(scst_sign_case(tokenizer, s) for s in range(10))


def test_scst_zero_advantage_zero_gradient(tokenizer):
    model = VideoToTextModel(tiny_config(len(tokenizer)), tokenizer)
    rng = np.random.default_rng(0)
    s = Seq2SeqSample([4, 5], VideoClip(rng.integers(0, 256, (8, 32, 32, 3), dtype=np.uint8)), [1, 2], "caption")
    batch = collate([s], model.config, with_targets=False)
    with Tape():
        loss = scst_loss(model, batch, [[6, 7]], [0.0])
        grads = backpropagate(loss, model.params.values())
    assert all(not grads[p.node_id].any() for p in model.params.values())


def test_scst_stage_runs(tokenizer, instances):
    datasets = {"train": instances}
    state = init_state(tiny_config(len(tokenizer)), tokenizer, 0)
    run_stages(state, [StageSpec("finetune", epochs=1, batch_size=8, scst=True)], datasets, max_len=6)
    assert state.step == 2


def test_echo_oracle_scores_identity(instances):
    echo = {id(c): rec.captions[0] for c, rec in instances}
    report = evaluate_split(None, instances, predictor=lambda items: [echo[id(c)] for c, _ in items])
    assert report.metrics["bleu4"] == pytest.approx(1.0)
    assert report.metrics["rouge_l"] == pytest.approx(1.0)
    assert report.metrics["cider_d"] == pytest.approx(10.0)


def test_empty_predictions_score_zero(instances):
    report = evaluate_split(None, instances, predictor=lambda items: [""] * len(items))
    assert report.metrics == {"bleu4": 0.0, "rouge_l": 0.0, "cider_d": 0.0}


def test_qa_evaluation(instances):
    with_qa = [i for i in instances if i[1].qa]
    report = evaluate_split(None, with_qa, task="qa", predictor=lambda items: ["red"] * len(items))
    assert 0.0 <= report.metrics["accuracy"] <= 1.0 and report.n_items == len(with_qa)
    with pytest.raises(ValueError, match="qa"):
        evaluate_split(None, [i for i in instances if not i[1].qa], task="qa", predictor=lambda items: [])


def test_report_roundtrip(tmp_path):
    report = EvalReport("synthetic", "val", 12, {"bleu4": 0.5, "rouge_l": 0.25, "cider_d": 1.0 / 3}, 4, 10, 7)
    report.dump(tmp_path / "r.json")
    assert EvalReport.from_json(json.loads((tmp_path / "r.json").read_text())) == report
