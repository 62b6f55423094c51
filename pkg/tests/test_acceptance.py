"""Acceptance criteria, one test each; every test prints a PASS/FAIL line with
the measured quantity next to its threshold."""

import math
import time

import numpy as np
import pytest

from conftest import tiny_config
from oracles import bleu4_bruteforce, cider_d_bruteforce, random_caption_corpus
from test_checkpoint import _run_config
from test_gradients import CASES, end_to_end_gradient_error, primitive_gradient_error
from test_model import _samples, fid_equivalence_error
from test_trainer import ipt_epoch_counts, scst_sign_case
from vidtext.experiments import DEFAULT_ARMS, AblationSetup, run_ablation
from vidtext.media import build_vocab, split_words
from vidtext.metrics import bleu4, cider_d, rouge_l
from vidtext.model import ModelConfig, VideoToTextModel, collate, decode_logits, encode
from vidtext.synthetic import SyntheticSpec, generate_synthetic_corpus
from vidtext.tasks import caption_samples
from vidtext.trainer import Hooks, Run, StageSpec, TrainState, evaluate_split, init_state, run_stages


@pytest.fixture
def report(capsys):
    def emit(number: int, name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number} {name}: {detail}")
        assert ok, detail

    return emit


def test_criterion_01_gradient_suite(report, tokenizer):
    start = time.perf_counter()
    worst = {kind: max(primitive_gradient_error(kind, make, s) for s in range(100)) for kind, make in CASES}
    e2e = max(end_to_end_gradient_error(tokenizer, s) for s in range(100))
    elapsed = time.perf_counter() - start
    kind = max(worst, key=worst.get)
    ok = worst[kind] < 1e-6 and e2e < 1e-4 and elapsed < 120
    report(
        1,
        "gradient suite",
        ok,
        f"{len(CASES)} primitives x 100 seeds worst rel err {worst[kind]:.2e} ({kind}) < 1e-6; "
        f"end-to-end worst {e2e:.2e} < 1e-4; {elapsed:.1f}s < 120s",
    )


def test_criterion_02_fid_equivalence(report, tokenizer):
    errs = {t: max(fid_equivalence_error(tokenizer, s, t) for s in range(20)) for t in (1, 2, 4)}
    ok = all(e < 1e-5 for e in errs.values())
    report(2, "FiD equivalence", ok, ", ".join(f"T={t} max-abs {e:.2e}" for t, e in errs.items()) + " (< 1e-5, 20 seeds)")


def test_criterion_03_zero_temporal_identity(report, tokenizer):
    identical = 0
    cases = 0
    for variant in ("full", "fid"):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            model = VideoToTextModel(ModelConfig(vocab_size=len(tokenizer), variant=variant, seed=seed), tokenizer)
            batch = collate(_samples(tokenizer, rng), model.config, tokenizer.pad_id)
            a, b = encode(model, batch), encode(model, batch, use_temporal=False)
            same = a.states.data.tobytes() == b.states.data.tobytes()
            same &= decode_logits(model, a, batch.dec_in).data.tobytes() == decode_logits(model, b, batch.dec_in).data.tobytes()
            identical += same
            cases += 1
    report(3, "zero-init temporal identity", identical == cases, f"{identical}/{cases} forward passes bit-identical")


def test_criterion_04_schedule_exactness(report):
    counts = ipt_epoch_counts(8000)
    report(4, "schedule exactness", counts == (8000, 8000, 1000), f"caption/match/fom = {counts}, expected (8000, 8000, 1000)")


def test_criterion_05_metric_oracles(report):
    worst_bleu = worst_cider = 0.0
    for seed in range(100):
        hyps, refs = random_caption_corpus(seed)
        worst_bleu = max(worst_bleu, abs(bleu4(hyps, refs) - bleu4_bruteforce(hyps, refs)))
        worst_cider = max(worst_cider, abs(cider_d(hyps, refs) - cider_d_bruteforce(hyps, refs)))
    _, manifest = generate_synthetic_corpus(SyntheticSpec(n_clips=32, seed=0))
    refs = [[split_words(r.captions[0])] for r in manifest.records]
    hyps = [r[0] for r in refs]
    identity = (bleu4(hyps, refs), rouge_l(hyps, refs), cider_d(hyps, refs))
    ok_identity = all(abs(a - b) < 1e-9 for a, b in zip(identity, (1.0, 1.0, 10.0)))
    ok = worst_bleu < 1e-9 and worst_cider < 1e-9 and ok_identity
    report(
        5,
        "metric oracles",
        ok,
        f"100 corpora max |BLEU-oracle| {worst_bleu:.1e}, max |CIDEr-D-oracle| {worst_cider:.1e} (< 1e-9); "
        f"identity corpus (BLEU, ROUGE-L, CIDEr-D) = ({identity[0]:.12g}, {identity[1]:.12g}, {identity[2]:.12g})",
    )


OVERFIT_STEPS = 600


@pytest.fixture(scope="module")
def overfit():
    """Default toy model trained on a 32-clip corpus (one full batch per step)."""
    clips, manifest = generate_synthetic_corpus(SyntheticSpec(n_clips=32, seed=0))
    tok = build_vocab([manifest])
    instances = list(zip(clips, manifest.records))
    state = init_state(ModelConfig(vocab_size=len(tok), seed=0), tok, 0)
    temporal_before = state.model["temporal"].data.copy()
    losses = []
    start = time.perf_counter()
    hooks = Hooks(on_step=lambda st, loss: losses.append(loss))
    run_stages(state, [StageSpec("finetune", epochs=OVERFIT_STEPS, batch_size=32, lr=1e-3)], {"train": instances}, hooks)
    train_time = time.perf_counter() - start
    return state, instances, losses, train_time, temporal_before


def test_criterion_06_overfit(report, overfit):
    state, instances, losses, train_time, _ = overfit
    start = time.perf_counter()
    ev = evaluate_split(state.model, instances, beam=4, split="train")
    from vidtext.trainer import predict
    from vidtext.media import CAPTION_PROMPT

    preds = predict(state.model, [(c, CAPTION_PROMPT) for c, _ in instances], beam=4)
    exact = sum(p == rec.captions[0] for p, (_, rec) in zip(preds, instances)) / len(instances)
    elapsed = train_time + time.perf_counter() - start
    first_below = next((i + 1 for i, l in enumerate(losses) if l < 0.1), None)
    ok = first_below is not None and first_below <= 2000 and exact >= 0.9 and elapsed < 600
    report(
        6,
        "toy overfit",
        ok,
        f"loss first < 0.1 at step {first_below} (<= 2000), final loss {losses[-1]:.4f} after {len(losses)} steps; "
        f"beam-4 exact captions {exact:.0%} (>= 90%), CIDEr-D {ev.metrics['cider_d']:.3f}; {elapsed:.0f}s < 600s",
    )


def test_overfit_beam_four_not_worse_than_greedy(overfit):
    state, instances, *_ = overfit
    b4 = evaluate_split(state.model, instances, beam=4).metrics["cider_d"]
    b1 = evaluate_split(state.model, instances, beam=1).metrics["cider_d"]
    assert b4 >= b1


def test_overfit_temporal_embeddings_learn(overfit):
    state, *_, temporal_before = overfit
    assert not temporal_before.any()
    assert np.abs(state.model["temporal"].data).max() > 0


@pytest.mark.slow
def test_criterion_07_ipt_trend(report):
    start = time.perf_counter()
    results = [run_ablation(seed, AblationSetup()) for seed in range(5)]
    elapsed = time.perf_counter() - start
    full, none = "caption+match+fom_con", "none"
    wins = sum(r[full] > r[none] for r in results)
    mean = {arm: float(np.mean([r[arm] for r in results])) for arm in DEFAULT_ARMS}
    ok = wins >= 4 and mean["caption+match"] >= mean["caption"] and elapsed < 3600
    per_seed = "; ".join(" ".join(f"{a}={r[a]:.3f}" for a in DEFAULT_ARMS) for r in results)
    report(
        7,
        "IPT trend",
        ok,
        f"ipt(caption+match+fom_con) > none in {wins}/5 seeds (>= 4); mean CIDEr-D caption+match "
        f"{mean['caption+match']:.3f} vs caption {mean['caption']:.3f}; {elapsed:.0f}s < 3600s [{per_seed}]",
    )


def test_criterion_08_scst_sign(report, tokenizer):
    agree = sum(scst_sign_case(tokenizer, seed) for seed in range(50))
    report(8, "SCST sign test", agree == 50, f"{agree}/50 cases moved log P in the advantage's direction")


def test_criterion_09_determinism(report, tmp_path, tokenizer, instances):
    datasets = {"image_text": instances, "ipt": instances, "train": instances, "val": instances[:4]}
    blobs = []
    for name in ("a", "b"):
        Run(_run_config(tmp_path / name), datasets, tokenizer).execute()
        blobs.append((tmp_path / name / "ckpt_last.vofa").read_bytes())
    report(9, "determinism", blobs[0] == blobs[1], f"two runs -> ckpt_last.vofa of {len(blobs[0])} bytes, identical={blobs[0] == blobs[1]}")


def test_criterion_10_checkpoint_roundtrip(report, tmp_path, tokenizer, instances):
    state = init_state(tiny_config(len(tokenizer)), tokenizer, 0)
    run_stages(state, [StageSpec("finetune", epochs=2, batch_size=8)], {"train": instances})
    state.save(tmp_path / "a.vofa")
    TrainState.load(tmp_path / "a.vofa").save(tmp_path / "b.vofa")
    a, b = (tmp_path / "a.vofa").read_bytes(), (tmp_path / "b.vofa").read_bytes()
    report(10, "checkpoint round-trip", a == b, f"save -> load -> save: {len(a)} vs {len(b)} bytes, identical={a == b}")
