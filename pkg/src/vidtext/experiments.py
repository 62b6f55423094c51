"""IPT-strategy ablation on the synthetic corpus.

Each seed renders one video corpus split into an IPT pool, a downstream
training set and a held-out test set, plus a separate image-caption corpus.
Every arm starts from the same image-text checkpoint, optionally runs an IPT
stage with its task mix, then fine-tunes on the downstream set and is scored
on the held-out clips with CIDEr-D.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

from .media import DatasetManifest, build_vocab
from .model import ModelConfig
from .synthetic import SyntheticSpec, generate_synthetic_corpus
from .trainer import StageSpec, evaluate_split, init_state, run_stages

log = logging.getLogger(__name__)

DEFAULT_ARMS = {
    "none": None,
    "caption": ["caption"],
    "caption+match": ["caption", "match"],
    "caption+match+fom_con": ["caption", "match", "fom_con"],
}


@dataclass
class AblationSetup:
    n_clips: int = 512
    n_ipt: int = 256
    n_train: int = 128
    n_test: int = 128
    n_images: int = 256
    image_epochs: int = 10
    ipt_epochs: int = 8
    finetune_epochs: int = 25
    batch_size: int = 32
    lr: float = 1e-3
    beam: int = 4
    max_len: int = 24
    model: dict = field(default_factory=dict)


def build_corpora(seed: int, setup: AblationSetup):
    clips, manifest = generate_synthetic_corpus(SyntheticSpec(n_clips=setup.n_clips, seed=seed))
    images, image_manifest = generate_synthetic_corpus(
        SyntheticSpec(n_clips=setup.n_images, kind="image", id_prefix="img", seed=seed)
    )
    pairs = list(zip(clips, manifest.records))
    a, b = setup.n_ipt, setup.n_ipt + setup.n_train
    datasets = {
        "image_text": list(zip(images, image_manifest.records)),
        "ipt": pairs[:a],
        "train": pairs[a:b],
        "test": pairs[b : b + setup.n_test],
    }
    tok = build_vocab([manifest, image_manifest])
    return datasets, tok


def run_ablation(seed: int, setup: AblationSetup | None = None, arms: dict | None = None) -> dict[str, float]:
    """Held-out CIDEr-D per arm for one seed."""
    setup = setup or AblationSetup()
    arms = DEFAULT_ARMS if arms is None else arms
    datasets, tok = build_corpora(seed, setup)
    cfg = ModelConfig.from_dict({**setup.model, "vocab_size": len(tok), "seed": seed})
    base = init_state(cfg, tok, seed)
    stage1 = StageSpec("image_text", epochs=setup.image_epochs, batch_size=setup.batch_size, lr=setup.lr)
    run_stages(base, [stage1], datasets)
    scores = {}
    for name, tasks in arms.items():
        state = copy.deepcopy(base)
        state.stage_index = 0
        stages = []
        if tasks:
            stages.append(
                StageSpec("ipt", ipt_tasks=list(tasks), epochs=setup.ipt_epochs, batch_size=setup.batch_size, lr=setup.lr)
            )
        stages.append(StageSpec("finetune", epochs=setup.finetune_epochs, batch_size=setup.batch_size, lr=setup.lr))
        run_stages(state, stages, datasets, max_len=setup.max_len)
        report = evaluate_split(state.model, datasets["test"], beam=setup.beam, max_len=setup.max_len, split="test", seed=seed)
        scores[name] = report.metrics["cider_d"]
        log.info("seed %d arm %s: cider_d %.4f", seed, name, scores[name])
    return scores
