"""scikit-learn style wrapper: ``VideoCaptioner().fit(clips, captions).predict(clips)``.

``X`` is a sequence of clips, each a ``(T, H, W, 3)`` uint8 array or a
:class:`~vidtext.media.VideoClip`; ``y`` holds one caption string (or a list of
reference captions) per clip. ``fit`` runs the staged pipeline on ``X``:
optional single-frame image-text warm-up, optional IPT, then captioning
fine-tuning.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .media import CAPTION_PROMPT, DatasetManifest, ManifestRecord, VideoClip, build_vocab
from .model import ModelConfig
from .trainer import StageSpec, init_state, predict, preprocess, run_stages, score_captions


def check_clips(X, n_frames: int, image_size: int) -> list[VideoClip]:
    """Validate and preprocess clips (shorter-side resize, center crop, linear frame sampling)."""
    if isinstance(X, np.ndarray) and X.ndim == 5:
        X = list(X)
    if not isinstance(X, (list, tuple)) or not X:
        raise ValueError("X must be a non-empty sequence of clips")
    out = []
    for i, x in enumerate(X):
        clip = x if isinstance(x, VideoClip) else None
        if clip is None:
            arr = np.asarray(x)
            if arr.ndim != 4 or arr.shape[-1] != 3:
                raise ValueError(f"X[{i}]: expected a (T, H, W, 3) array, got shape {arr.shape}")
            if arr.dtype != np.uint8:
                if not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0 or arr.max() > 255:
                    raise ValueError(f"X[{i}]: pixels must be uint8 in [0, 255]")
                arr = arr.astype(np.uint8)
            clip = VideoClip(arr, f"x{i}")
        out.append(preprocess(clip, n_frames, image_size))
    return out


def check_captions(y, n: int) -> list[list[str]]:
    if y is None or len(y) != n:
        raise ValueError(f"y must hold one caption (or list of captions) per clip; got {0 if y is None else len(y)} for {n} clips")
    out = []
    for i, c in enumerate(y):
        refs = [c] if isinstance(c, str) else list(c)
        if not refs or not all(isinstance(r, str) and r.strip() for r in refs):
            raise ValueError(f"y[{i}]: captions must be non-empty strings")
        out.append(refs)
    return out


class VideoCaptioner(BaseEstimator):
    """Video-to-text captioner trained from scratch on ``(X, y)``."""

    def __init__(
        self,
        hidden: int = 64,
        layers: int = 2,
        heads: int = 4,
        variant: str = "full",
        n_frames: int = 8,
        image_size: int = 32,
        patch_size: int = 16,
        image_epochs: int = 0,
        ipt_tasks: Sequence[str] | None = None,
        ipt_epochs: int = 0,
        epochs: int = 30,
        batch_size: int = 32,
        lr: float = 1e-3,
        beam: int = 4,
        max_len: int = 24,
        random_state: int = 0,
    ):
        self.hidden = hidden
        self.layers = layers
        self.heads = heads
        self.variant = variant
        self.n_frames = n_frames
        self.image_size = image_size
        self.patch_size = patch_size
        self.image_epochs = image_epochs
        self.ipt_tasks = ipt_tasks
        self.ipt_epochs = ipt_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beam = beam
        self.max_len = max_len
        self.random_state = random_state

    def fit(self, X, y):
        clips = check_clips(X, self.n_frames, self.image_size)
        refs = check_captions(y, len(clips))
        records = [ManifestRecord(c.clip_id, "", r, []) for c, r in zip(clips, refs)]
        instances = list(zip(clips, records))
        tok = build_vocab([DatasetManifest(records)])
        cfg = ModelConfig(
            vocab_size=len(tok),
            hidden=self.hidden,
            enc_layers=self.layers,
            dec_layers=self.layers,
            heads=self.heads,
            image_size=self.image_size,
            patch_size=self.patch_size,
            max_frames=max(8, self.n_frames),
            variant=self.variant,
            seed=self.random_state,
        )
        stages = []
        common = dict(batch_size=self.batch_size, lr=self.lr)
        if self.image_epochs:
            stages.append(StageSpec("image_text", datasets=["train"], epochs=self.image_epochs, **common))
        if self.ipt_epochs:
            tasks = list(self.ipt_tasks) if self.ipt_tasks else ["caption", "match", "fom_con"]
            stages.append(StageSpec("ipt", datasets=["train"], ipt_tasks=tasks, epochs=self.ipt_epochs, **common))
        stages.append(StageSpec("finetune", datasets=["train"], epochs=self.epochs, **common))
        state = init_state(cfg, tok, self.random_state, self.lr)
        run_stages(state, stages, {"train": instances}, max_len=self.max_len)
        self.model_ = state.model
        self.tokenizer_ = tok
        self.n_steps_ = state.step
        return self

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        clips = check_clips(X, self.n_frames, self.image_size)
        return predict(self.model_, [(c, CAPTION_PROMPT) for c in clips], self.beam, self.max_len)

    def score(self, X, y) -> float:
        """Corpus CIDEr-D of the predicted captions."""
        refs = check_captions(y, len(X))
        return score_captions(self.predict(X), refs)["cider_d"]
