import numpy as np
import pytest

from vidtext.media import build_vocab
from vidtext.model import ModelConfig, VideoToTextModel
from vidtext.synthetic import SyntheticSpec, generate_synthetic_corpus
from vidtext.tensor import precision


@pytest.fixture
def f64():
    with precision("float64"):
        yield


@pytest.fixture(scope="session")
def corpus():
    clips, manifest = generate_synthetic_corpus(SyntheticSpec(n_clips=16, seed=3))
    return clips, manifest


@pytest.fixture(scope="session")
def tokenizer(corpus):
    return build_vocab([corpus[1]])


@pytest.fixture(scope="session")
def instances(corpus):
    clips, manifest = corpus
    return list(zip(clips, manifest.records))


def tiny_config(vocab_size, **kw):
    base = dict(
        vocab_size=vocab_size,
        hidden=16,
        enc_layers=2,
        dec_layers=2,
        heads=2,
        ffn_mult=2,
        image_size=32,
        patch_size=16,
        head_init="normal",
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model(tokenizer):
    return VideoToTextModel(tiny_config(len(tokenizer)), tokenizer)


def random_frames(rng, t=8, size=32):
    return rng.integers(0, 256, size=(t, size, size, 3), dtype=np.uint8)
