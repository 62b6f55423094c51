import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vidtext.estimator import VideoCaptioner, check_clips
from vidtext.synthetic import SyntheticSpec, generate_synthetic_corpus


@pytest.fixture(scope="module")
def small():
    clips, manifest = generate_synthetic_corpus(SyntheticSpec(n_clips=8, seed=1, two_event_fraction=0.0))
    return [c.frames for c in clips], [r.captions[0] for r in manifest.records]


def test_params_roundtrip_and_clone():
    est = VideoCaptioner(hidden=32, epochs=3)
    params = est.get_params()
    assert params["hidden"] == 32 and params["epochs"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(beam=1)
    assert est.beam == 1


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        VideoCaptioner().predict([np.zeros((8, 32, 32, 3), dtype=np.uint8)])


def test_input_validation():
    with pytest.raises(ValueError, match="non-empty"):
        check_clips([], 8, 32)
    with pytest.raises(ValueError, match=r"\(T, H, W, 3\)"):
        check_clips([np.zeros((8, 32, 32))], 8, 32)
    with pytest.raises(ValueError, match="uint8"):
        check_clips([np.full((8, 32, 32, 3), 300)], 8, 32)
    out = check_clips([np.zeros((5, 40, 64, 3), dtype=np.uint8)], 8, 32)
    assert out[0].frames.shape == (8, 32, 32, 3)
    with pytest.raises(ValueError, match="one caption"):
        VideoCaptioner(epochs=0).fit([np.zeros((8, 32, 32, 3), dtype=np.uint8)], [])


def test_fit_predict_overfits_small_set(small):
    X, y = small
    est = VideoCaptioner(hidden=32, heads=2, epochs=150, batch_size=8, lr=3e-3, beam=2, random_state=0).fit(X, y)
    preds = est.predict(X)
    assert len(preds) == len(X) and all(isinstance(p, str) for p in preds)
    assert sum(p == t for p, t in zip(preds, y)) >= 6
    assert est.score(X, y) > 5.0
    assert est.n_steps_ == 150


def test_fit_is_deterministic(small):
    X, y = small
    a = VideoCaptioner(hidden=16, heads=2, epochs=3, batch_size=4, image_epochs=1, ipt_epochs=1).fit(X, y)
    b = VideoCaptioner(hidden=16, heads=2, epochs=3, batch_size=4, image_epochs=1, ipt_epochs=1).fit(X, y)
    assert all(a.model_[k].data.tobytes() == b.model_[k].data.tobytes() for k in a.model_.params)
