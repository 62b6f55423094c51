import numpy as np
import pytest

from vidtext.synthetic import (
    REVERSED_EVENT,
    SyntheticSpec,
    caption_from_script,
    describe_frames,
    generate_synthetic_corpus,
    reverse_script,
    split_manifest,
)


@pytest.fixture(scope="module")
def videos():
    return generate_synthetic_corpus(SyntheticSpec(n_clips=64, seed=11))


def test_same_seed_same_bytes(videos):
    clips, manifest = generate_synthetic_corpus(SyntheticSpec(n_clips=64, seed=11))
    assert all(a.frames.tobytes() == b.frames.tobytes() for a, b in zip(clips, videos[0]))
    assert [r.captions for r in manifest.records] == [r.captions for r in videos[1].records]


def test_different_seed_differs(videos):
    clips, _ = generate_synthetic_corpus(SyntheticSpec(n_clips=64, seed=12))
    assert any(a.frames.tobytes() != b.frames.tobytes() for a, b in zip(clips, videos[0]))


def test_exact_fractions(videos):
    clips, manifest = videos
    assert sum(" then " in r.captions[0] for r in manifest.records) == 32
    assert sum(bool(r.qa) for r in manifest.records) == 16
    assert all(c.frames.shape == (8, 32, 32, 3) for c in clips)


def test_pixels_agree_with_caption(videos):
    clips, manifest = videos
    for clip, rec in zip(clips, manifest.records):
        script = describe_frames(clip.frames)
        assert caption_from_script(script) == rec.captions[0], rec.clip_id


def test_reversal_reverses_script_and_changes_caption(videos):
    clips, manifest = videos
    for clip, rec in zip(clips, manifest.records):
        script = clip.meta["script"]
        backwards = describe_frames(clip.frames[::-1])
        assert backwards == reverse_script(script)
        assert caption_from_script(backwards) != rec.captions[0]


def test_grammar_examples():
    one = [{"color": "red", "shape": "square", "event": "moves left"}]
    two = one + [{"color": "blue", "shape": "circle", "event": "appears"}]
    assert caption_from_script(one) == "a red square moves left"
    assert caption_from_script(two) == "a red square moves left then a blue circle appears"
    assert caption_from_script(reverse_script(two)) == "a blue circle disappears then a red square moves right"
    assert all(REVERSED_EVENT[REVERSED_EVENT[e]] == e for e in REVERSED_EVENT)


def test_image_corpus_is_static():
    clips, manifest = generate_synthetic_corpus(SyntheticSpec(n_clips=8, kind="image", id_prefix="img"))
    assert all(c.num_frames == 1 for c in clips)
    for r in manifest.records:
        phrases = r.captions[0].split(" and ")
        assert 1 <= len(phrases) <= 2 and all(len(p.split()) == 3 and p.startswith("a ") for p in phrases)
    assert manifest.records[0].clip_id == "img0000"


def test_split_manifest(videos):
    parts = split_manifest(videos[1], {"train": 40, "val": 12, "test": 12})
    assert [len(p) for p in parts.values()] == [40, 12, 12]
    ids = [r.clip_id for p in parts.values() for r in p.records]
    assert len(set(ids)) == 64


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(kind="audio")
    with pytest.raises(ValueError):
        SyntheticSpec(frames_per_clip=3)
    assert SyntheticSpec.from_dict(SyntheticSpec(seed=4).to_dict()).seed == 4
