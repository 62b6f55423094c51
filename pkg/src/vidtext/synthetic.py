"""Seeded synthetic video-caption corpus.

Each clip shows one or two colored shapes on a black canvas. A single-event
clip scripts one event for one shape; a two-event clip scripts an event for
shape A in the first half of the clip and one for shape B in the second half,
captioned "X then Y". Captions come from the event script through a fixed
grammar, so reversing a clip's frames reverses its script:
``appears <-> disappears`` and ``moves left <-> moves right`` with the two
events swapped, which always yields a different caption for two distinct shapes.

:func:`describe_frames` recovers the script from pixels alone; tests use it as
an independent check of the renderer and the grammar.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rng_mod
from .media import DatasetManifest, ManifestRecord, VideoClip

COLORS = {
    "red": (230, 30, 30),
    "green": (30, 200, 30),
    "blue": (40, 60, 230),
    "yellow": (230, 220, 30),
}
SHAPES = ("square", "circle", "triangle")
EVENTS = ("appears", "disappears", "moves left", "moves right")
REVERSED_EVENT = {
    "appears": "disappears",
    "disappears": "appears",
    "moves left": "moves right",
    "moves right": "moves left",
}


@dataclass
class SyntheticSpec:
    n_clips: int = 32
    frames_per_clip: int = 8
    canvas: int = 32
    object_size: int = 10
    travel: int = 12
    shapes: Sequence[str] = SHAPES
    colors: Sequence[str] = tuple(COLORS)
    events: Sequence[str] = EVENTS
    two_event_fraction: float = 0.5
    qa_fraction: float = 0.25
    kind: str = "video"  # or "image": static single frames for image-text training
    id_prefix: str = "clip"
    seed: int = 0
    splits: dict = field(default_factory=dict)  # name -> clip count, carved in order

    def __post_init__(self):
        if self.kind not in ("video", "image"):
            raise ValueError(f"kind must be 'video' or 'image', got {self.kind!r}")
        if self.kind == "video" and self.frames_per_clip < 4:
            raise ValueError("frames_per_clip must be >= 4 so temporal order is expressible")
        if self.canvas < 2 * self.object_size + 2:
            raise ValueError("canvas too small for two objects")
        if self.travel > self.canvas - self.object_size:
            raise ValueError("travel exceeds the canvas")
        unknown = set(self.colors) - set(COLORS)
        if unknown:
            raise ValueError(f"unknown colors {sorted(unknown)}")
        if set(self.shapes) - set(SHAPES) or set(self.events) - set(EVENTS):
            raise ValueError("unknown shapes or events")
        if len(self.colors) < 2:
            raise ValueError("need at least two colors")
        if sum(self.splits.values()) > self.n_clips:
            raise ValueError("split sizes exceed n_clips")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synthetic spec keys {sorted(extra)}")
        d = dict(d)
        for k in ("shapes", "colors", "events"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("shapes", "colors", "events"):
            d[k] = list(d[k])
        return d


# ---------------------------------------------------------------------------
# grammar


def object_phrase(obj: dict) -> str:
    return f"a {obj['color']} {obj['shape']}"


def caption_from_script(script: list[dict]) -> str:
    """Caption grammar. ``script`` is an ordered list of ``{color, shape, event}``."""
    parts = [f"{object_phrase(e)} {e['event']}" for e in script]
    return " then ".join(parts)


def image_caption(objects: list[dict]) -> str:
    return " and ".join(object_phrase(o) for o in objects)


def reverse_script(script: list[dict]) -> list[dict]:
    return [dict(e, event=REVERSED_EVENT[e["event"]]) for e in reversed(script)]


# ---------------------------------------------------------------------------
# rendering


def shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2 - 0.5
    if shape == "triangle":
        return np.abs(xx - c) <= (yy + 0.5) / 2.0
    raise ValueError(f"unknown shape {shape!r}")


def _timeline(event: str, length: int, x0: int, travel: int):
    """Per-frame (visible, x) for one event spread over ``length`` frames."""
    half = length // 2
    out = []
    for j in range(length):
        if event == "appears":
            out.append((j >= half, x0))
        elif event == "disappears":
            out.append((j < half, x0))
        else:
            sign = -1 if event == "moves left" else 1
            u = j / (length - 1)
            out.append((True, x0 + sign * int(round(travel * u))))
    return out


def _start_x(event: str, r: np.random.Generator, spec: SyntheticSpec) -> int:
    max_x = spec.canvas - spec.object_size
    if event == "moves left":
        return int(r.integers(spec.travel, max_x + 1))
    if event == "moves right":
        return int(r.integers(0, max_x - spec.travel + 1))
    return int(r.integers(0, max_x + 1))


def render(objects: list[dict], states: list[list[tuple[bool, int]]], spec: SyntheticSpec) -> np.ndarray:
    n = len(states[0])
    frames = np.zeros((n, spec.canvas, spec.canvas, 3), dtype=np.uint8)
    s = spec.object_size
    for obj, timeline in zip(objects, states):
        mask = shape_mask(obj["shape"], s)
        color = np.array(COLORS[obj["color"]], dtype=np.uint8)
        y = obj["y"]
        for i, (visible, x) in enumerate(timeline):
            if visible:
                frames[i, y : y + s, x : x + s][mask] = color
    return frames


def _pick_objects(r: np.random.Generator, spec: SyntheticSpec, count: int) -> list[dict]:
    colors = list(r.choice(len(spec.colors), size=count, replace=False))
    halves = list(r.permutation(2))
    band = spec.canvas // 2
    objs = []
    for k in range(count):
        y_lo = halves[k] * band
        y_hi = min(y_lo + band - spec.object_size, spec.canvas - spec.object_size)
        objs.append(
            {
                "color": spec.colors[colors[k]],
                "shape": spec.shapes[int(r.integers(len(spec.shapes)))],
                "y": int(r.integers(y_lo, y_hi + 1)),
            }
        )
    return objs


def make_video(r: np.random.Generator, spec: SyntheticSpec, two_events: bool):
    """Render one clip; returns ``(frames, script)``."""
    t = spec.frames_per_clip
    if not two_events:
        (obj,) = _pick_objects(r, spec, 1)
        ev = spec.events[int(r.integers(len(spec.events)))]
        states = [_timeline(ev, t, _start_x(ev, r, spec), spec.travel)]
        script = [{"color": obj["color"], "shape": obj["shape"], "event": ev}]
        return render([obj], states, spec), script
    objs = _pick_objects(r, spec, 2)
    evs = [spec.events[int(r.integers(len(spec.events)))] for _ in objs]
    first = t // 2
    seg_lengths = (first, t - first)
    states = []
    for k, (obj, ev) in enumerate(zip(objs, evs)):
        tl = _timeline(ev, seg_lengths[k], _start_x(ev, r, spec), spec.travel)
        if k == 0:
            states.append(tl + [tl[-1]] * seg_lengths[1])
        else:
            states.append([tl[0]] * seg_lengths[0] + tl)
    script = [{"color": o["color"], "shape": o["shape"], "event": e} for o, e in zip(objs, evs)]
    return render(objs, states, spec), script


def make_qa(r: np.random.Generator, script: list[dict]) -> dict:
    e = script[int(r.integers(len(script)))]
    if r.random() < 0.5:
        return {"question": f"what color is the {e['shape']} ?", "answer": e["color"]}
    return {"question": f"what does the {e['color']} {e['shape']} do ?", "answer": e["event"]}


def _exact_subset(r: np.random.Generator, n: int, fraction: float) -> set[int]:
    k = int(round(fraction * n))
    return set(int(i) for i in r.permutation(n)[:k])


def generate_synthetic_corpus(spec: SyntheticSpec) -> tuple[list[VideoClip], DatasetManifest]:
    """Render ``spec.n_clips`` clips and their manifest; fully determined by ``spec``."""
    layout = rng_mod.stream(spec.seed, f"synthetic-layout-{spec.kind}")
    two_event = _exact_subset(layout, spec.n_clips, spec.two_event_fraction if spec.kind == "video" else 0.5)
    with_qa = _exact_subset(layout, spec.n_clips, spec.qa_fraction if spec.kind == "video" else 0.0)
    width = max(4, len(str(spec.n_clips - 1)))
    clips, records = [], []
    for i in range(spec.n_clips):
        r = rng_mod.stream(spec.seed, f"synthetic-{spec.kind}", i)
        clip_id = f"{spec.id_prefix}{i:0{width}d}"
        if spec.kind == "image":
            objs = _pick_objects(r, spec, 2 if i in two_event else 1)
            xs = [[(True, _start_x("appears", r, spec))] for _ in objs]
            frames = render(objs, xs, spec)
            script = [{"color": o["color"], "shape": o["shape"], "event": "static"} for o in objs]
            caption = image_caption(objs)
            qa = []
        else:
            frames, script = make_video(r, spec, i in two_event)
            caption = caption_from_script(script)
            qa = [make_qa(r, script)] if i in with_qa else []
        clips.append(VideoClip(frames, clip_id, {"script": script}))
        records.append(ManifestRecord(clip_id, f"frames/{clip_id}.vofr", [caption], qa))
    return clips, DatasetManifest(records)


def split_manifest(manifest: DatasetManifest, splits: dict) -> dict[str, DatasetManifest]:
    """Carve consecutive record ranges named by ``splits`` (name -> count)."""
    out, start = {}, 0
    for name, count in splits.items():
        out[name] = DatasetManifest(manifest.records[start : start + count], manifest.root)
        start += count
    return out


# ---------------------------------------------------------------------------
# pixel-level parsing


def _classify_shape(mask: np.ndarray) -> str:
    ys, xs = np.nonzero(mask)
    box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    fill = len(ys) / box
    if fill > 0.95:
        return "square"
    if fill > 0.65:
        return "circle"
    return "triangle"


def describe_frames(frames: np.ndarray) -> list[dict]:
    """Recover the event script of a rendered clip from its pixels."""
    found = []
    for color, rgb in COLORS.items():
        masks = np.all(frames == np.array(rgb, dtype=np.uint8), axis=-1)
        visible = masks.reshape(len(frames), -1).any(axis=1)
        if not visible.any():
            continue
        shape = _classify_shape(masks[int(np.argmax(visible))])
        xs = [float(np.nonzero(m)[1].mean()) if v else None for m, v in zip(masks, visible)]
        changes = [
            i for i in range(1, len(frames)) if visible[i] != visible[i - 1] or (visible[i] and xs[i] != xs[i - 1])
        ]
        if not changes:
            continue
        if not visible[0]:
            event = "appears"
        elif not visible[-1]:
            event = "disappears"
        else:
            event = "moves left" if xs[-1] < xs[0] else "moves right"
        found.append((changes[0], {"color": color, "shape": shape, "event": event}))
    found.sort(key=lambda item: item[0])
    return [e for _, e in found]


def corpus_summary(manifest: DatasetManifest) -> dict:
    """Counts and fractions of a generated corpus, as printed by ``vidtext synth``."""
    n = len(manifest)
    two = sum(any(" then " in c for c in r.captions) for r in manifest.records)
    qa = sum(bool(r.qa) for r in manifest.records)
    return {
        "n_clips": n,
        "two_event_clips": two,
        "two_event_fraction": two / n if n else 0.0,
        "qa_clips": qa,
        "qa_fraction": qa / n if n else 0.0,
        "captions": sum(len(r.captions) for r in manifest.records),
    }
