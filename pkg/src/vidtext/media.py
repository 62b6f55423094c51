"""Text tokenization, frame handling and dataset manifests."""

from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
ANSWER_WORDS = ("yes", "no")
MAX_ORDER_DIGIT = 31

CAPTION_PROMPT = "what does the video describe ?"
MATCH_PROMPT = "does the video describe {} ?"
FOM_GEN_PROMPT = "what is the correct frame order in the video ?"
FOM_CON_PROMPT = "are the frames in the video in the correct order ?"
PROMPTS = (CAPTION_PROMPT, MATCH_PROMPT.format(""), FOM_GEN_PROMPT, FOM_CON_PROMPT)

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")
_PUNCT_RE = re.compile(r"[^\w\s]")

RAW_MAGIC = b"VOFR"


class DataError(ValueError):
    """Malformed clip, frame file or manifest."""


def split_words(text: str) -> list[str]:
    """Lower-case word/punctuation split used everywhere text is tokenized."""
    return _TOKEN_RE.findall(text.lower())


def normalize_text(text: str) -> str:
    return " ".join(split_words(text))


def normalize_answer(text: str) -> str:
    """Answer normalization for exact-match scoring: lower, no punctuation, single spaces."""
    return " ".join(_PUNCT_RE.sub(" ", text.lower()).split())


class TextTokenizer:
    """Word-level tokenizer with a fixed vocabulary.

    Ids are dense in ``[0, V)``; the four specials always occupy ids 0-3.
    """

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if tuple(words[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(words)) != len(words):
            raise ValueError("vocabulary contains duplicates")
        self.words = words
        self.vocab = {w: i for i, w in enumerate(words)}
        self.pad_id, self.bos_id, self.eos_id, self.unk_id = range(4)

    def __len__(self) -> int:
        return len(self.words)

    def __eq__(self, other) -> bool:
        return isinstance(other, TextTokenizer) and self.words == other.words

    @property
    def yes_id(self) -> int:
        return self.vocab["yes"]

    @property
    def no_id(self) -> int:
        return self.vocab["no"]

    def tokenize(self, text: str) -> list[int]:
        return [self.vocab.get(w, self.unk_id) for w in split_words(text)]

    def detokenize(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            out.append(self.words[i])
        return " ".join(out)

    def frame_target(self, ids: Sequence[int]) -> list[int]:
        """Wrap ``ids`` as a decoder target: BOS ... EOS."""
        return [self.bos_id, *ids, self.eos_id]


def build_vocab(manifests: Iterable["DatasetManifest"], extra_texts: Iterable[str] = ()) -> TextTokenizer:
    """Vocabulary over every caption, question and answer plus prompts and order digits."""
    seen: set[str] = set()
    texts = list(PROMPTS) + list(extra_texts)
    for manifest in manifests:
        for rec in manifest.records:
            texts.extend(rec.captions)
            for qa in rec.qa:
                texts.extend((qa["question"], qa["answer"]))
    for t in texts:
        seen.update(split_words(t))
    seen.update(str(d) for d in range(MAX_ORDER_DIGIT + 1))
    seen.update(ANSWER_WORDS)
    seen.difference_update(SPECIALS)
    return TextTokenizer([*SPECIALS, *sorted(seen)])


# ---------------------------------------------------------------------------
# clips


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) uint8
    clip_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[0] < 1:
            raise DataError(f"clip {self.clip_id!r}: expected T x H x W x C frames with T >= 1, got {f.shape}")
        if f.shape[-1] != 3:
            raise DataError(f"clip {self.clip_id!r}: expected 3 channels, got {f.shape[-1]}")
        self.frames = f.astype(np.uint8, copy=False)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray) -> "VideoClip":
        return VideoClip(frames, self.clip_id, dict(self.meta))


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize ``(T, H, W, C)`` uint8 frames with bilinear interpolation."""
    t, h, w, c = frames.shape
    if (h, w) == (out_h, out_w):
        return frames.copy()
    y0, y1, wy = _bilinear_axis(h, out_h)
    x0, x1, wx = _bilinear_axis(w, out_w)
    f = frames.astype(np.float64)
    rows = f[:, y0] * (1 - wy)[None, :, None, None] + f[:, y1] * wy[None, :, None, None]
    out = rows[:, :, x0] * (1 - wx)[None, None, :, None] + rows[:, :, x1] * wx[None, None, :, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_shorter_side(clip: VideoClip, target_px: int = 32) -> VideoClip:
    """Scale so the shorter side equals ``target_px``, then center-crop to a square."""
    if target_px <= 0:
        raise ValueError("target_px must be positive")
    if clip.frames.size == 0:
        raise DataError("empty clip")
    _, h, w, _ = clip.frames.shape
    if h <= w:
        new_h, new_w = target_px, int(round(w * target_px / h))
    else:
        new_h, new_w = int(round(h * target_px / w)), target_px
    resized = bilinear_resize(clip.frames, new_h, new_w)
    top = (new_h - target_px) // 2
    left = (new_w - target_px) // 2
    return clip.with_frames(resized[:, top : top + target_px, left : left + target_px])


def linear_indices(num_frames: int, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    if num_frames < 1:
        raise DataError("empty clip")
    return (np.arange(n) * num_frames) // n


def sample_frames_linear(clip: VideoClip, n: int = 8) -> VideoClip:
    return clip.with_frames(clip.frames[linear_indices(clip.num_frames, n)])


@dataclass
class PatchGrid:
    tokens: np.ndarray  # (T, P, D)
    patch_size: int

    @property
    def num_patches(self) -> int:
        return self.tokens.shape[1]


def extract_patches(frames: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut ``(T, H, W, C)`` frames into ``(T, P, patch*patch*C)`` pixel vectors scaled to [0, 1].

    Patches are numbered row-major over the frame.
    """
    t, h, w, c = frames.shape
    if h % patch_size or w % patch_size:
        raise DataError(f"frame size H={h}, W={w} is not divisible by patch_size={patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = frames.reshape(t, gh, patch_size, gw, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(t, gh * gw, patch_size * patch_size * c).astype(np.float32) / 255.0


def patchify(clip: VideoClip, patch_size: int, weight: np.ndarray, bias: np.ndarray | None = None) -> PatchGrid:
    """Project every patch of every frame to ``weight.shape[1]`` dims, keeping frame order."""
    patches = extract_patches(clip.frames, patch_size)
    tokens = patches @ weight.astype(np.float32)
    if bias is not None:
        tokens = tokens + bias
    return PatchGrid(tokens, patch_size)


# ---------------------------------------------------------------------------
# frame storage


def write_raw_frames(path: str | os.PathLike, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<4I", *frames.shape) + frames.tobytes())


def read_raw_frames(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RAW_MAGIC or len(blob) < 20:
        raise DataError(f"{path}: not a VOFR frame file")
    t, h, w, c = struct.unpack("<4I", blob[4:20])
    body = blob[20:]
    if len(body) != t * h * w * c:
        raise DataError(f"{path}: expected {t * h * w * c} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(t, h, w, c).copy()


def write_png_frames(directory: str | os.PathLike, frames: np.ndarray) -> None:
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(frames) - 1)))
    for i, frame in enumerate(frames):
        Image.fromarray(frame).save(directory / f"{i:0{width}d}.png")


def read_frames(path: str | os.PathLike) -> np.ndarray:
    """Load frames from a VOFR file or a directory of numbered PNGs."""
    path = Path(path)
    if path.is_dir():
        from PIL import Image

        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise DataError(f"{path}: no PNG frames")
        return np.stack([np.asarray(Image.open(p).convert("RGB")) for p in files])
    if not path.exists():
        raise DataError(f"{path}: frames not found")
    return read_raw_frames(path)


def load_clip(path: str | os.PathLike, clip_id: str = "") -> VideoClip:
    return VideoClip(read_frames(path), clip_id or Path(path).stem)


# ---------------------------------------------------------------------------
# manifests

_RECORD_KEYS = {"clip_id", "frames_path", "captions", "qa"}


@dataclass
class ManifestRecord:
    clip_id: str
    frames_path: str
    captions: list[str]
    qa: list[dict]

    def to_json(self) -> dict:
        return {"clip_id": self.clip_id, "frames_path": self.frames_path, "captions": self.captions, "qa": self.qa}


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: str = "."

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.clip_id in seen:
                raise DataError(f"duplicate clip_id {rec.clip_id!r}")
            seen.add(rec.clip_id)

    def __len__(self) -> int:
        return len(self.records)

    def frames_file(self, rec: ManifestRecord) -> Path:
        p = Path(rec.frames_path)
        return p if p.is_absolute() else Path(self.root) / p

    def captions(self) -> list[str]:
        return [c for rec in self.records for c in rec.captions]

    def dump(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def parse_record(obj: object, where: str = "") -> ManifestRecord:
    prefix = f"{where}: " if where else ""
    if not isinstance(obj, dict):
        raise DataError(f"{prefix}record must be a JSON object")
    keys = set(obj)
    if keys != _RECORD_KEYS:
        missing, extra = _RECORD_KEYS - keys, keys - _RECORD_KEYS
        raise DataError(f"{prefix}bad fields (missing {sorted(missing)}, unexpected {sorted(extra)})")
    if not isinstance(obj["clip_id"], str) or not isinstance(obj["frames_path"], str):
        raise DataError(f"{prefix}clip_id and frames_path must be strings")
    caps = obj["captions"]
    if not isinstance(caps, list) or not all(isinstance(c, str) and c.strip() for c in caps):
        raise DataError(f"{prefix}captions must be a list of non-empty strings")
    qa = obj["qa"]
    if not isinstance(qa, list):
        raise DataError(f"{prefix}qa must be a list")
    for pair in qa:
        if (
            not isinstance(pair, dict)
            or set(pair) != {"question", "answer"}
            or not all(isinstance(pair[k], str) and pair[k].strip() for k in pair)
        ):
            raise DataError(f"{prefix}qa entries need non-empty 'question' and 'answer' strings")
    if not caps and not qa:
        raise DataError(f"{prefix}record {obj['clip_id']!r} has neither captions nor qa")
    return ManifestRecord(obj["clip_id"], obj["frames_path"], list(caps), [dict(p) for p in qa])


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    records = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            rec = parse_record(obj, f"{path}:{lineno}")
            if rec.clip_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate clip_id {rec.clip_id!r}")
            seen.add(rec.clip_id)
            records.append(rec)
    return DatasetManifest(records, str(path.parent))
