"""Encoder-decoder transformer over video frames and text.

Two ways of feeding a clip to the encoder:

* ``full``: the patch tokens of all frames plus the instruction text form one
  sequence with unrestricted self-attention. Every patch token carries a
  per-frame temporal embedding (zero at initialisation).
* ``fid``: each frame is encoded on its own together with a copy of the
  instruction text; the per-frame outputs are concatenated for the decoder.
  Optional temporal embeddings are added to those outputs afterwards.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import rng as rng_mod
from .media import TextTokenizer, extract_patches
from .tensor import Tensor, apply_primitive as P

IGNORE = -100


@dataclass
class ModelConfig:
    vocab_size: int = 200
    hidden: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    image_size: int = 32
    patch_size: int = 16
    channels: int = 3
    max_frames: int = 8
    max_text_len: int = 32
    max_target_len: int = 34
    variant: str = "full"
    fid_temporal_embeddings: bool = True
    tie_head: bool = False
    head_init: str = "zeros"
    init_std: float = 0.02
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.max_frames < 8:
            raise ValueError("max_frames must be >= 8")
        if self.variant not in ("full", "fid"):
            raise ValueError(f"variant must be 'full' or 'fid', got {self.variant!r}")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.head_init not in ("zeros", "normal"):
            raise ValueError("head_init must be 'zeros' or 'normal'")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown model config keys {sorted(extra)}")
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = cfg.hidden, cfg.hidden * cfg.ffn_mult, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "patch.w": (cfg.patch_dim, d),
        "patch.b": (d,),
        "spatial_pos": (cfg.num_patches, d),
        "temporal": (cfg.max_frames, d),
        "text_pos": (cfg.max_text_len, d),
        "dec_pos": (cfg.max_target_len, d),
    }

    def attn(prefix):
        for m in "qkvo":
            shapes[f"{prefix}.w{m}"] = (d, d)
            shapes[f"{prefix}.b{m}"] = (d,)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes.update({f"{prefix}.w1": (d, f), f"{prefix}.b1": (f,), f"{prefix}.w2": (f, d), f"{prefix}.b2": (d,)})

    for i in range(cfg.enc_layers):
        ln(f"enc{i}.ln1"), attn(f"enc{i}.attn"), ln(f"enc{i}.ln2"), ffn(f"enc{i}.ffn")
    ln("enc.ln_f")
    for i in range(cfg.dec_layers):
        ln(f"dec{i}.ln1"), attn(f"dec{i}.self"), ln(f"dec{i}.ln2"), attn(f"dec{i}.cross")
        ln(f"dec{i}.ln3"), ffn(f"dec{i}.ffn")
    ln("dec.ln_f")
    if not cfg.tie_head:
        shapes["head.w"] = (d, v)
    return shapes


class VideoToTextModel:
    """Parameters plus the forward computations; ``params`` maps names to tensors."""

    def __init__(self, config: ModelConfig, tokenizer: TextTokenizer | None = None, params=None):
        if tokenizer is not None and len(tokenizer) != config.vocab_size:
            raise ValueError(f"tokenizer has {len(tokenizer)} words, config says {config.vocab_size}")
        self.config = config
        self.tokenizer = tokenizer
        self.params: dict[str, Tensor] = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, Tensor]:
        cfg = self.config
        out = {}
        for name, shape in param_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if name == "temporal" or (name == "head.w" and cfg.head_init == "zeros"):
                arr = np.zeros(shape)
            elif name.endswith(".g"):
                arr = np.ones(shape)
            elif len(shape) == 1 and (leaf.startswith("b") or name.endswith(".b")):
                arr = np.zeros(shape)
            else:
                arr = rng_mod.stream(cfg.seed, f"init/{name}").normal(0.0, cfg.init_std, size=shape)
            out[name] = Tensor(arr, requires_grad=True)
        return out

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def head(self) -> Tensor:
        if self.config.tie_head:
            return P("transpose", [self.params["tok_emb"]], {"perm": (1, 0)})
        return self.params["head.w"]


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    patches: np.ndarray  # (B, T, P, patch_dim)
    src: np.ndarray  # (B, Ls) token ids, PAD-filled
    src_valid: np.ndarray  # (B, Ls) bool
    dec_in: np.ndarray | None = None  # (B, Lt)
    labels: np.ndarray | None = None  # (B, Lt), IGNORE where padded

    @property
    def size(self) -> int:
        return self.patches.shape[0]


def _pad(rows: Sequence[Sequence[int]], value: int, length: int | None = None) -> np.ndarray:
    length = max(len(r) for r in rows) if length is None else length
    out = np.full((len(rows), length), value, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def collate(samples, cfg: ModelConfig, pad_id: int = 0, with_targets: bool = True) -> Batch:
    frames = [s.frames.frames for s in samples]
    n_frames = {f.shape[0] for f in frames}
    if len(n_frames) != 1:
        raise ValueError(f"all clips in a batch need the same frame count, got {sorted(n_frames)}")
    t = n_frames.pop()
    if t > cfg.max_frames:
        raise ValueError(f"{t} frames exceeds max_frames={cfg.max_frames}")
    for s in samples:
        if len(s.source_tokens) > cfg.max_text_len:
            raise ValueError(f"source of {len(s.source_tokens)} tokens exceeds max_text_len={cfg.max_text_len}")
    patches = np.stack([extract_patches(f, cfg.patch_size) for f in frames])
    src_rows = [s.source_tokens or [pad_id] for s in samples]
    src = _pad(src_rows, pad_id)
    valid = _pad([[1] * len(s.source_tokens) for s in samples], 0, src.shape[1]).astype(bool)
    batch = Batch(patches, src, valid)
    if with_targets:
        for s in samples:
            if len(s.target_tokens) < 2:
                raise ValueError("target must be framed with BOS and EOS")
            if len(s.target_tokens) - 1 > cfg.max_target_len:
                raise ValueError(f"target of {len(s.target_tokens)} tokens exceeds max_target_len")
        batch.dec_in = _pad([s.target_tokens[:-1] for s in samples], pad_id)
        batch.labels = _pad([s.target_tokens[1:] for s in samples], IGNORE)
    return batch


# ---------------------------------------------------------------------------
# building blocks


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return P("add", [P("matmul", [x, w]), b])


def layer_norm(model: VideoToTextModel, x: Tensor, prefix: str) -> Tensor:
    return P("layer_norm", [x, model[prefix + ".g"], model[prefix + ".b"]], {"eps": model.config.ln_eps})


def attention(model: VideoToTextModel, prefix: str, xq: Tensor, xkv: Tensor, blocked: np.ndarray | None) -> Tensor:
    """Multi-head attention; ``blocked`` (broadcastable to B,H,Lq,Lk) marks disallowed pairs."""
    cfg = model.config
    b, lq, d = xq.shape
    lk = xkv.shape[1]
    h, dh = cfg.heads, d // cfg.heads
    q = linear(xq, model[prefix + ".wq"], model[prefix + ".bq"])
    k = linear(xkv, model[prefix + ".wk"], model[prefix + ".bk"])
    v = linear(xkv, model[prefix + ".wv"], model[prefix + ".bv"])
    q = P("transpose", [P("reshape", [q], {"shape": (b, lq, h, dh)})], {"perm": (0, 2, 1, 3)})
    kt = P("transpose", [P("reshape", [k], {"shape": (b, lk, h, dh)})], {"perm": (0, 2, 3, 1)})
    v = P("transpose", [P("reshape", [v], {"shape": (b, lk, h, dh)})], {"perm": (0, 2, 1, 3)})
    scores = P("scale", [P("matmul", [q, kt])], {"factor": 1.0 / math.sqrt(dh)})
    if blocked is not None:
        scores = P("masked_fill", [scores], {"mask": blocked, "value": -np.inf})
    att = P("softmax", [scores], {"axis": -1})
    ctx = P("matmul", [att, v])
    ctx = P("reshape", [P("transpose", [ctx], {"perm": (0, 2, 1, 3)})], {"shape": (b, lq, d)})
    return linear(ctx, model[prefix + ".wo"], model[prefix + ".bo"])


def feed_forward(model: VideoToTextModel, prefix: str, x: Tensor) -> Tensor:
    hdn = P("gelu", [linear(x, model[prefix + ".w1"], model[prefix + ".b1"])])
    return linear(hdn, model[prefix + ".w2"], model[prefix + ".b2"])


def key_blocked(valid: np.ndarray) -> np.ndarray:
    """(B, L) validity -> (B, 1, 1, L) blocked mask."""
    return ~valid[:, None, None, :]


def causal_blocked(length: int) -> np.ndarray:
    return np.triu(np.ones((length, length), dtype=bool), k=1)[None, None]


def run_encoder(model: VideoToTextModel, x: Tensor, blocked: np.ndarray | None) -> Tensor:
    for i in range(model.config.enc_layers):
        hq = layer_norm(model, x, f"enc{i}.ln1")
        x = P("add", [x, attention(model, f"enc{i}.attn", hq, hq, blocked)])
        x = P("add", [x, feed_forward(model, f"enc{i}.ffn", layer_norm(model, x, f"enc{i}.ln2"))])
    return layer_norm(model, x, "enc.ln_f")


def embed_patches(model: VideoToTextModel, patches: np.ndarray, temporal: bool) -> Tensor:
    """(B, T, P, patch_dim) pixels -> (B, T, P, D) tokens: projection + spatial (+ temporal)."""
    b, t, p, _ = patches.shape
    x = linear(Tensor(patches), model["patch.w"], model["patch.b"])
    spatial_ids = np.broadcast_to(np.arange(p), (b, t, p))
    x = P("add", [x, P("embedding_gather", [model["spatial_pos"]], {"ids": spatial_ids})])
    if temporal:
        frame_ids = np.broadcast_to(np.arange(t)[:, None], (b, t, p))
        x = P("add", [x, P("embedding_gather", [model["temporal"]], {"ids": frame_ids})])
    return x


def embed_text(model: VideoToTextModel, ids: np.ndarray) -> Tensor:
    """Token + text-position embeddings for ids of shape (..., L)."""
    pos = np.broadcast_to(np.arange(ids.shape[-1]), ids.shape)
    return P(
        "add",
        [
            P("embedding_gather", [model["tok_emb"]], {"ids": ids}),
            P("embedding_gather", [model["text_pos"]], {"ids": pos}),
        ],
    )


@dataclass
class EncoderOutput:
    states: Tensor  # (B, L, D)
    valid: np.ndarray  # (B, L) bool


def encode(model: VideoToTextModel, batch: Batch, use_temporal: bool = True) -> EncoderOutput:
    """Encoder states for a batch. ``use_temporal=False`` drops the temporal addition."""
    cfg = model.config
    b, t, p, _ = batch.patches.shape
    ls = batch.src.shape[1]
    if t > cfg.max_frames:
        raise ValueError(f"{t} frames exceeds max_frames={cfg.max_frames}")
    if ls > cfg.max_text_len:
        raise ValueError(f"text length {ls} exceeds max_text_len={cfg.max_text_len}")
    d = cfg.hidden
    if cfg.variant == "full":
        video = embed_patches(model, batch.patches, temporal=use_temporal)
        video = P("reshape", [video], {"shape": (b, t * p, d)})
        x = P("concat", [video, embed_text(model, batch.src)], {"axis": 1})
        valid = np.concatenate([np.ones((b, t * p), dtype=bool), batch.src_valid], axis=1)
        return EncoderOutput(run_encoder(model, x, key_blocked(valid)), valid)

    video = embed_patches(model, batch.patches, temporal=False)
    text_ids = np.broadcast_to(batch.src[:, None, :], (b, t, ls))
    x = P("concat", [video, embed_text(model, text_ids)], {"axis": 2})  # (B, T, P+Ls, D)
    x = P("reshape", [x], {"shape": (b * t, p + ls, d)})
    frame_valid = np.concatenate([np.ones((b, p), dtype=bool), batch.src_valid], axis=1)  # (B, P+Ls)
    per_frame_valid = np.repeat(frame_valid, t, axis=0)
    states = run_encoder(model, x, key_blocked(per_frame_valid))
    states = P("reshape", [states], {"shape": (b, t, p + ls, d)})
    if cfg.fid_temporal_embeddings and use_temporal:
        frame_ids = np.broadcast_to(np.arange(t)[:, None], (b, t, p + ls))
        states = P("add", [states, P("embedding_gather", [model["temporal"]], {"ids": frame_ids})])
    states = P("reshape", [states], {"shape": (b, t * (p + ls), d)})
    valid = np.tile(frame_valid, (1, t))
    return EncoderOutput(states, valid)


def decode_logits(model: VideoToTextModel, enc: EncoderOutput, dec_in: np.ndarray) -> Tensor:
    """Teacher-forced decoder: (B, Lt) ids -> (B, Lt, V) logits."""
    cfg = model.config
    lt = dec_in.shape[1]
    if lt > cfg.max_target_len:
        raise ValueError(f"decoder input of {lt} tokens exceeds max_target_len={cfg.max_target_len}")
    pos = np.broadcast_to(np.arange(lt), dec_in.shape)
    y = P(
        "add",
        [
            P("embedding_gather", [model["tok_emb"]], {"ids": dec_in}),
            P("embedding_gather", [model["dec_pos"]], {"ids": pos}),
        ],
    )
    self_blocked = causal_blocked(lt)
    cross_blocked = key_blocked(enc.valid)
    for i in range(cfg.dec_layers):
        h = layer_norm(model, y, f"dec{i}.ln1")
        y = P("add", [y, attention(model, f"dec{i}.self", h, h, self_blocked)])
        h = layer_norm(model, y, f"dec{i}.ln2")
        y = P("add", [y, attention(model, f"dec{i}.cross", h, enc.states, cross_blocked)])
        y = P("add", [y, feed_forward(model, f"dec{i}.ffn", layer_norm(model, y, f"dec{i}.ln3"))])
    y = layer_norm(model, y, "dec.ln_f")
    return P("matmul", [y, model.head()])


def forward_teacher_forced(model: VideoToTextModel, batch: Batch) -> Tensor:
    return decode_logits(model, encode(model, batch), batch.dec_in)


def caption_loss(model: VideoToTextModel, batch: Batch) -> Tensor:
    """Mean token cross-entropy over non-padded target positions."""
    logits = forward_teacher_forced(model, batch)
    return P("cross_entropy_from_logits", [logits], {"targets": batch.labels, "ignore_index": IGNORE})


# ---------------------------------------------------------------------------
# decoding


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def _repeat_encoder(enc: EncoderOutput, index: np.ndarray) -> EncoderOutput:
    return EncoderOutput(Tensor(enc.states.data[index], _copy=False), enc.valid[index])


def next_token_logprobs(model: VideoToTextModel, enc: EncoderOutput, prefixes: np.ndarray) -> np.ndarray:
    logits = decode_logits(model, enc, prefixes)
    return _log_softmax(logits.data[:, -1, :])


def greedy_decode(model: VideoToTextModel, batch: Batch, max_len: int = 32) -> list[list[int]]:
    """Argmax decoding for every item in ``batch``; results exclude BOS and EOS."""
    tok = model.tokenizer
    bos, eos = (tok.bos_id, tok.eos_id) if tok else (1, 2)
    max_len = min(max_len, model.config.max_target_len)
    enc = encode(model, batch)
    n = batch.size
    seqs = np.full((n, 1), bos, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    for _ in range(max_len):
        lp = next_token_logprobs(model, enc, seqs)
        nxt = np.where(done, eos, lp.argmax(axis=-1))
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        done |= nxt == eos
        if done.all():
            break
    return [_strip(row, eos) for row in seqs[:, 1:]]


def sample_decode(
    model: VideoToTextModel,
    batch: Batch,
    rng: np.random.Generator,
    max_len: int = 32,
    return_finished: bool = False,
):
    """Multinomial decoding; results exclude BOS and EOS.

    With ``return_finished`` each result is ``(tokens, ended_with_eos)``.
    """
    tok = model.tokenizer
    bos, eos = (tok.bos_id, tok.eos_id) if tok else (1, 2)
    max_len = min(max_len, model.config.max_target_len)
    enc = encode(model, batch)
    n = batch.size
    seqs = np.full((n, 1), bos, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    for _ in range(max_len):
        p = np.exp(next_token_logprobs(model, enc, seqs))
        u = rng.random(n)
        nxt = np.minimum((p.cumsum(axis=-1) < (u * p.sum(axis=-1))[:, None]).sum(axis=-1), p.shape[1] - 1)
        nxt = np.where(done, eos, nxt)
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        done |= nxt == eos
        if done.all():
            break
    out = [_strip(row, eos) for row in seqs[:, 1:]]
    if return_finished:
        return [(o, bool(d)) for o, d in zip(out, done)]
    return out


def _strip(row: np.ndarray, eos: int) -> list[int]:
    out = []
    for t in row:
        if t == eos:
            break
        out.append(int(t))
    return out


@dataclass
class Hypothesis:
    tokens: list[int]  # generated tokens, EOS included when finished
    logprob: float
    finished: bool

    def score(self, length_penalty: float) -> float:
        return self.logprob / (max(len(self.tokens), 1) ** length_penalty)


@dataclass
class BeamResult:
    tokens: list[int]  # without EOS
    score: float
    finished: bool
    hypotheses: list[Hypothesis]


def beam_search(
    model: VideoToTextModel,
    batch: Batch,
    beam: int = 4,
    max_len: int = 32,
    length_penalty: float = 1.0,
) -> BeamResult:
    """Length-normalised beam search for the single item in ``batch``.

    Candidates are ranked by cumulative log-probability, ties going to the
    lexicographically smaller token sequence. A candidate ending in EOS retires
    when it ranks within the top ``beam``; the ``beam`` best retired hypotheses
    by ``logprob / len**length_penalty`` are kept. Search stops after
    ``max_len`` tokens, when no live hypothesis remains, or once ``beam``
    hypotheses have retired and the best live hypothesis, scored at its current
    length, does not beat the worst kept one. The best kept hypothesis wins;
    with none retired the best unfinished one is returned with ``finished=False``.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if batch.size != 1:
        raise ValueError("beam_search decodes one item at a time")
    tok = model.tokenizer
    bos, eos = (tok.bos_id, tok.eos_id) if tok else (1, 2)
    max_len = min(max_len, model.config.max_target_len)
    enc = encode(model, batch)
    alive: list[Hypothesis] = [Hypothesis([], 0.0, False)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        prefixes = np.array([[bos, *h.tokens] for h in alive], dtype=np.int64)
        lp = next_token_logprobs(model, _repeat_encoder(enc, np.zeros(len(alive), dtype=np.int64)), prefixes)
        cands = []
        for hi, h in enumerate(alive):
            row = lp[hi]
            top = np.argsort(-row, kind="stable")[: 2 * beam]
            for t in top:
                cands.append((h.logprob + float(row[t]), h.tokens + [int(t)]))
        cands.sort(key=lambda c: (-c[0], c[1]))
        new_alive = []
        for rank, (score, toks) in enumerate(cands):
            if toks[-1] == eos:
                if rank < beam:
                    finished.append(Hypothesis(toks, score, True))
            elif len(new_alive) < beam:
                new_alive.append(Hypothesis(toks, score, False))
            if len(new_alive) >= beam and rank >= beam - 1:
                break
        finished = sorted(finished, key=lambda h: (-h.score(length_penalty), h.tokens))[:beam]
        alive = new_alive
        if not alive:
            break
        if len(finished) >= beam and alive[0].score(length_penalty) <= finished[-1].score(length_penalty):
            break
    pool = finished if finished else alive
    ranked = sorted(pool, key=lambda h: (-h.score(length_penalty), h.tokens))
    best = ranked[0]
    out = best.tokens[:-1] if best.finished else best.tokens
    return BeamResult(out, best.score(length_penalty), best.finished, ranked)
