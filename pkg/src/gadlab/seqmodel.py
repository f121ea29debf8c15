"""Tiny causal decoder with a visual adapter, learnable [CLS] token, LM head and class heads.

The base decoder (token/position embeddings, attention, MLP, norms) is
randomly initialized and frozen; fine-tuning touches only LoRA deltas, the
visual adapter, the [CLS] embedding, the output heads and rows of newly
added (Extend) tokens.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from gadlab import labeltok as lt
from gadlab import numcore as nc
from gadlab.errors import ConfigError, DependencyError, EmptyPoolError, IntegrityError, UsageError
from gadlab.numcore import Parameter, Tensor


class Layout(str, Enum):
    GEN = "gen"
    DISC = "disc"
    DISC_FIRST = "gad-discfirst"
    GEN_FIRST = "gad-genfirst"
    PARALLEL = "gad-parallel"


LORA_TARGETS = ("wq", "wk", "wv", "wo", "w1", "w2")
# softmax is shift invariant in a key bias, so the key projection has none
UNBIASED = ("wk",)


@dataclass
class ModelConfig:
    vocab_size: int
    n_classes: int
    feature_dim: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 64
    n_tasks: int = 1
    n_prev_classes: int = 0
    second_cls: bool = False
    lora_rank: int = 4
    lora_alpha: float = 8.0
    extend_ids: tuple[int, ...] = ()
    tie_label_head: bool = False
    label_token_ids: tuple[int, ...] = ()
    dtype: str = "float32"

    def __post_init__(self):
        self.extend_ids = tuple(int(i) for i in self.extend_ids)
        self.label_token_ids = tuple(int(i) for i in self.label_token_ids)
        if self.d_model <= 0 or self.n_layers <= 0 or self.n_heads <= 0 or self.d_ff <= 0:
            raise ConfigError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.lora_rank < 0:
            raise ConfigError("lora_rank must be >= 0")
        if self.vocab_size <= lt.N_SPECIAL or self.n_classes < 1 or self.feature_dim < 1:
            raise ConfigError("vocab_size, n_classes and feature_dim must be positive")
        if self.tie_label_head and len(self.label_token_ids) != self.n_classes:
            raise ConfigError("tie_label_head needs one label token id per class")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unknown dtype {self.dtype!r}")

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank if self.lora_rank else 0.0

    @property
    def cls2_id(self) -> int:
        return self.vocab_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extend_ids"] = list(self.extend_ids)
        d["label_token_ids"] = list(self.label_token_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------- model

class TinyDecoder:
    """Parameters plus the forward computation.  ``params`` is an ordered name -> Parameter map."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params
        self.lm_calls = 0
        self.forward_calls = 0
        self.stop_grad_cls = False

    @property
    def np_dtype(self):
        return np.dtype(self.config.dtype)

    def p(self, name: str) -> Parameter:
        return self.params[name]

    # -- embeddings
    def token_table(self, detach_cls: bool = False) -> Tensor:
        cfg = self.config
        table: Tensor = self.p("tok_emb")
        rows = list(cfg.extend_ids) + [lt.CLS]
        cls = self.p("cls_emb")
        if detach_cls:
            cls = nc.detach(cls)
        vals = [self.p("ext_emb")] if cfg.extend_ids else []
        table = nc.replace_rows(table, rows, nc.concat(vals + [cls], axis=0))
        if cfg.second_cls:
            table = nc.concat([table, self.p("cls2_emb")], axis=0)
        return table

    def adapter(self, frames: Tensor) -> Tensor:
        h = nc.gelu(nc.matmul(frames, self.p("adapter.w1")) + self.p("adapter.b1"))
        return nc.matmul(h, self.p("adapter.w2")) + self.p("adapter.b2")

    def _linear(self, x: Tensor, layer: int, name: str) -> Tensor:
        pre = f"layer{layer}.{name}"
        y = nc.matmul(x, self.p(pre))
        if self.config.lora_rank and f"{pre}.lora_a" in self.params:
            a, b = self.p(f"{pre}.lora_a"), self.p(f"{pre}.lora_b")
            y = y + nc.scale(nc.matmul(nc.matmul(x, a), b), self.config.lora_scale)
        if name not in UNBIASED:
            y = y + self.p(f"{pre}.bias")
        return y

    def forward(self, batch: "Batch", detach_cls: bool = False) -> Tensor:
        """Hidden states (B, T, d) after the final norm."""
        cfg = self.config
        self.forward_calls += 1
        B, T = batch.ids.shape
        if T > cfg.max_len:
            raise ConfigError(f"sequence length {T} exceeds max_len {cfg.max_len}")
        table = self.token_table(detach_cls)
        x_tok = nc.embedding(table, batch.ids)
        parts = [nc.slice_axis(x_tok, 0, batch.vis_start, axis=1)] if batch.vis_start else []
        parts.append(self.adapter(Tensor(batch.frames.astype(self.np_dtype, copy=False))))
        parts.append(nc.slice_axis(x_tok, batch.vis_start + batch.n_vis, T, axis=1))
        x = nc.concat(parts, axis=1)
        x = x + nc.slice_axis(self.p("pos_emb"), 0, T, axis=0)

        H = cfg.n_heads
        dh = cfg.d_model // H
        blocked = ~batch.allowed()[:, None, :, :]
        for l in range(cfg.n_layers):
            h = nc.layer_norm(x, self.p(f"layer{l}.ln1.g"), self.p(f"layer{l}.ln1.b"))
            q = self._heads(self._linear(h, l, "wq"), B, T, H, dh)
            k = self._heads(self._linear(h, l, "wk"), B, T, H, dh)
            v = self._heads(self._linear(h, l, "wv"), B, T, H, dh)
            scores = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
            att = nc.softmax(nc.mask_fill(scores, blocked, -np.inf), axis=-1)
            ctx = nc.reshape(nc.transpose(nc.matmul(att, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
            x = x + self._linear(ctx, l, "wo")
            h = nc.layer_norm(x, self.p(f"layer{l}.ln2.g"), self.p(f"layer{l}.ln2.b"))
            x = x + self._linear(nc.gelu(self._linear(h, l, "w1")), l, "w2")
        return nc.layer_norm(x, self.p("lnf.g"), self.p("lnf.b"))

    @staticmethod
    def _heads(x: Tensor, B: int, T: int, H: int, dh: int) -> Tensor:
        return nc.transpose(nc.reshape(x, (B, T, H, dh)), (0, 2, 1, 3))

    # -- heads
    def head_logits(self, rows: Tensor, which: str) -> Tensor:
        """Logits from hidden rows (..., d).  ``which`` in {lm, step_class, task_class, prev_class}."""
        cfg = self.config
        if which == "lm":
            self.lm_calls += 1
            logits = nc.matmul(rows, self.p("lm.w")) + self.p("lm.b")
            if cfg.tie_label_head:
                logits = nc.replace_columns(logits, cfg.label_token_ids, self._class(rows, "step"))
            return logits
        if which == "step_class":
            return self._class(rows, "step")
        if which == "task_class":
            return self._class(rows, "task")
        if which == "prev_class":
            if not cfg.n_prev_classes:
                raise UsageError("model has no previous-action head")
            return self._class(rows, "prev")
        raise UsageError(f"unknown head {which!r}")

    def _class(self, rows: Tensor, name: str) -> Tensor:
        return nc.matmul(rows, self.p(f"head.{name}.w")) + self.p(f"head.{name}.b")

    # -- parameter partitions
    def trainable_names(self, stage: str = "finetune") -> list[str]:
        if stage == "cls_only":
            keep = lambda n: n in ("cls_emb", "cls2_emb") or n.startswith("head.") and n.split(".")[1] != "lm"
        elif stage == "finetune":
            keep = lambda n: (".lora_" in n or n.startswith(("adapter.", "head.", "lm.", "ext_emb"))
                              or n in ("cls_emb", "cls2_emb"))
        else:
            raise ConfigError(f"unknown trainable stage {stage!r}")
        return [n for n in self.params if keep(n)]

    def set_stage(self, stage: str = "finetune") -> list[Parameter]:
        live = set(self.trainable_names(stage))
        for n, p in self.params.items():
            p.trainable = n in live
        return [self.params[n] for n in self.params if n in live]

    def trainable_params(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}


def init_model(config: ModelConfig, seed: int = 0, copy_rows_from: Sequence[int] | None = None) -> TinyDecoder:
    """Deterministic initialization; the frozen base is random, LoRA B starts at zero.

    Extend-token rows copy randomly selected rows (from ``copy_rows_from``,
    default: every non-extend token) of the base embedding table.
    """
    cfg = config
    dt = np.dtype(cfg.dtype)
    rng = np.random.default_rng(seed)
    d, V, F = cfg.d_model, cfg.vocab_size, cfg.feature_dim
    params: dict[str, Parameter] = {}

    def add(name, arr, trainable):
        params[name] = Parameter(np.asarray(arr, dtype=dt), trainable=trainable, name=name)

    add("tok_emb", rng.standard_normal((V, d)), False)
    add("pos_emb", 0.5 * rng.standard_normal((cfg.max_len, d)), False)
    depth = math.sqrt(2 * cfg.n_layers)
    shapes = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "w1": (d, cfg.d_ff), "w2": (cfg.d_ff, d)}
    for l in range(cfg.n_layers):
        add(f"layer{l}.ln1.g", np.ones(d), False)
        add(f"layer{l}.ln1.b", np.zeros(d), False)
        add(f"layer{l}.ln2.g", np.ones(d), False)
        add(f"layer{l}.ln2.b", np.zeros(d), False)
        for name, (fi, fo) in shapes.items():
            std = 1.0 / math.sqrt(fi) / (depth if name in ("wo", "w2") else 1.0)
            add(f"layer{l}.{name}", std * rng.standard_normal((fi, fo)), False)
            if name not in UNBIASED:
                add(f"layer{l}.{name}.bias", np.zeros(fo), False)
            if cfg.lora_rank:
                # A is r x d_in in the usual notation; stored transposed for x @ A
                add(f"layer{l}.{name}.lora_a", rng.standard_normal((fi, cfg.lora_rank)) / math.sqrt(fi), True)
                add(f"layer{l}.{name}.lora_b", np.zeros((cfg.lora_rank, fo)), True)
    add("lnf.g", np.ones(d), False)
    add("lnf.b", np.zeros(d), False)

    add("adapter.w1", rng.standard_normal((F, d)) / math.sqrt(F), True)
    add("adapter.b1", np.zeros(d), True)
    add("adapter.w2", rng.standard_normal((d, d)) / math.sqrt(d), True)
    add("adapter.b2", np.zeros(d), True)
    add("cls_emb", rng.standard_normal((1, d)), True)
    if cfg.second_cls:
        add("cls2_emb", rng.standard_normal((1, d)), True)
    if cfg.extend_ids:
        pool = [i for i in range(lt.N_SPECIAL, V) if i not in set(cfg.extend_ids)]
        pool = list(copy_rows_from) if copy_rows_from is not None else pool
        src = rng.choice(pool, size=len(cfg.extend_ids))
        add("ext_emb", params["tok_emb"].data[src].copy(), True)
    head_std = 1.0 / math.sqrt(d)
    add("lm.w", head_std * rng.standard_normal((d, V)), True)
    add("lm.b", np.zeros(V), True)
    add("head.step.w", head_std * rng.standard_normal((d, cfg.n_classes)), True)
    add("head.step.b", np.zeros(cfg.n_classes), True)
    add("head.task.w", head_std * rng.standard_normal((d, cfg.n_tasks)), True)
    add("head.task.b", np.zeros(cfg.n_tasks), True)
    if cfg.n_prev_classes:
        add("head.prev.w", head_std * rng.standard_normal((d, cfg.n_prev_classes)), True)
        add("head.prev.b", np.zeros(cfg.n_prev_classes), True)
    model = TinyDecoder(cfg, params)
    model.set_stage("finetune")
    return model


# ---------------------------------------------------------------- sequences

@dataclass
class InputSequence:
    """One assembled sample.  Positions are absolute indices in the full sequence."""

    query_ids: list[int]
    frames: np.ndarray
    frame_pad: np.ndarray
    tail_ids: list[int]
    layout: Layout
    gen_positions: list[int] = field(default_factory=list)
    gen_targets: list[int] = field(default_factory=list)
    cls_position: int | None = None
    cls2_position: int | None = None

    @property
    def vis_start(self) -> int:
        return len(self.query_ids)

    @property
    def length(self) -> int:
        return len(self.query_ids) + len(self.frames) + len(self.tail_ids)

    @property
    def last_visual(self) -> int:
        return self.vis_start + len(self.frames) - 1


def assemble_sequence(query_ids: Sequence[int], frames: np.ndarray, frame_pad: np.ndarray, layout: Layout | str,
                      targets: Sequence[int] = (), max_len: int | None = None, start_token: int = lt.BOS,
                      use_cls: bool = True, second_cls: bool = False, cls2_id: int | None = None
                      ) -> InputSequence | tuple[InputSequence, InputSequence]:
    """Build the token/frame layout for one sample.

    ``targets`` is the generation target *including* its EOS terminator.
    Gen:        F_t ++ F_v ++ [BOS, u_<i]
    Disc:       F_t ++ F_v ++ [CLS]
    DiscFirst:  F_t ++ F_v ++ [CLS, BOS, u_<i]
    GenFirst:   F_t ++ F_v ++ [BOS, u...] ++ [CLS]
    Parallel:   (Disc sequence, Gen sequence) sharing the prefix.
    Over-long sequences drop their oldest visual frames.
    """
    layout = Layout(layout)
    if layout is Layout.PARALLEL:
        d = assemble_sequence(query_ids, frames, frame_pad, Layout.DISC, (), max_len, start_token,
                              use_cls, second_cls, cls2_id)
        g = assemble_sequence(query_ids, frames, frame_pad, Layout.GEN, targets, max_len, start_token)
        return d, g
    q = list(query_ids)
    targets = list(targets)
    if layout is not Layout.DISC and not targets:
        raise UsageError(f"layout {layout.value} needs generation targets")
    cls_tail = ([lt.CLS] if use_cls else []) + ([cls2_id] if second_cls else [])
    if layout is Layout.GEN:
        tail = [start_token] + targets[:-1]
    elif layout is Layout.DISC:
        tail = list(cls_tail)
    elif layout is Layout.DISC_FIRST:
        tail = cls_tail + [start_token] + targets[:-1]
    else:
        tail = [start_token] + targets + cls_tail
    frames = np.asarray(frames)
    frame_pad = np.asarray(frame_pad, dtype=bool)
    if max_len is not None:
        over = len(q) + len(frames) + len(tail) - max_len
        if over > 0:
            if over >= len(frames):
                raise ConfigError(f"max_len {max_len} cannot hold query and generation tokens")
            frames, frame_pad = frames[over:], frame_pad[over:]
    seq = InputSequence(q, frames, frame_pad, tail, layout)
    base = len(q) + len(frames)
    n_cls = len(cls_tail)
    if layout is Layout.GEN:
        seq.gen_positions = [base + i for i in range(len(targets))]
    elif layout is Layout.DISC_FIRST:
        seq.gen_positions = [base + n_cls + i for i in range(len(targets))]
    elif layout is Layout.GEN_FIRST:
        seq.gen_positions = [base + i for i in range(len(targets))]
    seq.gen_targets = targets if layout is not Layout.DISC else []
    if use_cls and layout is not Layout.GEN:
        off = len(targets) + 1 if layout is Layout.GEN_FIRST else 0
        seq.cls_position = base + off
    if second_cls and layout is not Layout.GEN:
        off = len(targets) + 1 if layout is Layout.GEN_FIRST else 0
        seq.cls2_position = base + off + (1 if use_cls else 0)
    return seq


@dataclass
class Batch:
    ids: np.ndarray
    frames: np.ndarray
    pad: np.ndarray
    vis_start: int
    n_vis: int
    gen_pos: np.ndarray
    gen_tgt: np.ndarray
    gen_mask: np.ndarray
    cls_pos: np.ndarray | None
    cls2_pos: np.ndarray | None
    last_visual: np.ndarray

    @property
    def size(self) -> int:
        return int(self.ids.shape[0])

    def allowed(self) -> np.ndarray:
        T = self.ids.shape[1]
        causal = np.tril(np.ones((T, T), dtype=bool))
        keys = ~self.pad[:, None, :] | np.eye(T, dtype=bool)[None]
        return causal[None] & keys


def collate(seqs: Sequence[InputSequence]) -> Batch:
    """Stack sequences; query ids are left-padded, tails right-padded, all pads masked as keys."""
    n_vis = {len(s.frames) for s in seqs}
    if len(n_vis) != 1:
        raise UsageError("sequences in a batch must carry the same number of frames")
    n_vis = n_vis.pop()
    lq = max(len(s.query_ids) for s in seqs)
    lt_ = max(len(s.tail_ids) for s in seqs)
    B, T = len(seqs), lq + n_vis + lt_
    ids = np.full((B, T), lt.PAD, dtype=np.int64)
    pad = np.ones((B, T), dtype=bool)
    F = seqs[0].frames.shape[1]
    frames = np.zeros((B, n_vis, F), dtype=seqs[0].frames.dtype)
    g = max((len(s.gen_targets) for s in seqs), default=0)
    gen_pos = np.zeros((B, g), dtype=np.int64)
    gen_tgt = np.zeros((B, g), dtype=np.int64)
    gen_mask = np.zeros((B, g), dtype=bool)
    has_cls = all(s.cls_position is not None for s in seqs)
    has_cls2 = all(s.cls2_position is not None for s in seqs)
    cls_pos = np.zeros(B, dtype=np.int64)
    cls2_pos = np.zeros(B, dtype=np.int64)
    last_vis = np.full(B, lq + n_vis - 1, dtype=np.int64)
    for b, s in enumerate(seqs):
        shift = lq - len(s.query_ids)
        ids[b, shift:lq] = s.query_ids
        pad[b, shift:lq] = False
        frames[b] = s.frames
        pad[b, lq:lq + n_vis] = s.frame_pad
        k = len(s.tail_ids)
        ids[b, lq + n_vis:lq + n_vis + k] = s.tail_ids
        pad[b, lq + n_vis:lq + n_vis + k] = False
        n = len(s.gen_targets)
        gen_pos[b, :n] = np.asarray(s.gen_positions) + shift
        gen_tgt[b, :n] = s.gen_targets
        gen_mask[b, :n] = True
        if has_cls:
            cls_pos[b] = s.cls_position + shift
        if has_cls2:
            cls2_pos[b] = s.cls2_position + shift
    return Batch(ids, frames, pad, lq, n_vis, gen_pos, gen_tgt, gen_mask,
                 cls_pos if has_cls else None, cls2_pos if has_cls2 else None, last_vis)


def gather_rows(hidden: Tensor, positions: np.ndarray) -> Tensor:
    """hidden (B, T, d) and positions (B, K) -> (B, K, d)."""
    B, K = positions.shape
    d = hidden.shape[-1]
    flat = nc.reshape(hidden, (B * hidden.shape[1], d))
    idx = (np.arange(B)[:, None] * hidden.shape[1] + positions).reshape(-1)
    return nc.reshape(nc.embedding(flat, idx), (B, K, d))


def class_rows(model: TinyDecoder, hidden: Tensor, batch: Batch, source: str = "cls") -> Tensor:
    """Classification representation per sample: the [CLS] state or the last visual state."""
    if source == "last_visual":
        return nc.take_positions(hidden, batch.last_visual)
    if batch.cls_pos is None:
        raise UsageError("class logits requested for a layout without [CLS]")
    return nc.take_positions(hidden, batch.cls_pos)


# ---------------------------------------------------------------- embedding export

POOLINGS = ("cls", "mean", "max", "first", "last")


def pool_generated(hidden_rows: np.ndarray, pooling: str) -> np.ndarray:
    """Pool (K, d) hidden states of generated-token positions."""
    if pooling not in POOLINGS[1:]:
        raise ConfigError(f"unknown pooling {pooling!r}")
    if hidden_rows.shape[0] == 0:
        raise EmptyPoolError("no generated tokens to pool")
    if pooling == "mean":
        return hidden_rows.mean(axis=0)
    if pooling == "max":
        return hidden_rows.max(axis=0)
    return hidden_rows[0] if pooling == "first" else hidden_rows[-1]


def write_embeddings_csv(path, rows: Sequence[tuple[str, int, str, np.ndarray]]) -> None:
    rows = list(rows)
    d = len(rows[0][3]) if rows else 0
    with open(path, "w") as fh:
        fh.write("sample_id,label_id,pooling," + ",".join(f"v{i}" for i in range(d)) + "\n")
        for sid, lab, pooling, vec in rows:
            fh.write(f"{sid},{lab},{pooling}," + ",".join(repr(float(x)) for x in vec) + "\n")


# ---------------------------------------------------------------- checkpoints

MAGIC = b"GADCKPT\x00"
FORMAT_VERSION = 1
_END = b"END\x00"
_CODES = {"float32": b"f", "float64": b"d"}
_DTYPES = {v: k for k, v in _CODES.items()}


def _tensor_block(name: str, arr: np.ndarray, trainable: bool) -> bytes:
    raw = name.encode()
    code = _CODES[str(arr.dtype)]
    head = struct.pack("<H", len(raw)) + raw + code + struct.pack("<BB", int(trainable), arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def encode_tensors(tensors: Sequence[tuple[str, np.ndarray, bool]], meta: dict) -> bytes:
    """Shared binary container: magic, version, JSON block, named tensor blocks, end marker."""
    blob = json.dumps(meta, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    out += [_tensor_block(n, a, t) for n, a, t in tensors]
    out.append(_END)
    return b"".join(out)


def decode_tensors(buf: bytes) -> tuple[dict, list[tuple[str, np.ndarray, bool]]]:
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise IntegrityError("truncated file")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(len(MAGIC)) != MAGIC:
        raise IntegrityError("bad magic bytes")
    version, n_meta = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    try:
        meta = json.loads(take(n_meta).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"corrupt header block: {e}") from None
    (count,) = struct.unpack("<I", take(4))
    tensors = []
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = take(n_name).decode()
        code = take(1)
        if code not in _DTYPES:
            raise IntegrityError(f"unknown precision code {code!r} for {name}")
        trainable, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = np.dtype(_DTYPES[code]).newbyteorder("<")
        arr = np.frombuffer(take(int(np.prod(shape)) * dt.itemsize), dtype=dt).reshape(shape)
        tensors.append((name, arr.astype(_DTYPES[code]), bool(trainable)))
    if take(len(_END)) != _END or pos != len(buf):
        raise IntegrityError("missing end marker or trailing bytes")
    return meta, tensors


def save_checkpoint(model: TinyDecoder, path) -> None:
    tensors = [(n, p.data, p.trainable) for n, p in model.params.items()]
    data = encode_tensors(tensors, {"kind": "model", "config": model.config.to_dict()})
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path, dtype: str | None = None, allow_cast: bool = False) -> TinyDecoder:
    """Load a model; converting between precisions needs ``allow_cast``."""
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise DependencyError(f"checkpoint {path} not found") from None
    meta, tensors = decode_tensors(buf)
    if meta.get("kind") != "model":
        raise IntegrityError("file holds no model")
    config = ModelConfig.from_dict(meta["config"])
    stored = config.dtype
    if dtype is not None and dtype != stored:
        if not allow_cast:
            raise ConfigError(f"checkpoint precision {stored} differs from requested {dtype}; set allow_cast")
        config = replace(config, dtype=dtype)
    reference = init_model(config, seed=0)
    if [n for n, _, _ in tensors] != list(reference.params):
        raise IntegrityError("tensor names do not match the model layout")
    params = {}
    for name, arr, trainable in tensors:
        if arr.shape != reference.params[name].shape:
            raise IntegrityError(f"shape mismatch for {name}: {arr.shape} vs {reference.params[name].shape}")
        params[name] = Parameter(arr.astype(config.dtype), trainable=trainable, name=name)
    return TinyDecoder(config, params)


def export_embeddings(model: TinyDecoder, items, cfg, vocab, pooling: str = "cls", max_tokens: int = 8):
    """Rows of (sample_id, label_id, pooling, vector).

    ``cls`` takes the [CLS] hidden state; the other poolings run greedy
    decoding and pool the states that emitted each generated label token.
    """
    from gadlab.decode import _seq, greedy_decode

    if pooling not in POOLINGS:
        raise ConfigError(f"unknown pooling {pooling!r}")
    rows = []
    if pooling == "cls":
        seqs = [_seq(e, [lt.CLS], model.config.max_len) for e in items]
        for s in seqs:
            s.cls_position = s.vis_start + len(s.frames)
        for lo in range(0, len(seqs), 256):
            batch = collate(seqs[lo:lo + 256])
            h = model.forward(batch).data
            for k, e in enumerate(items[lo:lo + 256]):
                rows.append((e.sample_id, e.label, pooling, h[k, batch.cls_pos[k]].copy()))
        return rows
    for lo in range(0, len(items), 256):
        chunk = items[lo:lo + 256]
        for e, r in zip(chunk, greedy_decode(model, chunk, cfg, vocab, max_tokens, keep_hidden=True)):
            states = np.array(r.hidden[:len(r.ids)]).reshape(len(r.ids), model.config.d_model)
            rows.append((e.sample_id, e.label, pooling, pool_generated(states, pooling)))
    return rows
