"""Inference: greedy label generation, text-to-label mapping, one-step classification, latency."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from rapidfuzz.distance import Levenshtein

from gadlab import labeltok as lt
from gadlab.errors import ConfigError, UsageError
from gadlab.numcore import Tensor
from gadlab.seqmodel import InputSequence, Layout, TinyDecoder, class_rows, collate
from gadlab.trainer import Encoded, Mode, TrainConfig, Unify, Variant, layout_for


@dataclass
class DecodeResult:
    ids: list[int]
    text: str
    forwards: int
    truncated: bool
    hidden: list[np.ndarray] = field(default_factory=list, repr=False)


@dataclass
class PredictionRecord:
    sample_id: str
    frame_idx: int
    pred_class: int
    gt_class: int
    forwards: int
    wall_ns: int
    gen_ids: list[int] = field(default_factory=list)
    gen_text: str = ""
    truncated: bool = False


def _prefix_tail(cfg: TrainConfig) -> list[int]:
    start = lt.CLS if cfg.start_token == "cls" else lt.BOS
    if cfg.mode is Mode.GAD and layout_for(cfg) is Layout.DISC_FIRST:
        return [lt.CLS, start]
    return [start]


def _seq(e: Encoded, tail: list[int], max_len: int | None) -> InputSequence:
    frames, pad = e.frames, e.frame_pad
    if max_len is not None:
        over = len(e.query_ids) + len(frames) + len(tail) - max_len
        if over > 0:
            frames, pad = frames[over:], pad[over:]
    return InputSequence(list(e.query_ids), frames, pad, list(tail), Layout.GEN)


def greedy_decode(model: TinyDecoder, items: Sequence[Encoded], cfg: TrainConfig, vocab: lt.Vocabulary,
                  max_tokens: int = 8, allowed: Sequence[int] | None = None, keep_hidden: bool = False,
                  allow_eos: bool = True) -> list[DecodeResult]:
    """Argmax decoding in lockstep over a batch; one decoder forward per emitted token.

    ``allowed`` restricts the argmax to those token ids plus EOS (unless
    ``allow_eos`` is off, for single-token models trained without EOS).
    Ties resolve to the lowest token id.
    """
    if max_tokens < 1:
        raise ConfigError("max_tokens must be >= 1")
    prefix = _prefix_tail(cfg)
    B = len(items)
    gen = [[] for _ in range(B)]
    hid = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    forwards = np.zeros(B, dtype=np.int64)
    mask = None
    if allowed is not None:
        keep = np.zeros(model.config.vocab_size, dtype=bool)
        keep[np.asarray(list(allowed), dtype=np.int64)] = True
        keep[lt.EOS] = allow_eos
        mask = ~keep
    for _ in range(max_tokens):
        live = np.nonzero(~done)[0]
        if not live.size:
            break
        batch = collate([_seq(items[b], prefix + gen[b], model.config.max_len) for b in live])
        h = model.forward(batch)
        rows = h.data[:, -1, :]
        logits = model.head_logits(Tensor(rows), "lm").data
        if mask is not None:
            logits = np.where(mask, -np.inf, logits)
        nxt = logits.argmax(axis=-1)
        for j, b in enumerate(live):
            forwards[b] += 1
            tok = int(nxt[j])
            gen[b].append(tok)
            if keep_hidden:
                hid[b].append(rows[j].copy())
            if tok == lt.EOS:
                done[b] = True
    out = []
    for b in range(B):
        ids = gen[b][:-1] if done[b] else gen[b]
        out.append(DecodeResult(ids, lt.detokenize(ids, vocab), int(forwards[b]), not bool(done[b]),
                                hid[b]))
    return out


def map_text_to_label(text: str, surfaces: Sequence[str]) -> tuple[int, int]:
    """(class id, edit distance) of the closest surface; ties go to the lowest id."""
    if not surfaces:
        raise ConfigError("empty label set")
    best, best_d = 0, None
    for i, s in enumerate(surfaces):
        d = Levenshtein.distance(text, s)
        if best_d is None or d < best_d:
            best, best_d = i, d
    return best, int(best_d)


def label_part(text: str) -> str:
    """Leading field of a structured target (text before the first separator)."""
    return text.split("|", 1)[0].strip()


def classify_one_step(model: TinyDecoder, items: Sequence[Encoded], cfg: TrainConfig,
                      vocab: lt.Vocabulary | None = None, head: str = "step_class"
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(class ids, scores, forwards per sample) from the classification head.

    Disc and DiscFirst/Parallel GAD models need exactly one forward.  GenFirst
    models place [CLS] after the generated tokens, so they decode first.
    """
    if cfg.mode is Mode.GEN:
        raise UsageError("generative models have no classification head in use")
    tail_cls = [lt.CLS] if cfg.cls_source == "cls" else []
    if cfg.uses_prev_head and cfg.gad_variant is Variant.PREV_DISC_PLUS:
        tail_cls = tail_cls + [model.config.cls2_id]
    forwards = np.ones(len(items), dtype=np.int64)
    if cfg.mode is Mode.GAD and cfg.unify is Unify.GEN_FIRST and not cfg.uses_prev_head \
            and cfg.gad_variant is not Variant.LABEL_2STAGE:
        if vocab is None:
            raise UsageError("GenFirst classification needs the vocabulary for decoding")
        dec = greedy_decode(model, items, cfg, vocab)
        tails = [[lt.CLS if cfg.start_token == "cls" else lt.BOS] + d.ids + [lt.EOS] + tail_cls for d in dec]
        forwards += np.array([d.forwards for d in dec])
    else:
        tails = [tail_cls] * len(items)
    seqs = [_seq(e, t, model.config.max_len) for e, t in zip(items, tails)]
    for s, t in zip(seqs, tails):
        if cfg.cls_source == "cls":
            s.cls_position = s.vis_start + len(s.frames) + len(t) - len(tail_cls)
    # group equal tail lengths so each batch has aligned positions
    order = sorted(range(len(seqs)), key=lambda i: len(seqs[i].tail_ids))
    out_ids = np.zeros(len(items), dtype=np.int64)
    out_scores: list[np.ndarray | None] = [None] * len(items)
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and len(seqs[order[j]].tail_ids) == len(seqs[order[i]].tail_ids):
            j += 1
        group = order[i:j]
        batch = collate([seqs[k] for k in group])
        h = model.forward(batch)
        rows = class_rows(model, h, batch, cfg.cls_source)
        logits = model.head_logits(rows, head).data
        for r, k in enumerate(group):
            out_ids[k] = int(logits[r].argmax())
            out_scores[k] = logits[r]
        i = j
    return out_ids, np.stack(out_scores) if out_scores else np.zeros((0, 0)), forwards


def predict(model: TinyDecoder, items: Sequence[Encoded], cfg: TrainConfig, vocab: lt.Vocabulary,
            batch_size: int = 256, allowed: Sequence[int] | None = None, max_tokens: int = 8
            ) -> list[PredictionRecord]:
    """Batched predictions: Gen models decode and map text to labels, others classify."""
    surfaces = lt.label_surfaces(vocab)
    out: list[PredictionRecord] = []
    for lo in range(0, len(items), batch_size):
        chunk = items[lo:lo + batch_size]
        t0 = time.perf_counter_ns()
        if cfg.mode is Mode.GEN:
            res = greedy_decode(model, chunk, cfg, vocab, max_tokens, allowed)
            wall = (time.perf_counter_ns() - t0) // max(len(chunk), 1)
            for e, r in zip(chunk, res):
                cls, _ = map_text_to_label(label_part(r.text), surfaces)
                out.append(PredictionRecord(e.sample_id, _frame(e), cls, e.cls_target, r.forwards, wall,
                                            r.ids, r.text, r.truncated))
        else:
            ids, _, fw = classify_one_step(model, chunk, cfg, vocab)
            wall = (time.perf_counter_ns() - t0) // max(len(chunk), 1)
            for e, c, f in zip(chunk, ids, fw):
                out.append(PredictionRecord(e.sample_id, _frame(e), int(c), e.cls_target, int(f), wall))
    return out


def _frame(e: Encoded) -> int:
    try:
        return int(e.sample_id.rsplit(":", 1)[1])
    except (IndexError, ValueError):
        return -1


@dataclass
class LatencyReport:
    path: str
    fps: float
    mean_forwards: float
    n_samples: int
    forwards: list[int]


def bench_latency(model: TinyDecoder, items: Sequence[Encoded], cfg: TrainConfig, vocab: lt.Vocabulary,
                  warmup: int = 3, max_tokens: int = 8) -> LatencyReport:
    """Single-sample wall-clock throughput; warm-up samples are excluded from timing."""
    for e in items[:warmup]:
        _one(model, e, cfg, vocab, max_tokens)
    forwards = []
    t0 = time.perf_counter()
    for e in items:
        forwards.append(_one(model, e, cfg, vocab, max_tokens))
    dt = time.perf_counter() - t0
    path = "gen" if cfg.mode is Mode.GEN else "disc"
    return LatencyReport(path, len(items) / dt if dt > 0 else float("inf"),
                         float(np.mean(forwards)) if forwards else 0.0, len(items), forwards)


def _one(model, e, cfg, vocab, max_tokens) -> int:
    if cfg.mode is Mode.GEN:
        return greedy_decode(model, [e], cfg, vocab, max_tokens)[0].forwards
    return int(classify_one_step(model, [e], cfg, vocab)[2][0])


def write_predictions(records: Sequence[PredictionRecord], path) -> None:
    with open(path, "w") as fh:
        fh.write("sample_id\tframe_idx\tpred_class\tgt_class\tforwards\twall_ns\tgen_text\n")
        for r in records:
            fh.write(f"{r.sample_id}\t{r.frame_idx}\t{r.pred_class}\t{r.gt_class}\t{r.forwards}\t"
                     f"{r.wall_ns}\t{r.gen_text}\n")
