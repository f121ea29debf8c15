"""Losses, generation targets and training loops for Gen, Disc and GAD models."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from gadlab import labeltok as lt
from gadlab import numcore as nc
from gadlab.errors import ConfigError, DivergenceError, UsageError
from gadlab.numcore import Tensor
from gadlab.seqmodel import Layout, TinyDecoder, assemble_sequence, class_rows, collate, gather_rows
from gadlab.synthgen import NONE_LABEL, StreamSample

log = logging.getLogger(__name__)


class Mode(str, Enum):
    GEN = "gen"
    DISC = "disc"
    GAD = "gad"


class Variant(str, Enum):
    LABEL_JOINT = "label_joint"
    LABEL_2STAGE = "label_2stage"
    CONTEXT = "context"
    CONTEXT_SEP = "context_sep"
    NEXT = "next"
    PAST = "past"
    PREV_DISC = "prev_disc"
    PREV_DISC_PLUS = "prev_disc_plus"


class Unify(str, Enum):
    DISC_FIRST = "discfirst"
    GEN_FIRST = "genfirst"
    PARALLEL = "parallel"


UNIFY_LAYOUT = {Unify.DISC_FIRST: Layout.DISC_FIRST, Unify.GEN_FIRST: Layout.GEN_FIRST,
                Unify.PARALLEL: Layout.PARALLEL}
PREV_VARIANTS = (Variant.PREV_DISC, Variant.PREV_DISC_PLUS)


@dataclass
class TrainConfig:
    mode: Mode = Mode.DISC
    gad_variant: Variant = Variant.CONTEXT
    unify: Unify = Unify.DISC_FIRST
    lam: float = 1.0
    lr: float = 1e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    epochs: int = 4
    stage2_epochs: int | None = None
    batch_size: int = 32
    seed: int = 0
    past_k: int = 2
    append_task: bool = False
    stop_grad_cls: bool = False
    cls_source: str = "cls"
    start_token: str = "bos"
    restrict_gen_loss: bool = False
    single_step: bool = False
    long_len: int = 32
    checkpoint_every: int = 0

    def __post_init__(self):
        try:
            self.mode = Mode(self.mode)
            self.gad_variant = Variant(self.gad_variant)
            self.unify = Unify(self.unify)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.cls_source not in ("cls", "last_visual"):
            raise ConfigError(f"unknown cls_source {self.cls_source!r}")
        if self.start_token not in ("bos", "cls"):
            raise ConfigError(f"unknown start_token {self.start_token!r}")

    @property
    def phases(self) -> int:
        return 2 if self.mode is Mode.GAD and self.gad_variant is Variant.LABEL_2STAGE else 1

    @property
    def uses_prev_head(self) -> bool:
        return self.mode is Mode.GAD and self.gad_variant in PREV_VARIANTS

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (v.value if isinstance(v, Enum) else v) for k, v in d.items()}


@dataclass
class LossBreakdown:
    step: int
    lr: float
    L_cls: float
    L_gen: float
    total: float


# ---------------------------------------------------------------- losses

def loss_generative(logits: Tensor, targets, mask=None) -> Tensor:
    """Summed token NLL per sequence, averaged over the batch.

    ``logits`` (B, K, V) or (K, V); ``targets`` (B, K) or (K,) including EOS.
    """
    tgt = np.asarray(targets)
    if tgt.size == 0 or (mask is not None and not np.asarray(mask).any()):
        raise UsageError("empty generation target")
    nll = nc.cross_entropy(logits, tgt, mask)
    n_seq = 1 if tgt.ndim == 1 else tgt.shape[0]
    return nc.scale(nc.sum_all(nll), 1.0 / n_seq)


def loss_discriminative(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over the batch; a single 1-D logit row gives -log p(label)."""
    y = np.asarray(labels)
    return nc.mean_all(nc.cross_entropy(logits, y))


# ---------------------------------------------------------------- targets

def _label_ids(label: int, vocab: lt.Vocabulary) -> list[int]:
    if label == NONE_LABEL:
        return [lt.NONE]
    return list(lt.tokenize_label(int(label), vocab).ids)


def build_generation_target(sample: StreamSample, variant: Variant | str, vocab: lt.Vocabulary,
                            past_k: int = 2, task_names: Sequence[str] | None = None,
                            append_task: bool = False, eos: bool = True) -> list[int]:
    """Token ids of the generation target, EOS terminated."""
    try:
        variant = Variant(variant)
    except ValueError:
        raise ConfigError(f"unknown GAD variant {variant!r}") from None
    if sample.query == "task":
        if task_names is None:
            raise ConfigError("task query needs task names")
        out = lt.tokenize_text(task_names[sample.task_id], vocab)
    else:
        out = _label_ids(sample.next_label if sample.query == "next" else sample.label, vocab)
    if variant in (Variant.LABEL_JOINT, Variant.LABEL_2STAGE) or variant in PREV_VARIANTS:
        pass
    elif variant is Variant.CONTEXT:
        out = out + [lt.SEP] + _label_ids(sample.prev_label, vocab)
    elif variant is Variant.CONTEXT_SEP:
        out = _label_ids(sample.prev_label, vocab)
    elif variant is Variant.NEXT:
        out = out + [lt.SEP] + _label_ids(sample.next_label, vocab)
    elif variant is Variant.PAST:
        past = sample.history[-past_k:] if past_k > 0 else ()
        out = out + [lt.SEP] + ([t for l in past for t in _label_ids(l, vocab)] or [lt.NONE])
    if append_task:
        if task_names is None:
            raise ConfigError("append_task needs task names")
        out = out + [lt.SEP] + lt.tokenize_text(task_names[sample.task_id], vocab)
    return out + [lt.EOS] if eos else out


def _target_class(sample: StreamSample, background_id: int | None = None) -> tuple[str, int]:
    """(head, class id) of a sample given its query kind."""
    if sample.query == "task":
        return "task_class", sample.task_id
    if sample.query == "next":
        nxt = sample.next_label
        if nxt == NONE_LABEL:
            nxt = sample.episode.background_id if background_id is None else background_id
        return "step_class", nxt
    return "step_class", sample.label


# ---------------------------------------------------------------- encoding

@dataclass
class Encoded:
    sample_id: str
    query_ids: list[int]
    frames: np.ndarray
    frame_pad: np.ndarray
    head: str
    cls_target: int
    gen_target: list[int]
    prev_target: int
    label: int


def encode(samples: Sequence[StreamSample], vocab: lt.Vocabulary, cfg: TrainConfig,
           queries: dict[str, str], task_names: Sequence[str] | None = None, n_classes: int | None = None
           ) -> list[Encoded]:
    qcache: dict[str, list[int]] = {}
    variant = cfg.gad_variant if cfg.mode is Mode.GAD else Variant.LABEL_JOINT
    out = []
    for s in samples:
        if s.query not in qcache:
            qcache[s.query] = lt.tokenize_text(queries[s.query], vocab)
        frames, pad = s.window(cfg.long_len)
        head, y = _target_class(s)
        gen = build_generation_target(s, variant, vocab, cfg.past_k, task_names, cfg.append_task,
                                      eos=not cfg.single_step)
        prev = s.prev_label if s.prev_label != NONE_LABEL else (n_classes if n_classes is not None else -1)
        out.append(Encoded(s.sample_id, qcache[s.query], frames, pad, head, int(y), gen, int(prev), s.label))
    return out


def _start_id(cfg: TrainConfig) -> int:
    return lt.CLS if cfg.start_token == "cls" else lt.BOS


def layout_for(cfg: TrainConfig, phase: int = 1) -> Layout:
    if cfg.mode is Mode.GEN:
        return Layout.GEN
    if cfg.mode is Mode.DISC or cfg.uses_prev_head:
        return Layout.DISC
    if cfg.gad_variant is Variant.LABEL_2STAGE:
        return Layout.DISC_FIRST if phase == 1 else Layout.DISC
    return UNIFY_LAYOUT[cfg.unify]


def assemble(items: Sequence[Encoded], model: TinyDecoder, cfg: TrainConfig, layout: Layout):
    use_cls = cfg.cls_source == "cls"
    second = cfg.mode is Mode.GAD and cfg.gad_variant is Variant.PREV_DISC_PLUS
    seqs = [assemble_sequence(e.query_ids, e.frames, e.frame_pad, layout, e.gen_target, model.config.max_len,
                              _start_id(cfg), use_cls, second, model.config.cls2_id) for e in items]
    if layout is Layout.PARALLEL:
        return collate([s[0] for s in seqs]), collate([s[1] for s in seqs])
    return collate(seqs)


# ---------------------------------------------------------------- step losses

def _class_loss(model: TinyDecoder, rows: Tensor, items: Sequence[Encoded]) -> Tensor:
    heads = np.array([e.head for e in items])
    y = np.array([e.cls_target for e in items])
    B = len(items)
    total = None
    for head in ("step_class", "task_class"):
        idx = np.nonzero(heads == head)[0]
        if not idx.size:
            continue
        sub = rows if idx.size == B else nc.embedding(rows, idx)
        nll = nc.sum_all(nc.cross_entropy(model.head_logits(sub, head), y[idx]))
        total = nll if total is None else total + nll
    return nc.scale(total, 1.0 / B)


def _gen_loss(model: TinyDecoder, hidden: Tensor, batch, cfg: TrainConfig,
              label_cols: Sequence[int] | None) -> Tensor:
    rows = gather_rows(hidden, batch.gen_pos)
    logits = model.head_logits(rows, "lm")
    tgt = batch.gen_tgt
    if cfg.restrict_gen_loss:
        if label_cols is None:
            raise UsageError("restrict_gen_loss needs the label token columns")
        cols = np.asarray(label_cols)
        B, K, V = logits.shape
        flat = nc.transpose(nc.reshape(logits, (B * K, V)), (1, 0))
        logits = nc.reshape(nc.transpose(nc.embedding(flat, cols), (1, 0)), (B, K, len(cols)))
        lookup = {int(c): i for i, c in enumerate(cols)}
        tgt = np.vectorize(lambda t: lookup.get(int(t), 0))(tgt) if tgt.size else tgt
    return loss_generative(logits, tgt, batch.gen_mask)


def step_losses(model: TinyDecoder, items: Sequence[Encoded], cfg: TrainConfig, phase: int = 1,
                label_cols: Sequence[int] | None = None) -> tuple[Tensor, float, float]:
    """(total loss tensor, L_cls value, L_gen value) for one batch."""
    layout = layout_for(cfg, phase)
    if cfg.mode is Mode.GEN:
        b = assemble(items, model, cfg, layout)
        g = _gen_loss(model, model.forward(b), b, cfg, label_cols)
        return g, 0.0, g.item()
    if cfg.mode is Mode.DISC:
        b = assemble(items, model, cfg, layout)
        c = _class_loss(model, class_rows(model, model.forward(b), b, cfg.cls_source), items)
        return c, c.item(), 0.0
    if cfg.uses_prev_head:
        b = assemble(items, model, cfg, layout)
        h = model.forward(b)
        c = _class_loss(model, class_rows(model, h, b, cfg.cls_source), items)
        pos = b.cls2_pos if cfg.gad_variant is Variant.PREV_DISC_PLUS else b.cls_pos
        prev_rows = nc.take_positions(h, pos)
        p = nc.mean_all(nc.cross_entropy(model.head_logits(prev_rows, "prev_class"),
                                         np.array([e.prev_target for e in items])))
        return c + nc.scale(p, cfg.lam), c.item(), p.item()
    if cfg.gad_variant is Variant.LABEL_2STAGE:
        b = assemble(items, model, cfg, layout)
        h = model.forward(b)
        if phase == 1:
            g = _gen_loss(model, h, b, cfg, label_cols)
            return g, 0.0, g.item()
        c = _class_loss(model, class_rows(model, h, b, cfg.cls_source), items)
        return c, c.item(), 0.0
    if layout is Layout.PARALLEL:
        bd, bg = assemble(items, model, cfg, layout)
        c = _class_loss(model, class_rows(model, model.forward(bd), bd, cfg.cls_source), items)
        g = _gen_loss(model, model.forward(bg, detach_cls=cfg.stop_grad_cls), bg, cfg, label_cols)
    else:
        b = assemble(items, model, cfg, layout)
        h = model.forward(b)
        c = _class_loss(model, class_rows(model, h, b, cfg.cls_source), items)
        hg = model.forward(b, detach_cls=True) if cfg.stop_grad_cls else h
        g = _gen_loss(model, hg, b, cfg, label_cols)
    return c + nc.scale(g, cfg.lam), c.item(), g.item()


def loss_gad(model: TinyDecoder, items: Sequence[Encoded], cfg: TrainConfig, layout: Layout | str,
             step: int = 0) -> LossBreakdown:
    """Loss breakdown for a GAD batch; ``layout`` must match the configured unification order."""
    if cfg.mode is not Mode.GAD:
        raise UsageError("loss_gad needs a GAD configuration")
    if Layout(layout) is not layout_for(cfg):
        raise UsageError(f"layout {Layout(layout).value} does not match unify={cfg.unify.value}")
    total, c, g = step_losses(model, items, cfg)
    return LossBreakdown(step, float("nan"), c, g, total.item())


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    model: TinyDecoder
    trace: list[LossBreakdown] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def train(cfg: TrainConfig, data: Sequence[Encoded] | Callable[[int], Sequence[Encoded]], model: TinyDecoder,
          label_cols: Sequence[int] | None = None, checkpoint_dir: str | Path | None = None,
          on_step: Callable[[LossBreakdown], None] | None = None) -> TrainResult:
    """AdamW training with linear warmup; ``data`` is a fixed list or a per-epoch callable."""
    from gadlab.seqmodel import save_checkpoint

    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model)
    model.stop_grad_cls = cfg.stop_grad_cls
    step = 0
    for phase in range(1, cfg.phases + 1):
        stage = "cls_only" if phase == 2 else "finetune"
        params = model.set_stage(stage)
        opt = nc.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        epochs = cfg.epochs if phase == 1 or cfg.stage2_epochs is None else cfg.stage2_epochs
        per_epoch = [data(e) for e in range(epochs)] if callable(data) else None
        sizes = [len(per_epoch[e]) if per_epoch else len(data) for e in range(epochs)]
        total_steps = sum(-(-n // cfg.batch_size) for n in sizes)
        k = 0
        for e in range(epochs):
            items = per_epoch[e] if per_epoch else data
            for idx in _batches(len(items), cfg.batch_size, rng):
                batch = [items[i] for i in idx]
                k += 1
                lr = nc.lr_schedule(k, total_steps, cfg.lr, cfg.warmup_ratio)
                opt.zero_grad()
                total, lc, lg = step_losses(model, batch, cfg, phase, label_cols)
                tv = total.item()
                if not np.isfinite(tv):
                    raise DivergenceError(step, tv)
                nc.backward(total)
                opt.step(lr)
                rec = LossBreakdown(step, lr, lc, lg, tv)
                result.trace.append(rec)
                if on_step:
                    on_step(rec)
                step += 1
                if checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    path = Path(checkpoint_dir) / f"step{step:06d}.ckpt"
                    save_checkpoint(model, path)
                    result.checkpoints.append(str(path))
        log.info("phase %d done after %d steps", phase, step)
    model.set_stage("finetune")
    return result


def write_trace(trace: Sequence[LossBreakdown], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "L_cls", "L_gen", "total"])
        for r in trace:
            w.writerow([r.step, repr(r.lr), repr(r.L_cls), repr(r.L_gen), repr(r.total)])
