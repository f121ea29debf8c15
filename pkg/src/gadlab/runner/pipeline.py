"""End-to-end experiment plumbing: world -> vocabulary -> model -> training -> metrics."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from gadlab import decode as dec
from gadlab import evalkit as ek
from gadlab import labeltok as lt
from gadlab import synthgen as sg
from gadlab import trainer as tr
from gadlab.errors import ConfigError
from gadlab.seqmodel import ModelConfig, TinyDecoder, init_model

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    """Flat, fully defaulted experiment description (one key per field)."""

    command: str = "train"
    name: str = ""
    # world
    n_verbs: int = 8
    n_nouns: int = 40
    labels_per_verb: int = 5
    n_tasks: int = 4
    feature_dim: int = 32
    noise_sigma: float = 0.45
    background_rate: float = 0.2
    p_next: float = 0.8
    step_min: int = 4
    step_max: int = 10
    bg_min: int = 2
    bg_max: int = 6
    world_seed: int = 0
    n_episodes: int = 64
    episode_length: int = 64
    test_fraction: float = 0.25
    long_len: int = 16
    short_len: int = 4
    queries: str = "oad"
    # tokens
    strategy: str = "baseline"
    vocab_mode: str = "word"
    # model
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    lora_rank: int = 4
    lora_alpha: float = 8.0
    dtype: str = "float32"
    # training
    mode: str = "disc"
    variant: str = "context"
    unify: str = "discfirst"
    lam: float = 1.0
    lr: float = 3e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    epochs: int = 20
    stage2_epochs: int = 0
    batch_size: int = 32
    past_k: int = 2
    stop_grad_cls: bool = False
    cls_source: str = "cls"
    mask_decode: bool = False
    seeds: tuple[int, ...] = (0,)
    output_dir: str = ""
    # command-specific
    sweep: str = ""
    pooling: str = "cls"
    bench_samples: int = 100

    def __post_init__(self):
        if isinstance(self.seeds, (int, np.integer)):
            self.seeds = (int(self.seeds),)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        try:
            self.train_config(0)
            lt.Strategy(self.strategy)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.vocab_mode not in ("word", "char-chunk"):
            raise ConfigError(f"unknown vocab_mode {self.vocab_mode!r}")
        for q in self.query_kinds:
            if q not in sg.QUERIES:
                raise ConfigError(f"unknown query kind {q!r}")

    @property
    def query_kinds(self) -> tuple[str, ...]:
        return tuple(q.strip() for q in self.queries.split(",") if q.strip())

    def world_config(self) -> sg.WorldConfig:
        return sg.WorldConfig(self.n_verbs, self.n_nouns, self.labels_per_verb, self.n_tasks, self.feature_dim,
                              self.noise_sigma, self.background_rate, self.p_next,
                              (self.step_min, self.step_max), (self.bg_min, self.bg_max))

    def train_config(self, seed: int) -> tr.TrainConfig:
        return tr.TrainConfig(mode=self.mode, gad_variant=self.variant, unify=self.unify, lam=self.lam, lr=self.lr,
                              warmup_ratio=self.warmup_ratio, weight_decay=self.weight_decay, epochs=self.epochs,
                              stage2_epochs=self.stage2_epochs or None, batch_size=self.batch_size, seed=seed,
                              past_k=self.past_k, stop_grad_cls=self.stop_grad_cls, cls_source=self.cls_source,
                              long_len=self.long_len)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Bundle:
    world: sg.WorldSpec
    train: list[sg.Episode]
    test: list[sg.Episode]
    base_vocab: lt.Vocabulary


def build_bundle(cfg: ExperimentConfig) -> Bundle:
    world = sg.gen_world(cfg.world_config(), cfg.world_seed)
    train, test = sg.gen_episodes(world, cfg.n_episodes, cfg.episode_length, cfg.test_fraction, cfg.world_seed)
    queries = [sg.QUERIES[q] for q in sg.QUERY_KINDS] + world.task_names
    vocab = lt.build_vocabulary(world.labels, queries, cfg.vocab_mode)
    return Bundle(world, train, test, vocab)


def strategy_vocab(bundle: Bundle, strategy: str, seed: int = 0) -> lt.Vocabulary:
    return lt.apply_strategy(bundle.base_vocab, strategy, seed=seed)


def model_config(cfg: ExperimentConfig, vocab: lt.Vocabulary, world: sg.WorldSpec, tcfg: tr.TrainConfig,
                 **over) -> ModelConfig:
    n_q = max(len(lt.tokenize_text(sg.QUERIES[q], vocab)) for q in cfg.query_kinds)
    max_label = max(len(lt.tokenize_label(i, vocab).ids) for i in range(world.n_classes))
    tail = 2 + 2 * (max_label + 1) * (cfg.past_k + 2) + 4
    extend = tuple(range(vocab.base_size, vocab.size)) if vocab.strategy is lt.Strategy.EXTEND else ()
    kw = dict(vocab_size=vocab.size, n_classes=world.n_classes, feature_dim=cfg.feature_dim, d_model=cfg.d_model,
              n_layers=cfg.n_layers, n_heads=cfg.n_heads, d_ff=cfg.d_ff, max_len=n_q + cfg.long_len + tail,
              n_tasks=world.n_tasks, n_prev_classes=world.n_classes + 1 if tcfg.uses_prev_head else 0,
              second_cls=tcfg.uses_prev_head and tcfg.gad_variant is tr.Variant.PREV_DISC_PLUS,
              lora_rank=cfg.lora_rank, lora_alpha=cfg.lora_alpha, extend_ids=extend, dtype=cfg.dtype)
    kw.update(over)
    return ModelConfig(**kw)


def encode_split(samples: Sequence[sg.StreamSample], vocab: lt.Vocabulary, tcfg: tr.TrainConfig,
                 world: sg.WorldSpec) -> list[tr.Encoded]:
    return tr.encode(samples, vocab, tcfg, sg.QUERIES, world.task_names, world.n_classes)


def train_samples(cfg: ExperimentConfig, episodes: Sequence[sg.Episode], seed: int) -> list[sg.StreamSample]:
    out = []
    for k, q in enumerate(cfg.query_kinds):
        if q == "oad":
            out += sg.sample_train_windows(episodes, cfg.long_len, cfg.short_len, seed=seed * 7919 + k, query=q)
        else:
            out += sg.clip_samples(episodes, (q,), cfg.long_len)
    return out


def test_samples(cfg: ExperimentConfig, episodes: Sequence[sg.Episode]) -> list[sg.StreamSample]:
    out = []
    for q in cfg.query_kinds:
        if q == "oad":
            for ep in episodes:
                out += list(sg.stream_iter(ep, cfg.long_len, cfg.short_len, q))
        else:
            out += sg.clip_samples(episodes, (q,), cfg.long_len)
    return out


@dataclass
class RunResult:
    seed: int
    metrics: dict[str, float]
    model: TinyDecoder
    trace: list[tr.LossBreakdown]
    predictions: list[dec.PredictionRecord] = field(default_factory=list)
    vocab: lt.Vocabulary | None = None
    seconds: float = 0.0


def run_single(cfg: ExperimentConfig, seed: int, bundle: Bundle | None = None,
               on_init: Callable[[TinyDecoder], None] | None = None) -> RunResult:
    t0 = time.perf_counter()
    bundle = bundle or build_bundle(cfg)
    world = bundle.world
    vocab = strategy_vocab(bundle, cfg.strategy, seed)
    tcfg = cfg.train_config(seed)
    model = init_model(model_config(cfg, vocab, world, tcfg), seed)
    if on_init:
        on_init(model)

    def epoch_data(e: int):
        return encode_split(train_samples(cfg, bundle.train, seed * 1000 + e), vocab, tcfg, world)

    result = tr.train(tcfg, epoch_data, model)
    test_items = encode_split(test_samples(cfg, bundle.test), vocab, tcfg, world)
    allowed = lt.label_token_subset(vocab) if cfg.mode == "gen" and cfg.mask_decode else None
    preds = dec.predict(model, test_items, tcfg, vocab, allowed=allowed)
    metrics = evaluate(preds, test_items, world, vocab, cfg)
    return RunResult(seed, metrics, model, result.trace, preds, vocab, time.perf_counter() - t0)


@dataclass
class EquivalencePair:
    """A Disc model and a tied Gen-Extend model that share initialization and data order."""

    disc: TinyDecoder
    gen: TinyDecoder
    disc_cfg: tr.TrainConfig
    gen_cfg: tr.TrainConfig
    vocab: lt.Vocabulary
    label_cols: list[int]


def extend_equivalence(cfg: ExperimentConfig, seed: int, bundle: Bundle | None = None) -> EquivalencePair:
    """Build the construction under which Gen-Extend training reduces to Disc training.

    Each class owns one Extend token whose LM logit is the step-head logit, the
    single generated token is read at the [CLS] position, no EOS is appended and
    the softmax runs over the label tokens only.
    """
    bundle = bundle or build_bundle(cfg)
    world = bundle.world
    vocab = strategy_vocab(bundle, "extend", seed)
    cols = [lt.tokenize_label(i, vocab).ids[0] for i in range(world.n_classes)]
    dcfg = replace(cfg.train_config(seed), mode=tr.Mode.DISC)
    gcfg = replace(dcfg, mode=tr.Mode.GEN, start_token="cls", restrict_gen_loss=True, single_step=True)
    mcfg = model_config(cfg, vocab, world, dcfg, tie_label_head=True, label_token_ids=tuple(cols))
    return EquivalencePair(init_model(mcfg, seed), init_model(mcfg, seed), dcfg, gcfg, vocab, cols)


def evaluate(preds: Sequence[dec.PredictionRecord], items: Sequence[tr.Encoded], world: sg.WorldSpec,
             vocab: lt.Vocabulary, cfg: ExperimentConfig) -> dict[str, float]:
    p = np.array([r.pred_class for r in preds])
    g = np.array([r.gt_class for r in preds])
    top1, frame_acc = ek.accuracies(p, g)
    out = {"top1": top1, "frame_accuracy": frame_acc}
    steps = np.array([e.head == "step_class" for e in items])
    if steps.any():
        cm = ek.confusion(p[steps], g[steps], world.n_classes, world.background_id)
        try:
            out["dscore"] = ek.dscore(cm)
        except ek.UndefinedMetric:
            out["dscore"] = float("nan")
    if "oad" in cfg.query_kinds:
        sf, pf = [], []
        by_ep: dict[str, list[tuple[int, int, int]]] = {}
        for r in preds:
            ep = r.sample_id.rsplit(":", 1)[0]
            by_ep.setdefault(ep, []).append((r.frame_idx, r.pred_class, r.gt_class))
        for rows in by_ep.values():
            rows.sort()
            s, q = ek.episode_f1([x[1] for x in rows], [x[2] for x in rows], world.background_id)
            sf.append(s)
            pf.append(q)
        out["segment_f1"] = float(np.mean(sf))
        out["point_f1"] = float(np.mean(pf))
    if cfg.mode == "gen":
        train_surfaces = lt.label_surfaces(vocab)
        out["memorization_rate"] = ek.memorization_rate([dec.label_part(r.gen_text) for r in preds], train_surfaces)
    out["forwards_per_sample"] = float(np.mean([r.forwards for r in preds]))
    return out
