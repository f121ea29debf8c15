"""``gadlab`` command line: synth, train, eval, bench, tokreport, export-embeddings, compare."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from gadlab import decode as dec
from gadlab import evalkit as ek
from gadlab import labeltok as lt
from gadlab import seqmodel as sm
from gadlab import trainer as tr
from gadlab.errors import DependencyError, GadlabError
from gadlab.runner import datadump
from gadlab.runner.config import CHOICES, output_dir, parse_config, render_config
from gadlab.runner.pipeline import (Bundle, ExperimentConfig, build_bundle, encode_split, evaluate, run_single,
                                    strategy_vocab, test_samples)
from gadlab.runner.report import write_report

log = logging.getLogger("gadlab")

# default sweeps for ``compare``: tokenization strategies and GAD variants
DEFAULT_SWEEPS = {
    "tokenization": "mode=disc; mode=gen; mode=gen,strategy=rand; mode=gen,strategy=desync; mode=gen,strategy=extend",
    "gad": "mode=disc; mode=gad,variant=label_2stage; mode=gad,variant=label_joint; mode=gad,variant=context",
}


def parse_sweep(text: str) -> list[dict[str, str]]:
    from gadlab.runner.config import canonical_key, convert

    rows = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        row = {}
        for kv in part.split(","):
            k, v = kv.split("=", 1)
            key = canonical_key(k)
            row[key] = convert(key, v)
        rows.append(row)
    return rows


def row_name(row: dict) -> str:
    mode = str(row.get("mode", "disc"))
    if mode == "gen":
        s = row.get("strategy", "baseline")
        return "Gen" if s == "baseline" else f"Gen_{s}"
    if mode == "gad":
        return f"GAD ({row.get('variant', 'context')})"
    return mode.capitalize()


# ---------------------------------------------------------------- invariants

def check_run(model: sm.TinyDecoder, before: dict[str, np.ndarray], trace, preds, cfg: ExperimentConfig) -> list[str]:
    """Invariant violations of a finished run (empty when all hold)."""
    bad = []
    trainable = set(model.trainable_names("finetune"))
    for name, arr in before.items():
        if name not in trainable and not np.array_equal(arr, model.params[name].data):
            bad.append(f"frozen tensor {name} changed")
    for r in trace:
        if abs(r.total - (r.L_cls + cfg.lam * r.L_gen)) > 1e-5 * max(1.0, abs(r.total)) and cfg.mode == "gad":
            bad.append(f"loss decomposition broken at step {r.step}")
            break
    for p in preds:
        expected = len(p.gen_ids) + (0 if p.truncated else 1) if cfg.mode == "gen" else 1
        if cfg.mode in ("gen", "disc") and p.forwards != expected:
            bad.append(f"sample {p.sample_id} used {p.forwards} forwards")
            break
    return bad


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: ExperimentConfig) -> int:
    out = output_dir(cfg, "data")
    b = build_bundle(cfg)
    datadump.dump_split(b.world, b.train, out, "train")
    datadump.dump_split(b.world, b.test, out, "test")
    (out / "config.txt").write_text(render_config(cfg))
    print(f"wrote {len(b.train)} train / {len(b.test)} test episodes to {out}")
    return 0


def _train_runs(cfg: ExperimentConfig, bundle: Bundle, out: Path, name: str) -> tuple[list, list[str]]:
    runs, problems = [], []
    for seed in cfg.seeds:
        sd = out / f"seed{seed}"
        sd.mkdir(parents=True, exist_ok=True)
        snap: dict[str, np.ndarray] = {}

        res = run_single(cfg, seed, bundle, on_init=lambda m: snap.update(m.snapshot()))
        problems += [f"seed {seed}: {p}" for p in check_run(res.model, snap, res.trace, res.predictions, cfg)]
        sm.save_checkpoint(res.model, sd / "model.ckpt")
        tr.write_trace(res.trace, sd / "trace.csv")
        dec.write_predictions(res.predictions, sd / "predictions.tsv")
        p = [r.pred_class for r in res.predictions]
        g = [r.gt_class for r in res.predictions]
        ek.write_confusion(ek.confusion(p, g, bundle.world.n_classes, bundle.world.background_id),
                           sd / "confusion.csv")
        runs.append((seed, res.metrics))
        log.info("%s seed %d: %s (%.1fs)", name, seed, {k: round(v, 4) for k, v in res.metrics.items()}, res.seconds)
    return runs, problems


def cmd_train(cfg: ExperimentConfig) -> int:
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(render_config(cfg))
    name = cfg.name or row_name({"mode": cfg.mode, "strategy": cfg.strategy, "variant": cfg.variant})
    runs, problems = _train_runs(cfg, build_bundle(cfg), out, name)
    paths = write_report({name: runs}, out, title=name)
    print(paths["summary"].read_text(), end="")
    print(f"outputs in {out}")
    for p in problems:
        print(f"INVARIANT FAILED: {p}", file=sys.stderr)
    return 1 if problems else 0


def _checkpoint(cfg: ExperimentConfig, seed: int) -> Path:
    path = output_dir(cfg) / f"seed{seed}" / "model.ckpt"
    if not path.exists():
        raise DependencyError(f"no trained model at {path}; run 'gadlab train' with the same config first")
    return path


def _test_items(cfg: ExperimentConfig, bundle: Bundle, seed: int):
    vocab = strategy_vocab(bundle, cfg.strategy, seed)
    tcfg = cfg.train_config(seed)
    return vocab, tcfg, encode_split(test_samples(cfg, bundle.test), vocab, tcfg, bundle.world)


def cmd_eval(cfg: ExperimentConfig) -> int:
    bundle = build_bundle(cfg)
    runs = []
    for seed in cfg.seeds:
        model = sm.load_checkpoint(_checkpoint(cfg, seed))
        vocab, tcfg, items = _test_items(cfg, bundle, seed)
        allowed = lt.label_token_subset(vocab) if cfg.mode == "gen" and cfg.mask_decode else None
        preds = dec.predict(model, items, tcfg, vocab, allowed=allowed)
        runs.append((seed, evaluate(preds, items, bundle.world, vocab, cfg)))
    out = output_dir(cfg) / "eval"
    paths = write_report({cfg.name or cfg.mode: runs}, out, title="evaluation")
    print(paths["summary"].read_text(), end="")
    return 0


def cmd_bench(cfg: ExperimentConfig) -> int:
    bundle = build_bundle(cfg)
    seed = cfg.seeds[0]
    model = sm.load_checkpoint(_checkpoint(cfg, seed))
    vocab, tcfg, items = _test_items(cfg, bundle, seed)
    rep = dec.bench_latency(model, items[:cfg.bench_samples], tcfg, vocab)
    out = output_dir(cfg) / "bench.csv"
    out.write_text("model,fps,forwards_per_sample,n_samples\n"
                   f"{cfg.mode},{rep.fps:.3f},{rep.mean_forwards:.4f},{rep.n_samples}\n")
    print(f"{cfg.mode}: {rep.fps:.1f} samples/s, {rep.mean_forwards:.3f} forwards/sample -> {out}")
    return 0


def cmd_tokreport(cfg: ExperimentConfig) -> int:
    bundle = build_bundle(cfg)
    out = output_dir(cfg, "tokens")
    out.mkdir(parents=True, exist_ok=True)
    labels = bundle.world.labels
    lines = ["strategy\tvocab_size\tmean_tokens_per_label\tshared_fraction\tmax_share"]
    for s in lt.Strategy:
        vocab = strategy_vocab(bundle, s.value, cfg.seeds[0])
        rep = lt.overlap_report(labels, vocab)
        (out / f"vocab_{s.value}.tsv").write_text(lt.dump_vocabulary(vocab))
        lines.append(f"{s.value}\t{vocab.size}\t{rep.mean_tokens_per_label:.3f}\t{rep.shared_fraction:.3f}\t"
                     f"{max(rep.share_counts.values())}")
    (out / "overlap.tsv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_export(cfg: ExperimentConfig) -> int:
    bundle = build_bundle(cfg)
    seed = cfg.seeds[0]
    model = sm.load_checkpoint(_checkpoint(cfg, seed))
    vocab, tcfg, items = _test_items(cfg, bundle, seed)
    rows = sm.export_embeddings(model, items, tcfg, vocab, cfg.pooling)
    path = output_dir(cfg) / f"embeddings_{cfg.pooling}.csv"
    sm.write_embeddings_csv(path, rows)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def cmd_compare(cfg: ExperimentConfig) -> int:
    sweep = DEFAULT_SWEEPS.get(cfg.sweep or "tokenization", cfg.sweep)
    rows = parse_sweep(sweep)
    bundle = build_bundle(cfg)
    results, problems = {}, []
    root = output_dir(replace(cfg, name="compare"), "compare")
    for row in rows:
        sub = replace(cfg, **row)
        name = sub.name if "name" in row else row_name(row)
        runs, bad = _train_runs(sub, bundle, root / name.replace(" ", "_").replace("(", "").replace(")", ""), name)
        results[name] = runs
        problems += [f"{name}: {p}" for p in bad]
    paths = write_report(results, root, title="comparison")
    print(paths["summary"].read_text(), end="")
    print(f"outputs in {root}")
    for p in problems:
        print(f"INVARIANT FAILED: {p}", file=sys.stderr)
    return 1 if problems else 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "tokreport": cmd_tokreport, "export-embeddings": cmd_export, "compare": cmd_compare}


def main(argv: Sequence[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="gadlab", description=__doc__)
    ap.add_argument("command", choices=CHOICES["command"])
    ap.add_argument("config", nargs="?", help="key = value config file")
    ap.add_argument("-v", "--verbose", action="store_true")
    args, rest = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = parse_config(args.config, rest, command=args.command)
        return COMMANDS[args.command](cfg)
    except GadlabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
