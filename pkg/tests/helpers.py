from dataclasses import dataclass, replace

from gadlab.runner import pipeline as pl
from gadlab.seqmodel import init_model

TINY = pl.ExperimentConfig(n_verbs=4, n_nouns=8, labels_per_verb=3, n_tasks=2, feature_dim=8, noise_sigma=0.3,
                           n_episodes=8, episode_length=24, long_len=6, short_len=3, d_model=16, n_layers=1,
                           n_heads=2, d_ff=32, lora_rank=2, lora_alpha=4.0, epochs=1, batch_size=8, lr=3e-3)


@dataclass
class Setup:
    cfg: pl.ExperimentConfig
    bundle: pl.Bundle
    vocab: object
    tcfg: object
    model: object
    train_items: list
    test_items: list


def make_setup(seed: int = 0, **over) -> Setup:
    cfg = replace(TINY, **over)
    bundle = pl.build_bundle(cfg)
    vocab = pl.strategy_vocab(bundle, cfg.strategy, seed)
    tcfg = cfg.train_config(seed)
    model = init_model(pl.model_config(cfg, vocab, bundle.world, tcfg), seed)
    train = pl.encode_split(pl.train_samples(cfg, bundle.train, seed), vocab, tcfg, bundle.world)
    test = pl.encode_split(pl.test_samples(cfg, bundle.test), vocab, tcfg, bundle.world)
    return Setup(cfg, bundle, vocab, tcfg, model, train, test)
