"""Synthetic procedural videos: verb/noun labels, Markov task chains, per-frame features.

A frame showing label ``(verb, noun)`` carries ``verb_proto ++ noun_proto`` plus
isotropic Gaussian noise; idle frames carry noise around the origin.  Labels
that share a verb therefore look alike *and* share their first token, which
is the overlap situation the classifiers are compared on.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from gadlab.errors import ConfigError

log = logging.getLogger(__name__)

VERBS = (
    "add", "cut", "pour", "take", "put", "open", "close", "stir", "mix", "wash", "peel", "screw",
    "spread", "fold", "press", "rinse",
)
NOUNS = (
    "sugar", "meat", "milk", "salt", "onion", "rice", "flour", "egg", "butter", "water", "oil",
    "pepper", "cheese", "bread", "lid", "cup", "tomato", "garlic", "lemon", "honey", "sauce", "pasta",
    "carrot", "potato", "bean", "corn", "apple", "cream", "yogurt", "noodle", "tea", "coffee",
    "jam", "nut", "herb", "fish", "tofu", "lettuce", "mushroom", "ginger", "vinegar", "dough",
)
TASK_NAMES = ("breakfast", "lunch", "dinner", "dessert", "snack", "picnic", "brunch", "supper")

QUERIES = {
    "oad": "What is the action in the last frame?",
    "step": "What is the action in the video?",
    "next": "What is the next action in the video?",
    "task": "What is the overall activity in the video?",
}
QUERY_KINDS = tuple(QUERIES)


@dataclass
class WorldConfig:
    n_verbs: int = 8
    n_nouns: int = 40
    labels_per_verb: int = 5
    n_tasks: int = 4
    feature_dim: int = 32
    noise_sigma: float = 0.25
    background_rate: float = 0.2
    p_next: float = 0.8
    step_duration: tuple[int, int] = (4, 10)
    background_duration: tuple[int, int] = (2, 6)


@dataclass
class WorldSpec:
    config: WorldConfig
    seed: int
    label_pairs: list[tuple[int, int]]
    labels: list[str]
    verb_protos: np.ndarray
    noun_protos: np.ndarray
    task_steps: list[list[int]]
    transitions: list[np.ndarray]

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def background_id(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.labels) + 1

    @property
    def n_tasks(self) -> int:
        return len(self.task_steps)

    @property
    def task_names(self) -> list[str]:
        return list(TASK_NAMES[: self.n_tasks])

    def prototype(self, label: int) -> np.ndarray:
        if label == self.background_id:
            return np.zeros(self.config.feature_dim)
        v, n = self.label_pairs[label]
        return np.concatenate([self.verb_protos[v], self.noun_protos[n]])

    def prototypes(self) -> np.ndarray:
        """(n_classes, feature_dim); the background row is the origin."""
        return np.stack([self.prototype(c) for c in range(self.n_classes)])

    def to_dict(self) -> dict:
        c = self.config
        return {
            "seed": self.seed, "n_verbs": c.n_verbs, "n_nouns": c.n_nouns,
            "labels_per_verb": c.labels_per_verb, "n_tasks": c.n_tasks, "feature_dim": c.feature_dim,
            "noise_sigma": c.noise_sigma, "background_rate": c.background_rate, "p_next": c.p_next,
            "step_duration": list(c.step_duration), "background_duration": list(c.background_duration),
        }


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def gen_world(config: WorldConfig, seed: int = 0) -> WorldSpec:
    c = config
    if c.n_verbs < 1 or c.labels_per_verb < 1 or c.n_tasks < 1:
        raise ConfigError("n_verbs, labels_per_verb and n_tasks must be >= 1")
    if c.n_verbs > len(VERBS) or c.n_nouns > len(NOUNS) or c.n_tasks > len(TASK_NAMES):
        raise ConfigError("word lists are too short for the requested world")
    if c.labels_per_verb > c.n_nouns:
        raise ConfigError(
            f"{c.n_verbs * c.labels_per_verb} labels exceed the available verb x noun combinations"
        )
    if c.feature_dim < 2 or c.feature_dim % 2:
        raise ConfigError("feature_dim must be even")
    if not 0.0 <= c.background_rate < 1.0 or not 0.0 <= c.p_next <= 1.0:
        raise ConfigError("background_rate must lie in [0, 1) and p_next in [0, 1]")
    rng = np.random.default_rng(seed)
    half = c.feature_dim // 2
    verb_protos = _unit_rows(rng, c.n_verbs, half)
    noun_protos = _unit_rows(rng, c.n_nouns, half)

    pairs = []
    for v in range(c.n_verbs):
        # nouns are dealt round-robin so each noun is reused as evenly as possible
        start = (v * c.labels_per_verb) % c.n_nouns
        for j in range(c.labels_per_verb):
            pairs.append((v, (start + j) % c.n_nouns))
    if len(set(pairs)) != len(pairs):
        raise ConfigError("verb x noun combinations are exhausted")
    labels = [f"{VERBS[v]} {NOUNS[n]}" for v, n in pairs]

    # tasks partition a shuffled label list, so every label is in exactly one task
    order = rng.permutation(len(labels))
    if c.n_tasks > len(labels):
        raise ConfigError("more tasks than labels")
    task_steps = [sorted(order[k::c.n_tasks].tolist()) for k in range(c.n_tasks)]
    task_steps = [rng.permutation(s).tolist() for s in task_steps]
    transitions = [_chain(len(s), c.p_next) for s in task_steps]
    return WorldSpec(c, seed, pairs, labels, verb_protos, noun_protos, task_steps, transitions)


def _chain(k: int, p_next: float) -> np.ndarray:
    """Step i goes to i+1 (cyclically) with ``p_next``, else uniformly to another step."""
    if k == 1:
        return np.ones((1, 1))
    t = np.zeros((k, k))
    for i in range(k):
        others = [j for j in range(k) if j != i]
        t[i, others] = (1.0 - p_next) / (k - 1)
        t[i, (i + 1) % k] += p_next
    return t


def stationary(transition: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(transition.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return pi / pi.sum()


@dataclass
class Episode:
    episode_id: int
    task_id: int
    features: np.ndarray
    frame_labels: np.ndarray
    segments: list[tuple[int, int, int]] = field(default_factory=list)
    background_id: int = -1

    @property
    def length(self) -> int:
        return int(self.frame_labels.shape[0])


def _episode(world: WorldSpec, eid: int, length: int, rng: np.random.Generator) -> Episode:
    c = world.config
    task = int(rng.integers(world.n_tasks))
    steps, trans = world.task_steps[task], world.transitions[task]
    labels = np.full(length, world.background_id, dtype=np.int64)
    segments = []
    t = 0
    state = int(rng.choice(len(steps), p=stationary(trans)))
    while t < length:
        if c.background_rate and rng.random() < c.background_rate:
            t += int(rng.integers(c.background_duration[0], c.background_duration[1] + 1))
            if t >= length:
                break
        dur = int(rng.integers(c.step_duration[0], c.step_duration[1] + 1))
        end = min(t + dur, length) - 1
        labels[t:end + 1] = steps[state]
        segments.append((t, end, steps[state]))
        t = end + 1
        state = int(rng.choice(len(steps), p=trans[state]))
    protos = world.prototypes()
    feats = protos[labels] + c.noise_sigma * rng.standard_normal((length, c.feature_dim))
    return Episode(eid, task, feats, labels, segments, world.background_id)


def gen_episodes(world: WorldSpec, n: int, length: int, test_fraction: float = 0.25,
                 seed: int = 0) -> tuple[list[Episode], list[Episode]]:
    """``n`` episodes split into disjoint train/test lists by episode id."""
    if length < 1:
        raise ConfigError("episode length must be >= 1")
    # one independent stream per episode so generation order never matters
    eps = [_episode(world, i, length, np.random.default_rng([seed, i])) for i in range(n)]
    n_test = int(round(n * test_fraction))
    return eps[: n - n_test], eps[n - n_test:]


# ---------------------------------------------------------------- stream samples

NONE_LABEL = -1


@dataclass
class StreamSample:
    episode: Episode = field(repr=False)
    t: int
    label: int
    prev_label: int
    history: tuple[int, ...]
    next_label: int
    task_id: int
    query: str = "oad"

    @property
    def sample_id(self) -> str:
        return f"{self.episode.episode_id}:{self.t}"

    def window(self, long_len: int) -> tuple[np.ndarray, np.ndarray]:
        """Last ``long_len`` frames up to ``t`` (inclusive), front-padded; returns (frames, pad_mask)."""
        feats = self.episode.features
        lo = max(0, self.t - long_len + 1)
        chunk = feats[lo:self.t + 1]
        pad = long_len - chunk.shape[0]
        frames = np.zeros((long_len, feats.shape[1]), dtype=feats.dtype)
        frames[pad:] = chunk
        mask = np.zeros(long_len, dtype=bool)
        mask[:pad] = True
        return frames, mask


class _Context:
    """Per-episode lookup of segment context by frame index."""

    def __init__(self, ep: Episode):
        self.ep = ep
        n = ep.length
        self.seg_of = np.full(n, -1, dtype=np.int64)
        for k, (s, e, _) in enumerate(ep.segments):
            self.seg_of[s:e + 1] = k
        # index of the last segment starting at or before each frame
        self.last_seg = np.full(n, -1, dtype=np.int64)
        k = -1
        for t in range(n):
            if k + 1 < len(ep.segments) and ep.segments[k + 1][0] <= t:
                k += 1
            self.last_seg[t] = k

    def sample(self, t: int, query: str = "oad") -> StreamSample:
        segs = self.ep.segments
        label = int(self.ep.frame_labels[t])
        cur = self.seg_of[t]
        if cur >= 0:
            before = segs[:cur]
            after = segs[cur + 1:cur + 2]
        else:
            k = self.last_seg[t]
            before = segs[:k + 1]
            after = segs[k + 1:k + 2]
        history = tuple(s[2] for s in before)
        prev = history[-1] if history else NONE_LABEL
        nxt = after[0][2] if after else NONE_LABEL
        return StreamSample(self.ep, t, label, prev, history, nxt, self.ep.task_id, query)


def sample_train_windows(episodes: Sequence[Episode], long_len: int, short_len: int, seed: int = 0,
                         start: int | None = None, query: str = "oad") -> list[StreamSample]:
    """Windows ending every ``short_len`` frames from a seeded random offset per episode."""
    if not long_len >= short_len >= 1:
        raise ConfigError("need long_len >= short_len >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for ep in episodes:
        offset = int(rng.integers(short_len)) if start is None else start
        if ep.length < 1:
            log.warning("skipping empty episode %s", ep.episode_id)
            continue
        ctx = _Context(ep)
        for t in range(offset, ep.length, short_len):
            out.append(ctx.sample(t, query))
    return out


def stream_iter(episode: Episode, long_len: int, short_len: int, query: str = "oad") -> Iterator[StreamSample]:
    """One sample per frame, start fixed at 0 (online evaluation)."""
    if not long_len >= short_len >= 1:
        raise ConfigError("need long_len >= short_len >= 1")
    ctx = _Context(episode)
    for t in range(episode.length):
        yield ctx.sample(t, query)


def clip_samples(episodes: Sequence[Episode], queries: Sequence[str] = ("step", "next", "task"),
                 long_len: int = 32) -> list[StreamSample]:
    """COIN-style trimmed clips: one sample per (segment, query); clip ends at the segment's last frame."""
    out = []
    for ep in episodes:
        ctx = _Context(ep)
        for s, e, _ in ep.segments:
            for q in queries:
                out.append(ctx.sample(e, q))
    return out


def bayes_predict(world: WorldSpec, features: np.ndarray) -> np.ndarray:
    """Nearest-prototype (maximum likelihood, isotropic noise) class of each frame."""
    protos = world.prototypes()
    d2 = ((features[:, None, :] - protos[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)


def bayes_oracle_accuracy(world: WorldSpec, episodes: Sequence[Episode]) -> float:
    hits = total = 0
    for ep in episodes:
        pred = bayes_predict(world, ep.features)
        hits += int((pred == ep.frame_labels).sum())
        total += ep.length
    return hits / total if total else float("nan")
