"""Closed-vocabulary tokenizer for action labels and task queries.

Four strategies control how label words become token ids:

* ``baseline``  - shared words map to shared ids (``add`` is one token everywhere)
* ``rand``      - a seeded bijection of the non-special ids, applied everywhere
* ``desync``    - every (label, position) gets its own fresh id, so no id is shared
* ``extend``    - every label becomes one fresh id
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from gadlab.errors import CapacityError, ClosedSetError, ConfigError, DecodeError

SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>", "<cls>", "<none>", "<bg>")
PAD, BOS, EOS, SEP, CLS, NONE, BG = range(len(SPECIALS))
N_SPECIAL = len(SPECIALS)
BACKGROUND = "background"
NONE_WORD = "none"
CHUNK = 4
_CONT = "##"

# rendering of content-bearing specials; structural ones are dropped
_SPECIAL_TEXT = {NONE: NONE_WORD, BG: BACKGROUND, SEP: "|"}


class Strategy(str, Enum):
    BASELINE = "baseline"
    RAND = "rand"
    DESYNC = "desync"
    EXTEND = "extend"


def normalize(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def split_word(word: str, mode: str) -> list[str]:
    if mode == "word" or len(word) <= CHUNK:
        return [word]
    pieces = [word[i:i + CHUNK] for i in range(0, len(word), CHUNK)]
    return [pieces[0]] + [_CONT + p for p in pieces[1:]]


@dataclass(frozen=True)
class ActionLabel:
    label_id: int
    surface: str


@dataclass(frozen=True)
class TokenizedLabel:
    label_id: int
    ids: tuple[int, ...]
    strategy: Strategy

    @property
    def n(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    labels: tuple[str, ...]
    mode: str = "word"
    strategy: Strategy = Strategy.BASELINE
    seed: int | None = None
    base_size: int = 0
    perm: tuple[int, ...] | None = None
    label_codes: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        index = {t: i for i, t in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ConfigError("duplicate token strings in vocabulary")
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def background_id(self) -> int:
        return len(self.labels)

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise ClosedSetError(f"token {token!r} is not in the closed vocabulary") from None

    def token_of(self, i: int) -> str:
        if not 0 <= i < len(self.tokens):
            raise DecodeError(f"token id {i} outside [0, {len(self.tokens)})")
        return self.tokens[i]

    def label_id(self, surface: str) -> int:
        s = normalize(surface)
        if s == BACKGROUND:
            return self.background_id
        try:
            return self.labels.index(s)
        except ValueError:
            raise ClosedSetError(f"label {surface!r} is not in the closed label set") from None

    def label_surface(self, label_id: int) -> str:
        return BACKGROUND if label_id == self.background_id else self.labels[label_id]

    def __hash__(self):
        return hash((self.tokens, self.labels, self.strategy, self.seed, self.perm, self.label_codes))


def build_vocabulary(labels: Sequence[str], queries: Iterable[str] = (), mode: str = "word") -> Vocabulary:
    """Baseline vocabulary over all label and query words, specials first."""
    if mode not in ("word", "char-chunk"):
        raise ConfigError(f"unknown vocabulary mode {mode!r}")
    labels = tuple(normalize(l) for l in labels)
    if not labels:
        raise ConfigError("empty label set")
    if len(set(labels)) != len(labels):
        raise ConfigError("label surface strings must be unique")
    tokens: list[str] = list(SPECIALS)
    seen = set(tokens)
    for text in list(labels) + [normalize(q) for q in queries]:
        for word in text.split(" "):
            if word in (BACKGROUND, NONE_WORD) and text in labels:
                raise ConfigError(f"label word {word!r} is reserved")
            for piece in split_word(word, mode):
                if piece not in seen:
                    seen.add(piece)
                    tokens.append(piece)
    return Vocabulary(tuple(tokens), labels, mode=mode, base_size=len(tokens))


def _base_ids(text: str, vocab: Vocabulary) -> list[int]:
    ids = []
    for word in normalize(text).split(" "):
        if not word:
            continue
        for piece in split_word(word, vocab.mode):
            if piece not in vocab._index or vocab._index[piece] >= vocab.base_size:
                raise ClosedSetError(f"word {word!r} is outside the closed vocabulary")
            ids.append(vocab._index[piece])
    return ids


def tokenize_text(text: str, vocab: Vocabulary) -> list[int]:
    """Token ids for a query or other non-label string (RandConsistent remap applies)."""
    ids = _base_ids(text, vocab)
    if vocab.perm is not None:
        ids = [vocab.perm[i] for i in ids]
    return ids


def tokenize_label(label: str | int | ActionLabel, vocab: Vocabulary) -> TokenizedLabel:
    """Label tokens in order, EOS excluded."""
    if isinstance(label, ActionLabel):
        label = label.surface
    if isinstance(label, (int, np.integer)):
        lid = int(label)
        if not 0 <= lid <= vocab.background_id:
            raise ClosedSetError(f"label id {lid} outside the closed set")
    else:
        lid = vocab.label_id(label)
    if lid == vocab.background_id:
        return TokenizedLabel(lid, (BG,), vocab.strategy)
    if vocab.label_codes is not None:
        return TokenizedLabel(lid, vocab.label_codes[lid], vocab.strategy)
    return TokenizedLabel(lid, tuple(tokenize_text(vocab.labels[lid], vocab)), vocab.strategy)


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Surface text; words separated by single spaces, structural specials dropped."""
    words: list[str] = []
    for i in ids:
        i = int(i)
        tok = vocab.token_of(i)
        if i < N_SPECIAL:
            if i in _SPECIAL_TEXT:
                words.append(_SPECIAL_TEXT[i])
            continue
        if tok.startswith(_CONT) and words:
            words[-1] += tok[len(_CONT):]
        else:
            words.append(tok[len(_CONT):] if tok.startswith(_CONT) else tok)
    return " ".join(words)


def apply_strategy(vocab: Vocabulary, strategy: Strategy | str, seed: int = 0,
                   permutation: Sequence[int] | None = None, capacity: int | None = None) -> Vocabulary:
    """Derive a strategy vocabulary from a baseline one.

    ``permutation`` (RandConsistent only) overrides the seeded draw; it lists
    the image of each non-special base id in order.  ``capacity`` bounds the
    fresh-id pool for Desync.
    """
    strategy = Strategy(strategy)
    if vocab.strategy is not Strategy.BASELINE:
        raise ConfigError("strategies apply to a baseline vocabulary")
    base = list(vocab.tokens[:vocab.base_size])
    rng = np.random.default_rng(seed)
    if strategy is Strategy.BASELINE:
        return vocab
    if strategy is Strategy.RAND:
        movable = np.arange(N_SPECIAL, vocab.base_size)
        if permutation is None:
            # word-initial and continuation pieces permute separately so remapped ids still detokenize
            image = movable.copy()
            cont = np.array([base[i].startswith(_CONT) for i in movable])
            for group in (~cont, cont):
                image[group] = rng.permutation(movable[group])
        else:
            image = np.asarray(permutation)
        if sorted(image.tolist()) != movable.tolist():
            raise ConfigError("permutation must be a bijection of the non-special ids")
        perm = list(range(N_SPECIAL)) + image.tolist()
        return Vocabulary(tuple(base), vocab.labels, vocab.mode, strategy, seed, vocab.base_size,
                          perm=tuple(perm))
    if strategy is Strategy.DESYNC:
        lengths = [len(_base_ids(l, vocab)) for l in vocab.labels]
        need = sum(lengths)
        capacity = need if capacity is None else capacity
        if need > capacity:
            raise CapacityError(f"desync needs {need} fresh ids but the pool holds {capacity}")
        draw = rng.permutation(capacity)[:need] + vocab.base_size
        fresh = [f"d{k:04d}" for k in range(capacity)]
        codes, k = [], 0
        for n in lengths:
            codes.append(tuple(int(x) for x in draw[k:k + n]))
            k += n
        return Vocabulary(tuple(base + fresh), vocab.labels, vocab.mode, strategy, seed, vocab.base_size,
                          label_codes=tuple(codes))
    fresh = [l.replace(" ", "_") for l in vocab.labels]
    codes = tuple((vocab.base_size + i,) for i in range(len(vocab.labels)))
    return Vocabulary(tuple(base + fresh), vocab.labels, vocab.mode, strategy, seed, vocab.base_size,
                      label_codes=codes)


def label_surfaces(vocab: Vocabulary) -> list[str]:
    """Surface of every class (labels then background) in the strategy's token space."""
    return [detokenize(tokenize_label(i, vocab).ids, vocab) for i in range(vocab.background_id + 1)]


def label_token_subset(vocab: Vocabulary, include_background: bool = True) -> list[int]:
    ids: set[int] = set()
    top = vocab.background_id + (1 if include_background else 0)
    for i in range(top):
        ids.update(tokenize_label(i, vocab).ids)
    return sorted(ids)


@dataclass(frozen=True)
class OverlapReport:
    share_counts: dict[int, int]
    mean_tokens_per_label: float
    shared_fraction: float

    def count(self, token_id: int) -> int:
        return self.share_counts.get(token_id, 0)


def overlap_report(labels: Sequence[str], vocab: Vocabulary) -> OverlapReport:
    counts: Counter[int] = Counter()
    total = 0
    for l in labels:
        ids = tokenize_label(l, vocab).ids
        total += len(ids)
        counts.update(set(ids))
    shared = sum(1 for c in counts.values() if c >= 2)
    return OverlapReport(
        dict(sorted(counts.items())),
        total / len(labels) if labels else 0.0,
        shared / len(counts) if counts else 0.0,
    )


def dump_vocabulary(vocab: Vocabulary, labels: Sequence[str] | None = None) -> str:
    """``id<TAB>token<TAB>share_count`` lines."""
    rep = overlap_report(list(vocab.labels) if labels is None else labels, vocab)
    return "".join(f"{i}\t{t}\t{rep.count(i)}\n" for i, t in enumerate(vocab.tokens))
