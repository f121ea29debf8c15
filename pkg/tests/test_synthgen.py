import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gadlab import evalkit as ek
from gadlab import synthgen as sg
from gadlab.errors import ConfigError


@pytest.fixture(scope="module")
def world():
    return sg.gen_world(sg.WorldConfig(), seed=0)


def test_world_construction(world):
    assert world.n_labels == 40 and world.n_classes == 41
    verbs = [lab.split()[0] for lab in world.labels]
    assert all(verbs.count(v) == 5 for v in set(verbs))
    assert len(set(world.labels)) == 40


def test_world_invariants(world):
    covered = sorted(i for steps in world.task_steps for i in steps)
    assert covered == list(range(world.n_labels))
    for t in world.transitions:
        np.testing.assert_allclose(t.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(world.verb_protos, axis=1), 1.0)
    np.testing.assert_allclose(np.linalg.norm(world.noun_protos, axis=1), 1.0)


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_shared_verb_more_similar(world):
    shared, disjoint = [], []
    pairs = world.label_pairs
    for i in range(world.n_labels):
        for j in range(i + 1, world.n_labels):
            c = _cos(world.prototype(i), world.prototype(j))
            if pairs[i][0] == pairs[j][0] and pairs[i][1] != pairs[j][1]:
                shared.append(c)
            elif pairs[i][0] != pairs[j][0] and pairs[i][1] != pairs[j][1]:
                disjoint.append(c)
    assert np.mean(shared) > np.mean(disjoint) + 0.3


def test_world_errors():
    with pytest.raises(ConfigError, match="exceed"):
        sg.gen_world(sg.WorldConfig(n_verbs=2, n_nouns=3, labels_per_verb=4))
    with pytest.raises(ConfigError):
        sg.gen_world(sg.WorldConfig(n_verbs=0))


def test_world_and_episodes_deterministic():
    a = sg.gen_world(sg.WorldConfig(), seed=3)
    b = sg.gen_world(sg.WorldConfig(), seed=3)
    assert a.labels == b.labels and a.task_steps == b.task_steps
    np.testing.assert_array_equal(a.prototypes(), b.prototypes())
    ea, _ = sg.gen_episodes(a, 4, 30, seed=9)
    eb, _ = sg.gen_episodes(b, 4, 30, seed=9)
    for x, y in zip(ea, eb):
        assert x.features.tobytes() == y.features.tobytes()
        assert x.segments == y.segments


def test_noiseless_bayes_is_perfect():
    w = sg.gen_world(sg.WorldConfig(noise_sigma=0.0), seed=1)
    train, test = sg.gen_episodes(w, 8, 50, seed=0)
    assert sg.bayes_oracle_accuracy(w, train + test) == 1.0


def test_huge_noise_bayes_is_chance():
    w = sg.gen_world(sg.WorldConfig(noise_sigma=1e4), seed=1)
    train, test = sg.gen_episodes(w, 40, 100, seed=0)
    assert abs(sg.bayes_oracle_accuracy(w, train + test) - 1 / w.n_classes) < 0.02


def test_degenerate_chain_order():
    w = sg.gen_world(sg.WorldConfig(p_next=1.0), seed=2)
    train, test = sg.gen_episodes(w, 10, 80, seed=4)
    for ep in train + test:
        steps = w.task_steps[ep.task_id]
        order = [s[2] for s in ep.segments]
        start = steps.index(order[0])
        assert order == [steps[(start + k) % len(steps)] for k in range(len(order))]


def test_stationary_frequencies():
    # no background and one task -> step-frame frequency follows the chain weighted by mean duration
    cfg = sg.WorldConfig(n_tasks=1, n_verbs=2, labels_per_verb=2, n_nouns=4, background_rate=0.0,
                         p_next=0.5, step_duration=(3, 3))
    w = sg.gen_world(cfg, seed=0)
    train, _ = sg.gen_episodes(w, 100, 100, test_fraction=0.0, seed=1)
    labels = np.concatenate([e.frame_labels for e in train])
    assert labels.size == 10_000
    pi = sg.stationary(w.transitions[0])
    freq = np.array([(labels == s).mean() for s in w.task_steps[0]])
    assert np.max(np.abs(freq - pi)) < 0.02


def test_split_disjoint(world):
    train, test = sg.gen_episodes(world, 20, 10, test_fraction=0.25, seed=0)
    assert len(train) == 15 and len(test) == 5
    assert not {e.episode_id for e in train} & {e.episode_id for e in test}


def test_segments_reconstruct(world):
    train, test = sg.gen_episodes(world, 12, 60, seed=5)
    for ep in train + test:
        rebuilt = ek.segments_from_frames(ep.frame_labels, world.background_id)
        assert rebuilt == [tuple(s) for s in ep.segments]


def _single_episode(labels, world):
    labels = np.asarray(labels)
    feats = world.prototypes()[labels]
    segs = ek.segments_from_frames(labels, world.background_id)
    return sg.Episode(0, 0, feats, labels, segs, world.background_id)


def test_window_count_arithmetic(world):
    ep = _single_episode([0] * 100, world)
    assert len(sg.sample_train_windows([ep], 20, 20, start=0)) == 5


def test_previous_label_fields(world):
    bg = world.background_id
    ep = _single_episode([3, 3, bg, 5, 5, 3, 3], world)
    s = list(sg.stream_iter(ep, 4, 1))
    assert s[0].prev_label == sg.NONE_LABEL and s[1].prev_label == sg.NONE_LABEL
    assert s[2].label == bg and s[2].prev_label == 3
    assert s[3].prev_label == 3 and s[5].prev_label == 5
    assert s[0].next_label == 5 and s[4].next_label == 3 and s[6].next_label == sg.NONE_LABEL
    assert s[5].history == (3, 5)


def test_sample_fraction_per_epoch(world):
    train, _ = sg.gen_episodes(world, 10, 64, test_fraction=0.0, seed=0)
    samples = sg.sample_train_windows(train, 16, 4, seed=1)
    frac = len(samples) / sum(e.length for e in train)
    assert abs(frac - 0.25) < 0.02


def test_short_len_validation(world):
    with pytest.raises(ConfigError):
        sg.sample_train_windows([], 4, 8)
    with pytest.raises(ConfigError):
        list(sg.stream_iter(_single_episode([0], world), 4, 0))


def test_empty_episode_skipped(world, caplog):
    ep = sg.Episode(7, 0, np.zeros((0, 32)), np.zeros(0, dtype=np.int64), [], world.background_id)
    with caplog.at_level("WARNING"):
        assert sg.sample_train_windows([ep], 4, 2, start=0) == []
    assert "empty episode" in caplog.text


def test_stream_one_per_frame(world):
    train, _ = sg.gen_episodes(world, 3, 37, seed=2)
    for ep in train:
        s = list(sg.stream_iter(ep, 8, 2))
        assert len(s) == ep.length
        assert [x.label for x in s] == ep.frame_labels.tolist()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 40), st.integers(1, 12))
def test_online_constraint(seed, length, long_len):
    w = sg.gen_world(sg.WorldConfig(), seed=seed % 3)
    (ep,), _ = sg.gen_episodes(w, 1, length, test_fraction=0.0, seed=seed)
    for s in sg.stream_iter(ep, long_len, 1):
        frames, pad = s.window(long_len)
        n_real = int((~pad).sum())
        assert n_real == min(long_len, s.t + 1)
        lo = s.t + 1 - n_real
        np.testing.assert_array_equal(frames[~pad], ep.features[lo:s.t + 1])
        assert np.all(frames[pad] == 0)
        if s.prev_label != sg.NONE_LABEL:
            assert s.prev_label != s.label


def test_clip_samples_end_at_segment(world):
    train, _ = sg.gen_episodes(world, 2, 40, seed=0)
    clips = sg.clip_samples(train, queries=("step", "task"))
    assert len(clips) == 2 * sum(len(e.segments) for e in train)
    ends = {(e.episode_id, s[1]) for e in train for s in e.segments}
    assert all((c.episode.episode_id, c.t) in ends for c in clips)
