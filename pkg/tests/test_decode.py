import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gadlab import decode as dec
from gadlab import labeltok as lt
from gadlab import seqmodel as sm
from gadlab import trainer as tr
from gadlab.errors import ConfigError, UsageError
from helpers import make_setup
from oracles import edit_distance

LABELS = ["add sugar", "add meat", "pour milk"]


def _overfit(strategy: str):
    base = lt.build_vocabulary(LABELS, ["what is it"])
    vocab = lt.apply_strategy(base, strategy, seed=0)
    frames = np.random.default_rng(0).standard_normal((3, 4))
    target = list(lt.tokenize_label("add sugar", vocab).ids) + [lt.EOS]
    item = tr.Encoded("0:2", lt.tokenize_text("what is it", vocab), frames, np.zeros(3, bool), "step_class",
                      0, target, -1, 0)
    ext = tuple(range(vocab.base_size, vocab.size)) if strategy == "extend" else ()
    cfg = sm.ModelConfig(vocab_size=vocab.size, n_classes=4, feature_dim=4, d_model=16, n_layers=1, n_heads=2,
                         d_ff=32, max_len=16, extend_ids=ext, dtype="float64")
    model = sm.init_model(cfg, 0)
    tcfg = tr.TrainConfig(mode="gen", lr=1e-2, warmup_ratio=0.0, epochs=200, batch_size=1, long_len=3)
    res = tr.train(tcfg, [item], model)
    assert res.trace[-1].total < 1e-2
    return model, item, tcfg, vocab


def test_overfit_single_sample_emits_label():
    model, item, tcfg, vocab = _overfit("baseline")
    before = model.forward_calls
    (r,) = dec.greedy_decode(model, [item], tcfg, vocab)
    assert r.ids == [vocab.id_of("add"), vocab.id_of("sugar")]
    assert r.text == "add sugar" and r.forwards == 3 and not r.truncated
    assert model.forward_calls - before == 3
    (rec,) = dec.predict(model, [item], tcfg, vocab)
    assert rec.pred_class == 0 and rec.forwards == 3 and rec.frame_idx == 2


def test_extend_decode_two_forwards():
    model, item, tcfg, vocab = _overfit("extend")
    (r,) = dec.greedy_decode(model, [item], tcfg, vocab)
    assert len(r.ids) == 1 and r.ids[0] >= vocab.base_size and r.forwards == 2
    assert dec.map_text_to_label(r.text, lt.label_surfaces(vocab)) == (0, 0)


def test_truncation_flag():
    model, item, tcfg, vocab = _overfit("baseline")
    (r,) = dec.greedy_decode(model, [item], tcfg, vocab, max_tokens=1)
    assert r.truncated and r.forwards == 1 and r.ids == [vocab.id_of("add")]
    with pytest.raises(ConfigError):
        dec.greedy_decode(model, [item], tcfg, vocab, max_tokens=0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000))
def test_masked_decoding_stays_in_subset(seed):
    s = make_setup(seed=seed % 3, mode="gen")
    # scramble the LM head so unmasked decoding would wander
    rng = np.random.default_rng(seed)
    s.model.params["lm.w"].data[:] = rng.standard_normal(s.model.params["lm.w"].shape) * 3
    allowed = set(lt.label_token_subset(s.vocab))
    for r in dec.greedy_decode(s.model, s.test_items[:6], s.tcfg, s.vocab, allowed=sorted(allowed)):
        assert set(r.ids) <= allowed
        assert r.forwards == len(r.ids) + (0 if r.truncated else 1)


def test_greedy_deterministic_and_batch_invariant():
    s = make_setup(mode="gen")
    items = s.test_items[:5]
    a = dec.greedy_decode(s.model, items, s.tcfg, s.vocab)
    b = dec.greedy_decode(s.model, items, s.tcfg, s.vocab)
    assert [x.ids for x in a] == [x.ids for x in b]
    solo = [dec.greedy_decode(s.model, [e], s.tcfg, s.vocab)[0].ids for e in items]
    assert solo == [x.ids for x in a]


def test_argmax_ties_lowest_id():
    m = sm.init_model(sm.ModelConfig(vocab_size=12, n_classes=3, feature_dim=4, d_model=8, n_layers=1, n_heads=2,
                                     d_ff=16, max_len=16), 0)
    for n in ("lm.w", "lm.b"):
        m.params[n].data[:] = 0
    m.params["lm.b"].data[[9, 10]] = 1.0
    e = tr.Encoded("x:0", [8], np.zeros((2, 4), np.float32), np.zeros(2, bool), "step_class", 0, [9, lt.EOS], -1, 0)
    v = lt.build_vocabulary(["a b c d e"])
    (r,) = dec.greedy_decode(m, [e], tr.TrainConfig(mode="gen"), v, max_tokens=2)
    assert r.ids == [9, 9]


# ---------------------------------------------------------------- text mapping

def test_map_text_cases():
    assert dec.map_text_to_label("add sugar", LABELS) == (0, 0)
    assert dec.map_text_to_label("add suger", LABELS) == (0, 1)
    # empty text: shortest surface wins, first one on ties
    assert dec.map_text_to_label("", ["pour milk", "add meat", "cut meat"]) == (1, 8)
    assert dec.map_text_to_label("xyz", ["abc", "abd"]) == (0, 3)
    with pytest.raises(ConfigError):
        dec.map_text_to_label("a", [])


def test_label_part():
    assert dec.label_part("add sugar | pour milk") == "add sugar"
    assert dec.label_part("add sugar") == "add sugar"


@settings(max_examples=200, deadline=None)
@given(st.text("abc d", max_size=12), st.lists(st.text("abc d", max_size=10), min_size=1, max_size=5))
def test_mapping_matches_dp_oracle(text, surfaces):
    i, d = dec.map_text_to_label(text, surfaces)
    dists = [edit_distance(text, s) for s in surfaces]
    assert d == min(dists) and i == dists.index(min(dists))


def test_baseline_round_trip_mapping():
    s = make_setup()
    surfaces = lt.label_surfaces(s.vocab)
    for i in range(s.bundle.world.n_classes):
        text = lt.detokenize(lt.tokenize_label(i, s.vocab).ids, s.vocab)
        assert dec.map_text_to_label(text, surfaces) == (i, 0)


# ---------------------------------------------------------------- one-step classification

def test_classify_one_forward_and_scale_invariance():
    s = make_setup(mode="disc", dtype="float64")
    items = s.test_items[:20]
    before = s.model.forward_calls
    ids, scores, fw = dec.classify_one_step(s.model, items, s.tcfg)
    assert np.all(fw == 1) and s.model.forward_calls - before == 1
    assert scores.shape == (20, s.bundle.world.n_classes)
    assert np.array_equal(ids, scores.argmax(axis=1))
    for n in ("head.step.w", "head.step.b"):
        s.model.params[n].data *= 3.7
    ids2, _, _ = dec.classify_one_step(s.model, items, s.tcfg)
    assert np.array_equal(ids, ids2)
    assert s.model.lm_calls == 0


def test_classify_rejects_gen():
    s = make_setup(mode="gen")
    with pytest.raises(UsageError):
        dec.classify_one_step(s.model, s.test_items[:2], s.tcfg)


def test_gad_discfirst_is_one_forward():
    s = make_setup(mode="gad", variant="context")
    recs = dec.predict(s.model, s.test_items[:10], s.tcfg, s.vocab)
    assert all(r.forwards == 1 and r.gen_text == "" for r in recs)


def test_gad_genfirst_decodes_then_classifies():
    s = make_setup(mode="gad", variant="context", unify="genfirst")
    ids, _, fw = dec.classify_one_step(s.model, s.test_items[:4], s.tcfg, s.vocab)
    assert np.all(fw >= 2)


def test_prev_disc_plus_classifies():
    s = make_setup(mode="gad", variant="prev_disc_plus")
    ids, _, fw = dec.classify_one_step(s.model, s.test_items[:4], s.tcfg)
    assert np.all(fw == 1) and ids.shape == (4,)


def test_forward_count_law_and_dump(tmp_path):
    s = make_setup(mode="gen")
    recs = dec.predict(s.model, s.test_items[:12], s.tcfg, s.vocab)
    for r in recs:
        assert r.forwards == len(r.gen_ids) + (0 if r.truncated else 1) and r.forwards >= 1
    dec.write_predictions(recs, tmp_path / "p.tsv")
    lines = (tmp_path / "p.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["sample_id", "frame_idx", "pred_class", "gt_class", "forwards", "wall_ns",
                                    "gen_text"]
    assert len(lines) == 13


def test_bench_counts():
    d = make_setup(mode="disc")
    rep = dec.bench_latency(d.model, d.test_items[:10], d.tcfg, d.vocab)
    assert rep.mean_forwards == 1.0 and rep.n_samples == 10 and rep.fps > 0
    model, item, tcfg, vocab = _overfit("baseline")
    rep = dec.bench_latency(model, [item] * 4, tcfg, vocab)
    assert rep.mean_forwards == 3.0 and rep.forwards == [3, 3, 3, 3]
