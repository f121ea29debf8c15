from dataclasses import replace

import numpy as np
import pytest

from gadlab import seqmodel as sm
from gadlab.errors import ConfigError
from gadlab.runner import cli, datadump
from gadlab.runner import pipeline as pl
from gadlab.runner.config import OUTPUT_ROOT_ENV, config_hash, output_dir, parse_config, parse_lines, render_config
from gadlab.runner.report import summarize, write_report
from helpers import TINY


# ---------------------------------------------------------------- configuration

def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# nothing here\n\n")
    assert parse_config(p) == pl.ExperimentConfig()


def test_flag_overrides_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("lambda = 0.5\nmode = gad  # trailing comment\n")
    assert parse_config(p).lam == 0.5
    cfg = parse_config(p, ["--lambda", "1.0"])
    assert cfg.lam == 1.0 and cfg.mode == "gad"
    assert parse_config(p, ["--lambda=2"]).lam == 2.0


def test_bad_value_names_line(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("epochs = 2\nmode = GADX\n")
    with pytest.raises(ConfigError, match=r"c\.txt:2.*mode = GADX"):
        parse_config(p)
    with pytest.raises(ConfigError, match=":1"):
        parse_lines("wibble = 3")
    with pytest.raises(ConfigError, match=":1"):
        parse_lines("epochs = many")
    with pytest.raises(ConfigError, match="key = value"):
        parse_lines("just words")
    with pytest.raises(ConfigError):
        parse_config(None, ["--mode"])


def test_case_and_seed_lists():
    cfg = parse_config(None, ["--mode", "GAD", "--seeds", "0,1,2", "--stop_grad_cls", "true"])
    assert cfg.mode == "gad" and cfg.seeds == (0, 1, 2) and cfg.stop_grad_cls is True


def test_render_round_trip(tmp_path):
    cfg = replace(TINY, seeds=(3, 4), mode="gad", lam=0.25)
    p = tmp_path / "c.txt"
    p.write_text(render_config(cfg))
    assert parse_config(p) == cfg


def test_output_dir_content_addressed(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    a, b = pl.ExperimentConfig(), pl.ExperimentConfig(lam=0.5)
    assert output_dir(a) != output_dir(b) and output_dir(a).parent == tmp_path
    assert config_hash(a) == config_hash(replace(a, pooling="mean"))
    assert output_dir(replace(a, output_dir=str(tmp_path / "x"))) == tmp_path / "x"


def test_experiment_config_validation():
    with pytest.raises(ConfigError):
        pl.ExperimentConfig(strategy="weird")
    with pytest.raises(ConfigError):
        pl.ExperimentConfig(seeds=())
    with pytest.raises(ConfigError):
        pl.ExperimentConfig(queries="oad,unknown")


# ---------------------------------------------------------------- reports

def test_report_std_and_order(tmp_path):
    results = {"Gen": [(0, {"top1": 0.5}), (1, {"top1": 0.7})], "Disc": [(0, {"top1": 0.6})]}
    paths = write_report(results, tmp_path)
    rows = paths["summary_csv"].read_text().splitlines()
    assert rows[0] == "experiment,n_seeds,metric,mean,std"
    assert rows[1].startswith("Gen,2,top1,0.600000,0.141421")
    assert rows[2] == "Disc,1,top1,0.600000,"
    text = paths["summary"].read_text()
    assert text.index("Gen") < text.index("Disc") and "±" in text
    assert summarize([(0, {"a": 1.0})])["a"] == (1.0, None)


def test_report_five_seeds(tmp_path):
    runs = [(s, {"top1": 0.1 * s}) for s in range(5)]
    mu, sd = summarize(runs)["top1"]
    assert mu == pytest.approx(0.2) and sd == pytest.approx(np.std([0.1 * s for s in range(5)], ddof=1))


# ---------------------------------------------------------------- data dump

def test_dataset_dump_round_trip(tmp_path):
    b = pl.build_bundle(TINY)
    datadump.dump_split(b.world, b.test, tmp_path, "test")
    rows = datadump.load_split(tmp_path, "test")
    assert len(rows) == len(b.test)
    for (eid, task, labels, feats), ep in zip(rows, b.test):
        assert eid == ep.episode_id and task == ep.task_id
        np.testing.assert_array_equal(labels, ep.frame_labels)
        assert feats.tobytes() == np.asarray(ep.features, dtype=np.float64).tobytes()


# ---------------------------------------------------------------- command line

@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.txt"
    p.write_text(render_config(replace(TINY, epochs=2)))
    return p


def test_cli_train_eval_bench_export(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    args = [str(cfg_file), "--output_dir", str(out), "--mode", "gen"]
    assert cli.main(["train"] + args) == 0
    for f in ("config.txt", "metrics.csv", "summary.csv", "summary.txt", "seed0/model.ckpt", "seed0/trace.csv",
              "seed0/predictions.tsv", "seed0/confusion.csv"):
        assert (out / f).exists(), f
    assert "memorization_rate" in (out / "summary.csv").read_text()
    assert cli.main(["eval"] + args) == 0
    assert cli.main(["bench"] + args + ["--bench_samples", "5"]) == 0
    assert (out / "bench.csv").read_text().startswith("model,fps,forwards_per_sample,n_samples\n")
    assert cli.main(["export-embeddings"] + args + ["--pooling", "mean"]) == 0
    assert (out / "embeddings_mean.csv").read_text().startswith("sample_id,label_id,pooling,v0")


def test_cli_deterministic_reports(cfg_file, tmp_path):
    for name in ("a", "b"):
        assert cli.main(["train", str(cfg_file), "--output_dir", str(tmp_path / name)]) == 0
    for f in ("metrics.csv", "summary.csv", "seed0/trace.csv", "seed0/confusion.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    a = sm.load_checkpoint(tmp_path / "a" / "seed0" / "model.ckpt")
    b = sm.load_checkpoint(tmp_path / "b" / "seed0" / "model.ckpt")
    assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)


def test_cli_eval_before_train(cfg_file, tmp_path, capsys):
    assert cli.main(["eval", str(cfg_file), "--output_dir", str(tmp_path / "none")]) == 2
    assert "train" in capsys.readouterr().err


def test_cli_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.txt"
    p.write_text("mode = GADX\n")
    assert cli.main(["train", str(p)]) == 2
    assert "bad.txt:1" in capsys.readouterr().err


def test_cli_synth_and_tokreport(cfg_file, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert cli.main(["synth", str(cfg_file)]) == 0
    data = next(tmp_path.glob("data-*"))
    assert (data / "train.tsv").exists() and (data / "test.features").exists()
    assert cli.main(["tokreport", str(cfg_file)]) == 0
    table = capsys.readouterr().out
    assert "desync" in table and "extend" in table
    overlap = next(tmp_path.glob("tokens-*")) / "overlap.tsv"
    rows = {r.split("\t")[0]: r.split("\t") for r in overlap.read_text().splitlines()[1:]}
    assert rows["extend"][2] == "1.000" and rows["desync"][3] == "0.000"


def test_cli_compare_rows_follow_sweep(cfg_file, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    code = cli.main(["compare", str(cfg_file), "--epochs", "1", "--sweep",
                     "mode=gen,strategy=extend; mode=disc; mode=gad,variant=label_2stage"])
    assert code == 0
    summary = next(tmp_path.glob("compare-*")) / "summary.csv"
    names = []
    for line in summary.read_text().splitlines()[1:]:
        n = line.split(",")[0]
        if n not in names:
            names.append(n)
    assert names == ["Gen_extend", "Disc", "GAD (label_2stage)"]


def test_default_sweeps_have_table_rows():
    rows = [cli.row_name(r) for r in cli.parse_sweep(cli.DEFAULT_SWEEPS["tokenization"])]
    assert rows == ["Disc", "Gen", "Gen_rand", "Gen_desync", "Gen_extend"]
    rows = [cli.row_name(r) for r in cli.parse_sweep(cli.DEFAULT_SWEEPS["gad"])]
    assert rows == ["Disc", "GAD (label_2stage)", "GAD (label_joint)", "GAD (context)"]


def test_check_run_flags_frozen_change():
    res = pl.run_single(replace(TINY, mode="disc"), 0)
    snap = res.model.snapshot()
    assert cli.check_run(res.model, snap, res.trace, res.predictions, res_cfg := replace(TINY, mode="disc")) == []
    snap["tok_emb"] = snap["tok_emb"] + 1.0
    assert any("tok_emb" in p for p in cli.check_run(res.model, snap, res.trace, res.predictions, res_cfg))
