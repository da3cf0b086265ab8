import csv
import json
import subprocess
import sys
import time

import jsonschema
import pytest

from gistdesk import cli, mining
from gistdesk.evalkit import REPORT_SCHEMA


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_cfg(path, **cfg):
    path.write_text(json.dumps(cfg))
    return path


SMALL = dict(num_clusters=3, items_per_cluster=8)


@pytest.fixture
def synth_dir(tmp_path):
    cfg = write_cfg(tmp_path / "cfg.json", **SMALL)
    assert run("synth", "--out-dir", tmp_path / "s", "--config", cfg, "--seed", 3) == 0
    return tmp_path / "s"


def test_synth_outputs_and_manifest(synth_dir):
    assert mining.load_triplets(synth_dir / "triplets.jsonl")
    manifest = json.loads((synth_dir / "run_manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 3
    assert manifest["config"]["num_clusters"] == 3
    assert (synth_dir / "suite" / "suite.json").exists()


def test_synth_deterministic(tmp_path, synth_dir):
    cfg = write_cfg(tmp_path / "cfg2.json", **SMALL)
    assert run("synth", "--out-dir", tmp_path / "again", "--config", cfg, "--seed", 3) == 0
    for name in ["corpus.jsonl", "triplets.jsonl", "truth.jsonl", "heldout.json", "suite/retrieval.json"]:
        assert (synth_dir / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_manifest_replays_run(tmp_path, synth_dir):
    assert run("synth", "--out-dir", tmp_path / "replay", "--config", synth_dir / "run_manifest.json") == 0
    assert (synth_dir / "triplets.jsonl").read_bytes() == (tmp_path / "replay" / "triplets.jsonl").read_bytes()


def test_bad_config_names_field(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "bad.json", false_negative_rate=1.5)
    assert run("synth", "--out-dir", tmp_path / "x", "--config", cfg) == 2
    assert "false_negative_rate" in capsys.readouterr().err
    cfg = write_cfg(tmp_path / "typo.json", learnign_rate=0.1)
    assert run("synth", "--out-dir", tmp_path / "x", "--config", cfg) == 2
    assert "learnign_rate" in capsys.readouterr().err


def test_usage_error_exit_code(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("eval", "--out-dir", tmp_path)
    assert exc.value.code == 2


def test_mine_two_class_corpus(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    items = [mining.CorpusItem(i, f"t{i % 2} w{i}", "ab"[i % 2]) for i in range(10)]
    mining.save_corpus(items, corpus)
    cfg = write_cfg(tmp_path / "c.json", mine_k_p=100)
    for d in ("m1", "m2"):
        assert run("mine", "--out-dir", tmp_path / d, "--corpus", corpus, "--config", cfg) == 0
    label = {it.text: it.label for it in items}
    trips = mining.load_triplets(tmp_path / "m1" / "triplets.jsonl")
    assert len(trips) == 10
    for t in trips:
        assert label[t.query] == label[t.positive] != label[t.negative]
    assert (tmp_path / "m1" / "triplets.jsonl").read_bytes() == (tmp_path / "m2" / "triplets.jsonl").read_bytes()
    stats = json.loads((tmp_path / "m1" / "mining_stats.json").read_text())
    assert stats["per_class"]["a"]["queries"] == 5


def test_mine_single_class_is_data_error(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    mining.save_corpus([mining.CorpusItem(i, f"w{i}", "a") for i in range(4)], corpus)
    assert run("mine", "--out-dir", tmp_path / "m", "--corpus", corpus) == 3


def _pairs_file(synth_dir, tmp_path):
    trips = mining.load_triplets(synth_dir / "triplets.jsonl")
    path = tmp_path / "pairs.jsonl"
    mining.save_triplets([mining.Triplet(t.query, t.positive) for t in trips], path)
    return path


@pytest.mark.parametrize("strategy", ["fullbatch", "guided"])
def test_train_on_pairs(tmp_path, synth_dir, strategy):
    pairs = _pairs_file(synth_dir, tmp_path)
    rc = run("train", "--out-dir", tmp_path / "t", "--data", pairs, "--strategy", strategy,
             "--guide", f"oracle:{synth_dir / 'corpus.jsonl'}", "--steps", 20)
    assert rc == 0
    assert (tmp_path / "t" / "final.ckpt").exists()
    rows = list(csv.DictReader(open(tmp_path / "t" / "loss_curve.csv")))
    assert len(rows) == 20 and rows[0]["masked_qn"] == ""


def test_train_assigned_on_pairs_rejected(tmp_path, synth_dir, capsys):
    pairs = _pairs_file(synth_dir, tmp_path)
    assert run("train", "--out-dir", tmp_path / "t", "--data", pairs, "--strategy", "assigned") == 2
    assert "assigned" in capsys.readouterr().err


def test_train_guided_needs_guide(tmp_path, synth_dir):
    assert run("train", "--out-dir", tmp_path / "t", "--data", synth_dir / "triplets.jsonl",
               "--strategy", "guided") == 2


def test_train_smoke_under_ten_seconds(tmp_path):
    assert run("synth", "--out-dir", tmp_path / "s") == 0
    t0 = time.perf_counter()
    rc = run("train", "--out-dir", tmp_path / "t", "--data", tmp_path / "s" / "triplets.jsonl",
             "--guide", f"oracle:{tmp_path / 's' / 'corpus.jsonl'}", "--steps", 10)
    assert rc == 0 and time.perf_counter() - t0 < 10


def test_train_resume_matches_straight_run(tmp_path, synth_dir):
    data = synth_dir / "triplets.jsonl"
    cfg = write_cfg(tmp_path / "c.json", total_steps=20, checkpoint_every=10, strategy="fullbatch")
    assert run("train", "--out-dir", tmp_path / "a", "--data", data, "--config", cfg) == 0
    assert run("train", "--out-dir", tmp_path / "b", "--data", data, "--config", cfg,
               "--resume", tmp_path / "a" / "step0000010.ckpt") == 0
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_eval_report_schema(tmp_path, synth_dir):
    cfg = write_cfg(tmp_path / "c.json", total_steps=5, strategy="fullbatch")
    assert run("train", "--out-dir", tmp_path / "t", "--data", synth_dir / "triplets.jsonl", "--config", cfg) == 0
    assert run("eval", "--out-dir", tmp_path / "e", "--checkpoint", tmp_path / "t" / "init.ckpt",
               "--suite", synth_dir / "suite" / "suite.json") == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["num_tasks"] == 5


def test_eval_missing_task_file(tmp_path, synth_dir, capsys):
    (synth_dir / "suite" / "sts.json").unlink()
    assert run("eval", "--out-dir", tmp_path / "e", "--checkpoint", tmp_path / "none.ckpt",
               "--suite", synth_dir / "suite" / "suite.json") == 3
    assert "sts.json" in capsys.readouterr().err


def test_compare_four_rows(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", false_negative_rate=0.3, **SMALL)
    assert run("compare", "--out-dir", tmp_path / "c", "--config", cfg, "--steps", 20) == 0
    assert "guided - fullbatch" in capsys.readouterr().out
    rows = list(csv.DictReader(open(tmp_path / "c" / "comparison.csv")))
    assert [r["strategy"] for r in rows] == ["assigned", "bidirectional", "fullbatch", "guided"]
    assert len({r["init_fullbatch_step0_loss"] for r in rows}) == 1
    fb = next(r for r in rows if r["strategy"] == "fullbatch")
    assert fb["step0_loss"] == fb["init_fullbatch_step0_loss"]
    table = json.loads((tmp_path / "c" / "comparison.json").read_text())
    gd = next(r for r in table["rows"] if r["strategy"] == "guided")
    assert table["guided_minus_fullbatch_ndcg@10"] == pytest.approx(
        gd["synthetic-retrieval:ndcg@10"] - fb_value(table))
    curves = list(csv.DictReader(open(tmp_path / "c" / "loss_curves.csv")))
    assert len(curves) == 80


def fb_value(table):
    return next(r for r in table["rows"] if r["strategy"] == "fullbatch")["synthetic-retrieval:ndcg@10"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gistdesk", "synth", "--out-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "run_manifest.json").exists()
