import csv
import json
import subprocess
import sys
import time

import pytest

from hybridkg.cli import main
from hybridkg.graph import load_dataset
from hybridkg.rules import read_rules, select_top_k
from hybridkg.synthetic import demo_files
from oracles import groundings_by_enumeration

DEMO = demo_files()
SPLITS = ["--train", str(DEMO["train"]), "--valid", str(DEMO["valid"]), "--test", str(DEMO["test"])]


@pytest.fixture(scope="module")
def demo_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    start = time.perf_counter()
    code = main(["hybrid", *SPLITS, "--out", str(out)])
    return out, code, time.perf_counter() - start


def test_demo_hybrid_completes_quickly_with_all_artifacts(demo_run):
    out, code, elapsed = demo_run
    assert code == 0
    assert elapsed < 60
    for name in ("embedding.ckpt", "rules.tsv", "history.csv", "manifest.json"):
        assert (out / name).is_file()
    assert not (out / ".incomplete").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seed"] == 0
    assert set(manifest["inputs"]) == {"train", "valid", "test"}
    assert all(len(v["sha256"]) == 64 for v in manifest["inputs"].values())
    assert manifest["settings"]["iters"] == 10


def test_same_seed_gives_identical_checkpoint(demo_run, tmp_path):
    out, _, _ = demo_run
    assert main(["hybrid", *SPLITS, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "embedding.ckpt").read_bytes() == (out / "embedding.ckpt").read_bytes()


def test_missing_train_is_a_usage_error(tmp_path):
    out = tmp_path / "run"
    code = main(["hybrid", "--train", str(tmp_path / "nope.tsv"), "--out", str(out)])
    assert code == 1
    assert not out.exists()


def test_eval_writes_seven_columns(demo_run, tmp_path):
    out, _, _ = demo_run
    code = main(["eval", *SPLITS, "--checkpoint", str(out / "embedding.ckpt"), "--out", str(tmp_path),
                 "--sparse-threshold", "0.5"])
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[0] == ["split", "model", "mrr", "hits1", "hits3", "hits10", "n_triples"]
    assert all(len(r) == 7 for r in rows)
    assert [r[0] for r in rows[1:3]] == ["valid", "test"]
    ranks = list(csv.reader(open(tmp_path / "ranks.csv")))
    assert ranks[0] == ["h", "r", "t", "head_rank", "tail_rank"]


def test_eval_model_mismatch_names_both(demo_run, tmp_path, capsys):
    out, _, _ = demo_run
    code = main(["eval", *SPLITS, "--checkpoint", str(out / "embedding.ckpt"), "--model", "transe",
                 "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "rotate" in err and "transe" in err


def test_corrupted_checkpoint_fails(demo_run, tmp_path):
    out, _, _ = demo_run
    raw = bytearray((out / "embedding.ckpt").read_bytes())
    raw[3] ^= 0x55
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    code = main(["eval", *SPLITS, "--checkpoint", str(bad), "--out", str(tmp_path / "ev")])
    assert code == 2
    assert (tmp_path / "ev" / ".incomplete").exists()
    assert json.loads((tmp_path / "ev" / "manifest.json").read_text())["status"] == "failed"


def test_train_then_mine(tmp_path):
    tr = tmp_path / "train"
    assert main(["train", "--train", str(DEMO["train"]), "--model", "distmult", "--dim", "8",
                 "--inner-steps", "20", "--out", str(tr)]) == 0
    assert (tr / "train_loss.csv").is_file()
    mi = tmp_path / "mine"
    assert main(["mine", "--train", str(DEMO["train"]), "--checkpoint", str(tr / "embedding.ckpt"),
                 "--min-hc", "0.1", "--out", str(mi)]) == 0
    lines = (mi / "rules.tsv").read_text().splitlines()
    assert lines[0].startswith("# rule\tsupport\tbody_groundings")
    assert len(lines) > 1
    assert main(["mine", "--train", str(DEMO["train"]), "--out", str(tmp_path / "m2")]) == 1


def _mine_demo(tmp_path):
    out = tmp_path / "mine"
    assert main(["mine", "--train", str(DEMO["train"]), "--omega", "0", "--min-hc", "0.1",
                 "--out", str(out)]) == 0
    return out / "rules.tsv"


def test_rules_eval_precision_matches_set_oracle(tmp_path):
    rules = _mine_demo(tmp_path)
    out = tmp_path / "re"
    assert main(["rules-eval", "--rules", str(rules), "--train", str(DEMO["train"]),
                 "--test", str(DEMO["test"]), "--k-list", "10", "--out", str(out)]) == 0
    row = list(csv.DictReader(open(out / "rule_precision.csv")))[0]

    ds = load_dataset(DEMO["train"], test=DEMO["test"])
    top = select_top_k(read_rules(rules, ds.entities, ds.relations), 10)
    train = set(map(tuple, ds.train.triples.tolist()))
    test = set(map(tuple, ds.test.triples.tolist()))
    g_t = set()
    for m in top:
        g_t |= groundings_by_enumeration(ds.train.triples, ds.train.n_entities, m.rule)[0]
    g_t -= train
    assert int(row["predictions"]) == len(g_t)
    assert int(row["correct"]) == len(g_t & test)
    assert float(row["precision"]) == pytest.approx(len(g_t & test) / len(g_t), abs=1e-6)


def test_rules_eval_notes_k_beyond_rule_count(tmp_path, capsys):
    rules = _mine_demo(tmp_path)
    n = len(read_rules(rules, *load_dataset(DEMO["train"])[3:]))
    assert main(["rules-eval", "--rules", str(rules), "--train", str(DEMO["train"]),
                 "--test", str(DEMO["test"]), "--k-list", f"{n + 5}", "--out", str(tmp_path / "x")]) == 0
    assert "exceeds" in capsys.readouterr().out
    row = list(csv.DictReader(open(tmp_path / "x" / "rule_precision.csv")))[0]
    assert int(row["rules_used"]) == n


def test_rules_eval_all_predictions_in_test(tmp_path):
    (tmp_path / "train.tsv").write_text("a\ts\tb\nb\ts\tc\n")
    (tmp_path / "test.tsv").write_text("a\tr\tb\nb\tr\tc\n")
    (tmp_path / "rules.tsv").write_text(
        "# rule\tsupport\tbody_groundings\tstandard_confidence\thead_coverage\t"
        "embedding_confidence\tquality\tnum_new_predictions\n"
        "?a  s  ?b   => ?a  r  ?b\t0\t2\t0.0\t0.0\tnan\t0.0\t2\n")
    out = tmp_path / "out"
    assert main(["rules-eval", "--rules", str(tmp_path / "rules.tsv"), "--train", str(tmp_path / "train.tsv"),
                 "--test", str(tmp_path / "test.tsv"), "--k-list", "1,5", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "rule_precision.csv")))
    assert [float(r["precision"]) for r in rows] == [1.0, 1.0]


def test_rules_eval_empty_file(tmp_path, capsys):
    (tmp_path / "rules.tsv").write_text("# rule\n")
    assert main(["rules-eval", "--rules", str(tmp_path / "rules.tsv"), "--train", str(DEMO["train"]),
                 "--test", str(DEMO["test"]), "--out", str(tmp_path / "o")]) == 0
    assert "no rules" in capsys.readouterr().out


def test_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\ndim = 8\nlr=0.05\ninner_steps = 5\n")
    out = tmp_path / "o"
    assert main(["train", "--train", str(DEMO["train"]), "--config", str(cfg), "--dim", "4",
                 "--out", str(out)]) == 0
    err = capsys.readouterr().err
    assert "defaults < config < cli" in err
    m = json.loads((out / "manifest.json").read_text())
    assert (m["settings"]["dim"], m["sources"]["dim"]) == (4, "cli")
    assert (m["settings"]["lr"], m["sources"]["lr"]) == (0.05, "config")
    assert (m["settings"]["batch"], m["sources"]["batch"]) == (256, "default")
    assert "config" in m["inputs"]


@pytest.mark.parametrize("text", ["bogus = 1\n", "dim = many\n", "no equals sign\n"])
def test_bad_config_is_a_usage_error(tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert main(["train", "--train", str(DEMO["train"]), "--config", str(cfg),
                 "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_unknown_flag_and_no_command():
    assert main(["hybrid", "--frobnicate"]) == 1
    assert main([]) == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hybridkg.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
