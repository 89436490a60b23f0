import json

import pytest

from mosekit import cli
from mosekit.evalkit.report import read_report_csv
from mosekit.training import NumericError

TINY = ["--set", "plan.steps=2", "--set", "plan.batch_size=4", "--set", "plan.max_len=48",
        "--set", "model.depth=2", "--set", "model.exits=[1,2]", "--set", "model.max_seq=48",
        "--set", "model.hidden=16", "--set", "model.intermediate=32", "--set", "model.proj_dim=8"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    lines = [l for l in out.out.splitlines() if l.strip()]
    return code, (json.loads(lines[-1]) if lines else None), out.err


@pytest.fixture
def check_mode(monkeypatch):
    monkeypatch.setenv("MOSEKIT_CHECK_MODE", "1")


@pytest.fixture
def data(tmp_path, capsys, check_mode):
    code, summary, _ = run(capsys, "gen", "--seed", 1, "--repos", 4, "--triplets", 30,
                           "--set", "data.snippets_per_repo=4", "--out", tmp_path / "g")
    assert code == 0
    return tmp_path / "g"


def test_gen_zero_repos(tmp_path, capsys):
    code, summary, _ = run(capsys, "gen", "--seed", 7, "--repos", 0, "--out", tmp_path)
    assert code == 0 and summary["snippets"] == 0 and summary["ok"]
    assert (tmp_path / "corpus.jsonl").read_text() == ""
    m = json.loads((tmp_path / "gen.manifest.json").read_text())
    assert m["command"] == "gen" and m["seed"] == 7 and set(m["outputs"]) == {"corpus", "triplets"}
    assert {"argv", "config", "version", "wall_clock_s", "inputs"} <= set(m)


def test_usage_errors(tmp_path, capsys):
    assert run(capsys, "pretrain")[0] == 1
    assert run(capsys, "pretrain", "--corpus", tmp_path / "missing.jsonl", "--out", tmp_path)[0] == 1
    assert run(capsys, "gen", "--set", "data.nope=1", "--out", tmp_path)[0] == 1
    assert run(capsys, "gen", "--set", "oops", "--out", tmp_path)[0] == 1
    assert run(capsys, "gen", "--config", tmp_path / "nope.json", "--out", tmp_path)[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "selfcheck", "--only", "nope", "--out", tmp_path)[0] == 1


def test_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n")
    assert run(capsys, "pretrain", "--corpus", bad, "--out", tmp_path)[0] == 2
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"garbage")
    assert run(capsys, "embed", "--ckpt", junk, "--input", bad, "--out", tmp_path)[0] == 2


def test_numeric_failure_exit_code(data, tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise NumericError("non-finite loss")
    monkeypatch.setattr(cli, "pretrain", boom)
    code, _, err = run(capsys, "pretrain", "--corpus", data / "corpus.jsonl", *TINY, "--out", tmp_path / "p")
    assert code == 3 and "numeric" in err


def test_config_file_and_overrides(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"model": {"depth": 4, "exits": [2, 4]}, "plan": {"steps": 9}}))
    cfg = cli.load_config(str(cfg_path), ["plan.steps=11", "optim.base_lr=0.01"])
    assert cfg["model"]["depth"] == 4 and cfg["plan"]["steps"] == 11 and cfg["optim"]["base_lr"] == 0.01
    assert cli.model_config(cfg, 40).exits == (2, 4)


def test_parse_exits():
    assert cli.parse_exits("all", (1, 2, 4)) == [1, 2, 4]
    assert cli.parse_exits("4,1", (1, 2, 4)) == [1, 4]
    with pytest.raises(cli.UsageError):
        cli.parse_exits("3", (1, 2, 4))


def test_pipeline_report_rows_and_rerun(data, tmp_path, capsys):
    steps = [
        ("dedup", ["dedup", "--corpus", data / "corpus.jsonl", "--triplets", data / "triplets.jsonl"]),
        ("pretrain", ["pretrain", "--corpus", data / "corpus.jsonl", *TINY]),
        ("ft", ["finetune", "retrieval", "--ckpt", tmp_path / "pretrain" / "pretrain.ckpt",
                "--triplets", data / "triplets.jsonl", *TINY]),
        ("clone", ["finetune", "clone", "--ckpt", tmp_path / "ft" / "finetune_retrieval.ckpt",
                   "--triplets", data / "triplets.jsonl", *TINY]),
        ("embed", ["embed", "--ckpt", tmp_path / "ft" / "finetune_retrieval.ckpt",
                   "--input", data / "triplets.jsonl", "--field", "nl", *TINY]),
        ("eval", ["eval", "retrieval", "--ckpt", tmp_path / "ft" / "finetune_retrieval.ckpt", "--exits", "all",
                  "--triplets", data / "triplets.jsonl", "--set", "eval.distractors=9", *TINY]),
        ("evalc", ["eval", "clone", "--ckpt", tmp_path / "clone" / "finetune_clone.ckpt",
                   "--triplets", data / "triplets.jsonl", *TINY]),
        ("report", ["report", "--reports", tmp_path / "eval" / "eval_retrieval.json"]),
        ("perm", ["permtest", "--ckpt", tmp_path / "ft" / "finetune_retrieval.ckpt",
                  "--triplets", data / "triplets.jsonl", "--set", "eval.n_perm=200", *TINY]),
    ]
    for name, argv in steps:
        code, summary, err = run(capsys, *argv, "--out", tmp_path / name)
        assert code == 0, (name, err)
        assert summary["ok"] and summary["check_mode"]
    rows = read_report_csv(tmp_path / "report" / "report.csv")
    assert [r["exit"] for r in rows] == ["1", "2"]
    assert (tmp_path / "report" / "report.png").exists()
    assert (tmp_path / "embed" / "embeddings_exit2.npy").exists()

    for manifest in sorted(tmp_path.glob("*/*.manifest.json")):
        code, summary, err = run(capsys, "rerun", manifest, "--out", tmp_path / "replay" / manifest.parent.name)
        assert code == 0, (manifest, err)
        assert summary["identical"]


def test_rerun_detects_drift(data, tmp_path, capsys):
    manifest = json.loads((data / "gen.manifest.json").read_text())
    manifest["outputs"]["corpus"]["sha256"] = "0" * 64
    tampered = tmp_path / "t.manifest.json"
    tampered.write_text(json.dumps(manifest))
    code, _, err = run(capsys, "rerun", tampered, "--out", tmp_path / "r")
    assert code == 2 and "corpus" in err


def test_selfcheck_subset(tmp_path, capsys):
    code, summary, err = run(capsys, "selfcheck", "--only", "metric_oracles", "flops", "alpha_vector",
                             "--out", tmp_path)
    assert code == 0 and summary["failed"] == []
    assert "PASS metric_oracles" in err
    recs = json.loads((tmp_path / "selfcheck.json").read_text())
    assert [r["name"] for r in recs] == ["metric_oracles", "flops", "alpha_vector"]
