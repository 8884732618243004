import json

import pytest

from trackmill.cli import main
from trackmill.core import load_manifest, save_manifest
from trackmill.simulator import make_clean_dataset

SMALL = [
    "--set", "data.synthetic.n_ids=30",
    "--set", "data.synthetic.length_range=[20,30]",
    "--set", "train.epochs=1",
    "--set", "associate.eps_policy=\"p0.5\"",
    "--set", "eval.n_ids=20",
]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """Clean -> simulated -> embedded -> isolated manifests, built once through the CLI."""
    d = tmp_path_factory.mktemp("chain")
    save_manifest(make_clean_dataset(40, 4, (20, 40), (2, 4), seed=0), d / "clean.jsonl")
    steps = [
        ["simulate", "-i", d / "clean.jsonl", "-o", d / "noisy.jsonl", "--rfm", "2.5", "--rsw", "1.5"],
        ["embed", "-i", d / "noisy.jsonl", "-o", d / "emb.jsonl", "--separation-ratio", "4"],
        ["isolate", "-i", d / "emb.jsonl", "-o", d / "iso.jsonl"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0
    return d


def test_simulate_hits_targets(chain, capsys):
    code, rep, _ = run(capsys, "measure", "-i", str(chain / "noisy.jsonl"))
    assert code == 0
    assert abs(rep["r_fm"] - 2.5) <= 0.05 and abs(rep["r_sw"] - 1.5) <= 0.05


def test_simulate_report_file(chain, tmp_path, capsys):
    report = tmp_path / "r.json"
    code, rep, _ = run(
        capsys, "simulate", "-i", str(chain / "clean.jsonl"), "-o", str(tmp_path / "n.jsonl"),
        "--rfm", "1.7", "--rsw", "1.2", "--dist", "2:1", "--report", str(report),
    )
    assert code == 0
    assert json.loads(report.read_text()) == rep
    assert rep["config"]["dist"] == {"2": 1.0}


def test_embed_writes_unit_embeddings(chain):
    ds = load_manifest(chain / "emb.jsonl")
    assert ds.embedding_dim == 64


def test_isolate_report(chain, tmp_path, capsys):
    code, rep, _ = run(capsys, "isolate", "-i", str(chain / "emb.jsonl"), "-o", str(tmp_path / "i.jsonl"))
    assert code == 0 and rep["config"]["eps"] == 0.6


def test_associate_writes_labels(chain, tmp_path, capsys):
    out = tmp_path / "labels.json"
    code, rep, _ = run(capsys, "associate", "-i", str(chain / "iso.jsonl"), "-o", str(out), "--eps-policy", "p0.5")
    assert code == 0
    labels = json.loads(out.read_text())
    assert labels["config"]["eps_policy"] == "p0.5"
    assert "labels" in labels and "labels" not in rep
    assert 0 < rep["quality"]["purity"] <= 1


def test_train_and_eval(chain, tmp_path, capsys):
    model = tmp_path / "m.bin"
    code, rep, _ = run(
        capsys, "train", "-i", str(chain / "iso.jsonl"), "-o", str(model), "--epochs", "2",
        "--eps-policy", "p0.5", "--csv", str(tmp_path / "e.csv"), "--report", str(tmp_path / "t.json"),
    )
    assert code == 0 and model.exists() and len(rep["loss_curve"]) == 2
    assert (tmp_path / "e.csv").read_text().count("\n") == 3
    gallery = chain / "emb.jsonl"
    for extra in ([], ["--model", str(model)], ["--model", str(model), "--use", "net"]):
        code, ev, _ = run(capsys, "eval", "--query", str(gallery), "--gallery", str(gallery), "--ranks", "1,5", *extra)
        assert code == 0 and set(ev["cmc"]) == {"1", "5"}


def test_missing_input_is_data_error(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    code, _, err = run(capsys, "measure", "-i", str(missing))
    assert code == 3 and str(missing) in err


def test_bad_ranks_is_config_error(chain, capsys):
    g = str(chain / "emb.jsonl")
    code, _, err = run(capsys, "eval", "--query", g, "--gallery", g, "--ranks", "a,b")
    assert code == 2 and "ranks" in err


def test_bad_target_is_config_error(chain, tmp_path, capsys):
    code, _, _ = run(
        capsys, "simulate", "-i", str(chain / "clean.jsonl"), "-o", str(tmp_path / "x.jsonl"),
        "--rfm", "0.5", "--rsw", "1.2",
    )
    assert code == 2


def test_pipeline_runs_and_skips_isolation(tmp_path, capsys):
    code, rep, _ = run(capsys, "pipeline", "--out-dir", str(tmp_path / "a"), *SMALL)
    assert code == 0 and rep["completed"] and "isolate" in rep["stages"]
    assert (tmp_path / "a" / "model.bin").exists()
    assert (tmp_path / "a" / "reports" / "eval.json").exists()
    code, rep, _ = run(capsys, "pipeline", "--out-dir", str(tmp_path / "b"), *SMALL, "--set", "skip_isolation=true")
    assert code == 0 and rep["isolation_skipped"] and "isolate" not in rep["stages"]


def test_pipeline_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"synthetic": {"n_ids": 30}}, "train": {"epochs": 1},
                               "associate": {"eps_policy": "p0.5"},
                               "eval": {"enabled": False}, "output": {"dir": str(tmp_path / "o")}}))
    code, rep, _ = run(capsys, "pipeline", "--config", str(cfg))
    assert code == 0 and "mAP" not in rep and (tmp_path / "o" / "pipeline.json").exists()


def test_pipeline_unknown_key(tmp_path, capsys):
    code, _, err = run(capsys, "pipeline", "--out-dir", str(tmp_path), "--set", "train.nope=1")
    assert code == 2 and "nope" in err


def test_pipeline_stage_failure_leaves_partial(tmp_path, capsys):
    code, _, err = run(
        capsys, "pipeline", "--out-dir", str(tmp_path), *SMALL, "--set", "associate.eps_policy=\"fixed:0.000001\"",
    )
    assert code == 4 and "train" in err
    assert (tmp_path / "pipeline.json.partial").exists()
    assert not (tmp_path / "pipeline.json").exists()


def test_thread_env(monkeypatch, chain, capsys):
    monkeypatch.setenv("TRACKMILL_THREADS", "1")
    assert run(capsys, "measure", "-i", str(chain / "clean.jsonl"))[0] == 0
    monkeypatch.setenv("TRACKMILL_THREADS", "zero")
    assert run(capsys, "measure", "-i", str(chain / "clean.jsonl"))[0] == 2
