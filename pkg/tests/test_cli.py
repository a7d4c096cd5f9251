import json
import subprocess
import sys

import numpy as np
import pytest

from sharc import cli
from sharc.core import EmbeddingSet
from sharc.data import read_embeddings, read_rttm, write_embeddings, write_similarity
from sharc.gnn import load_params
from sharc.simgraph import similarity


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("synth", "--out", data, "--n-recordings", 4, "--speakers", 2, 3,
               "--dim", 6, "--duration", 15, 25, "--seed", 3) == 0
    ckpt = root / "model.ckpt"
    assert run("train", data, "--out", ckpt, "--epochs", 3, "--k", 5,
               "--dims", 6, 6, 4, "--lr", 0.1, "--batch-size", 2) == 0
    return root, data, ckpt


def test_synth_layout(corpus):
    _, data, _ = corpus
    files = sorted(data.glob("*.emb"))
    assert len(files) == 4
    es = read_embeddings(files[0])
    assert es.dim == 6 and es.labels is not None and es.segments is not None
    ids = {r.recording_id for r in read_rttm(data / "ref.rttm")}
    assert ids == {f.stem for f in files}


def test_round_trip(corpus, capsys):
    root, data, ckpt = corpus
    hyp = root / "hyp.rttm"
    assert run("infer", data, "--checkpoint", ckpt, "--out", hyp, "--k", 5, "--p-tau", 0.5) == 0
    assert {r.recording_id for r in read_rttm(hyp)} == {r.recording_id for r in read_rttm(data / "ref.rttm")}
    capsys.readouterr()
    assert run("eval", "--ref", data / "ref.rttm", "--hyp", hyp, "--both-conditions") == 0
    out = capsys.readouterr().out
    assert out.count("TOTAL") == 2
    assert "collar 0.25 s" in out


def test_reference_scores_zero(corpus, capsys):
    _, data, _ = corpus
    ref = data / "ref.rttm"
    assert run("eval", "--ref", ref, "--hyp", ref, "--collar", 0.25) == 0
    total = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("TOTAL")][0]
    assert total.split("\t")[1] == "0.00"


def test_infer_to_stdout(corpus, capsys):
    _, data, ckpt = corpus
    one = sorted(data.glob("*.emb"))[0]
    assert run("infer", one, "--checkpoint", ckpt, "--k", 5, "-M", 1) == 0
    assert capsys.readouterr().out.startswith("SPEAKER ")


def test_precomputed_similarity_matches_cosine(corpus, tmp_path):
    _, data, ckpt = corpus
    one = sorted(data.glob("*.emb"))[0]
    sim = tmp_path / "s.sim"
    write_similarity(similarity(read_embeddings(one).embeddings), sim)
    a, b = tmp_path / "a.rttm", tmp_path / "b.rttm"
    assert run("infer", one, "--checkpoint", ckpt, "--k", 5, "--out", a) == 0
    assert run("infer", one, "--checkpoint", ckpt, "--k", 5, "--out", b, "--similarity", sim) == 0
    assert a.read_text() == b.read_text()


def test_config_and_flag_override(corpus, tmp_path):
    _, data, _ = corpus
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 3, "k": 4, "dims": [5, 4, 3], "lr": 0.05}))
    log = tmp_path / "log.jsonl"
    ckpt = tmp_path / "m.ckpt"
    assert run("train", data, "--config", cfg, "--epochs", 2, "--out", ckpt, "--log", log) == 0
    records = [json.loads(ln) for ln in log.read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1]
    assert set(records[0]) == {"epoch", "L", "L_conn", "L_den"}
    assert load_params(ckpt).dims.as_tuple() == (5, 4, 3)


def test_gradcheck_passes(capsys):
    assert run("gradcheck", "--n-graphs", 3, "--n-coords", 30) == 0
    assert "ok" in capsys.readouterr().out


def test_gradcheck_reports_failure(capsys):
    assert run("gradcheck", "--n-graphs", 2, "--n-coords", 30, "--step", 0.5, "--tolerance", 1e-12) == 1
    assert "FAIL" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv, message",
    [
        (["infer", "missing.emb", "--checkpoint", "x.ckpt"], "no such file"),
        (["eval", "--ref", "missing.rttm", "--hyp", "missing.rttm"], "missing.rttm"),
    ],
)
def test_errors_exit_nonzero(argv, message, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(*argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("sharc: error:") and message in err.lower()


def test_unknown_config_key(corpus, tmp_path, capsys):
    _, data, _ = corpus
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learning_rate": 0.1}))
    assert run("train", data, "--config", cfg, "--out", tmp_path / "m.ckpt") == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_dimension_mismatch(corpus, tmp_path, capsys):
    _, data, ckpt = corpus
    es = read_embeddings(sorted(data.glob("*.emb"))[0])
    wide = EmbeddingSet("wide", np.hstack([es.embeddings, es.embeddings]), es.segments, es.labels)
    write_embeddings(wide, tmp_path / "wide.emb")
    assert run("infer", tmp_path / "wide.emb", "--checkpoint", ckpt) == 1
    assert "checkpoint expects F=6" in capsys.readouterr().err


def test_train_requires_labels(tmp_path, capsys):
    write_embeddings(EmbeddingSet("u", np.random.default_rng(0).normal(size=(5, 3))), tmp_path / "u.emb")
    assert run("train", tmp_path / "u.emb", "--out", tmp_path / "m.ckpt") == 1
    assert "without labels" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("infer", "--bogus")
    assert exc.value.code == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "sharc", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout
