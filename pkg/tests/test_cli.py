import csv
import json

import pytest

from certsmooth import classifiers
from certsmooth.cli import main, roc_auc, svg_heatmap


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(ws / "corpus"), "--n-benign", "20", "--n-malicious", "20",
                 "--min-size", "8192", "--max-size", "16384", "--seed", "2"]) == 0
    assert main(["train", "--corpus", str(ws / "corpus"), "--out", str(ws / "cs.model"), "--epochs", "3"]) == 0
    assert main(["train", "--corpus", str(ws / "corpus"), "--out", str(ws / "ns.model"), "--epochs", "3",
                 "--scheme", "ns-baseline"]) == 0
    return ws


def _csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_deterministic(workspace):
    assert main(["train", "--corpus", str(workspace / "corpus"), "--out", str(workspace / "again.model"),
                 "--epochs", "3"]) == 0
    assert (workspace / "again.model").read_bytes() == (workspace / "cs.model").read_bytes()


@pytest.mark.parametrize("scheme,model", [("chunk", "cs"), ("ns-baseline", "ns"), ("rs-ablate", "ns"),
                                          ("rs-delete", "ns")])
def test_eval(workspace, scheme, model):
    out = workspace / f"eval_{scheme}.csv"
    assert main(["eval", "--corpus", str(workspace / "corpus"), "--model", str(workspace / f"{model}.model"),
                 "--scheme", scheme, "--split", "train", "--split", "test", "--out", str(out)]) == 0
    rows = _csv(out)
    assert [r["split"] for r in rows] == ["train", "test"]
    assert all(0 <= float(r["accuracy"]) <= 1 and 0 <= float(r["roc_auc"]) <= 1 for r in rows)


def test_certify(workspace):
    out = workspace / "cert.csv"
    args = ["certify", "--corpus", str(workspace / "corpus"), "--model", str(workspace / "cs.model"), "--out", str(out)]
    for f in ("0.01", "0.1", "0.5"):
        args += ["--p-fraction", f]
    assert main(args) == 0
    rows = _csv(out)
    assert len(rows) == 6
    assert [r["certified_accuracy"] for r in rows if r["kind"] == "patch" and r["p_fraction"] == "0.5"] == ["0.000000"]


def test_attack(workspace, capsys):
    out = workspace / "attack.jsonl"
    assert main(["attack", "--corpus", str(workspace / "corpus"), "--model", str(workspace / "cs.model"),
                 "--attack", "padding", "--attack", "shift", "--limit", "2", "--steps", "2", "--out", str(out)]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 4 and {r["attack"] for r in rows} == {"padding", "shift"}
    assert "adv_acc (certified)" in (workspace / "attack.jsonl.summary.txt").read_text()
    assert "padding" in capsys.readouterr().out


def test_scoremap(workspace):
    f = sorted((workspace / "corpus" / "files").iterdir())[0]
    assert main(["scoremap", "--model", str(workspace / "cs.model"), "--file", str(f), "--out", str(workspace / "map")]) == 0
    rows = _csv(workspace / "map.csv")
    svg = (workspace / "map.svg").read_text()
    assert svg.count('class="chunk"') == len(rows) > 0


def test_bench(workspace):
    out = workspace / "bench.csv"
    assert main(["bench", "--model", str(workspace / "cs.model"), "--baseline-model", str(workspace / "ns.model"),
                 "--sizes", "8192", "16384", "--repeats", "1", "--out", str(out)]) == 0
    rows = _csv(out)
    assert {r["scheme"] for r in rows} == {"chunk", "ns-baseline", "rs-ablate", "rs-delete"} and len(rows) == 8


def test_exit_codes(workspace, tmp_path, capsys):
    corpus, cs, ns = str(workspace / "corpus"), str(workspace / "cs.model"), str(workspace / "ns.model")
    assert main(["certify", "--corpus", corpus, "--model", cs, "--scheme", "rs-ablate"]) == 2
    assert main(["eval", "--corpus", corpus, "--model", ns]) == 2
    assert main(["certify", "--corpus", corpus, "--model", cs, "--p-fraction", "1.5"]) == 2
    assert main(["bogus"]) == 2
    junk = tmp_path / "junk.exe"
    junk.write_bytes(b"hello")
    assert main(["scoremap", "--model", cs, "--file", str(junk)]) == 10
    bad = tmp_path / "bad.model"
    bad.write_bytes(b"CSMD" + bytes(20))
    assert main(["scoremap", "--model", str(bad), "--file", str(junk)]) == 12
    err = capsys.readouterr().err
    assert "certsmooth: error:" in err


def test_roc_auc():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([0.5, 0.5], [0, 1]) == 0.5


def test_svg_cells():
    svg = svg_heatmap([0.0, 0.5, 1.0], 512)
    assert svg.count("<rect") == 3 and "rgb(255,0,0)" in svg and "rgb(0,0,255)" in svg
