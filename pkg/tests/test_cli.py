import csv
import json

import numpy as np
import pytest

from degeo import synth
from degeo.cli import main
from degeo.lineage import CellRecord, LineageTree, write_file

FAST = ["--iterations", "2000", "--burn-in", "500"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def ds3(tmp_path_factory):
    """Planted trees: ds3_000 has two roots and ds3_001 one; the seed-4 set is one noise tree."""
    d = tmp_path_factory.mktemp("ds3")
    assert main(["synth", "--type", "3", "--count", "2", "--seed", "0", "--out", str(d)]) == 0
    e = tmp_path_factory.mktemp("ds3neg")
    assert main(["synth", "--type", "3", "--count", "1", "--seed", "4", "--out", str(e)]) == 0
    return d, e


def test_synth_writes_trees_and_truth(ds3):
    d, _ = ds3
    assert sorted(p.name for p in d.iterdir()) == [
        "ds3_000.csv", "ds3_000.truth.csv", "ds3_001.csv", "ds3_001.truth.csv", "manifest.json"]
    man = json.loads((d / "manifest.json").read_text())
    assert man["type"] == 3 and len(man["files"]) == 2
    truth, flags = synth.read_truth(d / "ds3_001.truth.csv")
    assert sorted(truth.roots) == man["files"][1]["roots"] and len(truth.roots) == 1
    assert len(flags) == 707


def test_synth_deterministic_and_type_checked(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["synth", "--type", "2", "--count", "3", "--seed", "9", "--out", str(out)]) == 0
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes()
    assert main(["synth", "--type", "4", "--out", str(tmp_path / "c")]) == 2
    assert "1, 2 or 3" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["synth", "--type", "1", "--seed", "-1"])


def test_detect_negative_control(ds3, tmp_path):
    _, neg = ds3
    truth, _ = synth.read_truth(neg / "ds3_000.truth.csv")
    assert not truth.roots
    out = tmp_path / "out"
    assert main(["detect", str(neg / "ds3_000.csv"), "--out", str(out)] + FAST) == 0
    table = rows(out / "ds3_000.branches.csv")
    assert [r["accepted"] for r in table] == ["0"]
    assert rows(out / "ds3_000.onsets.csv") == []


def test_detect_single_branch_and_manifest(ds3, tmp_path):
    d, _ = ds3
    truth, _ = synth.read_truth(d / "ds3_001.truth.csv")
    (root,) = truth.roots
    out = tmp_path / "out"
    assert main(["detect", str(d / "ds3_001.csv"), "--out", str(out), "--seed", "3"] + FAST) == 0
    table = rows(out / "ds3_001.branches.csv")
    acc = [r for r in table if r["accepted"] == "1"]
    assert len(acc) == 1
    m = acc[0]["M_star"]
    assert m.startswith(root) or root.startswith(m)
    onsets = [r for r in rows(out / "ds3_001.onsets.csv") if r["kind"] == "onset"]
    assert onsets and all(r["cell"].startswith(root) for r in onsets)
    assert all(abs(int(r["time"]) - truth.onsets[root]) <= 2 for r in onsets)
    man = json.loads((out / "manifest.json").read_text())
    entry = man["files"][0]
    assert man["command"] == "detect" and man["chain_config"]["rng_seed"] == 3
    assert len(entry["sha256"]) == 64 and entry["complete"] is True
    assert set(entry["branches"][0]["rhat"]) == {"mu", "sigma1_sq", "sigma2_sq", "beta", "rho"}


def test_detect_missing_file_named(ds3, tmp_path, capsys):
    d, _ = ds3
    missing = tmp_path / "nope.csv"
    status = main(["detect", str(missing), str(d / "ds3_001.csv"), "--out", str(tmp_path / "o")]
                  + FAST)
    assert status == 1
    assert str(missing) in capsys.readouterr().err
    # the other file still ran
    assert (tmp_path / "o" / "ds3_001.branches.csv").exists()


def test_detect_bad_threshold():
    with pytest.raises(SystemExit):
        main(["detect", "x.csv", "--threshold", "1.5"])


def test_output_dir_override(ds3, tmp_path, monkeypatch):
    _, neg = ds3
    target = tmp_path / "env"
    monkeypatch.setenv("DEGEO_OUTPUT_DIR", str(target))
    assert main(["detect", str(neg / "ds3_000.csv"), "--out", str(tmp_path / "ignored")]
                + FAST) == 0
    assert (target / "ds3_000.branches.csv").exists()
    assert not (tmp_path / "ignored").exists()


def test_train_deterministic_and_single_label(tmp_path, capsys):
    args = ["train", "--count", "3", "--seed", "0"] + FAST
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert main(args + ["--model-out", str(a), "--report", str(tmp_path / "r.json")]) == 0
    assert main(args + ["--model-out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    report = json.loads((tmp_path / "r.json").read_text())
    assert 0 < report["positive"] < report["rows"]
    # seed 1: the first two mimic trees carry no branch, so every row is negative
    assert main(["train", "--count", "2", "--seed", "1", "--model-out", str(tmp_path / "c.txt")]
                + FAST) == 1
    assert "error" in capsys.readouterr().err


def test_eval_missing_sidecar(tmp_path, ds3, capsys):
    d, _ = ds3
    inp = tmp_path / "inp"
    inp.mkdir()
    (inp / "t.csv").write_bytes((d / "ds3_001.csv").read_bytes())
    assert main(["eval", "--inputs", str(inp), "--out", str(tmp_path / "o")] + FAST) == 1
    assert "truth" in capsys.readouterr().err


def test_eval_metrics_table(tmp_path, ds3):
    d, _ = ds3
    out = tmp_path / "o"
    assert main(["eval", "--inputs", str(d), "--out", str(out)] + FAST) == 0
    table = rows(out / "metrics.csv")
    assert {(r["stratum"], r["method"]) for r in table} == {
        ("One", "DEGEO"), ("Two", "DEGEO"), ("Overall", "DEGEO"),
        ("One", "APM"), ("Two", "APM"), ("Overall", "APM")}
    overall = next(r for r in table if r["stratum"] == "Overall" and r["method"] == "DEGEO")
    assert float(overall["TPR"]) >= 0.9 and float(overall["FPR"]) <= 0.01


def one_cell(tmp_path):
    path = tmp_path / "one.csv"
    write_file(LineageTree([CellRecord("AB", np.arange(5, 25), np.linspace(0, 1, 20))]), path)
    return path


def test_render_one_cell(tmp_path, capsys):
    path = one_cell(tmp_path)
    assert main(["render", str(path)]) == 0
    svg = capsys.readouterr().out
    assert svg.startswith("<svg") or svg.startswith("<?xml")
    assert svg.count('<line class="cell"') == 1
    assert main(["render", str(path)]) == 0
    assert capsys.readouterr().out == svg


def test_render_outlines_accepted_branch(ds3, tmp_path):
    d, _ = ds3
    out = tmp_path / "det"
    assert main(["detect", str(d / "ds3_001.csv"), "--out", str(out), "--seed", "3"] + FAST) == 0
    acc = [r["M_star"] for r in rows(out / "ds3_001.branches.csv") if r["accepted"] == "1"]
    svg_path = tmp_path / "pic.svg"
    assert main(["render", str(d / "ds3_001.csv"), "--branches", str(out / "ds3_001.branches.csv"),
                 "--onsets", str(out / "ds3_001.onsets.csv"), "-o", str(svg_path)]) == 0
    svg = svg_path.read_text()
    assert svg.count('class="branch"') == 1
    assert f'data-root="{acc[0]}"' in svg
    assert svg.count('class="onset"') == len(
        [r for r in rows(out / "ds3_001.onsets.csv") if r["kind"] == "onset"])


def test_render_missing_input(tmp_path, capsys):
    assert main(["render", str(tmp_path / "none.csv")]) == 1
    assert "none.csv" in capsys.readouterr().err
