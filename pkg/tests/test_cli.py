import json

import pytest

from gdiscap.cli import main
from gdiscap.corpus import read_records


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "7", "--images", "24", "--out", str(d / "d.jsonl")]) == 0
    assert main(["group", "--k", "5", "--in", str(d / "d.jsonl"), "--out", str(d / "g.jsonl")]) == 0
    assert main(["train", "--in", str(d / "d.jsonl"), "--checkpoint", str(d / "m.ckpt"),
                 "--stage-epochs", "2:1", "--model", '{"d_model": 16, "d_ff": 32}']) == 0
    return d


def lines(path):
    return [json.loads(x) for x in path.read_text().splitlines()]


def test_group_lines(workspace):
    groups = lines(workspace / "g.jsonl")
    assert len(groups) == 4
    assert all(len(g["members"]) == 6 and not g["leftover"] for g in groups)


def test_caption_deterministic_and_well_formed(workspace):
    outs = []
    for name in ("c1.jsonl", "c2.jsonl"):
        assert main(["caption", "--in", str(workspace / "d.jsonl"), "--checkpoint", str(workspace / "m.ckpt"),
                     "--groups", str(workspace / "g.jsonl"), "--out", str(workspace / name)]) == 0
        outs.append((workspace / name).read_bytes())
    assert outs[0] == outs[1]
    rows = lines(workspace / "c1.jsonl")
    assert len(rows) == 24
    for r in rows:
        assert set(r) == {"image_id", "caption", "tokens", "empty"}
        assert r["caption"] == " ".join(r["tokens"])


def test_caption_with_beam(workspace, capsys):
    assert main(["caption", "--in", str(workspace / "d.jsonl"), "--checkpoint", str(workspace / "m.ckpt"),
                 "--groups", str(workspace / "g.jsonl"), "--beam", "2"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 24


def test_eval_on_ground_truth(workspace, capsys):
    records = read_records(workspace / "d.jsonl")
    gt = workspace / "gt.jsonl"
    gt.write_text("".join(json.dumps({"image_id": r.image_id, "caption": " ".join(
        next(c for c in r.captions if r.meta["unique_word"] in c))}) + "\n" for r in records))
    assert main(["eval", "--in", str(workspace / "d.jsonl"), "--captions", str(gt),
                 "--groups", str(workspace / "g.jsonl"), "--out", str(workspace / "r.json")]) == 0
    report = json.loads((workspace / "r.json").read_text())
    assert report["CIDErRank"] == 1.0
    assert "CIDErRank" in capsys.readouterr().err


def test_gma_inspect(workspace):
    out = workspace / "inspect.json"
    assert main(["gma-inspect", "--in", str(workspace / "d.jsonl"), "--checkpoint", str(workspace / "m.ckpt"),
                 "--groups", str(workspace / "g.jsonl"), "--group-index", "1", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["targets"]) == 6
    t = doc["targets"][0]
    assert len(t["R"]) == 5 and len(t["R_tilde"]) == 5
    assert sum(t["D"]) == pytest.approx(1.0)
    assert t["A"] == pytest.approx([doc["omega"] * d + doc["bias"] for d in t["D"]])


def test_config_file_and_flag_precedence(workspace):
    cfg = workspace / "cfg.json"
    cfg.write_text(json.dumps({"dataset": str(workspace / "d.jsonl"), "k": 5, "out": str(workspace / "g3.jsonl")}))
    assert main(["group", "--config", str(cfg), "--k", "3"]) == 0
    assert all(len(g["members"]) == 4 for g in lines(workspace / "g3.jsonl"))
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert main(["group", "--config", str(cfg), "--in", "x"]) == 1


def test_resolved_config_is_logged(workspace, caplog):
    caplog.set_level("INFO")
    main(["group", "--in", str(workspace / "d.jsonl"), "--out", str(workspace / "g4.jsonl")])
    assert any("resolved config" in r.getMessage() and '"k": 5' in r.getMessage() for r in caplog.records)


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"],
    ["frobnicate"],
    [],
    ["train", "--in", "d", "--checkpoint", "c", "--stage-epochs", "3"],
    ["caption", "--in", "d", "--checkpoint", "c", "--beam", "0"],
])
def test_usage_errors_exit_one(argv, tmp_path):
    assert main(argv) == 1


def test_data_errors_exit_two(workspace, tmp_path):
    assert main(["group", "--in", str(tmp_path / "missing.jsonl")]) == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"image_id": "x"}\n')
    assert main(["group", "--in", str(bad)]) == 2
    assert main(["caption", "--in", str(workspace / "d.jsonl"), "--checkpoint", str(bad),
                 "--groups", str(workspace / "g.jsonl")]) == 2
    assert main(["gma-inspect", "--in", str(workspace / "d.jsonl"), "--checkpoint", str(workspace / "m.ckpt"),
                 "--groups", str(workspace / "g.jsonl"), "--group-index", "99"]) == 2


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert main(["train", "--help"]) == 0
    out = capsys.readouterr().out
    for flag in ("--seed", "--k", "--config", "--dataset", "--checkpoint", "--disloss-mode", "--stage-epochs"):
        assert flag in out
