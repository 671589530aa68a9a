import json

import pytest

from aslora import cli
from aslora import config as C
from aslora import checkpoint
from aslora.model import Transformer
from aslora.reporting import CHECKPOINT_DIR, default_run_dir

LOGS = ("metrics.csv", "merges.jsonl", "similarity.jsonl", "evals.jsonl", "assignment.json")


@pytest.fixture
def cfg_file(tmp_path, tiny_cfg):
    def write(name="tiny", **over):
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(tiny_cfg(**over)))
        return path
    return write


def test_train_writes_run_directory(cfg_file, run_root, capsys):
    assert cli.main(["-q", "train", str(cfg_file())]) == 0
    out = capsys.readouterr().out
    run_dir = default_run_dir(C.load_config(cfg_file()), "tiny")
    assert run_dir.parent == run_root
    assert f"run directory: {run_dir}" in out and "merges: 6" in out
    for name in LOGS + ("config.json", "summary.json"):
        assert (run_dir / name).is_file(), name
    assert (run_dir / CHECKPOINT_DIR / "manifest.json").is_file()
    lines = (run_dir / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,phase,loss,lr,live_groups_q,live_groups_v,params"
    assert len(lines) == 61
    assert len((run_dir / "merges.jsonl").read_text().splitlines()) == 6
    assert len((run_dir / "evals.jsonl").read_text().splitlines()) == 3
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["merges"] == 6 and summary["phase_boundaries"]["final_start"] == 35


def test_refuses_to_clobber_without_force(cfg_file, run_root):
    path = str(cfg_file())
    assert cli.main(["-q", "train", path]) == 0
    assert cli.main(["-q", "train", path]) == cli.EXIT_IO
    assert cli.main(["-q", "train", path, "--force"]) == 0


def test_rerun_is_byte_identical(cfg_file, tmp_path):
    path = str(cfg_file())
    cli.main(["-q", "train", path, "--out", str(tmp_path / "a")])
    cli.main(["-q", "train", path, "--out", str(tmp_path / "b")])
    for name in LOGS:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_resume_reproduces_uninterrupted_run(cfg_file, tmp_path):
    path = str(cfg_file())
    full, part = tmp_path / "full", tmp_path / "part"
    assert cli.main(["-q", "train", path, "--out", str(full)]) == 0
    assert cli.main(["-q", "train", path, "--out", str(part), "--until", "27"]) == 0
    assert len((part / "metrics.csv").read_text().splitlines()) == 28
    assert cli.main(["-q", "train", "--resume", str(part)]) == 0
    for name in LOGS:
        assert (full / name).read_bytes() == (part / name).read_bytes(), name
    a, _, _ = checkpoint.load(full / CHECKPOINT_DIR)
    b, _, _ = checkpoint.load(part / CHECKPOINT_DIR)
    assert a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_resume_rejects_other_config(cfg_file, tmp_path):
    part = tmp_path / "part"
    cli.main(["-q", "train", str(cfg_file()), "--out", str(part), "--until", "10"])
    other = cfg_file("other", seed=9)
    assert cli.main(["-q", "train", str(other), "--resume", str(part)]) == cli.EXIT_CONFIG


def test_exit_codes(cfg_file, tmp_path, capsys, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"rank": 0}))
    assert cli.main(["-q", "train", str(bad)]) == cli.EXIT_CONFIG
    assert "rank" in capsys.readouterr().err
    assert cli.main(["-q", "train", str(tmp_path / "nope.json")]) == cli.EXIT_IO
    assert cli.main(["-q", "inspect", str(tmp_path)]) == cli.EXIT_IO
    loss = Transformer.loss
    monkeypatch.setattr(Transformer, "loss", lambda self, x, y: loss(self, x, y) * float("nan"))
    assert cli.main(["-q", "train", str(cfg_file()), "--out", str(tmp_path / "nan")]) == cli.EXIT_NAN
    assert "step 1" in capsys.readouterr().err


def test_params_presets(capsys):
    assert cli.main(["params", "--preset", "roberta-base", "--json"]) == 0
    rows = {r["method"]: r["params"] for r in json.loads(capsys.readouterr().out)}
    assert rows["LoRA"] == 294_912 and rows["ASLoRA (N=7)"] == 73_728
    assert rows["Fixed share (n=2)"] == 2 * 768 * 8 * (1 + 6)
    assert cli.main(["params", "--preset", "llama2-7b", "--json"]) == 0
    rows = {r["method"]: r["params"] for r in json.loads(capsys.readouterr().out)}
    assert rows["LoRA"] == 33_554_432 and rows["ASLoRA (N=16)"] == 8_912_896
    assert cli.main(["params"]) == 0
    assert "ASLoRA (N=8)" in capsys.readouterr().out


def test_sweep_sorted_with_decreasing_params(cfg_file, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert cli.main(["-q", "sweep", str(cfg_file()), "--budgets", "2", "0", "3", "--out", str(out)]) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("N,seed,params")
    rows = [ln.split(",") for ln in lines[1:]]
    assert [int(r[0]) for r in rows] == [0, 2, 3]
    params = [int(r[2]) for r in rows]
    assert params == sorted(params, reverse=True) and len(set(params)) == 3
    assert len({r[1] for r in rows}) == 3
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == ["N00", "N02", "N03"]
    assert cli.main(["-q", "sweep", str(cfg_file()), "--budgets", "1", "4", "--out", str(tmp_path / "s2")]) == 2
    assert not (tmp_path / "s2").exists()


def test_compare_unmatched_pair_is_config_error(cfg_file, tmp_path):
    path = cfg_file(compare_pairs=[[2, 1]])
    assert cli.main(["-q", "compare", str(path), "--out", str(tmp_path / "c")]) == cli.EXIT_CONFIG
    assert not (tmp_path / "c").exists()


def test_compare_pairs_have_equal_params(cfg_file, tmp_path, capsys):
    out = tmp_path / "c"
    assert cli.main(["-q", "compare", str(cfg_file()), "--steps", "40", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "pair 0 (n=2 vs N=2): adaptive" in text
    rows = (out / "compare.csv").read_text().splitlines()
    assert len(rows) == 3
    assert rows[1].split(",")[3] == rows[2].split(",")[3]
    assert len((out / "pair0-fixed" / "metrics.csv").read_text().splitlines()) == 41


def test_inspect_accepts_run_or_checkpoint_dir(cfg_file, tmp_path, capsys):
    run_dir = tmp_path / "r"
    cli.main(["-q", "train", str(cfg_file()), "--out", str(run_dir)])
    capsys.readouterr()
    assert cli.main(["inspect", str(run_dir)]) == 0
    text = capsys.readouterr().out
    assert "step: 60" in text and "query: 1 groups after 3 merges" in text
    assert cli.main(["inspect", str(run_dir / CHECKPOINT_DIR), "--json"]) == 0
    manifest = json.loads(capsys.readouterr().out)
    assert manifest["config_hash"] == C.config_hash(C.load_config(run_dir / "config.json"))
