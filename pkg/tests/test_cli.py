import json
from pathlib import Path

import pytest

from gfcn.cli import load_run_config, main, UsageError

TINY = """\
[architecture]
input_height = 8
convblock_filters = 2, 4
gateblock_filters = 4, 4
ending_gate_count = 2
ending_channels = 4

[training]
learning_rate = 0.001
max_epochs = {epochs}
seed = 3

[data]
charset = data/charset.txt
train = data/train.tsv
valid = data/valid.tsv
runs_dir = runs
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    assert main(["synth", "--symbols", "0123456789abcdef", "--count", "6", "--seed", "1",
                 "--split", "train", "--out", str(root / "data")]) == 0
    assert main(["synth", "--charset", str(root / "data" / "charset.txt"), "--count", "2", "--seed", "2",
                 "--split", "valid", "--out", str(root / "data")]) == 0
    return root


def write_config(root: Path, epochs=1, name="run.ini", extra=""):
    path = root / name
    path.write_text(TINY.format(epochs=epochs) + extra)
    return path


def run_dirs(root: Path):
    runs = root / "runs"
    return sorted(runs.iterdir()) if runs.is_dir() else []


def test_config_loading(workspace):
    cfg = load_run_config(write_config(workspace))
    assert cfg.architecture.charset_size == 16
    assert cfg.data.train == workspace / "data" / "train.tsv"
    assert cfg.training.learning_rate == 0.001


@pytest.mark.parametrize("extra, message", [
    ("\n[extras]\nx = 1\n", "unknown section"),
    ("bogus = 1\n", "unknown key 'bogus'"),
])
def test_config_rejects_unknown(workspace, extra, message):
    with pytest.raises(UsageError, match=message):
        load_run_config(write_config(workspace, extra=extra, name="bad.ini"))


def test_config_charset_size_must_agree(workspace):
    text = TINY.format(epochs=1).replace("ending_channels = 4", "ending_channels = 4\ncharset_size = 10")
    (workspace / "cs.ini").write_text(text)
    with pytest.raises(UsageError, match="charset_size = 10"):
        load_run_config(workspace / "cs.ini")


def test_train_eval_predict(workspace, capsys):
    cfg = write_config(workspace, epochs=2)
    assert main(["train", "--config", str(cfg)]) == 0
    (run,) = run_dirs(workspace)
    for name in ("config.ini", "charset.txt", "history.jsonl", "best.ckpt", "last.ckpt", "summary.json"):
        assert (run / name).is_file(), name
    summary = json.loads((run / "summary.json").read_text())
    assert summary["epochs"] == 2
    assert len((run / "history.jsonl").read_text().splitlines()) == 2

    capsys.readouterr()
    manifest = workspace / "data" / "valid.tsv"
    assert main(["eval", "--checkpoint", str(run / "best.ckpt"), "--manifest", str(manifest)]) == 0
    out = capsys.readouterr().out
    report = run / "eval-valid.txt"
    assert out == report.read_text()
    assert "cer" in out and (run / "eval-valid.tsv").read_text().startswith("metric\tvalue")

    image = workspace / "data" / "valid" / "00000.pgm"
    assert main(["predict", "--checkpoint", str(run / "best.ckpt"), str(image)]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 1
    assert main(["predict", "--checkpoint", str(run / "best.ckpt"), str(workspace / "missing.pgm")]) == 2


def test_resume_semantics(tmp_path, workspace, capsys):
    cfg = write_config(workspace, epochs=1, name="resume.ini")
    text = cfg.read_text().replace("runs_dir = runs", f"runs_dir = {tmp_path / 'runs'}")
    cfg.write_text(text)
    assert main(["train", "--config", str(cfg), "--resume"]) == 2
    assert "nothing to resume" in capsys.readouterr().err
    assert main(["train", "--config", str(cfg)]) == 0
    (run,) = list((tmp_path / "runs").iterdir())
    assert main(["train", "--config", str(cfg), "--resume", str(run)]) == 2
    assert "complete" in capsys.readouterr().err
    # an interrupted run (no summary) continues with more epochs
    (run / "summary.json").unlink()
    cfg.write_text(text.replace("max_epochs = 1", "max_epochs = 2"))
    assert main(["train", "--config", str(cfg), "--resume"]) == 0
    assert json.loads((run / "summary.json").read_text())["epochs"] == 2
    assert len((run / "history.jsonl").read_text().splitlines()) == 2


def test_usage_errors_write_nothing(tmp_path, workspace, capsys):
    text = TINY.format(epochs=1).replace("data/charset.txt", "data/nope.txt").replace(
        "runs_dir = runs", f"runs_dir = {tmp_path / 'runs'}")
    (workspace / "nocs.ini").write_text(text)
    assert main(["train", "--config", str(workspace / "nocs.ini")]) == 2
    assert "nope.txt does not exist" in capsys.readouterr().err
    assert not (tmp_path / "runs").exists()
    assert main(["train", "--config", str(tmp_path / "absent.ini")]) == 2


def test_corrupt_checkpoint_is_usage_error(tmp_path, workspace, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    assert main(["eval", "--checkpoint", str(bad), "--manifest", str(workspace / "data" / "valid.tsv")]) == 2
    assert "bad magic" in capsys.readouterr().err


def test_eval_charset_mismatch(tmp_path, workspace, capsys):
    cfg = write_config(workspace, epochs=1, name="cs2.ini")
    cfg.write_text(cfg.read_text().replace("runs_dir = runs", f"runs_dir = {tmp_path}"))
    assert main(["train", "--config", str(cfg)]) == 0
    (run,) = list(tmp_path.iterdir())
    other = tmp_path / "other.txt"
    other.write_text("# gfcn-charset v1\nx\ny\n")
    args = ["eval", "--checkpoint", str(run / "last.ckpt"), "--manifest", str(workspace / "data" / "valid.tsv")]
    assert main(args + ["--charset", str(other)]) == 2
    assert "does not match" in capsys.readouterr().err


def test_analyze(tmp_path, capsys):
    assert main(["analyze", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "receptive field (v, h): (196, 240)" in out
    assert "-16" in out
    for name in ("analysis.txt", "trace.tsv", "sweep.tsv", "calibration.txt"):
        assert (tmp_path / name).is_file()
    assert main(["analyze", "--format", "tsv"]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0].startswith("gates\t") and [r.split("\t")[4] for r in rows[1:]] == [
        "100", "128", "156", "184", "212", "240"]


def test_synth_cli(tmp_path, capsys):
    base = ["synth", "--symbols", "abc", "--count", "3", "--seed", "4"]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--out", str(tmp_path / "b")]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 5
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert main(["synth", "--symbols", "abc", "--count", "0", "--out", str(tmp_path / "z")]) == 0
    assert (tmp_path / "z" / "synth.tsv").read_text() == "# gfcn-manifest v1\n"
    assert main(["synth", "--symbols", "a;", "--count", "1", "--out", str(tmp_path / "x")]) == 2
    assert not (tmp_path / "x").exists()
    assert main(["synth", "--count", "1", "--out", str(tmp_path / "y")]) == 2


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


def test_compare_norms_small(tmp_path, workspace, capsys):
    cfg = write_config(workspace, epochs=2, name="norms.ini")
    assert main(["compare-norms", "--config", str(cfg), "--cutoffs", "1,2", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    for kind in ("batch", "layer", "instance", "group(32)"):
        assert kind in out
    assert (tmp_path / "norms.tsv").read_text().startswith("norm\tcer_le_1\tcer_le_2")
