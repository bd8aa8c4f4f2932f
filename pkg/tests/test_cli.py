import json
import subprocess
import sys
from pathlib import Path


from conftest import TINY
from vctransfer.cli import main
from vctransfer.trainer import read_loss_csv


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_cop_preview_counts(capsys):
    assert main(["cop-preview", "--prompt", "A red square moves right, fast. Textured. Still sky."]) == 0
    out = capsys.readouterr().out.splitlines()
    rows = [l for l in out[1:] if l.strip() and l.split()[0].isdigit()]
    assert len(rows) == 50 and rows[0].split()[0] == "50" and rows[-1].split()[0] == "1"
    assert out[-1] == "stage counts: coarse=16 medium=20 fine=14"
    assert "A red square moves right" in rows[0] and rows[0].split()[2] == "1.50"


def test_synth_data_is_reproducible(tmp_path):
    assert main(["synth-data", "--out", str(tmp_path / "a"), "--clips", "3", "--seed", "4"]) == 0
    assert main(["synth-data", "--out", str(tmp_path / "b"), "--clips", "3", "--seed", "4"]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b and "config.resolved" in a and "corpus.json" in a


def test_usage_errors_exit_1_without_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["synth-data", "--out", str(out), "--bogus-flag"]) == 1
    assert main(["pretrain", "--out", str(out), "--corpus", str(tmp_path), "--set", "nonsense_key=1"]) == 1
    assert main(["finetune", "--out", str(out), "--corpus", str(tmp_path), "--toggle", "no_cop",
                 "--toggle", "no_cop"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["pretrain", "--out", str(out), "--corpus", str(tmp_path), "--config", str(bad)]) == 1
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_runtime_error_exit_2(tmp_path):
    assert main(["pretrain", "--out", str(tmp_path / "r"), "--corpus", str(tmp_path / "missing")]) == 2


def test_pipeline(tmp_path):
    corpus, pre, ft = tmp_path / "corpus", tmp_path / "pre", tmp_path / "ft"
    model = "model=" + json.dumps(TINY)
    assert main(["synth-data", "--out", str(corpus), "--clips", "4", "--frames", "4", "--height", "16",
                 "--width", "16"]) == 0
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"batch_size": 2, "model": TINY}))
    assert main(["pretrain", "--out", str(pre), "--corpus", str(corpus), "--steps", "2", "--config", str(cfg)]) == 0
    assert main(["finetune", "--out", str(ft), "--corpus", str(corpus), "--steps", "2", "--set", model,
                 "--set", "batch_size=2", "--init", str(pre / "checkpoints" / "final.ckpt")]) == 0
    resolved = json.loads((ft / "config.resolved").read_text())
    assert resolved["train"]["steps"] == 2 and resolved["train"]["model"]["dim"] == TINY["dim"]
    assert len(read_loss_csv(ft / "loss.csv")) == 2
    ck = str(ft / "checkpoints" / "final.ckpt")
    clip = str(corpus / "clip_00000")
    args = ["--steps", "4", "--t1", "3", "--t2", "2"]
    assert main(["transfer", "--out", str(tmp_path / "tr"), "--task", "background", "--checkpoint", ck,
                 "--source", clip, "--reference", str(corpus / "clip_00001"), *args]) == 0
    assert (tmp_path / "tr" / "metrics.csv").exists()
    assert any((tmp_path / "tr" / "samples").glob("*.png"))
    assert main(["eval", "--out", str(tmp_path / "ev"), "--checkpoint", ck, "--corpus", str(corpus),
                 "--clips", "2", *args]) == 0
    assert (tmp_path / "ev" / "metrics.csv").read_text().count("\n") == 4
    assert main(["mask-demo", "--out", str(tmp_path / "md"), "--clip", clip, "--count", "2"]) == 0
    assert len(list((tmp_path / "md").glob("mask_*.png"))) == 2
    assert main(["finetune", "--out", str(tmp_path / "ft2"), "--corpus", str(corpus), "--steps", "3",
                 "--resume", ck, "--set", model, "--set", "batch_size=2"]) == 0
    assert len(read_loss_csv(tmp_path / "ft2" / "loss.csv")) == 3


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "vctransfer.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "cop-preview" in r.stdout
