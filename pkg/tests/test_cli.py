import subprocess
import sys

import numpy as np
import pytest

from eendvad.cli import main
from eendvad.frontend import load_features, read_array, write_features
from eendvad.losses import head_traces
from eendvad.scoring import read_rttm

TINY = """
model.n_layers = 1
model.d_model = 8
model.n_heads = 2
model.d_ff = 16
model.chunk_len = 40
train.batch_size = 2
train.epochs_phase1 = 1
train.epochs_phase2 = 1
train.warmup_steps = 4
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    assert main(["--seed", "5", "simulate", str(root / "data"), "--num-files", "2",
                 "--duration", "8", "--overlap", "0.3"]) == 0
    cfg = str(root / "tiny.cfg")
    assert main(["--config", cfg, "train", str(root / "data" / "manifest.tsv"), str(root / "exp")]) == 0
    return root


def test_simulate_outputs(workdir, capsys):
    data = workdir / "data"
    assert len(read_rttm(data / "rttm" / "dlg0000.rttm")) > 0
    assert (data / "manifest.tsv").read_text().count("\n") == 2
    assert "sim.seed = 5" in (data / "config.txt").read_text()


def test_train_outputs(workdir):
    exp = workdir / "exp"
    assert (exp / "phase1.ckpt").exists() and (exp / "phase2.ckpt").exists()
    log = (exp / "train.log").read_text().splitlines()
    assert log[0].startswith("step\tphase")
    assert "model.d_model = 8" in (exp / "config.txt").read_text()


def test_infer_then_score(workdir, capsys):
    wav = workdir / "data" / "wav" / "dlg0001.wav"
    hyp = workdir / "hyp.rttm"
    assert main(["--config", str(workdir / "tiny.cfg"), "infer", str(workdir / "exp" / "phase2.ckpt"),
                 str(wav), str(hyp)]) == 0
    assert all(s.recording == "dlg0001" for s in read_rttm(hyp))
    capsys.readouterr()
    ref = workdir / "data" / "rttm" / "dlg0001.rttm"
    assert main(["score", str(ref), str(hyp), "--collar", "0.25"]) == 0
    out = capsys.readouterr().out
    machine = [l.split("\t") for l in out.splitlines() if l.startswith("DER\t")]
    assert [m[1] for m in machine] == ["dlg0001", "ALL"]
    assert all(float(x) >= 0 for x in machine[-1][2:])
    assert main(["score", str(ref), str(ref)]) == 0
    assert capsys.readouterr().out.splitlines()[-1].split("\t")[2] == "0.0"


def test_inspect_attention_dump_matches_table(workdir, capsys):
    dump = workdir / "attn.arr"
    wav = workdir / "data" / "wav" / "dlg0000.wav"
    assert main(["inspect-attention", str(workdir / "exp" / "phase1.ckpt"), str(wav), "--dump", str(dump)]) == 0
    rows = [l.split() for l in capsys.readouterr().out.splitlines()[2:]]
    w, attrs = read_array(dump)
    assert w.shape == (2, 40, 40) and attrs["layer"] == "1"
    for (h, tr, *_), want in zip(rows, head_traces(w)):
        assert float(tr) == pytest.approx(want, abs=1e-6)
        assert float(tr) == pytest.approx(sum(w[int(h)][i][i] for i in range(40)), abs=1e-6)


def test_stop_after_and_resume(workdir, capsys):
    cfg, man = str(workdir / "tiny.cfg"), str(workdir / "data" / "manifest.tsv")
    out = workdir / "interrupted"
    assert main(["--config", cfg, "train", man, str(out), "--stop-after", "2"]) == 0
    assert main(["--config", cfg, "train", man, str(out), "--resume", str(out / "resume.ckpt"),
                 "--stop-after", "100"]) == 0
    straight = (workdir / "exp" / "train.log").read_bytes()
    assert (out / "train.log").read_bytes() == straight


def test_exit_codes(workdir, tmp_path, capsys):
    assert main([]) == 1
    assert main(["score"]) == 1
    assert main(["--set", "model.nope=1", "score", "a", "b"]) == 1
    assert main(["simulate", str(tmp_path / "s"), "--overlap", "1.0", "--duration", "20"]) == 1
    assert main(["score", str(tmp_path / "missing.rttm"), str(tmp_path / "missing.rttm")]) == 2
    bad = tmp_path / "bad.rttm"
    bad.write_text("SPEAKER r 1 0.0\n")
    assert main(["score", str(bad), str(bad)]) == 2
    assert "line 1" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "eendvad", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "inspect-attention" in res.stdout


def test_single_frame_input_has_unit_traces(workdir, capsys):
    feats = workdir / "one.feat"
    write_features(feats, np.random.default_rng(0).normal(size=(1, 345)))
    assert main(["inspect-attention", str(workdir / "exp" / "phase1.ckpt"), str(feats)]) == 0
    rows = capsys.readouterr().out.splitlines()[2:]
    assert [float(r.split()[1]) for r in rows] == [1.0, 1.0]


def test_feature_input_matches_wav_input(workdir):
    wav = workdir / "data" / "wav" / "dlg0000.wav"
    feats = workdir / "dlg0000.feat"
    write_features(feats, load_features(wav))
    ckpt = str(workdir / "exp" / "phase2.ckpt")
    assert main(["infer", ckpt, str(wav), str(workdir / "a.rttm")]) == 0
    assert main(["infer", ckpt, str(feats), str(workdir / "b.rttm")]) == 0
    assert (workdir / "a.rttm").read_bytes() == (workdir / "b.rttm").read_bytes()


def test_simulate_rerun_is_byte_identical(tmp_path, capsys):
    args = ["simulate", "--num-files", "1", "--duration", "6", "--overlap", "0.3"]
    assert main(["--seed", "1", args[0], str(tmp_path / "a")] + args[1:]) == 0
    assert main(["--seed", "1", args[0], str(tmp_path / "b")] + args[1:]) == 0
    for rel in ("wav/dlg0000.wav", "rttm/dlg0000.rttm", "manifest.tsv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    stats = capsys.readouterr().out.splitlines()[-1].split()
    assert 25.0 <= float(stats[-1]) <= 35.0


def test_phase_flags(workdir):
    cfg, man = str(workdir / "tiny.cfg"), str(workdir / "data" / "manifest.tsv")
    base = workdir / "base_only"
    assert main(["--config", cfg, "train", man, str(base), "--phase", "base"]) == 0
    assert not (base / "phase2.ckpt").exists()
    assert main(["--config", cfg, "train", man, str(base), "--phase", "vad"]) == 1
    assert main(["--config", cfg, "train", man, str(base), "--phase", "vad",
                 "--resume", str(base / "phase1.ckpt")]) == 0
    rows = [l.split("\t") for l in (base / "train.log").read_text().splitlines()[1:]]
    assert {r[1] for r in rows} == {"1", "2"}
    assert (base / "train.log").read_bytes() == (workdir / "exp" / "train.log").read_bytes()
