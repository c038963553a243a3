import csv
import subprocess
import sys

import pytest

from pianodiff import kvtext
from pianodiff.cli import main
from pianodiff.pianoroll import NoteEvent, read_notes_csv, write_notes_csv
from pianodiff.denoiser import DenoiserConfig
from pianodiff.trainer import TrainConfig

TINY_DEN = DenoiserConfig(embed_dim=4, hidden_dim=8, num_blocks=2, dilations=(1, 2), timestep_embed_dim=8,
                          cond_channels=4, lstm_hidden=4, heads=2)


def tiny_cfg(**kw):
    base = dict(denoiser=TINY_DEN, batch_size=2, max_steps=4, warmup_steps=2, lr=3e-3,
                eval_every=2, crop_frames=16, diffusion_steps=10)
    base.update(kw)
    return TrainConfig(**base)


def _rows(path):
    return list(csv.DictReader(open(path)))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert main(["data", "synth", "--out", str(corpus), "--num-pieces", "6", "--frames", "24",
                 "--set", "split_ratios=4,1,1", "--dump-features"]) == 0
    cfg = root / "tiny.cfg"
    kvtext.dump(cfg, tiny_cfg(max_steps=4).to_dict())
    run = root / "run"
    assert main(["train", "--preset", "full", "--config", str(cfg), "--corpus", str(corpus),
                 "--out", str(run)]) == 0
    return root


def test_schedule_inspect(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["schedule", "inspect", "--steps", "100", "--gamma-bar-final", "0.9", "--out", str(out)]) == 0
    rows = _rows(out)
    assert len(rows) == 101
    assert float(rows[100]["gamma_bar"]) == pytest.approx(0.9)
    assert list(rows[0]) == ["tau", "alpha_bar", "beta_bar", "gamma_bar", "alpha", "beta", "gamma"]


def test_schedule_inspect_as_view(tmp_path):
    out = tmp_path / "s.csv"
    main(["schedule", "inspect", "--as-sampling", "on", "--tau", "50", "--out", str(out)])
    (row,) = _rows(out)
    assert float(row["beta_bar"]) == 0.0


def test_bad_schedule_exit_code(capsys):
    assert main(["schedule", "inspect", "--gamma-bar-final", "1.5"]) == 2


def test_diffuse_corrupt(tmp_path):
    notes = tmp_path / "n.csv"
    write_notes_csv(notes, [NoteEvent(60, 0.0, 1.0), NoteEvent(64, 0.5, 1.5)])
    out = tmp_path / "c.csv"
    assert main(["diffuse", "corrupt", "--notes", str(notes), "--tau", "100", "--frames", "100",
                 "--out", str(out), "--as-sampling", "on"]) == 0
    counts = {int(r["state"]): int(r["count"]) for r in _rows(out)}
    assert counts[5] == 100 * 88


def test_diffuse_sample_oracle(tmp_path):
    notes = tmp_path / "n.csv"
    truth = [NoteEvent(60, 0.0, 0.4), NoteEvent(67, 0.2, 0.6)]
    write_notes_csv(notes, truth)
    traj, est = tmp_path / "t.csv", tmp_path / "e.csv"
    assert main(["diffuse", "sample", "--notes", str(notes), "--frames", "40", "--trajectory", str(traj),
                 "--out-notes", str(est)]) == 0
    assert read_notes_csv(est) == truth
    rows = _rows(traj)
    assert float(rows[-1]["masked_fraction"]) == 0.0
    masked = [float(r["masked_fraction"]) for r in rows]
    assert masked == sorted(masked, reverse=True)


def test_data_synth_files(workspace):
    names = sorted(p.name for p in (workspace / "corpus").iterdir())
    assert "manifest.txt" in names and "piece_00005.csv" in names and "piece_00000.f32" in names


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "final.ckpt").exists() and (run / "final.ckpt.cfg").exists()
    assert TrainConfig.from_dict(kvtext.load(run / "final.ckpt.cfg")) == tiny_cfg(max_steps=4)


def test_transcribe_and_eval(workspace, tmp_path):
    ckpt = str(workspace / "run" / "final.ckpt")
    est_dir = tmp_path / "est"
    est_dir.mkdir()
    assert main(["transcribe", "--checkpoint", ckpt, "--corpus", str(workspace / "corpus"), "--piece", "2",
                 "--out", str(est_dir / "piece_00002.csv")]) == 0
    assert main(["transcribe", "--checkpoint", ckpt, "--features", str(workspace / "corpus" / "piece_00003.f32"),
                 "--out", str(est_dir / "piece_00003.csv"), "--as-sampling", "off"]) == 0
    ref_dir = tmp_path / "ref"
    ref_dir.mkdir()
    for i in (2, 3):
        name = f"piece_{i:05d}.csv"
        (ref_dir / name).write_text((workspace / "corpus" / name).read_text())
    out = tmp_path / "scores.csv"
    assert main(["eval", "--ref-dir", str(ref_dir), "--est-dir", str(est_dir), "--out", str(out)]) == 0
    rows = _rows(out)
    assert [r["piece"] for r in rows] == ["piece_00002", "piece_00003", "mean"]
    assert all(0.0 <= float(r["F1"]) <= 1.0 for r in rows)


def test_self_check_perfect_eval(workspace, tmp_path):
    out = tmp_path / "scores.csv"
    corpus = str(workspace / "corpus")
    assert main(["eval", "--ref-dir", corpus, "--est-dir", corpus, "--offsets", "on", "--out", str(out)]) == 0
    assert float(_rows(out)[-1]["F1"]) == 1.0


def test_unknown_config_key_exit_code(workspace, tmp_path):
    assert main(["train", "--corpus", str(workspace / "corpus"), "--out", str(tmp_path),
                 "--set", "learning_rate=0.1"]) == 2


def test_missing_checkpoint_exit_code(tmp_path):
    assert main(["transcribe", "--checkpoint", str(tmp_path / "nope.ckpt"), "--features", "x.f32",
                 "--out", str(tmp_path / "o.csv")]) == 2


def test_numerical_abort_exit_code(workspace, tmp_path):
    code = main(["train", "--preset", "full", "--config", str(workspace / "tiny.cfg"),
                 "--corpus", str(workspace / "corpus"), "--out", str(tmp_path),
                 "--set", "lr=1e30", "--set", "warmup_steps=0", "--set", "max_steps=50"])
    assert code == 3
    assert (tmp_path / "diagnostic.ckpt").exists()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "pianodiff", "schedule", "inspect", "--steps", "4",
                           "--tau", "4"], capture_output=True, text=True, check=True)
    assert proc.stdout.splitlines()[0].startswith("tau,alpha_bar")
