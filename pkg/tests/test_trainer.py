import csv
import math
import numpy as np
import pytest
import torch

from pianodiff import diffusion as D
from pianodiff import trainer as TR
from pianodiff.checkpoint import MAGIC, CheckpointError, load_tensors, save_tensors
from pianodiff.denoiser import ConfigError, DenoiserConfig
from pianodiff.metrics import evaluate_corpus
from pianodiff.pianoroll import decode_notes
from pianodiff.schedule import ScheduleKind, build_schedule
from pianodiff.synthdata import Corpus, CorpusConfig

TINY_DEN = DenoiserConfig(embed_dim=4, hidden_dim=8, num_blocks=2, dilations=(1, 2), timestep_embed_dim=8,
                          cond_channels=4, lstm_hidden=4, heads=2)


def tiny_cfg(**kw):
    base = dict(denoiser=TINY_DEN, batch_size=2, max_steps=20, warmup_steps=10, lr=3e-3,
                eval_every=10, crop_frames=16, diffusion_steps=20)
    base.update(kw)
    return TR.TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return Corpus(CorpusConfig(num_pieces=8, frames=24, split_ratios=(6, 1, 1)))


# ---------------------------------------------------------------- config and schedules


def test_warmup_is_linear():
    ctl = TR.LRController(0.00045, 1000, 0.8, 2000)
    assert ctl.lr(500) == pytest.approx(0.00045 * 500 / 1000, abs=1e-18)
    assert ctl.lr(1000) == 0.00045
    assert ctl.lr(5000) == 0.00045


def test_plateau_reduces_rate():
    ctl = TR.LRController(1.0, 0, 0.8, 400)
    ctl.observe(200, 1.0)
    ctl.observe(400, 1.1)
    assert ctl.scale == 1.0
    ctl.observe(600, 1.0)
    assert ctl.scale == pytest.approx(0.8)
    ctl.observe(800, 0.5)
    ctl.observe(1000, 0.6)
    assert ctl.scale == pytest.approx(0.8)


def test_full_scale_defaults():
    cfg = TR.TrainConfig()
    assert cfg.betas == (0.9, 0.96) and cfg.lr == 0.00045 and cfg.warmup_steps == 1000
    assert cfg.plateau_factor == 0.8 and cfg.aux_weight == 0.0005


@pytest.mark.parametrize("kw", [dict(lr=0), dict(betas=(0.9, 1.0)), dict(encoder_init="random"),
                                dict(batch_size=0), dict(dtype="float16")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TR.TrainConfig(**kw)


def test_conditioning_flag_propagates():
    assert TR.TrainConfig(cross_attention=False).denoiser.cross_attention is False


def test_config_dict_round_trip():
    cfg = tiny_cfg(gamma_bar_final=1.0, as_sampling=False)
    assert TR.TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TR.TrainConfig.from_dict({**cfg.to_dict(), "learning_rate": 1.0})


def test_adamw_matches_hand_update():
    p = torch.tensor([0.7, -1.3], dtype=torch.float64, requires_grad=True)
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.96, 1e-8, 0.05
    opt = torch.optim.AdamW([p], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    ref = p.detach().numpy().copy()
    m = np.zeros(2)
    v = np.zeros(2)
    for t in range(1, 6):
        loss = (p ** 2 * torch.tensor([3.0, 0.5], dtype=torch.float64)).sum() + p.prod()
        opt.zero_grad()
        loss.backward()
        g = np.array([6.0 * ref[0] + ref[1], 1.0 * ref[1] + ref[0]])
        opt.step()
        ref = ref - lr * wd * ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert np.abs(p.detach().numpy() - ref).max() < 1e-12


# ---------------------------------------------------------------- checkpoints


def test_tensor_container_round_trip(tmp_path):
    t = {"a": torch.randn(3, 4), "b/c": torch.randn(2, dtype=torch.float64), "s": torch.tensor(2.5)}
    save_tensors(tmp_path / "x.ckpt", t)
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:8] == MAGIC and raw[8:12] == (1).to_bytes(4, "little")
    back = load_tensors(tmp_path / "x.ckpt")
    assert list(back) == list(t)
    for k in t:
        assert back[k].dtype == t[k].dtype and torch.equal(back[k], t[k])


def test_tensor_container_rejects_bad_files(tmp_path):
    f = tmp_path / "bad.ckpt"
    f.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(CheckpointError):
        load_tensors(f)
    save_tensors(f, {"w": torch.randn(10)})
    f.write_bytes(f.read_bytes()[:-3])
    with pytest.raises(CheckpointError):
        load_tensors(f)
    with pytest.raises(CheckpointError):
        save_tensors(f, {"i": torch.arange(3)})


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_checkpoint_forward_bit_exact(tmp_path, corpus, dtype):
    cfg = tiny_cfg(dtype=dtype, max_steps=3)
    res = TR.train(cfg, corpus, tmp_path)
    model, cfg2 = TR.load_model(res.checkpoint)
    assert cfg2 == cfg
    x = torch.as_tensor(corpus.piece(0).features.data)[None].to(cfg.torch_dtype)
    y = torch.randint(0, 6, (1, 24, 88))
    res.model.eval()
    model.eval()
    with torch.no_grad():
        assert torch.equal(res.model(y, 7, x), model(y, 7, x))


def test_load_rejects_mismatched_config(tmp_path, corpus):
    res = TR.train(tiny_cfg(max_steps=1), corpus, tmp_path)
    cfg_file = TR.config_path(res.checkpoint)
    cfg_file.write_text(cfg_file.read_text().replace("denoiser.hidden_dim = 8", "denoiser.hidden_dim = 16"))
    with pytest.raises(CheckpointError):
        TR.load_model(res.checkpoint)


def test_resume_equivalence_float64(tmp_path, corpus):
    cfg = tiny_cfg(dtype="float64", max_steps=100)
    straight = TR.Trainer(cfg, corpus)
    straight.run()

    first = TR.Trainer(cfg, corpus)
    first.run(50)
    first.save(tmp_path / "half.ckpt")
    second = TR.Trainer(cfg, corpus)
    second.restore(tmp_path / "half.ckpt")
    assert second.step == 50
    second.run()

    assert straight.log[-1]["total"] == second.log[-1]["total"]
    for (n, a), b in zip(straight.model.named_parameters(), second.model.parameters()):
        assert torch.equal(a, b), n


def test_training_log_and_periodic_checkpoints(tmp_path, corpus):
    TR.train(tiny_cfg(max_steps=20, checkpoint_every=10), corpus, tmp_path)
    assert (tmp_path / "step_000010.ckpt").exists() and (tmp_path / "final.ckpt").exists()
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0].startswith("# plateau patience")
    rows = list(csv.DictReader(lines[1:]))
    assert [int(r["step"]) for r in rows] == list(range(1, 21))
    assert rows[9]["valid_l_vlb"] != "" and rows[8]["valid_l_vlb"] == ""
    assert float(rows[4]["lr"]) == pytest.approx(3e-3 * 5 / 10)


def test_nan_loss_aborts_with_diagnostic_checkpoint(tmp_path, corpus):
    tr = TR.Trainer(tiny_cfg(), corpus, tmp_path)
    with torch.no_grad():
        tr.model.denoiser.head.weight.fill_(math.nan)
    with pytest.raises(TR.NumericalAbort):
        tr.train_step()
    assert (tmp_path / "diagnostic.ckpt").exists()


def test_loss_decreases():
    c = Corpus(CorpusConfig(num_pieces=24, frames=32, split_ratios=(20, 2, 2)))
    early, late = [], []
    for seed in range(3):
        tr = TR.Trainer(tiny_cfg(seed=seed, max_steps=500, batch_size=4, warmup_steps=50,
                                 eval_every=100, encoder_init="scratch"), c)
        tr.run()
        totals = [r["total"] for r in tr.log]
        early.append(np.mean(totals[5:15]))    # around step 10
        late.append(np.mean(totals[490:500]))  # around step 500
    assert np.mean(late) < np.mean(early)


def test_overfits_two_pieces():
    c = Corpus(CorpusConfig(num_pieces=2, frames=32, split_ratios=(1, 0, 0)))
    cfg = tiny_cfg(max_steps=2000, batch_size=2, crop_frames=0, warmup_steps=50, lr=1e-2,
                   eval_every=500, denoiser=DenoiserConfig(**{**TINY_DEN.to_dict(), "hidden_dim": 16}))
    tr = TR.Trainer(cfg, c)
    window = []
    while tr.step < cfg.max_steps:
        window.append(tr.train_step()["l_aux"])
        if len(window) >= 50 and np.mean(window[-50:]) < 0.01:
            break
    assert np.mean(window[-50:]) < 0.01


# ---------------------------------------------------------------- transcription


class _Identity(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.calls = 0

    def forward(self, x):
        self.calls += 1
        return x


class _OracleDenoiser(torch.nn.Module):
    """Reads the clean roll from one-hot conditioning features."""

    def forward(self, y, tau, cond):
        return _Output(torch.log(cond.clamp_min(1e-30)))


class _Output:
    def __init__(self, logits):
        self.logits = logits

    @property
    def probabilities(self):
        return torch.softmax(self.logits, -1)


class OracleModel(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.encoder = _Identity()
        self.denoiser = _OracleDenoiser()
        self.anchor = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))


def _one_hot_features(pieces):
    return torch.nn.functional.one_hot(torch.as_tensor(np.stack([p.roll.states for p in pieces])), 5).double()


def test_oracle_model_transcribes_exactly():
    c = Corpus(CorpusConfig(num_pieces=6, split_ratios=(1, 0, 0)))
    pieces = c.split("train")
    model = OracleModel()
    rolls, notes = TR.transcribe(model, _one_hot_features(pieces), TR.TrainConfig(), seed=3)
    for p, r, n in zip(pieces, rolls, notes):
        assert np.array_equal(r.states, p.roll.states)
        assert n == p.notes
    assert evaluate_corpus([(p.notes, n) for p, n in zip(pieces, notes)]).f1 == 1.0
    assert model.encoder.calls == 1


def test_two_seeds_both_valid(corpus):
    res = TR.train(tiny_cfg(max_steps=5), corpus)
    feats = corpus.piece(0).features
    for seed in (0, 1):
        roll, notes = TR.transcribe(res.model, feats, tiny_cfg(), seed=seed)
        assert not np.any(roll.states == 5)
        assert decode_notes(roll) == notes


def test_as_flag_changes_only_posterior_kind(monkeypatch, corpus):
    res = TR.train(tiny_cfg(max_steps=2), corpus)
    seen = []
    real = D.reverse_step

    def spy(s, tau, y, p0, gen=None):
        seen[-1].append((s.kind, tau, y.shape))
        return real(s, tau, y, p0, gen)
    monkeypatch.setattr(D, "reverse_step", spy)
    for kind in (ScheduleKind.ABSORBING_INFERENCE, ScheduleKind.TRAIN_REPLACE):
        seen.append([])
        TR.transcribe(res.model, corpus.piece(1).features, tiny_cfg(), kind, seed=0)
    on, off = seen
    assert {k for k, _, _ in on} == {ScheduleKind.ABSORBING_INFERENCE}
    assert {k for k, _, _ in off} == {ScheduleKind.TRAIN_REPLACE}
    assert [t[1:] for t in on] == [t[1:] for t in off]


def test_transcribe_rejects_wrong_channels(corpus):
    res = TR.train(tiny_cfg(max_steps=1), corpus)
    with pytest.raises(ConfigError):
        TR.transcribe(res.model, np.zeros((24, 88, 5), np.float32), tiny_cfg())


def test_features_encoded_once_per_transcription():
    c = Corpus(CorpusConfig(num_pieces=2, frames=32, split_ratios=(1, 0, 0)))
    model = TR.TranscriptionModel(TINY_DEN).eval()
    calls = []
    model.encoder.register_forward_hook(lambda *_: calls.append(1))
    x = torch.as_tensor(np.stack([p.features.data for p in c.split("train")]))
    TR.transcribe(model, x, tiny_cfg(diffusion_steps=50), seed=0)
    assert len(calls) == 1


# ---------------------------------------------------------------- ablation


def test_ablate_table(tmp_path, corpus, monkeypatch):
    trained = []

    def counting_train(cfg, corp, *a, **k):
        if cfg.lr == 0.123:
            raise TR.NumericalAbort("injected")
        trainer = TR.Trainer(cfg, corp)
        trained.append(trainer.schedule)
        return trainer.run()
    monkeypatch.setattr(TR, "train", counting_train)
    grid = [tiny_cfg(max_steps=2, gamma_bar_final=g, as_sampling=a)
            for g, a in ((0.9, True), (0.9, False), (1.0, True))]
    grid.append(tiny_cfg(max_steps=2, lr=0.123))
    rows = TR.ablate(grid, corpus, seeds=(0, 1, 2), csv_path=tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert len(lines) == len(grid) + 1
    assert lines[0].split(",")[:4] == ["config_hash", "gamma_bar_final", "as_sampling", "conditioning"]
    assert [r["status"] for r in rows[:3]] == ["ok"] * 3
    assert rows[3]["status"].startswith("failed: NumericalAbort")
    # AS on/off share trained models: two distinct training cells x 3 seeds
    assert len(trained) == 6
    gamma_one = [s for s in trained if s.gamma_bar_final == 1.0]
    assert gamma_one and all(np.all(s.beta_bar == 0) for s in gamma_one)
    assert all(0 <= r["mean_f1"] <= 1 for r in rows[:3])
