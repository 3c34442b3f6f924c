import dataclasses
import hashlib
import math

import numpy as np
import pytest
import torch

from conftest import tiny_train_config
from octvq.data import PhantomConfig, generate_synthetic_dataset
from octvq.roi import GaborBankConfig
from octvq.train import (CHECKPOINT_FORMAT, LOG_COLUMNS, CheckpointError, TrainConfig, Trainer, TrainingError, fit,
                         load_checkpoint, load_model, paper_preset, resume_trainer, save_checkpoint)


def param_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for p in module.state_dict().values():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class TestConfig:
    def test_epochs_zero(self):
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig(epochs=0)

    @pytest.mark.parametrize("kw", [dict(warmup_steps=-1), dict(batch_size=0), dict(ablation="x"),
                                    dict(positive_mode="x"), dict(learning_rate=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_full_scale_preset(self):
        p = paper_preset()
        assert (p.epochs, p.learning_rate, p.batch_size, p.warmup_steps) == (28, 1e-6, 16, 10_000)
        assert (p.model.codebook_size, p.model.codebook_dim, p.model.input_resolution) == (256, 256, 256)
        assert p.weights.alpha_roi == 6.0 and p.weights.margin == 1.0


class TestStep:
    def test_recon_only_gating(self, phantoms):
        tr = Trainer(tiny_train_config(ablation="recon_only", warmup_steps=0), phantoms)
        for _ in range(3):
            rec = tr.train_step()
            assert rec["l_triplet"] == 0.0 and rec["l_gan_g"] == 0.0 and rec["l_gan_d"] == 0.0

    def test_warmup_gate_and_disc_frozen(self, phantoms):
        tr = Trainer(tiny_train_config(warmup_steps=3, epochs=2), phantoms)
        h0 = param_hash(tr.disc)
        for _ in range(3):
            rec = tr.train_step()
            assert rec["l_gan_g"] == 0.0 and rec["l_gan_d"] == 0.0
            assert param_hash(tr.disc) == h0
        rec = tr.train_step()  # step 4 > T_w
        assert rec["l_gan_g"] > 0 and rec["l_gan_d"] > 0
        assert param_hash(tr.disc) != h0

    def test_ablation_lattice(self, phantoms):
        expected = {"recon_only": {"l_roi", "l_perc", "l_vq"},
                    "recon_triplet": {"l_roi", "l_perc", "l_vq", "l_triplet"},
                    "full": {"l_roi", "l_perc", "l_vq", "l_triplet", "l_gan_g", "l_gan_d"}}
        for ab, terms in expected.items():
            tr = Trainer(tiny_train_config(ablation=ab, warmup_steps=0), phantoms)
            rec = tr.train_step()
            nonzero = {k for k in LOG_COLUMNS if k not in ("step", "total") and rec[k] != 0.0}
            assert nonzero == terms, ab

    def test_asymmetric_targets_one_epoch(self, phantoms):
        tr = Trainer(tiny_train_config(), phantoms)
        tr.target_log = []
        for _ in range(tr.steps_per_epoch):
            tr.train_step()
        roles = {"anchor": 0, "positive": 0, "negative": 0}
        for rec in tr.target_log:
            roles[rec.role] += 1
            if rec.role == "positive":
                assert rec.target is rec.input
            else:
                assert rec.target.label == "normal" and rec.target.patient_id == rec.input.patient_id
                if rec.role == "anchor":
                    assert rec.target is rec.input
                else:
                    assert rec.input.label == "abnormal" and rec.target is not rec.input
        assert roles["anchor"] == roles["positive"] == roles["negative"] == len(phantoms)

    def test_reconstruct_anchor_only(self, phantoms):
        tr = Trainer(tiny_train_config(reconstruct="anchor"), phantoms)
        tr.target_log = []
        rec = tr.train_step()
        assert {r.role for r in tr.target_log} == {"anchor"} and rec["l_triplet"] > 0

    def test_intra_patient_mode(self):
        idx = generate_synthetic_dataset(PhantomConfig(slices_per_patient=2), 8, seed=4)
        tr = Trainer(tiny_train_config(positive_mode="intra_patient"), idx)
        tr.target_log = []
        tr.train_step()
        for r in tr.target_log:
            if r.role == "positive":
                assert r.input.patient_id in idx.groups

    def test_whole_batch_roi_failure(self, phantoms):
        cfg = tiny_train_config(roi=GaborBankConfig(min_coverage=0.99, max_coverage=1.0))
        with pytest.raises(TrainingError, match="ROI"):
            Trainer(cfg, phantoms).train_step()

    def test_rejects_abnormal_training_data(self):
        from octvq.data import BScanImage, DatasetError, DatasetIndex
        idx = DatasetIndex([BScanImage(np.zeros((64, 64)), "p", "abnormal")])
        with pytest.raises(DatasetError):
            Trainer(tiny_train_config(), idx)

    def test_codebook_finite(self, phantoms):
        tr = Trainer(tiny_train_config(warmup_steps=0), phantoms)
        for _ in range(4):
            tr.train_step()
        assert torch.isfinite(tr.model.codebook).all()


class TestDeterminism:
    def test_reproducible_20_steps(self, phantoms):
        cfg = tiny_train_config(epochs=7, warmup_steps=5)
        t1, t2 = Trainer(cfg, phantoms), Trainer(cfg, phantoms)
        la = [t1.train_step()["total"] for _ in range(20)]
        lb = [t2.train_step()["total"] for _ in range(20)]
        assert la == lb

    def test_workers_do_not_change_results(self, phantoms):
        la = [Trainer(tiny_train_config(workers=1), phantoms).train_step()["total"]]
        lb = [Trainer(tiny_train_config(workers=3), phantoms).train_step()["total"]]
        assert la == lb

    def test_resume_equivalence(self, phantoms, tmp_path):
        cfg = tiny_train_config(epochs=3, warmup_steps=4)
        ref = Trainer(cfg, phantoms)
        for _ in range(6):
            ref.train_step()
        path = save_checkpoint(ref, tmp_path / "k.ckpt")
        expect = ref.train_step()
        resumed = resume_trainer(path, phantoms)
        got = resumed.train_step()
        assert got["step"] == expect["step"] == 7
        for k in LOG_COLUMNS[1:]:
            assert got[k] == pytest.approx(expect[k], rel=1e-6, abs=1e-12)


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, phantoms, tmp_path):
        tr = Trainer(tiny_train_config(warmup_steps=0), phantoms)
        tr.train_step()
        path = save_checkpoint(tr, tmp_path / "a.ckpt")
        payload = load_checkpoint(path)
        assert payload["format"] == CHECKPOINT_FORMAT and payload["step"] == 1
        for k, v in tr.model.state_dict().items():
            assert torch.equal(payload["model"][k], v)
        for k, v in tr.disc.state_dict().items():
            assert torch.equal(payload["disc"][k], v)
        m = load_model(tmp_path / "a")  # suffix optional
        assert torch.equal(m.codebook, tr.model.codebook) and torch.equal(m.usage, tr.model.usage)

    def test_corrupted(self, phantoms, tmp_path):
        path = save_checkpoint(Trainer(tiny_train_config(), phantoms), tmp_path / "c.ckpt")
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nothing.ckpt")

    def test_model_config_mismatch(self, phantoms, tmp_path):
        tr = Trainer(tiny_train_config(), phantoms)
        path = save_checkpoint(tr, tmp_path / "m.ckpt")
        other = dataclasses.replace(tr.cfg.model, codebook_size=16)
        with pytest.raises(CheckpointError, match="ModelConfig"):
            load_checkpoint(path, expect_model=other)
        with pytest.raises(CheckpointError):
            resume_trainer(path, phantoms, dataclasses.replace(tr.cfg, model=other))

    def test_format_tag(self, phantoms, tmp_path):
        tr = Trainer(tiny_train_config(), phantoms)
        payload = tr.state_dict()
        payload["format"] = "octvq-checkpoint/0"
        torch.save(payload, tmp_path / "old.ckpt")
        with pytest.raises(CheckpointError, match="format"):
            load_checkpoint(tmp_path / "old.ckpt")


class TestFit:
    def test_outputs(self, phantoms, tmp_path):
        cfg = tiny_train_config(epochs=2, checkpoint_every=2)
        final = fit(phantoms, cfg, tmp_path)
        assert final.name == "final.ckpt" and final.exists()
        lines = (tmp_path / "loss_log.tsv").read_text().splitlines()
        assert lines[0].split("\t") == list(LOG_COLUMNS)
        assert len(lines) == 1 + 6
        assert (tmp_path / "step_000002.ckpt").exists()

    def test_fit_resume_continues_log(self, phantoms, tmp_path):
        cfg = tiny_train_config(epochs=2)
        fit(phantoms, cfg, tmp_path, max_steps=2)
        fit(phantoms, cfg, tmp_path, resume=tmp_path / "final.ckpt")
        steps = [int(l.split("\t")[0]) for l in (tmp_path / "loss_log.tsv").read_text().splitlines()[1:]]
        assert steps == list(range(1, 7))

    def test_nan_aborts(self, phantoms, tmp_path, monkeypatch):
        tr = Trainer(tiny_train_config(), phantoms)
        real = tr.train_step
        calls = {"n": 0}

        def step():
            rec = real()
            calls["n"] += 1
            if calls["n"] == 2:
                rec = dict(rec, l_vq=float("nan"))
            return rec
        monkeypatch.setattr(tr, "train_step", step)
        with pytest.raises(TrainingError, match="step 2.*last finite") as ei:
            fit(phantoms, tr.cfg, tmp_path, trainer=tr)
        assert "'step': 1" in str(ei.value)

    def test_loss_decreases(self, phantoms, tmp_path):
        cfg = tiny_train_config(epochs=8, ablation="recon_only")
        fit(phantoms, cfg, tmp_path)
        totals = [float(l.split("\t")[-1]) for l in (tmp_path / "loss_log.tsv").read_text().splitlines()[1:]]
        assert np.mean(totals[-3:]) < np.mean(totals[:3])


@pytest.mark.slow
def test_stability_500_steps():
    """Default desk config stays finite for 500 steps."""
    idx = generate_synthetic_dataset(PhantomConfig(), 400, seed=9)
    tr = Trainer(TrainConfig(epochs=10), idx)
    for _ in range(500):
        rec = tr.train_step()
        assert all(math.isfinite(v) for v in rec.values()), rec
    assert torch.isfinite(tr.model.codebook).all()
