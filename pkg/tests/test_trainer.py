"""ADAM updates, background training, fine-tuning, and checkpoints."""

import hashlib

import numpy as np
import pytest

from voicefilter import checkpoint, corpus, toydata, trainer
from voicefilter.config import AnalysisConfig, EmbedderConfig, ModelConfig, TrainConfig
from voicefilter.embedder import train_embedder
from voicefilter.errors import DataError, NumericalError
from voicefilter.model import make_conditioning
from voicefilter.optim import adam_step, global_norm, init_adam

CFG = AnalysisConfig()
MCFG = ModelConfig(
    channels=16, kernel_size=5, embed_dim=8, lstm_hidden=16, dense_units=32, mel_bins=80
)
ECFG = EmbedderConfig(channels=8, kernel_size=3, embed_dim=8)


@pytest.fixture(scope="module")
def toy_setup():
    aligns, audio = toydata.make_dataset(toydata.default_speakers(3), 4, seed=1)
    synth = corpus.ToySynthesizer(CFG, seed=0)
    pairs, _ = corpus.build_parallel_corpus(aligns, synth, audio, CFG)
    embedder, _ = train_embedder(pairs, ECFG, TrainConfig(steps=60, seed=0))
    return pairs, embedder


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"x": np.array([1.0, 2.0], dtype=np.float32)}
        g = {"x": np.zeros(2, dtype=np.float32)}
        state = init_adam(p)
        adam_step(p, g, state, TrainConfig(steps=1, seed=0))
        assert np.allclose(p["x"], [1.0, 2.0])
        assert state.step == 1

    def test_first_step_hand_value(self):
        cfg = TrainConfig(steps=1, learning_rate=1e-3, grad_clip=0.0, seed=0)
        p = {"x": np.array([0.0], dtype=np.float64)}
        g = {"x": np.array([1.0], dtype=np.float64)}
        adam_step(p, g, init_adam(p), cfg)
        # bias-corrected m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
        assert p["x"][0] == pytest.approx(-1e-3 / (1.0 + cfg.adam_eps), rel=1e-9)

    def test_global_norm_clipping_halves_gradients(self):
        cfg = TrainConfig(steps=1, learning_rate=1.0, grad_clip=5.0, seed=0)
        p = {"x": np.array([0.0, 0.0], dtype=np.float64)}
        g = {"x": np.array([6.0, 8.0], dtype=np.float64)}  # norm 10 -> halved
        assert global_norm(g) == pytest.approx(10.0)
        adam_step(p, g, init_adam(p), cfg)
        # after halving, both entries have |g| 3 and 4; adam normalizes per
        # entry so the step size is the same, but the clip factor is visible
        # in the m/v moments
        state = init_adam(p)
        adam_step(p, g, state, cfg)
        assert state.m["x"][0] == pytest.approx(0.1 * 3.0)
        assert state.m["x"][1] == pytest.approx(0.1 * 4.0)
        assert np.array_equal(g["x"], [6.0, 8.0])  # caller's grads untouched

    def test_nonfinite_gradient_rejected(self):
        p = {"x": np.array([0.0])}
        g = {"x": np.array([np.nan])}
        with pytest.raises(NumericalError, match="non-finite"):
            adam_step(p, g, init_adam(p), TrainConfig(steps=1, seed=0))


class TestBackgroundTraining:
    def test_loss_decreases_and_deterministic(self, toy_setup):
        pairs, embedder = toy_setup
        tcfg = TrainConfig(steps=150, batch_size=3, seed=0)
        m1, l1 = trainer.train_background(pairs, embedder, MCFG, tcfg)
        m2, l2 = trainer.train_background(pairs, embedder, MCFG, tcfg)
        assert l1 == l2
        assert np.mean(l1[-30:]) < np.mean(l1[:30])
        for k, p in m1.parameters().items():
            assert np.array_equal(p, m2.parameters()[k])

    def test_empty_corpus_rejected(self, toy_setup):
        _, embedder = toy_setup
        with pytest.raises(DataError, match="empty"):
            trainer.train_background([], embedder, MCFG, TrainConfig(steps=1, seed=0))

    def test_embed_dim_mismatch_rejected(self, toy_setup):
        pairs, embedder = toy_setup
        bad = ModelConfig(
            channels=16, kernel_size=5, embed_dim=12, lstm_hidden=16,
            dense_units=32, mel_bins=80,
        )
        with pytest.raises(DataError, match="embed"):
            trainer.train_background(pairs, embedder, bad, TrainConfig(steps=1, seed=0))


class TestFinetune:
    def test_zero_steps_is_identity(self, toy_setup, tmp_path):
        pairs, embedder = toy_setup
        bg, _ = trainer.train_background(
            pairs, embedder, MCFG, TrainConfig(steps=40, batch_size=3, seed=0)
        )
        target = [p for p in pairs if p.speaker_id == "spk_a"]
        ft, losses, _ = trainer.finetune(
            bg, target, embedder, TrainConfig(steps=1, finetune_steps=0, seed=0)
        )
        assert losses == []
        trainer.save_vf_checkpoint(tmp_path / "bg.vfck", bg)
        trainer.save_vf_checkpoint(tmp_path / "ft.vfck", ft)
        h = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
        assert h(tmp_path / "bg.vfck") == h(tmp_path / "ft.vfck")

    def test_all_parameters_move(self, toy_setup):
        pairs, embedder = toy_setup
        bg, _ = trainer.train_background(
            pairs, embedder, MCFG, TrainConfig(steps=40, batch_size=3, seed=0)
        )
        target = [p for p in pairs if p.speaker_id == "spk_a"]
        ft, losses, _ = trainer.finetune(
            bg, target, embedder, TrainConfig(steps=1, finetune_steps=25, seed=0)
        )
        for name, p in ft.parameters().items():
            assert not np.array_equal(p, bg.parameters()[name]), name
        # frozen batch-norm statistics must not move during fine-tuning
        for name, s in ft.state_tensors().items():
            assert np.array_equal(s, bg.state_tensors()[name]), name

    def test_centroid_fixed_and_deterministic(self, toy_setup):
        pairs, embedder = toy_setup
        bg, _ = trainer.train_background(
            pairs, embedder, MCFG, TrainConfig(steps=30, batch_size=3, seed=0)
        )
        target = [p for p in pairs if p.speaker_id == "spk_b"]
        cfg = TrainConfig(steps=1, finetune_steps=10, seed=3)
        _, _, c1 = trainer.finetune(bg, target, embedder, cfg)
        _, _, c2 = trainer.finetune(bg, target, embedder, cfg)
        assert np.array_equal(c1, c2)

    def test_mixed_speakers_rejected(self, toy_setup):
        pairs, embedder = toy_setup
        bg, _ = trainer.train_background(
            pairs, embedder, MCFG, TrainConfig(steps=20, batch_size=3, seed=0)
        )
        with pytest.raises(DataError, match="one speaker"):
            trainer.finetune(bg, pairs, embedder, TrainConfig(steps=1, seed=0))


class TestCheckpoints:
    def test_roundtrip_forward_bit_exact(self, toy_setup, tmp_path):
        pairs, embedder = toy_setup
        model, _ = trainer.train_background(
            pairs, embedder, MCFG, TrainConfig(steps=30, batch_size=3, seed=0)
        )
        trainer.save_vf_checkpoint(tmp_path / "m.vfck", model)
        loaded, kind, config = trainer.load_vf_checkpoint(tmp_path / "m.vfck")
        assert kind == checkpoint.KIND_VF_BACKGROUND
        assert config["model"]["channels"] == MCFG.channels
        p = pairs[0]
        cond = make_conditioning(
            embedder.embed(p.target_mel),
            p.target_logf0.values,
            p.target_logf0.voiced,
        )
        a = model.forward(p.source_mel.frames, cond, "eval")
        b = loaded.forward(p.source_mel.frames, cond, "eval")
        assert np.array_equal(a, b)

    def test_truncated_is_corrupt(self, toy_setup, tmp_path):
        pairs, embedder = toy_setup
        model, _ = trainer.train_background(
            pairs, embedder, MCFG, TrainConfig(steps=5, batch_size=3, seed=0)
        )
        path = tmp_path / "m.vfck"
        trainer.save_vf_checkpoint(path, model)
        (tmp_path / "t.vfck").write_bytes(path.read_bytes()[:-37])
        with pytest.raises(DataError, match="corrupt"):
            trainer.load_vf_checkpoint(tmp_path / "t.vfck")

    def test_bitflip_is_corrupt(self, tmp_path, toy_setup):
        pairs, embedder = toy_setup
        model, _ = trainer.train_background(
            pairs, embedder, MCFG, TrainConfig(steps=5, batch_size=3, seed=0)
        )
        path = tmp_path / "m.vfck"
        trainer.save_vf_checkpoint(path, model)
        blob = bytearray(path.read_bytes())
        blob[60] ^= 0xFF
        (tmp_path / "x.vfck").write_bytes(bytes(blob))
        with pytest.raises(DataError, match="corrupt"):
            trainer.load_vf_checkpoint(tmp_path / "x.vfck")

    def test_unsupported_version(self, tmp_path):
        checkpoint.save_checkpoint(
            tmp_path / "v.vfck", checkpoint.KIND_VF_BACKGROUND, {}, {"t": np.zeros(2)}
        )
        blob = bytearray((tmp_path / "v.vfck").read_bytes())
        payload = blob[:-32]
        payload[4] = 99  # version field
        digest = hashlib.sha256(bytes(payload)).digest()
        (tmp_path / "v2.vfck").write_bytes(bytes(payload) + digest)
        with pytest.raises(DataError, match="version"):
            checkpoint.load_checkpoint(tmp_path / "v2.vfck")

    def test_embedder_roundtrip(self, toy_setup, tmp_path):
        pairs, embedder = toy_setup
        trainer.save_embedder_checkpoint(tmp_path / "e.vfck", embedder)
        loaded = trainer.load_embedder_checkpoint(tmp_path / "e.vfck")
        mel = pairs[0].target_mel
        assert np.array_equal(embedder.embed(mel), loaded.embed(mel))

    def test_kind_confusion_rejected(self, toy_setup, tmp_path):
        pairs, embedder = toy_setup
        trainer.save_embedder_checkpoint(tmp_path / "e.vfck", embedder)
        with pytest.raises(DataError, match="not a conversion model"):
            trainer.load_vf_checkpoint(tmp_path / "e.vfck")
