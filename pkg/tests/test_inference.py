"""Inference chain: source rendering, mel-domain f0, conversion, vocoding."""

import numpy as np
import pytest

from voicefilter import corpus, dsp, inference, toydata, trainer
from voicefilter.config import AnalysisConfig, EmbedderConfig, ModelConfig, PitchConfig, TrainConfig
from voicefilter.embedder import train_embedder
from voicefilter.errors import DataError
from voicefilter.pitch import F0Stats

CFG = AnalysisConfig()


@pytest.fixture(scope="module")
def toy_profile(tmp_path_factory):
    """A small but genuine profile: corpus, embedder, background, finetune."""
    aligns, audio = toydata.make_dataset(toydata.default_speakers(3), 4, seed=2)
    synth = corpus.ToySynthesizer(CFG, seed=0)
    pairs, _ = corpus.build_parallel_corpus(aligns, synth, audio, CFG)
    ecfg = EmbedderConfig(channels=8, kernel_size=3, embed_dim=8)
    embedder, _ = train_embedder(pairs, ecfg, TrainConfig(steps=60, seed=0))
    mcfg = ModelConfig(
        channels=16, kernel_size=5, embed_dim=8, lstm_hidden=16,
        dense_units=32, mel_bins=80,
    )
    bg, _ = trainer.train_background(
        pairs, embedder, mcfg, TrainConfig(steps=50, batch_size=3, seed=0)
    )
    target = [p for p in pairs if p.speaker_id == "spk_a"]
    ft, _, spk_centroid = trainer.finetune(
        bg, target, embedder, TrainConfig(steps=1, finetune_steps=30, seed=0)
    )
    from voicefilter.pitch import f0_stats, F0Contour

    contours = [
        F0Contour(
            np.where(p.target_logf0.voiced, np.exp(p.target_logf0.values), 0.0),
            p.target_logf0.voiced,
        )
        for p in target
    ]
    tgt_stats = f0_stats(contours)
    src_stats = inference.source_f0_stats([p.source_mel for p in pairs], CFG)
    profile = inference.TargetVoiceProfile(
        model=ft,
        embedding=spk_centroid,
        target_f0=tgt_stats,
        source_f0=src_stats,
        analysis=CFG,
        pitch=PitchConfig(),
    )
    return profile, synth, aligns


class TestSynthesizeSource:
    def test_duration_law(self):
        synth = corpus.ToySynthesizer(CFG, seed=0)
        segs = (corpus.PhoneSegment("aa", 0, 50), corpus.PhoneSegment("oo", 50, 80))
        mel = inference.synthesize_source(corpus.PhoneAlignment("u", "s", segs), synth)
        assert mel.frames.shape == (80, 80)

    def test_deterministic(self):
        synth = corpus.ToySynthesizer(CFG, seed=0)
        segs = (corpus.PhoneSegment("aa", 0, 30),)
        a = corpus.PhoneAlignment("u", "s", segs)
        m1 = inference.synthesize_source(a, synth)
        m2 = inference.synthesize_source(a, synth)
        assert np.array_equal(m1.frames, m2.frames)

    def test_empty_alignment_rejected(self):
        synth = corpus.ToySynthesizer(CFG, seed=0)
        with pytest.raises(DataError, match="empty alignment"):
            inference.synthesize_source(corpus.PhoneAlignment("u", "s", ()), synth)


class TestSourceF0FromMel:
    def test_tone_within_one_mel_bin(self):
        mel = dsp.mel_spectrogram(dsp.sine_wave(220.0, 1.0), CFG)
        c = inference.source_f0_from_mel(mel, CFG)
        centers = dsp.mel_filter_centers_hz(CFG, 16000)
        bin_at = int(np.argmin(np.abs(centers - 220.0)))
        tol = max(
            centers[bin_at + 1] - centers[bin_at], centers[bin_at] - centers[bin_at - 1]
        )
        interior = slice(3, -3)
        assert c.voiced[interior].all()
        assert np.all(np.abs(c.f0_hz[interior] - 220.0) <= tol)

    def test_all_floor_is_unvoiced(self):
        mel = dsp.MelSpectrogram(
            np.full((25, 80), np.log(CFG.log_floor), dtype=np.float32), 200, 16000
        )
        c = inference.source_f0_from_mel(mel, CFG)
        assert not c.voiced.any()

    @pytest.mark.parametrize("t", [1, 7, 33])
    def test_frame_count_preserved(self, t):
        rng = np.random.default_rng(t)
        mel = dsp.MelSpectrogram(
            rng.uniform(-8, 0, size=(t, 80)).astype(np.float32), 200, 16000
        )
        c = inference.source_f0_from_mel(mel, CFG)
        assert len(c) == t


class TestSourceF0Stats:
    def test_unvoiced_sources_degenerate(self):
        floor = dsp.MelSpectrogram(
            np.full((25, 80), np.log(CFG.log_floor), dtype=np.float32), 200, 16000
        )
        stats = inference.source_f0_stats([floor], CFG)
        assert stats.std == 0.0

    def test_tone_sources_reasonable(self):
        mels = [dsp.mel_spectrogram(dsp.sine_wave(f, 0.5), CFG) for f in (200.0, 210.0)]
        stats = inference.source_f0_stats(mels, CFG)
        assert np.exp(stats.mean) == pytest.approx(205.0, rel=0.1)


class TestConvert:
    def test_shape_preserved_and_deterministic(self, toy_profile):
        profile, synth, aligns = toy_profile
        rng = np.random.default_rng(0)
        for t in (9, 31, 57):
            mel = dsp.MelSpectrogram(
                rng.uniform(-6, 0, size=(t, 80)).astype(np.float32), 200, 16000
            )
            out1 = inference.convert(mel, profile)
            out2 = inference.convert(mel, profile)
            assert out1.frames.shape == (t, 80)
            assert np.array_equal(out1.frames, out2.frames)

    def test_input_not_mutated(self, toy_profile):
        profile, synth, _ = toy_profile
        segs = (corpus.PhoneSegment("ee", 0, 20),)
        mel = inference.synthesize_source(corpus.PhoneAlignment("u", "s", segs), synth)
        before = mel.frames.copy()
        inference.convert(mel, profile)
        assert np.array_equal(mel.frames, before)

    def test_profile_embedding_validation(self, toy_profile):
        profile, _, _ = toy_profile
        with pytest.raises(DataError, match="unit norm"):
            inference.TargetVoiceProfile(
                model=profile.model,
                embedding=profile.embedding * 2.0,
                target_f0=profile.target_f0,
                source_f0=profile.source_f0,
                analysis=profile.analysis,
                pitch=profile.pitch,
            )


class TestVocode:
    def test_length_law(self):
        mel = dsp.mel_spectrogram(dsp.sine_wave(200.0, 1.0), CFG)
        wav = inference.vocode(mel, CFG, iters=3)
        assert len(wav.samples) == 80 * 200

    def test_matches_griffin_lim(self):
        mel = dsp.mel_spectrogram(dsp.sine_wave(200.0, 0.5), CFG)
        wav = inference.vocode(mel, CFG, iters=8)
        ref, _ = dsp.griffin_lim(mel, CFG, iters=8)
        assert np.array_equal(wav.samples, ref.samples)

    def test_nonfinite_rejected(self):
        mel = dsp.mel_spectrogram(dsp.sine_wave(200.0, 0.5), CFG)
        mel.frames[3, 3] = np.nan
        with pytest.raises(DataError, match="non-finite"):
            inference.vocode(mel, CFG)


class TestEndToEnd:
    def test_duration_conserved_through_chain(self, toy_profile):
        profile, synth, aligns = toy_profile
        a = aligns[0]
        wav, source, converted = inference.infer(a, synth, profile, iters=3)
        assert source.num_frames == a.total_frames
        assert converted.num_frames == a.total_frames
        assert len(wav.samples) == a.total_frames * CFG.hop_length

    def test_profile_roundtrip(self, toy_profile, tmp_path):
        profile, synth, aligns = toy_profile
        inference.save_profile(tmp_path / "prof", profile)
        loaded = inference.load_profile(tmp_path / "prof")
        assert np.allclose(loaded.embedding, profile.embedding, atol=1e-7)
        a = aligns[1]
        mel = inference.synthesize_source(a, synth)
        out1 = inference.convert(mel, profile)
        out2 = inference.convert(mel, loaded)
        # stored f32 stats and embedding reproduce the conversion closely
        assert np.allclose(out1.frames, out2.frames, atol=1e-4)

    def test_missing_profile_dir(self, tmp_path):
        with pytest.raises(DataError, match="no profile"):
            inference.load_profile(tmp_path)
