"""Speaker embeddings: norm contract, GE2E loss values and gradients,
centroids, and toy-corpus separability."""

import math

import numpy as np
import pytest

from voicefilter import corpus, toydata
from voicefilter.config import AnalysisConfig, EmbedderConfig, TrainConfig
from voicefilter.embedder import EmbedderModel, centroid, ge2e_loss, train_embedder
from voicefilter.errors import DataError
from voicefilter.gradcheck import check_gradients

ECFG = EmbedderConfig(channels=8, kernel_size=3, embed_dim=6, mel_bins=5)


class TestEmbed:
    def test_unit_norm_for_any_input(self):
        model = EmbedderModel(ECFG, seed=0)
        rng = np.random.default_rng(0)
        for _ in range(10):
            t = int(rng.integers(4, 40))
            e = model.embed(rng.normal(size=(t, 5)))
            assert np.linalg.norm(e) == pytest.approx(1.0, abs=1e-6)

    def test_deterministic(self):
        model = EmbedderModel(ECFG, seed=0)
        mel = np.random.default_rng(1).normal(size=(12, 5))
        assert np.array_equal(model.embed(mel), model.embed(mel))

    def test_too_short_rejected(self):
        model = EmbedderModel(ECFG, seed=0)
        with pytest.raises(DataError, match="too short"):
            model.embed(np.zeros((3, 5)))

    def test_frame_activations_shape(self):
        model = EmbedderModel(ECFG, seed=0)
        acts = model.frame_activations(np.random.default_rng(2).normal(size=(16, 5)))
        assert acts.shape == (4, ECFG.channels)  # two stride-2 layers
        assert np.all(acts >= 0)


class TestGe2eLoss:
    def test_one_hot_hand_value(self):
        e = np.zeros((2, 2, 4))
        e[0, :, 0] = 1.0
        e[1, :, 1] = 1.0
        loss, _, _, _ = ge2e_loss(e, 1.0, 0.0)
        expected = -1.0 + math.log(math.e**1 + math.e**0)
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_identical_embeddings_give_ln_n(self):
        e = np.tile(np.array([0.6, 0.8, 0.0]), (2, 2, 1))
        loss, _, _, _ = ge2e_loss(e, 1.0, 0.0)
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            e = rng.normal(size=(3, 3, 4))
            e /= np.linalg.norm(e, axis=2, keepdims=True)
            loss, _, _, _ = ge2e_loss(e, 2.0, -1.0)
            assert loss >= 0.0

    def test_small_batches_rejected(self):
        with pytest.raises(DataError, match="N >= 2"):
            ge2e_loss(np.ones((1, 3, 4)), 1.0, 0.0)
        with pytest.raises(DataError, match="N >= 2"):
            ge2e_loss(np.ones((3, 1, 4)), 1.0, 0.0)

    def test_similarities_depend_only_on_directions(self):
        rng = np.random.default_rng(4)
        e = rng.normal(size=(2, 3, 5))
        e /= np.linalg.norm(e, axis=2, keepdims=True)
        loss1, *_ = ge2e_loss(e, 1.7, -0.4)
        loss2, *_ = ge2e_loss(3.0 * e, 1.7, -0.4)  # common positive scaling
        assert loss1 == pytest.approx(loss2, abs=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        e = rng.normal(size=(3, 3, 5))
        e /= np.linalg.norm(e, axis=2, keepdims=True)
        w = np.array([rng.uniform(0.5, 4.0)])
        b = np.array([rng.uniform(-2.0, 1.0)])

        def loss_fn():
            return ge2e_loss(e, w[0], b[0])[0]

        _, de, dw, db = ge2e_loss(e, w[0], b[0])
        err, name = check_gradients(
            loss_fn,
            {"e": e, "w": w, "b": b},
            {"e": de, "w": np.array([dw]), "b": np.array([db])},
            eps=1e-4,
        )
        assert err < 1e-3, f"GE2E gradient mismatch in {name}: {err}"


def test_network_gradients_match_finite_differences():
    n_spk, m_utt = 2, 3
    seed = 11
    while True:  # skip instances whose pre-activations sit on a ReLU kink
        rng = np.random.default_rng(seed)
        model = EmbedderModel(ECFG, seed=3, dtype=np.float64)
        mels = [
            rng.normal(size=(int(rng.integers(6, 14)), 5)) for _ in range(n_spk * m_utt)
        ]
        model.embed_batch(mels, train=True)
        if model.last_relu_margin > 5e-3:
            break
        seed += 1000

    def loss_fn():
        flat = model.embed_batch(mels, train=True)
        e = flat.reshape(n_spk, m_utt, ECFG.embed_dim)
        return ge2e_loss(e, float(model.w[0]), float(model.b[0]))[0]

    flat = model.embed_batch(mels, train=True)
    e = flat.reshape(n_spk, m_utt, ECFG.embed_dim)
    _, de, dw, db = ge2e_loss(e, float(model.w[0]), float(model.b[0]))
    model.zero_grads()
    model.dw[0], model.db[0] = dw, db
    model.backward_batch(de.reshape(n_spk * m_utt, ECFG.embed_dim))
    analytic = {k: v.copy() for k, v in model.gradients().items()}
    err, name = check_gradients(loss_fn, model.parameters(), analytic, eps=1e-4)
    assert err < 1e-3, f"embedder gradient mismatch in {name}: {err}"


class TestCentroid:
    def test_singleton(self):
        e = np.array([0.0, 1.0])
        assert np.allclose(centroid(e[None, :]), e)

    def test_duplicates(self):
        e = np.array([[0.6, 0.8], [0.6, 0.8]])
        assert np.allclose(centroid(e), [0.6, 0.8])

    def test_orthogonal_pair(self):
        e = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert np.allclose(centroid(e), [1 / math.sqrt(2), 1 / math.sqrt(2)])

    def test_empty_rejected(self):
        with pytest.raises(DataError, match="empty"):
            centroid(np.empty((0, 4)))

    def test_antipodal_cancellation_rejected(self):
        with pytest.raises(DataError, match="zero norm"):
            centroid(np.array([[1.0, 0.0], [-1.0, 0.0]]))


@pytest.fixture(scope="module")
def toy_pairs():
    cfg = AnalysisConfig()
    aligns, audio = toydata.make_dataset(toydata.default_speakers(4), 6, seed=1)
    synth = corpus.ToySynthesizer(cfg, seed=0)
    pairs, _ = corpus.build_parallel_corpus(aligns, synth, audio, cfg)
    return pairs


class TestTrainEmbedder:
    def test_separates_toy_speakers_and_beats_init(self, toy_pairs):
        ecfg = EmbedderConfig(channels=16, kernel_size=3, embed_dim=16)
        tcfg = TrainConfig(steps=250, learning_rate=2e-3, seed=0)
        model, losses = train_embedder(toy_pairs, ecfg, tcfg)

        held_aligns, held_audio = toydata.make_dataset(
            toydata.default_speakers(4), 3, seed=77, prefix="ho"
        )
        synth = corpus.ToySynthesizer(AnalysisConfig(), seed=0)
        held_pairs, _ = corpus.build_parallel_corpus(
            held_aligns, synth, held_audio, AnalysisConfig()
        )
        speakers = sorted({p.speaker_id for p in held_pairs})

        def batch_for(m):
            return np.stack(
                [
                    np.stack(
                        [
                            m.embed(p.target_mel)
                            for p in held_pairs
                            if p.speaker_id == s
                        ][:3]
                    )
                    for s in speakers
                ]
            )

        init_model = EmbedderModel(ecfg, seed=0)
        init_loss = ge2e_loss(
            batch_for(init_model), float(init_model.w[0]), float(init_model.b[0])
        )[0]
        trained = batch_for(model)
        held_loss = ge2e_loss(trained, float(model.w[0]), float(model.b[0]))[0]
        assert held_loss <= 0.5 * init_loss

        intra, inter = [], []
        for i, s in enumerate(speakers):
            for j in range(len(speakers)):
                sims = trained[i] @ trained[j].T
                (intra if i == j else inter).append(sims.mean())
        assert np.mean(intra) > np.mean(inter)

    def test_seeded_determinism(self, toy_pairs):
        ecfg = EmbedderConfig(channels=8, kernel_size=3, embed_dim=8)
        tcfg = TrainConfig(steps=40, seed=5)
        m1, l1 = train_embedder(toy_pairs, ecfg, tcfg)
        m2, l2 = train_embedder(toy_pairs, ecfg, tcfg)
        assert l1 == l2
        for k, p in m1.parameters().items():
            assert np.array_equal(p, m2.parameters()[k])

    def test_single_speaker_rejected(self, toy_pairs):
        only = [p for p in toy_pairs if p.speaker_id == "spk_a"]
        with pytest.raises(DataError, match=">= 2 speakers"):
            train_embedder(only, EmbedderConfig(), TrainConfig(steps=5))
