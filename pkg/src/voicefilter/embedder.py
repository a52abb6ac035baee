"""Utterance-level speaker embeddings trained with the GE2E objective.

A deliberately small network: two stride-2 convolutions over the mel frames,
mean-pooling over time, an affine map to the embedding dimension, and L2
normalization. The similarity matrix uses per-speaker centroids, excluding
the utterance itself from its own speaker's centroid, scaled by a learned
(w, b) with w kept positive.
"""

from __future__ import annotations

import numpy as np

from voicefilter.config import EmbedderConfig, TrainConfig
from voicefilter.dsp import MelSpectrogram
from voicefilter.errors import DataError, NumericalError
from voicefilter.layers import Conv1d, Dense
from voicefilter.optim import adam_step, init_adam

W_FLOOR = 1e-4  # GE2E scale is clamped here after each update
MIN_FRAMES = 4  # two stride-2 convs need at least this many


class EmbedderModel:
    def __init__(self, cfg: EmbedderConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        ch, k = cfg.channels, cfg.kernel_size
        self.conv1 = Conv1d("e_conv1", cfg.mel_bins, ch, k, 2, rng, dtype)
        self.conv2 = Conv1d("e_conv2", ch, ch, k, 2, rng, dtype)
        self.affine = Dense("e_affine", ch, cfg.embed_dim, rng, dtype)
        self.w = np.array([10.0], dtype=dtype)
        self.b = np.array([-5.0], dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache = []

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in (self.conv1, self.conv2, self.affine):
            for pname, p in layer.params.items():
                out[f"{layer.name}.{pname}"] = p
        out["ge2e.w"] = self.w
        out["ge2e.b"] = self.b
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in (self.conv1, self.conv2, self.affine):
            for pname, g in layer.grads.items():
                out[f"{layer.name}.{pname}"] = g
        out["ge2e.w"] = self.dw
        out["ge2e.b"] = self.db
        return out

    def zero_grads(self) -> None:
        for layer in (self.conv1, self.conv2, self.affine):
            layer.zero_grads()
        self.dw[...] = 0.0
        self.db[...] = 0.0

    # -- forward -------------------------------------------------------------

    def _frames(self, mel) -> np.ndarray:
        frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
        if frames.ndim != 2 or frames.shape[1] != self.cfg.mel_bins:
            raise DataError(f"expected (T, {self.cfg.mel_bins}) mel input")
        if frames.shape[0] < MIN_FRAMES:
            raise DataError(
                f"input too short to embed: {frames.shape[0]} frames < {MIN_FRAMES}"
            )
        return frames.astype(self.dtype)

    def embed_batch(self, mels: list, train: bool = False) -> np.ndarray:
        """Embed a list of mels; returns (len(mels), D) unit-norm rows."""
        xs = [self._frames(m) for m in mels]
        h1 = self.conv1.forward(xs, train)
        mask1 = [h > 0 for h in h1]
        self.last_relu_margin = min(float(np.abs(h).min()) for h in h1)
        h1 = [np.maximum(h, 0) for h in h1]
        h2 = self.conv2.forward(h1, train)
        mask2 = [h > 0 for h in h2]
        self.last_relu_margin = min(
            self.last_relu_margin, min(float(np.abs(h).min()) for h in h2)
        )
        h2 = [np.maximum(h, 0) for h in h2]
        pooled = [h.mean(axis=0, keepdims=True) for h in h2]
        zs = self.affine.forward(pooled, train)
        out = np.empty((len(mels), self.cfg.embed_dim), dtype=self.dtype)
        norms = []
        for i, z in enumerate(zs):
            norm = float(np.linalg.norm(z))
            if norm < 1e-12:
                raise NumericalError("embedding collapsed to zero norm")
            out[i] = z[0] / norm
            norms.append(norm)
        if train:
            self._cache = (mask1, mask2, [h.shape[0] for h in h2], out.copy(), norms)
        return out

    def embed(self, mel) -> np.ndarray:
        """Unit-norm speaker embedding of one utterance."""
        return self.embed_batch([mel])[0]

    def frame_activations(self, mel) -> np.ndarray:
        """Per-frame activations of the last conv layer (the feature
        extractor used for distribution-distance evaluation)."""
        x = self._frames(mel)
        h1 = [np.maximum(h, 0) for h in self.conv1.forward([x], False)]
        h2 = [np.maximum(h, 0) for h in self.conv2.forward(h1, False)]
        return h2[0]

    # -- backward ------------------------------------------------------------

    def backward_batch(self, d_embeddings: np.ndarray) -> None:
        """Accumulate network gradients given d(loss)/d(embedding rows)."""
        mask1, mask2, lengths2, embeddings, norms = self._cache
        dzs = []
        for i in range(d_embeddings.shape[0]):
            de = d_embeddings[i].astype(self.dtype)
            e = embeddings[i]
            dz = (de - e * float(e @ de)) / norms[i]  # through L2 normalization
            dzs.append(dz[None, :])
        dpooled = self.affine.backward(dzs)
        dh2 = [
            np.repeat(dp / n, n, axis=0) for dp, n in zip(dpooled, lengths2)
        ]
        dh2 = [d * m for d, m in zip(dh2, mask2)]
        dh1 = self.conv2.backward(dh2)
        dh1 = [d * m for d, m in zip(dh1, mask1)]
        self.conv1.backward(dh1)


# ---------------------------------------------------------------------------
# GE2E loss (softmax variant, self-exclusive own-speaker centroid)
# ---------------------------------------------------------------------------


def _cos_and_grads(u: np.ndarray, v: np.ndarray):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        raise NumericalError("zero-norm vector in cosine similarity")
    uh, vh = u / nu, v / nv
    c = float(uh @ vh)
    dc_du = (vh - c * uh) / nu
    dc_dv = (uh - c * vh) / nv
    return c, dc_du, dc_dv


def ge2e_loss(
    embeddings: np.ndarray, w: float, b: float
) -> tuple[float, np.ndarray, float, float]:
    """Softmax GE2E loss over an (N speakers, M utterances, D) batch.

    Returns (loss, d_embeddings, dw, db). The loss is the mean over the
    N*M utterances of (-s_own + logsumexp_k s_k); similarities use the
    full centroid for other speakers and the self-exclusive centroid for
    the utterance's own speaker.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 3:
        raise DataError("embeddings must have shape (N, M, D)")
    n, m, d = e.shape
    if n < 2 or m < 2:
        raise DataError(f"GE2E needs N >= 2 speakers and M >= 2 utterances, got {n}x{m}")
    w = float(w)
    b = float(b)

    centroids = e.mean(axis=1)  # (N, D)
    sums = e.sum(axis=1)  # (N, D)

    loss = 0.0
    de = np.zeros_like(e)
    dw = 0.0
    db = 0.0
    count = n * m
    for j in range(n):
        for i in range(m):
            u = e[j, i]
            cos_row = np.empty(n)
            du_row = np.empty((n, d))
            dv_row = np.empty((n, d))
            for k in range(n):
                v = (sums[j] - u) / (m - 1) if k == j else centroids[k]
                cos_row[k], du_row[k], dv_row[k] = _cos_and_grads(u, v)
            s = w * cos_row + b
            smax = s.max()
            lse = smax + np.log(np.exp(s - smax).sum())
            loss += -s[j] + lse
            softmax = np.exp(s - lse)
            g = (softmax - np.eye(n)[j]) / count  # dL/ds_k
            dw += float(g @ cos_row)
            db += float(g.sum())
            dcos = g * w
            de[j, i] += dcos @ du_row
            for k in range(n):
                if k == j:
                    scatter = dcos[k] * dv_row[k] / (m - 1)
                    de[j] += scatter
                    de[j, i] -= scatter  # own utterance excluded from centroid
                else:
                    de[k] += dcos[k] * dv_row[k] / m
    return loss / count, de, dw, db


def centroid(embeddings: np.ndarray) -> np.ndarray:
    """L2-normalized arithmetic mean of a set of embeddings (rows)."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim == 1:
        e = e[None, :]
    if e.size == 0:
        raise DataError("cannot take the centroid of an empty set")
    mean = e.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise DataError("centroid is undefined: embeddings cancel to zero norm")
    return mean / norm


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_embedder(
    pairs,
    cfg: EmbedderConfig,
    train_cfg: TrainConfig,
    batch_speakers: int = 4,
    batch_utterances: int = 4,
) -> tuple[EmbedderModel, list[float]]:
    """Train on the target (natural) mels of a parallel corpus.

    Deterministic for a fixed seed; returns the model and per-step losses.
    """
    by_speaker: dict[str, list] = {}
    for p in pairs:
        by_speaker.setdefault(p.speaker_id, []).append(p.target_mel)
    speakers = sorted(s for s, utts in by_speaker.items() if len(utts) >= 2)
    if len(speakers) < 2:
        raise DataError(
            "embedder training needs >= 2 speakers with >= 2 utterances each"
        )
    n_spk = min(batch_speakers, len(speakers))
    m_utt = min(batch_utterances, min(len(by_speaker[s]) for s in speakers))
    if m_utt < 2:
        raise DataError("embedder training needs >= 2 utterances per speaker")

    model = EmbedderModel(cfg, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    params = model.parameters()
    state = init_adam(params)
    losses = []
    for _ in range(train_cfg.steps):
        chosen = rng.choice(len(speakers), size=n_spk, replace=False)
        batch_mels = []
        for idx in chosen:
            utts = by_speaker[speakers[idx]]
            picks = rng.choice(len(utts), size=m_utt, replace=False)
            batch_mels.extend(utts[u] for u in picks)
        flat = model.embed_batch(batch_mels, train=True)
        e = flat.reshape(n_spk, m_utt, cfg.embed_dim)
        loss, de, dw, db = ge2e_loss(e, float(model.w[0]), float(model.b[0]))
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite GE2E loss at step {len(losses)}")
        model.zero_grads()
        model.dw[0] = dw
        model.db[0] = db
        model.backward_batch(de.reshape(n_spk * m_utt, cfg.embed_dim))
        adam_step(params, model.gradients(), state, train_cfg)
        model.w[0] = max(float(model.w[0]), W_FLOOR)
        losses.append(loss)
    return model, losses
