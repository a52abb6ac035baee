"""The spectrogram-to-spectrogram conversion network.

Six same-length 1-D convolutions (batch norm + ReLU) with the conditioning
vector — speaker embedding broadcast per frame, log-f0, and voicing mask —
concatenated onto the hidden representation after the third layer, followed
by a uni-directional LSTM, a ReLU dense layer, and a linear projection back
to the mel bins. Trained with L1 spectral loss; `backward` produces exact
gradients for every parameter.
"""

from __future__ import annotations

import numpy as np

from voicefilter.config import ModelConfig
from voicefilter.errors import DataError, NumericalError
from voicefilter.layers import LSTM, Batch, BatchNorm, Conv1d, Dense, _check_finite

MODES = ("train", "eval", "finetune")


def make_conditioning(
    speaker: np.ndarray, logf0: np.ndarray, voicing: np.ndarray
) -> np.ndarray:
    """(T, D + 2) conditioning block: broadcast embedding, log-f0, mask."""
    logf0 = np.asarray(logf0, dtype=np.float64)
    voicing = np.asarray(voicing, dtype=np.float64)
    if logf0.shape != voicing.shape or logf0.ndim != 1:
        raise DataError("log-f0 and voicing mask must be 1-D and equal length")
    t = len(logf0)
    block = np.empty((t, len(speaker) + 2))
    block[:, : len(speaker)] = speaker
    block[:, len(speaker)] = logf0
    block[:, len(speaker) + 1] = voicing
    return block


class VoiceFilterModel:
    """Conversion network parameters plus batch-norm running statistics."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        c, k = cfg.channels, cfg.kernel_size
        cond_dim = cfg.embed_dim + 2
        self.convs: list[Conv1d] = []
        self.bns: list[BatchNorm] = []
        for layer in range(cfg.conv_layers):
            in_ch = cfg.mel_bins if layer == 0 else c
            if layer == cfg.cond_after_layer:
                in_ch += cond_dim
            self.convs.append(Conv1d(f"conv{layer + 1}", in_ch, c, k, 1, rng, dtype))
            self.bns.append(
                BatchNorm(f"bn{layer + 1}", c, cfg.bn_momentum, cfg.bn_eps, dtype)
            )
        self.lstm = LSTM("lstm", c, cfg.lstm_hidden, rng, dtype)
        self.dense = Dense("dense", cfg.lstm_hidden, cfg.dense_units, rng, dtype)
        self.proj = Dense("proj", cfg.dense_units, cfg.mel_bins, rng, dtype)
        self._trainable = [*self.convs, *self.bns, self.lstm, self.dense, self.proj]

    def copy(self) -> "VoiceFilterModel":
        """Independent deep copy of parameters and running statistics."""
        clone = VoiceFilterModel(self.cfg, seed=0, dtype=self.dtype)
        for name, p in self.parameters().items():
            clone.parameters()[name][...] = p
        for name, s in self.state_tensors().items():
            clone.state_tensors()[name][...] = s
        return clone

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self._trainable:
            for pname, p in layer.params.items():
                out[f"{layer.name}.{pname}"] = p
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self._trainable:
            for pname, g in layer.grads.items():
                out[f"{layer.name}.{pname}"] = g
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Non-trainable state (batch-norm running statistics)."""
        out = {}
        for bn in self.bns:
            for sname, s in bn.state.items():
                out[f"{bn.name}.{sname}"] = s
        return out

    def zero_grads(self) -> None:
        for layer in self._trainable:
            layer.zero_grads()

    # -- forward / backward --------------------------------------------------

    def _validate(self, mels: Batch, conds: Batch) -> None:
        cond_dim = self.cfg.embed_dim + 2
        for mel, cond in zip(mels, conds):
            if mel.ndim != 2 or mel.shape[1] != self.cfg.mel_bins:
                raise DataError(
                    f"input mel must be (T, {self.cfg.mel_bins}), got {mel.shape}"
                )
            if cond.shape != (mel.shape[0], cond_dim):
                raise DataError(
                    f"conditioning must be (T, {cond_dim}) matching the mel's "
                    f"{mel.shape[0]} frames, got {cond.shape}"
                )

    def forward_batch(self, mels: Batch, conds: Batch, mode: str = "eval") -> Batch:
        if mode not in MODES:
            raise DataError(f"unknown mode {mode!r}")
        self._validate(mels, conds)
        self.last_relu_margin = np.inf  # distance of pre-activations from 0
        hs = [m.astype(self.dtype) for m in mels]
        conds = [c.astype(self.dtype) for c in conds]
        self._cond_dim = conds[0].shape[1] if conds else self.cfg.embed_dim + 2
        bn_mode = "train" if mode == "train" else "frozen"
        for layer in range(self.cfg.conv_layers):
            if layer == self.cfg.cond_after_layer:
                hs = [np.concatenate([h, c], axis=1) for h, c in zip(hs, conds)]
            hs = self.convs[layer].forward(hs, True)
            hs = self.bns[layer].forward(hs, bn_mode)
            hs = self._relu_forward(layer, hs)
            _check_finite(self.convs[layer].name, hs)
        hs = self.lstm.forward(hs, True)
        hs = self.dense.forward(hs, True)
        hs = self._relu_dense_forward(hs)
        out = self.proj.forward(hs, True)
        _check_finite("proj", out)
        return out

    def _relu_forward(self, layer: int, hs: Batch) -> Batch:
        if not hasattr(self, "_relu_masks"):
            self._relu_masks: dict[int, list[np.ndarray]] = {}
        self._relu_masks[layer] = [h > 0 for h in hs]
        for h in hs:
            self.last_relu_margin = min(self.last_relu_margin, float(np.abs(h).min()))
        return [np.maximum(h, 0) for h in hs]

    def _relu_dense_forward(self, hs: Batch) -> Batch:
        self._dense_mask = [h > 0 for h in hs]
        for h in hs:
            self.last_relu_margin = min(self.last_relu_margin, float(np.abs(h).min()))
        return [np.maximum(h, 0) for h in hs]

    def forward(
        self, mel: np.ndarray, cond: np.ndarray, mode: str = "eval"
    ) -> np.ndarray:
        """Single-utterance forward; output has the input's frame count."""
        return self.forward_batch([mel], [cond], mode)[0]

    def backward_batch(self, dys: Batch) -> None:
        """Accumulate parameter gradients from output-side gradients."""
        d = self.proj.backward([dy.astype(self.dtype) for dy in dys])
        d = [g * m for g, m in zip(d, self._dense_mask)]
        d = self.dense.backward(d)
        d = self.lstm.backward(d)
        for layer in range(self.cfg.conv_layers - 1, -1, -1):
            d = [g * m for g, m in zip(d, self._relu_masks[layer])]
            d = self.bns[layer].backward(d)
            d = self.convs[layer].backward(d)
            if layer == self.cfg.cond_after_layer:
                keep = d[0].shape[1] - self._cond_dim
                d = [g[:, :keep] for g in d]  # conditioning inputs are not parameters
        for name, g in self.gradients().items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in {name}")


def l1_loss(pred, target) -> float:
    """Mean absolute difference over all frames and bins."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DataError(f"shape mismatch in L1 loss: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def l1_batch_loss_and_grad(preds: Batch, targets: Batch) -> tuple[float, Batch]:
    """Batch L1 over all entries; subgradient at exactly 0 is 0."""
    total_entries = sum(p.size for p in preds)
    loss = 0.0
    grads = []
    for pred, target in zip(preds, targets):
        if pred.shape != target.shape:
            raise DataError(
                f"shape mismatch in L1 loss: {pred.shape} vs {target.shape}"
            )
        diff = pred - np.asarray(target, dtype=pred.dtype)
        loss += float(np.abs(diff).sum())
        grads.append(np.sign(diff) / total_entries)
    return loss / total_entries, grads


def loss_and_gradients(
    model: VoiceFilterModel,
    mels: Batch,
    conds: Batch,
    targets: Batch,
    mode: str = "train",
) -> float:
    """One training step's worth of math: forward, L1, full backward.

    Gradients accumulate into the model; call `model.zero_grads()` first.
    """
    preds = model.forward_batch(mels, conds, mode)
    loss, dpreds = l1_batch_loss_and_grad(preds, targets)
    model.backward_batch(dpreds)
    return loss
