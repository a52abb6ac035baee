"""Background one-to-many training and one-minute fine-tuning.

Background batches condition each utterance on its own target speaker's
embedding and natural log-f0. Fine-tuning conditions every step on one
fixed centroid embedding, runs batch norm on running statistics frozen
from background training, and updates all parameters.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from voicefilter.checkpoint import (
    KIND_EMBEDDER,
    KIND_VF_BACKGROUND,
    KIND_VF_FINETUNED,
    load_checkpoint,
    save_checkpoint,
)
from voicefilter.config import EmbedderConfig, ModelConfig, TrainConfig
from voicefilter.corpus import ParallelUtterancePair
from voicefilter.embedder import EmbedderModel, centroid
from voicefilter.errors import DataError, NumericalError
from voicefilter.model import VoiceFilterModel, loss_and_gradients, make_conditioning
from voicefilter.optim import AdamState, adam_step, init_adam

log = logging.getLogger(__name__)

RUNNING_WINDOW = 100  # steps averaged when reporting the running loss


def running_mean(losses: list[float], window: int = RUNNING_WINDOW) -> float:
    if not losses:
        raise DataError("no losses recorded")
    return float(np.mean(losses[-window:]))


def _prepare_batch_items(
    pairs: list[ParallelUtterancePair],
    embedder: EmbedderModel,
    speaker_vector=None,
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Precompute (input, conditioning, target) per utterance."""
    items = []
    for p in pairs:
        vec = (
            speaker_vector
            if speaker_vector is not None
            else embedder.embed(p.target_mel)
        )
        cond = make_conditioning(vec, p.target_logf0.values, p.target_logf0.voiced)
        items.append((p.source_mel.frames, cond, p.target_mel.frames))
    return items


def _validate_corpus(pairs: list[ParallelUtterancePair]) -> None:
    if not pairs:
        raise DataError("training corpus is empty")
    for p in pairs:
        if p.source_mel.num_frames != p.target_mel.num_frames:
            raise DataError(f"pair {p.utterance_id} has mismatched frame counts")


def _optimize(
    model: VoiceFilterModel,
    items: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    steps: int,
    cfg: TrainConfig,
    mode: str,
    rng: np.random.Generator,
) -> list[float]:
    params = model.parameters()
    state = init_adam(params)
    losses: list[float] = []
    take = min(cfg.batch_size, len(items))
    for step in range(steps):
        idx = rng.choice(len(items), size=take, replace=False)
        mels = [items[i][0] for i in idx]
        conds = [items[i][1] for i in idx]
        targets = [items[i][2] for i in idx]
        model.zero_grads()
        try:
            loss = loss_and_gradients(model, mels, conds, targets, mode=mode)
        except NumericalError as exc:
            raise NumericalError(f"{exc} (training step {step})") from None
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss at training step {step}")
        adam_step(params, model.gradients(), state, cfg)
        losses.append(loss)
        if (step + 1) % 500 == 0:
            log.info("step %d: running loss %.5f", step + 1, running_mean(losses))
    return losses


def train_background(
    pairs: list[ParallelUtterancePair],
    embedder: EmbedderModel,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
) -> tuple[VoiceFilterModel, list[float]]:
    """One-to-many training over the whole parallel corpus."""
    _validate_corpus(pairs)
    if model_cfg.embed_dim != embedder.cfg.embed_dim:
        raise DataError(
            f"model expects {model_cfg.embed_dim}-dim embeddings but the "
            f"embedder produces {embedder.cfg.embed_dim}"
        )
    model = VoiceFilterModel(model_cfg, seed=cfg.seed)
    items = _prepare_batch_items(pairs, embedder)
    rng = np.random.default_rng(cfg.seed)
    losses = _optimize(model, items, cfg.steps, cfg, "train", rng)
    return model, losses


def finetune(
    background: VoiceFilterModel,
    target_pairs: list[ParallelUtterancePair],
    embedder: EmbedderModel,
    cfg: TrainConfig,
) -> tuple[VoiceFilterModel, list[float], np.ndarray]:
    """Adapt all parameters to one speaker on a fixed centroid embedding.

    Returns (speaker-dependent model, losses, centroid embedding). With
    finetune_steps == 0 the returned model equals the background model.
    """
    _validate_corpus(target_pairs)
    speakers = {p.speaker_id for p in target_pairs}
    if len(speakers) != 1:
        raise DataError(f"fine-tuning expects one speaker, got {sorted(speakers)}")
    seconds = sum(
        p.num_frames * p.target_mel.hop_length / p.target_mel.sample_rate
        for p in target_pairs
    )
    log.info(
        "fine-tuning on %d utterances (%.1f s) of speaker %s",
        len(target_pairs),
        seconds,
        next(iter(speakers)),
    )
    spk_centroid = centroid(
        np.stack([embedder.embed(p.target_mel) for p in target_pairs])
    )
    model = background.copy()
    items = _prepare_batch_items(target_pairs, embedder, speaker_vector=spk_centroid)
    rng = np.random.default_rng(cfg.seed)
    losses = _optimize(model, items, cfg.finetune_steps, cfg, "finetune", rng)
    return model, losses, spk_centroid


def evaluate_l1(
    model: VoiceFilterModel,
    pairs: list[ParallelUtterancePair],
    embedder: EmbedderModel,
    speaker_vector=None,
) -> float:
    """Mean L1 between converted source mels and targets, in eval mode."""
    from voicefilter.model import l1_batch_loss_and_grad

    items = _prepare_batch_items(pairs, embedder, speaker_vector)
    preds = model.forward_batch([i[0] for i in items], [i[1] for i in items], "eval")
    loss, _ = l1_batch_loss_and_grad(preds, [i[2] for i in items])
    return loss


# ---------------------------------------------------------------------------
# Checkpoint adapters
# ---------------------------------------------------------------------------


def _train_meta(cfg: TrainConfig | None) -> dict:
    return dataclasses.asdict(cfg) if cfg is not None else {}


def save_vf_checkpoint(
    path,
    model: VoiceFilterModel,
    kind: int = KIND_VF_BACKGROUND,
    adam: AdamState | None = None,
    train_cfg: TrainConfig | None = None,
    meta: dict | None = None,
) -> None:
    if kind not in (KIND_VF_BACKGROUND, KIND_VF_FINETUNED):
        raise DataError(f"not a conversion-model checkpoint kind: {kind}")
    tensors = dict(model.parameters())
    tensors.update(model.state_tensors())
    config = {
        "model": dataclasses.asdict(model.cfg),
        "train": _train_meta(train_cfg),
        "adam_step": adam.step if adam else 0,
        "finetune_bn": "running-stats-frozen",
        "meta": meta or {},
    }
    if adam is not None:
        for name, m in adam.m.items():
            tensors[f"adam.m.{name}"] = m
        for name, v in adam.v.items():
            tensors[f"adam.v.{name}"] = v
    save_checkpoint(path, kind, config, tensors)


def load_vf_checkpoint(path) -> tuple[VoiceFilterModel, int, dict]:
    ckpt = load_checkpoint(path)
    if ckpt.kind not in (KIND_VF_BACKGROUND, KIND_VF_FINETUNED):
        raise DataError(
            f"{path} holds a {ckpt.kind_name} checkpoint, not a conversion model"
        )
    model_cfg = ModelConfig(**ckpt.config["model"])
    model = VoiceFilterModel(model_cfg, seed=0)
    params = model.parameters()
    state = model.state_tensors()
    for name, value in ckpt.tensors.items():
        if name.startswith("adam."):
            continue
        if name in params:
            params[name][...] = value
        elif name in state:
            state[name][...] = value
        else:
            raise DataError(f"checkpoint tensor {name} does not fit the model")
    return model, ckpt.kind, ckpt.config


def save_embedder_checkpoint(path, model: EmbedderModel) -> None:
    config = {"embedder": dataclasses.asdict(model.cfg)}
    save_checkpoint(path, KIND_EMBEDDER, config, dict(model.parameters()))


def load_embedder_checkpoint(path) -> EmbedderModel:
    ckpt = load_checkpoint(path)
    if ckpt.kind != KIND_EMBEDDER:
        raise DataError(f"{path} holds a {ckpt.kind_name} checkpoint, not an embedder")
    model = EmbedderModel(EmbedderConfig(**ckpt.config["embedder"]), seed=0)
    params = model.parameters()
    for name, value in ckpt.tensors.items():
        if name not in params:
            raise DataError(f"checkpoint tensor {name} does not fit the embedder")
        params[name][...] = value
    return model
