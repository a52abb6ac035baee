"""The four-step conversion chain.

1. Render the source mel for the desired phone sequence and durations.
2. Estimate f0 from that mel (harmonic-comb scoring over mel bins) and
   renormalize its log to the target speaker's moments.
3. Run the fine-tuned conversion network in eval mode.
4. Synthesize a waveform (Griffin-Lim stand-in for a neural vocoder).

Speaking rate is untouched throughout: output frame counts equal the
alignment's, and the waveform length is frames * hop.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from voicefilter.checkpoint import KIND_VF_FINETUNED
from voicefilter.config import AnalysisConfig, PitchConfig
from voicefilter.corpus import PhoneAlignment, Synthesizer
from voicefilter.dsp import (
    MelSpectrogram,
    Waveform,
    griffin_lim,
    mel_filter_centers_hz,
)
from voicefilter.errors import DataError
from voicefilter.model import VoiceFilterModel, make_conditioning
from voicefilter.pitch import F0Contour, F0Stats, log_f0, renormalize_f0
from voicefilter.trainer import load_vf_checkpoint, save_vf_checkpoint

log = logging.getLogger(__name__)

PROFILE_NAME = "profile.json"
PROFILE_SCHEMA = 1
DEFAULT_VOCODER_ITERS = 60


@dataclass
class TargetVoiceProfile:
    """Everything inference needs for one target speaker."""

    model: VoiceFilterModel
    embedding: np.ndarray
    target_f0: F0Stats
    source_f0: F0Stats
    analysis: AnalysisConfig
    pitch: PitchConfig

    def __post_init__(self) -> None:
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if self.embedding.ndim != 1 or len(self.embedding) != self.model.cfg.embed_dim:
            raise DataError(
                f"profile embedding has dimension {self.embedding.shape}, model "
                f"expects {self.model.cfg.embed_dim}"
            )
        if abs(np.linalg.norm(self.embedding) - 1.0) > 1e-5:
            raise DataError("profile embedding must be unit norm")


def synthesize_source(a: PhoneAlignment, synth: Synthesizer) -> MelSpectrogram:
    """Source mel for the desired phones and durations (frame-exact)."""
    if not a.segments:
        raise DataError(f"empty alignment for {a.utterance_id}")
    mel = synth.synthesize(a)
    if mel.num_frames != a.total_frames:
        raise DataError(
            f"synthesizer produced {mel.num_frames} frames for a "
            f"{a.total_frames}-frame alignment"
        )
    return mel


def source_f0_from_mel(
    m: MelSpectrogram,
    cfg: AnalysisConfig | None = None,
    pitch_cfg: PitchConfig | None = None,
) -> F0Contour:
    """Estimate f0 directly from mel magnitudes by harmonic-comb scoring.

    Each candidate f0 scores the 1/h-weighted share of frame energy found
    at its harmonics' mel bins; a frame is voiced iff the best score clears
    the configured threshold.
    """
    cfg = cfg or AnalysisConfig()
    pitch_cfg = pitch_cfg or PitchConfig()
    centers = mel_filter_centers_hz(cfg, m.sample_rate)
    fmax = cfg.fmax_hz(m.sample_rate)

    n_steps = (
        int(
            math.ceil(
                math.log2(pitch_cfg.f0_max / pitch_cfg.f0_min)
                * pitch_cfg.comb_steps_per_octave
            )
        )
        + 1
    )
    grid = pitch_cfg.f0_min * 2.0 ** (
        np.arange(n_steps) / pitch_cfg.comb_steps_per_octave
    )
    grid = grid[grid <= pitch_cfg.f0_max]

    combs = []  # per grid point: (bin indices, 1/h weights)
    for f0 in grid:
        harmonics = np.arange(1, pitch_cfg.comb_harmonics + 1) * f0
        harmonics = harmonics[harmonics <= fmax]
        bins = np.argmin(np.abs(centers[None, :] - harmonics[:, None]), axis=1)
        weights = 1.0 / np.arange(1, len(harmonics) + 1)
        combs.append((bins, weights / weights.sum()))

    power = np.exp(m.frames.astype(np.float64))
    share = power / power.sum(axis=1, keepdims=True)
    f0_out = np.zeros(m.num_frames)
    voiced = np.zeros(m.num_frames, dtype=bool)
    scores = np.empty(len(grid))
    for t in range(m.num_frames):
        q = share[t]
        for gi, (bins, weights) in enumerate(combs):
            scores[gi] = float(q[bins] @ weights)
        best = int(np.argmax(scores))
        if scores[best] <= pitch_cfg.comb_threshold:
            continue
        voiced[t] = True
        # Parabolic refinement of log2(f0) over the geometric grid.
        shift = 0.0
        if 0 < best < len(grid) - 1:
            y0, y1, y2 = scores[best - 1], scores[best], scores[best + 1]
            denom = y0 - 2 * y1 + y2
            if abs(denom) > 1e-12:
                shift = float(np.clip(0.5 * (y0 - y2) / denom, -0.5, 0.5))
        f0_out[t] = float(
            np.clip(
                grid[best] * 2.0 ** (shift / pitch_cfg.comb_steps_per_octave),
                pitch_cfg.f0_min,
                pitch_cfg.f0_max,
            )
        )
    return F0Contour(f0_out, voiced)


def source_f0_stats(
    mels: list[MelSpectrogram],
    cfg: AnalysisConfig | None = None,
    pitch_cfg: PitchConfig | None = None,
) -> F0Stats:
    """Pooled log-f0 moments of the source voice, from its mels.

    A source synthesizer without harmonic structure yields no voiced
    frames; the degenerate (0, 0) stats then make renormalization map
    everything to the target mean, which is the only sensible contour.
    """
    contours = [source_f0_from_mel(m, cfg, pitch_cfg) for m in mels]
    voiced = np.concatenate([c.f0_hz[c.voiced] for c in contours])
    if voiced.size == 0:
        log.warning(
            "source mels contain no voiced frames; log-f0 conditioning will "
            "sit at the target mean"
        )
        return F0Stats(0.0, 0.0)
    logs = np.log(voiced)
    return F0Stats(float(logs.mean()), float(logs.std()))


def convert(source_mel: MelSpectrogram, profile: TargetVoiceProfile) -> MelSpectrogram:
    """Apply the f0 chain and the fine-tuned network; frame count preserved."""
    contour = source_f0_from_mel(source_mel, profile.analysis, profile.pitch)
    logf0 = log_f0(contour)
    renormed = renormalize_f0(logf0, profile.source_f0, profile.target_f0)
    cond = make_conditioning(profile.embedding, renormed, contour.voiced)
    out = profile.model.forward(source_mel.frames, cond, mode="eval")
    return MelSpectrogram(out, source_mel.hop_length, source_mel.sample_rate)


def vocode(
    m: MelSpectrogram,
    cfg: AnalysisConfig | None = None,
    iters: int = DEFAULT_VOCODER_ITERS,
) -> Waveform:
    """Waveform synthesis; delegates to Griffin-Lim."""
    cfg = cfg or AnalysisConfig()
    if not np.all(np.isfinite(m.frames)):
        raise DataError("mel contains non-finite entries; refusing to synthesize")
    wav, _ = griffin_lim(m, cfg, iters)
    return wav


def infer(
    a: PhoneAlignment, synth: Synthesizer, profile: TargetVoiceProfile, iters: int = DEFAULT_VOCODER_ITERS
) -> tuple[Waveform, MelSpectrogram, MelSpectrogram]:
    """Full chain; returns (waveform, source mel, converted mel)."""
    source = synthesize_source(a, synth)
    converted = convert(source, profile)
    return vocode(converted, profile.analysis, iters), source, converted


# ---------------------------------------------------------------------------
# Profile directory I/O
# ---------------------------------------------------------------------------


def save_profile(profile_dir: str | Path, profile: TargetVoiceProfile) -> Path:
    out = Path(profile_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_vf_checkpoint(out / "model.vfck", profile.model, kind=KIND_VF_FINETUNED)
    doc = {
        "schema_version": PROFILE_SCHEMA,
        "embedding": [float(x) for x in profile.embedding],
        "target_f0": {"mean": profile.target_f0.mean, "std": profile.target_f0.std},
        "source_f0": {"mean": profile.source_f0.mean, "std": profile.source_f0.std},
        "analysis": dataclasses.asdict(profile.analysis),
        "pitch": dataclasses.asdict(profile.pitch),
    }
    path = out / PROFILE_NAME
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_profile(profile_dir: str | Path) -> TargetVoiceProfile:
    root = Path(profile_dir)
    doc_path = root / PROFILE_NAME
    if not doc_path.exists():
        raise DataError(f"no profile at {doc_path}")
    with open(doc_path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != PROFILE_SCHEMA:
        raise DataError(f"unsupported profile schema {doc.get('schema_version')}")
    model, kind, _ = load_vf_checkpoint(root / "model.vfck")
    if kind != KIND_VF_FINETUNED:
        raise DataError("profile model must be a fine-tuned (speaker-dependent) checkpoint")
    return TargetVoiceProfile(
        model=model,
        embedding=np.asarray(doc["embedding"]),
        target_f0=F0Stats(**doc["target_f0"]),
        source_f0=F0Stats(**doc["source_f0"]),
        analysis=AnalysisConfig(**doc["analysis"]),
        pitch=PitchConfig(**doc["pitch"]),
    )
