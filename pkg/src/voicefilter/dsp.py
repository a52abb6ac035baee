"""Waveform I/O, STFT, 80-bin mel analysis, and Griffin-Lim inversion.

Frame law: with center (reflect) padding every analysis yields exactly
``ceil(num_samples / hop)`` frames, so frame counts are a pure function of
length and hop. The corpus builder and the pitch tracker rely on this.
"""

from __future__ import annotations

import json
import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from voicefilter.config import AnalysisConfig
from voicefilter.errors import DataError, NumericalError

MEL_MAGIC = b"MELF"
MEL_VERSION = 1


@dataclass
class Waveform:
    """Mono audio in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")
        if self.sample_rate < 1:
            raise DataError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    """T x B matrix of log mel-band amplitudes."""

    frames: np.ndarray
    hop_length: int
    sample_rate: int

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError("mel frames must be a T x B matrix with T >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("mel frames contain non-finite entries")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]


def num_frames(num_samples: int, hop_length: int) -> int:
    """Frame count under center padding: ceil(num_samples / hop)."""
    return -(-num_samples // hop_length)


# ---------------------------------------------------------------------------
# WAV I/O (stdlib RIFF PCM)
# ---------------------------------------------------------------------------


def load_wav(path: str | Path) -> Waveform:
    """Read a PCM WAV file, taking the first channel and scaling to [-1, 1].

    16-bit samples divide by 2**15, 32-bit by 2**31, so full-scale positive
    input maps to (2**15 - 1) / 2**15 rather than exactly 1.0.
    """
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            sample_rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except (wave.Error, EOFError, struct.error) as exc:
        raise DataError(f"malformed WAV file {path}: {exc}") from None
    except FileNotFoundError:
        raise DataError(f"WAV file not found: {path}") from None

    if sampwidth == 2:
        data = np.frombuffer(raw, dtype="<i2")
        scale = float(2**15)
    elif sampwidth == 4:
        data = np.frombuffer(raw, dtype="<i4")
        scale = float(2**31)
    else:
        raise DataError(
            f"unsupported codec in {path}: {8 * sampwidth}-bit samples "
            "(expected 16- or 32-bit PCM)"
        )
    if len(data) < n_frames * n_channels:
        raise DataError(f"malformed WAV file {path}: truncated data chunk")
    if n_channels > 1:
        data = data[::n_channels]
    if data.size == 0:
        raise DataError(f"WAV file {path} contains no audio")
    return Waveform(data.astype(np.float64) / scale, sample_rate)


def save_wav(w: Waveform, path: str | Path) -> None:
    """Write 16-bit PCM. Inverse of the load scaling, clipped to full scale."""
    ints = np.clip(np.round(w.samples * 2**15), -(2**15), 2**15 - 1).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(ints.tobytes())


# ---------------------------------------------------------------------------
# STFT / mel filterbank
# ---------------------------------------------------------------------------


def _analysis_window(cfg: AnalysisConfig) -> np.ndarray:
    """Hann window of window_size, zero-padded centered to fft_size."""
    win = np.hanning(cfg.window_size)
    pad = cfg.fft_size - cfg.window_size
    left = pad // 2
    return np.pad(win, (left, pad - left))


def stft(samples: np.ndarray, cfg: AnalysisConfig) -> np.ndarray:
    """Center-padded STFT: (ceil(len/hop), fft_size // 2 + 1) complex."""
    samples = np.asarray(samples, dtype=np.float64)
    pad = cfg.fft_size // 2
    if len(samples) <= pad:
        raise DataError(
            f"waveform of {len(samples)} samples is too short to analyze "
            f"(needs > {pad})"
        )
    padded = np.pad(samples, pad, mode="reflect")
    frames = num_frames(len(samples), cfg.hop_length)
    window = _analysis_window(cfg)
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop_length * np.arange(frames)[:, None]
    return np.fft.rfft(padded[idx] * window[None, :], axis=1)


def istft(spectra: np.ndarray, cfg: AnalysisConfig) -> np.ndarray:
    """Overlap-add inverse of `stft`; returns exactly T * hop samples."""
    frames = spectra.shape[0]
    window = _analysis_window(cfg)
    pad = cfg.fft_size // 2
    total = (frames - 1) * cfg.hop_length + cfg.fft_size
    out = np.zeros(total)
    norm = np.zeros(total)
    chunks = np.fft.irfft(spectra, n=cfg.fft_size, axis=1)
    for t in range(frames):
        start = t * cfg.hop_length
        out[start : start + cfg.fft_size] += chunks[t] * window
        norm[start : start + cfg.fft_size] += window**2
    out /= np.maximum(norm, 1e-10)
    return out[pad : pad + frames * cfg.hop_length]


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: AnalysisConfig, sample_rate: int) -> np.ndarray:
    """Triangular HTK-scale filterbank (mel_bins, fft_size//2 + 1), rows
    normalized to unit area."""
    n_freqs = cfg.fft_size // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_freqs)
    mel_pts = np.linspace(
        hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax_hz(sample_rate)), cfg.mel_bins + 2
    )
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((cfg.mel_bins, n_freqs))
    for m in range(cfg.mel_bins):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-8)
        down = (hi - freqs) / max(hi - ctr, 1e-8)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    area = fb.sum(axis=1, keepdims=True)
    if np.any(area <= 0):
        raise DataError("mel filterbank has empty rows; widen fmin/fmax or fft_size")
    return fb / area


def mel_filter_centers_hz(cfg: AnalysisConfig, sample_rate: int) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    mel_pts = np.linspace(
        hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax_hz(sample_rate)), cfg.mel_bins + 2
    )
    return mel_to_hz(mel_pts[1:-1])


def mel_spectrogram(w: Waveform, cfg: AnalysisConfig) -> MelSpectrogram:
    """Log-mel analysis: ln(max(mel_power, log_floor)) per frame and band."""
    spec = stft(w.samples, cfg)
    power = np.abs(spec) ** 2
    mel_power = power @ mel_filterbank(cfg, w.sample_rate).T
    frames = np.log(np.maximum(mel_power, cfg.log_floor))
    return MelSpectrogram(frames.astype(np.float32), cfg.hop_length, w.sample_rate)


# ---------------------------------------------------------------------------
# Griffin-Lim inversion
# ---------------------------------------------------------------------------


def mel_to_linear_magnitude(m: MelSpectrogram, cfg: AnalysisConfig) -> np.ndarray:
    """Invert the filterbank by pseudo-inverse, clipping power at 0."""
    fb = mel_filterbank(cfg, m.sample_rate)
    mel_power = np.exp(m.frames.astype(np.float64))
    linear_power = np.clip(mel_power @ np.linalg.pinv(fb).T, 0.0, None)
    return np.sqrt(linear_power)


def griffin_lim(
    m: MelSpectrogram, cfg: AnalysisConfig, iters: int = 60
) -> tuple[Waveform, np.ndarray]:
    """Phase reconstruction from a mel spectrogram.

    Returns the waveform (length T * hop) and the per-iteration spectral
    convergence error || |STFT(x)| - M ||_F / ||M||_F.
    """
    if iters < 1:
        raise DataError("griffin_lim requires iters >= 1")
    magnitude = mel_to_linear_magnitude(m, cfg)
    mag_norm = np.linalg.norm(magnitude)
    if mag_norm == 0.0:
        zeros = np.zeros(m.num_frames * cfg.hop_length)
        return Waveform(zeros, m.sample_rate), np.zeros(iters)
    spectra = magnitude.astype(np.complex128)  # zero initial phase
    errors = np.empty(iters)
    x = istft(spectra, cfg)
    for it in range(iters):
        rebuilt = stft(x, cfg)
        errors[it] = np.linalg.norm(np.abs(rebuilt) - magnitude) / mag_norm
        phase = rebuilt / np.maximum(np.abs(rebuilt), 1e-12)
        x = istft(magnitude * phase, cfg)
    if not np.all(np.isfinite(x)):
        raise NumericalError("Griffin-Lim produced non-finite samples")
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x = x / peak
    return Waveform(x, m.sample_rate), errors


# ---------------------------------------------------------------------------
# Mel serialization: 16-byte header (magic, version, T, B) + f32 LE row-major
# ---------------------------------------------------------------------------


def save_mel(m: MelSpectrogram, path: str | Path, cfg: AnalysisConfig | None = None) -> None:
    """Write the binary mel blob; a JSON sidecar carries the analysis config."""
    header = MEL_MAGIC + struct.pack("<III", MEL_VERSION, m.num_frames, m.num_bins)
    data = np.ascontiguousarray(m.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
    sidecar = {
        "hop_length": m.hop_length,
        "sample_rate": m.sample_rate,
    }
    if cfg is not None:
        sidecar["analysis"] = {
            "fft_size": cfg.fft_size,
            "window_size": cfg.window_size,
            "hop_length": cfg.hop_length,
            "mel_bins": cfg.mel_bins,
            "fmin": cfg.fmin,
            "fmax": cfg.fmax,
            "log_floor": cfg.log_floor,
        }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_mel(path: str | Path) -> MelSpectrogram:
    try:
        with open(path, "rb") as fh:
            header = fh.read(16)
            if len(header) < 16 or header[:4] != MEL_MAGIC:
                raise DataError(f"{path} is not a mel blob (bad magic)")
            version, t, b = struct.unpack("<III", header[4:])
            if version != MEL_VERSION:
                raise DataError(f"unsupported mel blob version {version} in {path}")
            payload = fh.read(4 * t * b)
    except OSError as exc:
        raise DataError(f"cannot read mel blob {path}: {exc}") from None
    if len(payload) != 4 * t * b:
        raise DataError(f"mel blob {path} is truncated")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, b)
    sidecar_path = Path(str(path) + ".json")
    hop, sr = 200, 16000
    if sidecar_path.exists():
        with open(sidecar_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        hop = int(meta.get("hop_length", hop))
        sr = int(meta.get("sample_rate", sr))
    return MelSpectrogram(frames.copy(), hop, sr)


# ---------------------------------------------------------------------------
# Small synthesis helpers used by tests, demos, and the toy data generator
# ---------------------------------------------------------------------------


def sine_wave(
    freq_hz: float, duration_s: float, sample_rate: int = 16000, amplitude: float = 0.5
) -> Waveform:
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    return Waveform(amplitude * np.sin(2 * math.pi * freq_hz * t), sample_rate)


def silence(duration_s: float, sample_rate: int = 16000) -> Waveform:
    return Waveform(np.zeros(int(round(duration_s * sample_rate))), sample_rate)
