"""Pitch estimation and log-f0 conditioning signals.

The tracker is a single-pass simplification of correlation-based trackers:
per-frame candidates come from normalized cross-correlation (NCCF) peaks,
a dynamic program smooths the lag path by penalizing octave jumps, and a
frame is voiced iff its best NCCF value is positive (threshold 0).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from voicefilter.config import PitchConfig
from voicefilter.dsp import Waveform, num_frames
from voicefilter.errors import DataError


@dataclass
class F0Contour:
    """Per-frame f0 in Hz (0 where unvoiced) plus the voicing mask."""

    f0_hz: np.ndarray
    voiced: np.ndarray

    def __post_init__(self) -> None:
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.f0_hz.shape != self.voiced.shape or self.f0_hz.ndim != 1:
            raise DataError("f0 and voicing mask must be 1-D and equal length")
        if np.any((self.f0_hz == 0) != ~self.voiced):
            raise DataError("f0 must be 0 exactly on unvoiced frames")

    def __len__(self) -> int:
        return len(self.f0_hz)


@dataclass(frozen=True)
class F0Stats:
    """Mean / standard deviation of log-f0 over a speaker's voiced frames."""

    mean: float
    std: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mean) and math.isfinite(self.std)):
            raise DataError("f0 stats must be finite")
        if self.std < 0:
            raise DataError("f0 std must be >= 0")


@dataclass
class LogF0:
    """log-f0 sequence with unvoiced frames replaced by a fill value."""

    values: np.ndarray
    voiced: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


def _frame_candidates(
    segment: np.ndarray, n: int, min_lag: int, max_lag: int, n_candidates: int
) -> tuple[np.ndarray, np.ndarray]:
    """NCCF local maxima for one frame: (lags, values), best first."""
    energy = np.concatenate(([0.0], np.cumsum(segment**2)))
    e0 = energy[n]
    if e0 <= 1e-12:
        return np.empty(0), np.empty(0)
    corr = np.correlate(segment, segment[:n], mode="valid")  # lag 0..max_lag
    lag_energy = energy[n : n + max_lag + 1] - energy[:max_lag + 1]
    denom = np.sqrt(e0 * np.maximum(lag_energy, 1e-12))
    nccf = corr / denom
    window = nccf[min_lag : max_lag + 1]
    if len(window) < 3:
        return np.empty(0), np.empty(0)
    peaks = np.flatnonzero(
        (window[1:-1] > window[:-2]) & (window[1:-1] >= window[2:])
    ) + 1 + min_lag
    if len(peaks) == 0:
        return np.empty(0), np.empty(0)
    order = np.argsort(nccf[peaks])[::-1][:n_candidates]
    peaks = peaks[order]
    # Parabolic refinement for sub-sample lag accuracy.
    lags = np.empty(len(peaks))
    for i, p in enumerate(peaks):
        y0, y1, y2 = nccf[p - 1], nccf[p], nccf[p + 1] if p + 1 < len(nccf) else nccf[p]
        denom_p = y0 - 2 * y1 + y2
        shift = 0.0 if abs(denom_p) < 1e-12 else 0.5 * (y0 - y2) / denom_p
        lags[i] = p + np.clip(shift, -0.5, 0.5)
    return lags, nccf[peaks]


def estimate_f0(
    w: Waveform,
    f0_min: float = 70.0,
    f0_max: float = 500.0,
    hop: int = 200,
    cfg: PitchConfig | None = None,
) -> F0Contour:
    """Track f0 with NCCF candidates and dynamic-programming smoothing.

    Frame t is centered at sample t*hop, so the frame count matches
    the mel analysis of the same waveform and hop.
    """
    cfg = cfg or PitchConfig()
    sr = w.sample_rate
    if not (20 <= f0_min < f0_max <= sr / 4):
        raise DataError(
            f"invalid f0 range [{f0_min}, {f0_max}] for sample rate {sr} "
            "(need 20 <= f0_min < f0_max <= sr/4)"
        )
    min_lag = int(sr / f0_max)
    max_lag = int(math.ceil(sr / f0_min))
    n = int(round(cfg.window_periods * sr / f0_min))
    frames = num_frames(len(w.samples), hop)

    # Frames need [center - n/2, center + n/2 + max_lag) of signal.
    left = n // 2
    padded = np.pad(w.samples, (left, n + max_lag), mode="constant")
    cand_lags: list[np.ndarray] = []
    cand_vals: list[np.ndarray] = []
    for t in range(frames):
        start = t * hop  # == center - n/2 in padded coordinates
        segment = padded[start : start + n + max_lag]
        lags, vals = _frame_candidates(segment, n, min_lag, max_lag, cfg.n_candidates)
        cand_lags.append(lags)
        cand_vals.append(vals)

    voiced = np.array([len(v) > 0 and v.max() > 0.0 for v in cand_vals])
    f0 = np.zeros(frames)
    t = 0
    while t < frames:
        if not voiced[t]:
            t += 1
            continue
        end = t
        while end < frames and voiced[end]:
            end += 1
        f0[t:end] = _best_lag_path(
            cand_lags[t:end], cand_vals[t:end], sr, cfg
        )
        t = end
    f0[voiced] = np.clip(f0[voiced], f0_min, f0_max)
    return F0Contour(f0, voiced)


def _best_lag_path(
    lags: list[np.ndarray], vals: list[np.ndarray], sr: float, cfg: PitchConfig
) -> np.ndarray:
    """Minimum-cost candidate path through one voiced run.

    Local cost is (1 - NCCF) plus a small long-lag bias; transitions pay
    octave_lambda * |log f0_t - log f0_{t-1}|.
    """
    local = [
        (1.0 - v) + cfg.octave_bias * np.log2(np.maximum(l, 1.0))
        for l, v in zip(lags, vals)
    ]
    # Keep only candidates with positive NCCF so the chosen value stays > 0.
    keep = [v > 0.0 for v in vals]
    lags = [l[k] for l, k in zip(lags, keep)]
    local = [c[k] for c, k in zip(local, keep)]
    log_lags = [np.log(l) for l in lags]

    cost = local[0].copy()
    back: list[np.ndarray] = []
    for t in range(1, len(lags)):
        trans = cfg.octave_lambda * np.abs(
            log_lags[t][None, :] - log_lags[t - 1][:, None]
        )
        total = cost[:, None] + trans
        best_prev = np.argmin(total, axis=0)
        cost = total[best_prev, np.arange(len(lags[t]))] + local[t]
        back.append(best_prev)
    path = [int(np.argmin(cost))]
    for bp in reversed(back):
        path.append(int(bp[path[-1]]))
    path.reverse()
    return np.array([sr / lags[t][i] for t, i in enumerate(path)])


def log_f0(c: F0Contour, fill: float | None = None) -> LogF0:
    """ln(f0) on voiced frames; unvoiced frames carry the voiced mean.

    When the contour has no voiced frames (and no explicit fill), the fill
    falls back to 0.0; downstream renormalization overrides it anyway.
    """
    values = np.zeros(len(c), dtype=np.float64)
    if c.voiced.any():
        values[c.voiced] = np.log(c.f0_hz[c.voiced])
        fill_value = float(values[c.voiced].mean()) if fill is None else fill
    else:
        fill_value = 0.0 if fill is None else fill
    values[~c.voiced] = fill_value
    return LogF0(values, c.voiced.copy())


def f0_stats(contours: list[F0Contour] | tuple[F0Contour, ...]) -> F0Stats:
    """Pooled mean/std (population convention) of ln(f0) over voiced frames."""
    pool = [c.f0_hz[c.voiced] for c in contours]
    voiced = np.concatenate(pool) if pool else np.empty(0)
    if voiced.size == 0:
        raise DataError("no voiced speech in the provided contours")
    logs = np.log(voiced)
    return F0Stats(float(logs.mean()), float(logs.std()))


def renormalize_f0(
    src: LogF0, src_stats: F0Stats, tgt_stats: F0Stats
) -> np.ndarray:
    """Map voiced log-f0 to the target speaker's moments.

    x' = (x - mu_src) / sigma_src * sigma_tgt + mu_tgt on voiced frames;
    unvoiced frames are set to mu_tgt. A degenerate source (sigma < 1e-6)
    maps everything to mu_tgt.
    """
    for stats in (src_stats, tgt_stats):
        if not (math.isfinite(stats.mean) and math.isfinite(stats.std)):
            raise DataError("non-finite f0 statistics")
    out = np.full(len(src), tgt_stats.mean, dtype=np.float64)
    if src_stats.std < 1e-6:
        return out
    v = src.voiced
    out[v] = (src.values[v] - src_stats.mean) / src_stats.std * tgt_stats.std + tgt_stats.mean
    return out


# ---------------------------------------------------------------------------
# CSV serialization: frame_index, f0_hz, voiced
# ---------------------------------------------------------------------------


def save_f0_csv(c: F0Contour, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "f0_hz", "voiced"])
        for t in range(len(c)):
            writer.writerow([t, f"{c.f0_hz[t]:.6f}", int(c.voiced[t])])


def load_f0_csv(path: str | Path) -> F0Contour:
    f0, voiced = [], []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["frame_index", "f0_hz", "voiced"]:
                raise DataError(f"unexpected f0 CSV header in {path}: {header}")
            for row in reader:
                f0.append(float(row[1]))
                voiced.append(bool(int(row[2])))
    except (OSError, ValueError, IndexError) as exc:
        raise DataError(f"cannot parse f0 CSV {path}: {exc}") from None
    return F0Contour(np.asarray(f0), np.asarray(voiced))
