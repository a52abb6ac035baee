"""Objective metrics and listening-test statistics.

CSED measures speaker similarity as the mean cosine distance between
synthesized-utterance embeddings and the reference centroid. The Fréchet
distance compares Gaussian fits of feature activations; its matrix square
root runs on an internal cyclic-Jacobi eigensolver so tests can check it
against an independent dense solver. MUSHRA reports use mean +- 1.96 SE,
paired two-sided t-tests (continued-fraction incomplete beta), and the
Holm step-down correction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from voicefilter.embedder import EmbedderModel, centroid
from voicefilter.errors import DataError, NumericalError

Extractor = Callable[[object], np.ndarray]  # utterance -> (frames, features)


# ---------------------------------------------------------------------------
# Speaker similarity: cosine distance to the reference centroid
# ---------------------------------------------------------------------------


def csed(synth_embeddings, ref_embeddings) -> float:
    """Mean of (1 - cos(e, c_ref)) over synthesized utterances, in [0, 2]."""
    synth = np.atleast_2d(np.asarray(synth_embeddings, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(ref_embeddings, dtype=np.float64))
    if synth.size == 0 or ref.size == 0:
        raise DataError("CSED needs non-empty embedding sets")
    c = centroid(ref)
    norms = np.linalg.norm(synth, axis=1)
    if np.any(norms < 1e-12):
        raise DataError("zero-norm embedding in CSED input")
    cosines = (synth @ c) / norms
    return float(np.mean(1.0 - cosines))


# ---------------------------------------------------------------------------
# Frechet distance between Gaussian fits
# ---------------------------------------------------------------------------


@dataclass
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = len(self.mean)
        if self.cov.shape != (d, d):
            raise DataError(f"covariance must be {d}x{d}, got {self.cov.shape}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise DataError("covariance must be symmetric")

    @property
    def dim(self) -> int:
        return len(self.mean)


def fit_gaussian(frames: np.ndarray, shrinkage: float = 1e-3) -> GaussianFit:
    """Mean/covariance of pooled rows; diagonal loading below D+1 samples."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("Gaussian fit needs at least 2 pooled frames")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    cov = 0.5 * (cov + cov.T)
    if x.shape[0] < x.shape[1] + 1:
        cov += shrinkage * np.eye(x.shape[1])
    return GaussianFit(mean, cov)


def jacobi_eigh(a: np.ndarray, max_sweeps: int = 100, tol: float = 1e-12):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors as columns); raises on
    non-convergence.
    """
    a = np.asarray(a, dtype=np.float64).copy()
    n = a.shape[0]
    if a.shape != (n, n):
        raise DataError("jacobi_eigh needs a square matrix")
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    scale = max(float(np.max(np.abs(a))), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(float(np.sum(np.tril(a, -1) ** 2)))
        if off <= tol * scale:
            return a.diagonal().copy(), v
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-30 * scale:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (
                    abs(theta) + math.sqrt(theta * theta + 1.0)
                )
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
    raise NumericalError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")


def _psd_sqrt(sym: np.ndarray) -> np.ndarray:
    vals, vecs = jacobi_eigh(sym)
    if np.min(vals) < -1e-8 * max(1.0, float(np.max(np.abs(vals)))):
        raise NumericalError("matrix has a significantly negative eigenvalue")
    roots = np.sqrt(np.clip(vals, 0.0, None))
    return (vecs * roots) @ vecs.T


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross term is computed as Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}) from
    the eigenvalues of the symmetrized product.
    """
    if a.dim != b.dim:
        raise DataError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    sqrt_a = _psd_sqrt(a.cov)
    inner = sqrt_a @ b.cov @ sqrt_a
    inner = 0.5 * (inner + inner.T)
    vals, _ = jacobi_eigh(inner)
    cross = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    if d < -1e-6:
        raise NumericalError(f"Frechet distance collapsed below zero: {d}")
    return max(d, 0.0)


def frame_activation_extractor(embedder: EmbedderModel) -> Extractor:
    """Default cFSD feature extractor: the embedder's per-frame conv
    activations (its penultimate, pre-pooling layer)."""
    return embedder.frame_activations


def _group(mels) -> dict[str, Sequence]:
    if isinstance(mels, Mapping):
        return dict(mels)
    return {"_all": list(mels)}


def cfsd(
    ref_mels,
    synth_mels,
    extractor: Extractor,
    shrinkage: float = 1e-3,
    pooled: bool = False,
) -> float:
    """Frechet distance over pooled per-frame activations.

    Inputs may be mappings speaker -> utterances (the conditional variant
    averages per-speaker distances over sorted speakers) or flat lists.
    ``pooled=True`` fits one Gaussian per side regardless of speakers.
    """
    ref_groups, synth_groups = _group(ref_mels), _group(synth_mels)
    if not ref_groups or not synth_groups:
        raise DataError("cFSD needs non-empty reference and synthesis sets")
    if not pooled and set(ref_groups) != set(synth_groups):
        raise DataError(
            "conditional cFSD needs matching speakers on both sides; "
            "use pooled=True to compare regardless"
        )

    def pooled_acts(groups):
        return np.concatenate(
            [np.asarray(extractor(m)) for key in sorted(groups) for m in groups[key]]
        )

    if pooled:
        fit_ref = fit_gaussian(pooled_acts(ref_groups), shrinkage)
        fit_synth = fit_gaussian(pooled_acts(synth_groups), shrinkage)
        return frechet_distance(fit_ref, fit_synth)
    distances = []
    for speaker in sorted(ref_groups):
        ref_acts = np.concatenate([np.asarray(extractor(m)) for m in ref_groups[speaker]])
        synth_acts = np.concatenate(
            [np.asarray(extractor(m)) for m in synth_groups[speaker]]
        )
        distances.append(
            frechet_distance(
                fit_gaussian(ref_acts, shrinkage), fit_gaussian(synth_acts, shrinkage)
            )
        )
    return float(np.mean(distances))


# ---------------------------------------------------------------------------
# MUSHRA records and summary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MushraRecord:
    listener_id: str
    system_id: str
    utterance_id: str
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 100.0:
            raise DataError(
                f"MUSHRA score {self.score} outside [0, 100] "
                f"({self.listener_id}/{self.system_id}/{self.utterance_id})"
            )


@dataclass(frozen=True)
class SystemSummary:
    system_id: str
    mean: float
    ci_halfwidth: float  # 1.96 * SE
    n: int


def load_mushra_csv(path: str | Path) -> list[MushraRecord]:
    records = []
    seen = set()
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["listener_id", "system_id", "utterance_id", "score"]:
                raise DataError(f"unexpected MUSHRA CSV header: {header}")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 4:
                    raise DataError(f"{path}:{lineno}: expected 4 fields")
                rec = MushraRecord(row[0], row[1], row[2], float(row[3]))
                key = (rec.listener_id, rec.system_id, rec.utterance_id)
                if key in seen:
                    raise DataError(f"{path}:{lineno}: duplicate rating for {key}")
                seen.add(key)
                records.append(rec)
    except OSError as exc:
        raise DataError(f"cannot read MUSHRA CSV {path}: {exc}") from None
    except ValueError as exc:
        raise DataError(f"cannot parse MUSHRA CSV {path}: {exc}") from None
    if not records:
        raise DataError(f"no ratings in {path}")
    return records


def mushra_summary(records: Sequence[MushraRecord]) -> list[SystemSummary]:
    """Per-system mean with a 1.96 * SE half-width, best system first."""
    if not records:
        raise DataError("no MUSHRA records")
    by_system: dict[str, list[float]] = {}
    for rec in records:
        by_system.setdefault(rec.system_id, []).append(rec.score)
    out = []
    for system in sorted(by_system):
        scores = np.asarray(by_system[system], dtype=np.float64)
        n = len(scores)
        se = float(scores.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        out.append(SystemSummary(system, float(scores.mean()), 1.96 * se, n))
    out.sort(key=lambda s: (-s.mean, s.system_id))
    return out


def format_mushra_table(summaries: Sequence[SystemSummary]) -> str:
    """Aligned plain-text table, one 'mean +- half-width' row per system."""
    width = max([len("System"), *(len(s.system_id) for s in summaries)])
    lines = [f"{'System'.ljust(width)}  Score"]
    for s in summaries:
        lines.append(f"{s.system_id.ljust(width)}  {s.mean:.2f} ± {s.ci_halfwidth:.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Paired t-test (continued-fraction incomplete beta) and Holm correction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    pvalue: float
    dof: int
    n: int
    degenerate: bool = False  # zero-variance, nonzero-mean differences


def _betacf(a: float, b: float, x: float, max_iter: int = 300) -> float:
    """Continued fraction for the incomplete beta function (Lentz's method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise NumericalError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: int) -> float:
    """P(|T_dof| >= |t|) via the incomplete-beta survival identity."""
    if dof < 1:
        raise DataError("t-distribution needs dof >= 1")
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return regularized_incomplete_beta(dof / 2.0, 0.5, x)


def paired_ttest(x, y) -> TTestResult:
    """Two-sided paired Student t-test on aligned rating sequences.

    All-zero differences give p = 1.0; zero-variance nonzero differences
    give p = 0.0 and are flagged degenerate.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("paired t-test needs two equal-length rating vectors")
    n = len(x)
    if n < 2:
        raise DataError("paired t-test needs at least 2 complete pairs")
    d = x - y
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    dof = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, dof, n)
        return TTestResult(math.copysign(math.inf, mean), 0.0, dof, n, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, student_t_two_sided_p(t, dof), dof, n)


def paired_ratings(
    records: Sequence[MushraRecord], system_a: str, system_b: str
) -> tuple[np.ndarray, np.ndarray]:
    """Ratings of two systems aligned on (listener, utterance); pairs missing
    on either side are dropped symmetrically."""
    a_scores = {
        (r.listener_id, r.utterance_id): r.score
        for r in records
        if r.system_id == system_a
    }
    b_scores = {
        (r.listener_id, r.utterance_id): r.score
        for r in records
        if r.system_id == system_b
    }
    keys = sorted(set(a_scores) & set(b_scores))
    return (
        np.array([a_scores[k] for k in keys]),
        np.array([b_scores[k] for k in keys]),
    )


def holm_bonferroni(pvalues: Sequence[float], alpha: float = 0.05) -> list[bool]:
    """Step-down Holm correction; returns reject flags in input order."""
    p = np.asarray(pvalues, dtype=np.float64)
    if p.size == 0:
        return []
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise DataError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    reject = [False] * m
    for rank, idx in enumerate(order):
        if p[idx] <= alpha / (m - rank):
            reject[idx] = True
        else:
            break
    return reject
