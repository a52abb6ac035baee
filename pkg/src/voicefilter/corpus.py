"""Frame-matched synthetic parallel corpus construction.

Alignments arrive as text files ("utt_id speaker_id phone start end" per
line, frame units). A duration-exact synthesizer renders the source side;
the natural recording supplies the target mel and its f0 contour. Source
and target frame counts are forced equal (trailing +-1 frame tolerance).
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol

import numpy as np

from voicefilter.config import AnalysisConfig, PitchConfig
from voicefilter.dsp import (
    MelSpectrogram,
    Waveform,
    load_mel,
    mel_spectrogram,
    save_mel,
)
from voicefilter.errors import DataError
from voicefilter.pitch import F0Contour, LogF0, estimate_f0, load_f0_csv, log_f0, save_f0_csv

log = logging.getLogger(__name__)

MANIFEST_NAME = "corpus.json"
MANIFEST_SCHEMA = 1


@dataclass(frozen=True)
class PhoneSegment:
    phone: str
    start: int
    end: int

    @property
    def frames(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class PhoneAlignment:
    utterance_id: str
    speaker_id: str
    segments: tuple[PhoneSegment, ...]

    @property
    def total_frames(self) -> int:
        return self.segments[-1].end if self.segments else 0

    @property
    def phones(self) -> tuple[str, ...]:
        return tuple(s.phone for s in self.segments)


@dataclass
class ParallelUtterancePair:
    """Frame-count-equal (synthetic source, natural target, target log-f0)."""

    utterance_id: str
    speaker_id: str
    source_mel: MelSpectrogram
    target_mel: MelSpectrogram
    target_logf0: LogF0

    def __post_init__(self) -> None:
        t = self.source_mel.num_frames
        if self.target_mel.num_frames != t or len(self.target_logf0) != t:
            raise DataError(
                f"pair {self.utterance_id}: source/target/f0 frame counts differ "
                f"({t}, {self.target_mel.num_frames}, {len(self.target_logf0)})"
            )

    @property
    def num_frames(self) -> int:
        return self.source_mel.num_frames


class Synthesizer(Protocol):
    """Renders a mel spectrogram with exactly the alignment's frame count."""

    def synthesize(self, alignment: PhoneAlignment) -> MelSpectrogram: ...


# ---------------------------------------------------------------------------
# Alignment parsing
# ---------------------------------------------------------------------------


def parse_alignment_file(path: str | Path) -> list[PhoneAlignment]:
    """Parse a whitespace-delimited alignment file, one utterance per
    contiguous block of lines sharing an utterance id."""
    groups: dict[str, list[tuple[int, str, PhoneSegment]]] = {}
    order: list[str] = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read alignment file {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if len(fields) != 5:
            raise DataError(
                f"{path}:{lineno}: expected 'utt_id speaker_id phone start end', "
                f"got {len(fields)} fields"
            )
        utt, speaker, phone, start_s, end_s = fields
        try:
            start, end = int(start_s), int(end_s)
        except ValueError:
            raise DataError(f"{path}:{lineno}: frame indices must be integers") from None
        if start < 0 or end <= start:
            raise DataError(
                f"{path}:{lineno}: segment must satisfy 0 <= start < end "
                f"(got {start}, {end})"
            )
        if utt not in groups:
            groups[utt] = []
            order.append(utt)
        groups[utt].append((lineno, speaker, PhoneSegment(phone, start, end)))

    alignments = []
    for utt in order:
        rows = groups[utt]
        speakers = {spk for _, spk, _ in rows}
        if len(speakers) > 1:
            raise DataError(
                f"{path}: utterance {utt} has conflicting speaker ids {sorted(speakers)}"
            )
        first_lineno, speaker, first_seg = rows[0]
        if first_seg.start != 0:
            raise DataError(f"{path}:{first_lineno}: first segment must start at frame 0")
        for (prev_lineno, _, prev), (lineno, _, seg) in zip(rows, rows[1:]):
            if seg.start < prev.end:
                raise DataError(
                    f"{path}:{lineno}: segment overlaps previous (starts at "
                    f"{seg.start}, previous ends at {prev.end})"
                )
            if seg.start > prev.end:
                raise DataError(
                    f"{path}:{lineno}: gap before segment (starts at {seg.start}, "
                    f"previous ends at {prev.end})"
                )
        alignments.append(
            PhoneAlignment(utt, speaker, tuple(seg for _, _, seg in rows))
        )
    if not alignments:
        raise DataError(f"{path}: no alignment entries found")
    return alignments


def parse_alignment(path: str | Path) -> PhoneAlignment:
    """Parse a file expected to contain exactly one utterance."""
    alignments = parse_alignment_file(path)
    if len(alignments) != 1:
        raise DataError(
            f"{path}: expected a single utterance, found {len(alignments)}"
        )
    return alignments[0]


# ---------------------------------------------------------------------------
# Toy synthesizer: deterministic per-phone spectral templates
# ---------------------------------------------------------------------------


def _phone_template(phone: str, seed: int, bins: int) -> np.ndarray:
    """Fixed log-mel profile for a phone: seeded hash noise, smoothed."""
    digest = hashlib.sha256(f"{seed}:{phone}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    raw = rng.normal(size=bins + 8)
    kernel = np.hanning(9)
    smooth = np.convolve(raw, kernel / kernel.sum(), mode="valid")[:bins]
    smooth = (smooth - smooth.mean()) / max(smooth.std(), 1e-8)
    return (smooth * 1.2 - 2.5).astype(np.float32)


class ToySynthesizer:
    """Duration-exact stand-in for a duration-controllable TTS voice.

    Each phone maps to a fixed 80-bin profile derived from a seeded hash of
    its symbol; consecutive phones are joined by a linear 2-frame cross-fade.
    """

    def __init__(
        self,
        cfg: AnalysisConfig | None = None,
        seed: int = 0,
        sample_rate: int = 16000,
    ) -> None:
        self.cfg = cfg or AnalysisConfig()
        self.seed = seed
        self.sample_rate = sample_rate
        self._templates: dict[str, np.ndarray] = {}

    def template(self, phone: str) -> np.ndarray:
        if phone not in self._templates:
            self._templates[phone] = _phone_template(phone, self.seed, self.cfg.mel_bins)
        return self._templates[phone]

    def synthesize(self, alignment: PhoneAlignment) -> MelSpectrogram:
        if not alignment.segments:
            raise DataError(f"empty alignment for {alignment.utterance_id}")
        total = alignment.total_frames
        frames = np.empty((total, self.cfg.mel_bins), dtype=np.float32)
        for seg in alignment.segments:
            frames[seg.start : seg.end] = self.template(seg.phone)
        # Linear 2-frame cross-fade across each phone boundary.
        for prev, seg in zip(alignment.segments, alignment.segments[1:]):
            a, b = self.template(prev.phone), self.template(seg.phone)
            boundary = seg.start
            if boundary - 1 >= prev.start:
                frames[boundary - 1] = (2 * a + b) / 3
            if boundary < seg.end:
                frames[boundary] = (a + 2 * b) / 3
        return MelSpectrogram(frames, self.cfg.hop_length, self.sample_rate)


# ---------------------------------------------------------------------------
# Corpus building
# ---------------------------------------------------------------------------


@dataclass
class SkippedUtterance:
    utterance_id: str
    reason: str


@dataclass
class CorpusBuildReport:
    pairs: int = 0
    trims: dict[str, int] = field(default_factory=dict)  # utt -> trimmed/padded frames
    skipped: list[SkippedUtterance] = field(default_factory=list)


def _match_frames(
    utt_id: str, mel: MelSpectrogram, contour: F0Contour, want: int
) -> tuple[MelSpectrogram, F0Contour, int]:
    """Trim or edge-pad the trailing frame so counts match the alignment."""
    have = mel.num_frames
    if have == want:
        return mel, contour, 0
    if have == want + 1:
        trimmed = MelSpectrogram(mel.frames[:want], mel.hop_length, mel.sample_rate)
        cut = F0Contour(contour.f0_hz[:want], contour.voiced[:want])
        return trimmed, cut, -1
    if have == want - 1:
        frames = np.vstack([mel.frames, mel.frames[-1:]])
        padded = MelSpectrogram(frames, mel.hop_length, mel.sample_rate)
        f0 = np.append(contour.f0_hz, contour.f0_hz[-1])
        voiced = np.append(contour.voiced, contour.voiced[-1])
        return padded, F0Contour(f0, voiced), 1
    raise DataError(
        f"{utt_id}: natural mel has {have} frames but alignment totals {want} "
        "(difference exceeds 1 frame)"
    )


def build_pair(
    alignment: PhoneAlignment,
    synth: Synthesizer,
    natural: Waveform,
    cfg: AnalysisConfig,
    pitch_cfg: PitchConfig | None = None,
) -> tuple[ParallelUtterancePair, int]:
    """Build one frame-matched pair; returns (pair, trailing trim/pad)."""
    pitch_cfg = pitch_cfg or PitchConfig()
    source = synth.synthesize(alignment)
    if source.num_frames != alignment.total_frames:
        raise DataError(
            f"{alignment.utterance_id}: synthesizer broke the duration contract "
            f"({source.num_frames} != {alignment.total_frames})"
        )
    target = mel_spectrogram(natural, cfg)
    contour = estimate_f0(
        natural, pitch_cfg.f0_min, pitch_cfg.f0_max, cfg.hop_length, pitch_cfg
    )
    target, contour, trim = _match_frames(
        alignment.utterance_id, target, contour, alignment.total_frames
    )
    pair = ParallelUtterancePair(
        alignment.utterance_id,
        alignment.speaker_id,
        source,
        target,
        log_f0(contour),
    )
    return pair, trim


def build_parallel_corpus(
    alignments: Iterable[PhoneAlignment],
    synth: Synthesizer,
    natural_audio: Mapping[str, Waveform] | Callable[[str], Waveform],
    cfg: AnalysisConfig,
    pitch_cfg: PitchConfig | None = None,
    strict: bool = False,
    threads: int = 1,
) -> tuple[list[ParallelUtterancePair], CorpusBuildReport]:
    """Build all pairs, skipping (or failing, when strict) bad utterances.

    Results are ordered by utterance id regardless of thread count.
    """
    alignments = sorted(alignments, key=lambda a: a.utterance_id)
    ids = [a.utterance_id for a in alignments]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate utterance ids in alignment set")
    lookup = natural_audio if callable(natural_audio) else natural_audio.__getitem__
    report = CorpusBuildReport()
    pairs: list[ParallelUtterancePair] = []

    def build_one(alignment: PhoneAlignment):
        try:
            audio = lookup(alignment.utterance_id)
        except KeyError:
            raise DataError(
                f"missing natural audio for utterance {alignment.utterance_id}"
            ) from None
        return build_pair(alignment, synth, audio, cfg, pitch_cfg)

    def run(alignment: PhoneAlignment):
        try:
            return alignment.utterance_id, build_one(alignment), None
        except DataError as exc:
            return alignment.utterance_id, None, str(exc)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, alignments))
    else:
        results = [run(a) for a in alignments]

    for utt_id, built, error in results:
        if error is not None:
            if strict:
                raise DataError(error)
            log.warning("skipping %s: %s", utt_id, error)
            report.skipped.append(SkippedUtterance(utt_id, error))
            continue
        pair, trim = built
        if trim != 0:
            log.info("trimmed %s by %+d trailing frame", utt_id, trim)
            report.trims[utt_id] = trim
        pairs.append(pair)
    report.pairs = len(pairs)
    return pairs, report


# ---------------------------------------------------------------------------
# On-disk corpus layout: per-utterance blobs + a manifest
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def write_corpus(
    pairs: list[ParallelUtterancePair],
    out_dir: str | Path,
    cfg: AnalysisConfig,
    report: CorpusBuildReport | None = None,
    seed: int | None = None,
) -> Path:
    """Write pair blobs and the manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for pair in sorted(pairs, key=lambda p: p.utterance_id):
        stem = pair.utterance_id
        src_path = out / f"{stem}.source.mel"
        tgt_path = out / f"{stem}.target.mel"
        f0_path = out / f"{stem}.f0.csv"
        save_mel(pair.source_mel, src_path, cfg)
        save_mel(pair.target_mel, tgt_path, cfg)
        voiced = pair.target_logf0.voiced
        f0_hz = np.where(voiced, np.exp(pair.target_logf0.values), 0.0)
        save_f0_csv(F0Contour(f0_hz, voiced), f0_path)
        entries.append(
            {
                "utterance_id": pair.utterance_id,
                "speaker_id": pair.speaker_id,
                "frames": pair.num_frames,
                "files": {
                    "source_mel": src_path.name,
                    "target_mel": tgt_path.name,
                    "f0": f0_path.name,
                },
                "hashes": {
                    "source_mel": _sha256(src_path),
                    "target_mel": _sha256(tgt_path),
                    "f0": _sha256(f0_path),
                },
            }
        )
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "utterances": entries,
        "speakers": sorted({p.speaker_id for p in pairs}),
        "total_frames": int(sum(p.num_frames for p in pairs)),
        "trims": dict(sorted((report.trims if report else {}).items())),
        "skipped": [
            {"utterance_id": s.utterance_id, "reason": s.reason}
            for s in (report.skipped if report else [])
        ],
        "analysis": {
            "fft_size": cfg.fft_size,
            "window_size": cfg.window_size,
            "hop_length": cfg.hop_length,
            "mel_bins": cfg.mel_bins,
            "fmin": cfg.fmin,
            "fmax": cfg.fmax,
            "log_floor": cfg.log_floor,
        },
    }
    if seed is not None:
        manifest["seed"] = seed
    path = out / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_corpus(corpus_dir: str | Path) -> list[ParallelUtterancePair]:
    """Load and validate all pairs listed in a corpus manifest."""
    root = Path(corpus_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"no corpus manifest at {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != MANIFEST_SCHEMA:
        raise DataError(
            f"unsupported corpus manifest schema {manifest.get('schema_version')}"
        )
    pairs = []
    for entry in manifest["utterances"]:
        files = entry["files"]
        source = load_mel(root / files["source_mel"])
        target = load_mel(root / files["target_mel"])
        contour = load_f0_csv(root / files["f0"])
        pairs.append(
            ParallelUtterancePair(
                entry["utterance_id"],
                entry["speaker_id"],
                source,
                target,
                log_f0(contour),
            )
        )
    return pairs
