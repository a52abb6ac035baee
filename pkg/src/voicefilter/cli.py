"""Command-line entry point.

One executable, subcommand per pipeline stage. A JSON config file (via
``--config`` or the ``VF_CONFIG`` environment variable) sets defaults;
explicit flags win. Results go to stdout (``--json`` for the machine
schema), logs to stderr. Exit codes: 0 success, 1 usage, 2 bad data or
validation, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from voicefilter import corpus as corpus_mod
from voicefilter import evaluation as ev
from voicefilter import inference as inf
from voicefilter import trainer
from voicefilter.checkpoint import KIND_VF_FINETUNED
from voicefilter.config import PipelineConfig, TrainConfig, load_config
from voicefilter.dsp import load_mel, save_mel, save_wav
from voicefilter.errors import DataError, NumericalError
from voicefilter.pitch import F0Contour, f0_stats, save_f0_csv

log = logging.getLogger("vf")

RESULT_SCHEMA = 1

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(args, command: str, result: dict, pretty_lines: list[str]) -> None:
    if args.json:
        envelope = {"schema_version": RESULT_SCHEMA, "command": command, "ok": True}
        envelope.update(result)
        print(json.dumps(envelope, sort_keys=True))
    else:
        for line in pretty_lines:
            print(line)


def _load_pipeline_config(args) -> PipelineConfig:
    import os

    path = args.config or os.environ.get("VF_CONFIG")
    cfg = load_config(path) if path else PipelineConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.threads is not None:
        cfg = dataclasses.replace(cfg, threads=args.threads)
    return cfg


def _train_cfg(cfg: PipelineConfig, args, steps_attr: str = "steps") -> TrainConfig:
    updates = {"seed": cfg.seed}
    if getattr(args, "steps", None) is not None:
        updates[steps_attr] = args.steps
    if getattr(args, "batch_size", None) is not None:
        updates["batch_size"] = args.batch_size
    if getattr(args, "learning_rate", None) is not None:
        updates["learning_rate"] = args.learning_rate
    return dataclasses.replace(cfg.train, **updates)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _mels_by_speaker(path: Path) -> dict[str, list]:
    """Load evaluation inputs: a corpus directory (target mels grouped by
    speaker), a flat directory of .mel blobs, or a glob pattern over blobs;
    the latter two form one anonymous group."""
    if path.is_dir():
        if (path / corpus_mod.MANIFEST_NAME).exists():
            groups: dict[str, list] = {}
            for pair in corpus_mod.load_corpus(path):
                groups.setdefault(pair.speaker_id, []).append(pair.target_mel)
            return groups
        blobs = sorted(path.glob("*.mel"))
    elif any(ch in str(path) for ch in "*?["):
        blobs = sorted(path.parent.glob(path.name))
    else:
        raise DataError(f"{path} is neither a directory nor a glob pattern")
    if not blobs:
        raise DataError(f"no corpus manifest or .mel files under {path}")
    return {"_all": [load_mel(b) for b in blobs]}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_build_corpus(args) -> int:
    cfg = _load_pipeline_config(args)
    alignments = corpus_mod.parse_alignment_file(_require(args.align, "alignment file"))
    audio_dir = _require(args.audio, "audio directory")

    from voicefilter.dsp import load_wav

    def lookup(utt_id: str):
        wav_path = audio_dir / f"{utt_id}.wav"
        if not wav_path.exists():
            raise KeyError(utt_id)
        return load_wav(wav_path)

    synth = corpus_mod.ToySynthesizer(cfg.analysis, seed=cfg.seed)
    pairs, report = corpus_mod.build_parallel_corpus(
        alignments,
        synth,
        lookup,
        cfg.analysis,
        cfg.pitch,
        strict=args.strict,
        threads=cfg.threads,
    )
    manifest = corpus_mod.write_corpus(pairs, args.out, cfg.analysis, report, cfg.seed)
    result = {
        "pairs": report.pairs,
        "skipped": len(report.skipped),
        "trims": len(report.trims),
        "manifest": str(manifest),
    }
    _emit(args, "build-corpus", result, [
        f"built {report.pairs} pairs ({len(report.skipped)} skipped, "
        f"{len(report.trims)} trimmed) -> {manifest}"
    ])
    return EXIT_OK


def cmd_train_embedder(args) -> int:
    cfg = _load_pipeline_config(args)
    pairs = corpus_mod.load_corpus(_require(args.corpus, "corpus directory"))
    tcfg = _train_cfg(cfg, args)
    from voicefilter.embedder import train_embedder

    model, losses = train_embedder(pairs, cfg.embedder, tcfg)
    trainer.save_embedder_checkpoint(args.out, model)
    result = {
        "steps": len(losses),
        "final_loss": trainer.running_mean(losses),
        "checkpoint": str(args.out),
    }
    _emit(args, "train-embedder", result, [
        f"trained embedder for {len(losses)} steps "
        f"(running loss {result['final_loss']:.4f}) -> {args.out}"
    ])
    return EXIT_OK


def cmd_train_vf(args) -> int:
    cfg = _load_pipeline_config(args)
    pairs = corpus_mod.load_corpus(_require(args.corpus, "corpus directory"))
    embedder = trainer.load_embedder_checkpoint(_require(args.embedder, "embedder"))
    tcfg = _train_cfg(cfg, args)
    model_cfg = dataclasses.replace(cfg.model, embed_dim=embedder.cfg.embed_dim)
    model, losses = trainer.train_background(pairs, embedder, model_cfg, tcfg)
    trainer.save_vf_checkpoint(args.out, model, train_cfg=tcfg)
    result = {
        "steps": len(losses),
        "initial_loss": float(np.mean(losses[:100])),
        "final_loss": trainer.running_mean(losses),
        "checkpoint": str(args.out),
    }
    _emit(args, "train-vf", result, [
        f"background model: {len(losses)} steps, running loss "
        f"{result['initial_loss']:.4f} -> {result['final_loss']:.4f}, saved {args.out}"
    ])
    return EXIT_OK


def _profile_stats(target_pairs, source_pairs, cfg: PipelineConfig):
    contours = [
        F0Contour(
            np.where(p.target_logf0.voiced, np.exp(p.target_logf0.values), 0.0),
            p.target_logf0.voiced,
        )
        for p in target_pairs
    ]
    tgt_stats = f0_stats(contours)
    src_stats = inf.source_f0_stats(
        [p.source_mel for p in source_pairs], cfg.analysis, cfg.pitch
    )
    return tgt_stats, src_stats


def _build_profile(model, target_pairs, source_pairs, embedder, cfg, out_dir) -> Path:
    from voicefilter.embedder import centroid

    spk_centroid = centroid(
        np.stack([embedder.embed(p.target_mel) for p in target_pairs])
    )
    tgt_stats, src_stats = _profile_stats(target_pairs, source_pairs, cfg)
    profile = inf.TargetVoiceProfile(
        model=model,
        embedding=spk_centroid,
        target_f0=tgt_stats,
        source_f0=src_stats,
        analysis=cfg.analysis,
        pitch=cfg.pitch,
    )
    return inf.save_profile(out_dir, profile)


def cmd_finetune(args) -> int:
    cfg = _load_pipeline_config(args)
    background, _, _ = trainer.load_vf_checkpoint(
        _require(args.background, "background checkpoint")
    )
    target_pairs = corpus_mod.load_corpus(_require(args.target_dir, "target corpus"))
    embedder = trainer.load_embedder_checkpoint(_require(args.embedder, "embedder"))
    tcfg = _train_cfg(cfg, args, steps_attr="finetune_steps")
    model, losses, _ = trainer.finetune(background, target_pairs, embedder, tcfg)
    source_pairs = (
        corpus_mod.load_corpus(_require(args.source_corpus, "source corpus"))
        if args.source_corpus
        else target_pairs
    )
    _build_profile(model, target_pairs, source_pairs, embedder, cfg, args.out)
    result = {
        "finetune_steps": len(losses),
        "final_loss": trainer.running_mean(losses) if losses else None,
        "profile": str(args.out),
    }
    pretty = (
        f"fine-tuned {len(losses)} steps "
        + (f"(running loss {result['final_loss']:.4f}) " if losses else "")
        + f"-> profile {args.out}"
    )
    _emit(args, "finetune", result, [pretty])
    return EXIT_OK


def cmd_make_profile(args) -> int:
    cfg = _load_pipeline_config(args)
    model, kind, _ = trainer.load_vf_checkpoint(_require(args.model, "model checkpoint"))
    if kind != KIND_VF_FINETUNED:
        raise DataError("make-profile expects a fine-tuned (speaker-dependent) model")
    target_pairs = corpus_mod.load_corpus(_require(args.target_dir, "target corpus"))
    embedder = trainer.load_embedder_checkpoint(_require(args.embedder, "embedder"))
    source_pairs = (
        corpus_mod.load_corpus(_require(args.source_corpus, "source corpus"))
        if args.source_corpus
        else target_pairs
    )
    path = _build_profile(model, target_pairs, source_pairs, embedder, cfg, args.out)
    _emit(args, "make-profile", {"profile": str(args.out)}, [f"profile -> {path}"])
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _load_pipeline_config(args)
    alignments = corpus_mod.parse_alignment_file(_require(args.align, "alignment file"))
    profile = inf.load_profile(_require(args.profile, "profile directory"))
    synth = corpus_mod.ToySynthesizer(profile.analysis, seed=cfg.seed)
    out = Path(args.out)
    multi = len(alignments) > 1
    if multi:
        out.mkdir(parents=True, exist_ok=True)
    written = []
    for alignment in alignments:
        wav, source, converted = inf.infer(alignment, synth, profile, iters=args.iters)
        wav_path = out / f"{alignment.utterance_id}.wav" if multi else out
        wav_path.parent.mkdir(parents=True, exist_ok=True)
        save_wav(wav, wav_path)
        written.append(str(wav_path))
        if args.debug_dump:
            stem = wav_path.parent / alignment.utterance_id
            save_mel(source, f"{stem}.source.mel", profile.analysis)
            save_mel(converted, f"{stem}.converted.mel", profile.analysis)
            contour = inf.source_f0_from_mel(source, profile.analysis, profile.pitch)
            save_f0_csv(contour, f"{stem}.source_f0.csv")
    _emit(args, "infer", {"outputs": written}, [f"wrote {p}" for p in written])
    return EXIT_OK


def cmd_eval_csed(args) -> int:
    embedder = trainer.load_embedder_checkpoint(_require(args.embedder, "embedder"))
    ref_groups = _mels_by_speaker(args.ref)
    synth_groups = _mels_by_speaker(args.synth)
    ref_embs = np.stack(
        [embedder.embed(m) for key in sorted(ref_groups) for m in ref_groups[key]]
    )
    synth_embs = np.stack(
        [embedder.embed(m) for key in sorted(synth_groups) for m in synth_groups[key]]
    )
    value = ev.csed(synth_embs, ref_embs)
    _emit(args, "eval-csed", {"csed": value}, [f"CSED: {value:.4f}"])
    return EXIT_OK


def cmd_eval_cfsd(args) -> int:
    cfg = _load_pipeline_config(args)
    embedder = trainer.load_embedder_checkpoint(_require(args.embedder, "embedder"))
    ref_groups = _mels_by_speaker(_require(args.ref, "reference directory"))
    synth_groups = _mels_by_speaker(_require(args.synth, "synthesis directory"))
    pooled = args.pooled or cfg.eval.pooled
    value = ev.cfsd(
        ref_groups,
        synth_groups,
        ev.frame_activation_extractor(embedder),
        shrinkage=cfg.eval.shrinkage,
        pooled=pooled,
    )
    _emit(args, "eval-cfsd", {"cfsd": value, "pooled": pooled}, [f"cFSD: {value:.4f}"])
    return EXIT_OK


def cmd_eval_mushra(args) -> int:
    cfg = _load_pipeline_config(args)
    alpha = args.alpha if args.alpha is not None else cfg.eval.alpha
    records = ev.load_mushra_csv(_require(args.scores, "MUSHRA CSV"))
    summaries = ev.mushra_summary(records)
    systems = [s.system_id for s in summaries]
    comparisons = []
    for i in range(len(systems)):
        for j in range(i + 1, len(systems)):
            x, y = ev.paired_ratings(records, systems[i], systems[j])
            if len(x) < 2:
                continue
            res = ev.paired_ttest(x, y)
            comparisons.append(
                {"a": systems[i], "b": systems[j], "t": res.statistic, "p": res.pvalue}
            )
    flags = ev.holm_bonferroni([c["p"] for c in comparisons], alpha) if comparisons else []
    for c, rejected in zip(comparisons, flags):
        c["significant"] = bool(rejected)
    result = {
        "systems": [dataclasses.asdict(s) for s in summaries],
        "comparisons": comparisons,
        "alpha": alpha,
    }
    pretty = [ev.format_mushra_table(summaries)]
    if comparisons:
        pretty.append("")
        pretty.append(f"Paired t-tests (Holm-corrected at alpha={alpha}):")
        for c in comparisons:
            mark = "significant" if c["significant"] else "n.s."
            pretty.append(f"  {c['a']} vs {c['b']}: p={c['p']:.4g} [{mark}]")
    _emit(args, "eval-mushra", result, pretty)
    return EXIT_OK


def cmd_verify(args) -> int:
    """Run the built-in invariant suite; any failure exits 3."""
    from voicefilter.verify import run_verification

    report = run_verification(seed=args.seed if args.seed is not None else 0)
    for check in report["checks"]:
        status = "PASS" if check["ok"] else "FAIL"
        line = f"[{status}] {check['name']}: {check['detail']}"
        if not args.json:
            print(line)
    if args.json:
        print(json.dumps({"schema_version": RESULT_SCHEMA, "command": "verify",
                          "ok": report["ok"], "checks": report["checks"]},
                         sort_keys=True))
    if not report["ok"]:
        raise NumericalError("verification suite failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="vf", description=__doc__)
    parser.add_argument("--config", type=Path, help="pipeline config JSON")
    parser.add_argument("--json", action="store_true", help="machine-readable stdout")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-corpus", help="build the frame-matched parallel corpus")
    p.add_argument("--align", type=Path, required=True)
    p.add_argument("--audio", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--strict", action="store_true", help="fail on any bad utterance")
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("train-embedder", help="train the speaker embedder")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.set_defaults(func=cmd_train_embedder)

    p = sub.add_parser("train-vf", help="background one-to-many training")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--embedder", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.set_defaults(func=cmd_train_vf)

    p = sub.add_parser("finetune", help="adapt to one speaker and build a profile")
    p.add_argument("--background", type=Path, required=True)
    p.add_argument("--target-dir", type=Path, required=True)
    p.add_argument("--embedder", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, help="fine-tuning steps")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--source-corpus", type=Path, help="corpus for source f0 stats")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("make-profile", help="assemble a profile from a tuned model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--target-dir", type=Path, required=True)
    p.add_argument("--embedder", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--source-corpus", type=Path)
    p.set_defaults(func=cmd_make_profile)

    p = sub.add_parser("infer", help="alignment + profile -> converted waveform")
    p.add_argument("--align", type=Path, required=True)
    p.add_argument("--profile", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iters", type=int, default=inf.DEFAULT_VOCODER_ITERS)
    p.add_argument("--debug-dump", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval-csed", help="speaker-similarity metric")
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--synth", type=Path, required=True)
    p.add_argument("--embedder", type=Path, required=True)
    p.set_defaults(func=cmd_eval_csed)

    p = sub.add_parser("eval-cfsd", help="signal-quality distribution distance")
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--synth", type=Path, required=True)
    p.add_argument("--embedder", type=Path, required=True)
    p.add_argument("--pooled", action="store_true")
    p.set_defaults(func=cmd_eval_cfsd)

    p = sub.add_parser("eval-mushra", help="listening-test statistics")
    p.add_argument("scores", type=Path)
    p.add_argument("--alpha", type=float, default=None)
    p.set_defaults(func=cmd_eval_mushra)

    p = sub.add_parser("verify", help="run the built-in invariant suite")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        log.error("%s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
