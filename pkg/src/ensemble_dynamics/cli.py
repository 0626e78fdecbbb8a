"""Command line front end: extract, loudness, evaluate, synth.

Exit codes: 0 success, 1 input or validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from . import __version__
from .evaluation import CorpusPiece, ExperimentConfig, run_experiment, write_report
from .fusion import (ConfigurationError, ContractError, read_piece_matrix, score_to_piece_matrix,
                     write_piece_matrix)
from .io import atomic_write_text, format_loudness_csv, read_alignment_csv, read_loudness_csv
from .models import LinearSolveError, TrainConfig, TrainingDivergence
from .score import ScoreError, load_score
from .synth import KINDS, write_score_corpus
from .targets import (Alignment, AudioFormatError, CoverageError, DegenerateTargetError,
                      LoudnessCurve, r128_loudness, read_wav, sample_targets, standardize)

LOGGER = logging.getLogger("ensemble_dynamics")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2
INPUT_ERRORS = (ScoreError, ContractError, ConfigurationError, AudioFormatError, CoverageError,
                DegenerateTargetError, OSError, ValueError, KeyError)
NUMERIC_ERRORS = (TrainingDivergence, LinearSolveError, FloatingPointError)


class ManifestError(ValueError):
    def __init__(self, problems):
        self.problems = problems
        super().__init__("manifest validation failed:\n" + "\n".join(f"  - {p}" for p in problems))


@dataclass
class ManifestPiece:
    piece_id: str
    score: Path
    alignment: Path
    loudness: Path = None
    audio: Path = None
    tags: dict = field(default_factory=dict)


def load_manifest(path):
    """Read and validate a corpus manifest; all problems are reported together."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError([f"{path}: {exc}"]) from exc
    base = path.parent
    problems = []
    pieces = []
    seen = set()
    for i, entry in enumerate(doc.get("pieces", [])):
        pid = entry.get("id")
        where = f"piece {pid or i}"
        if not pid:
            problems.append(f"entry {i}: missing id")
            continue
        if pid in seen:
            problems.append(f"{where}: duplicate id")
        seen.add(pid)

        def resolve(key, required=True):
            val = entry.get(key)
            if val is None:
                if required:
                    problems.append(f"{where}: missing {key}")
                return None
            p = (base / val) if not os.path.isabs(val) else Path(val)
            if not p.is_file():
                problems.append(f"{where}: {key} file not found: {p}")
            return p

        score = resolve("score")
        alignment = resolve("alignment")
        loudness = resolve("loudness", required=False)
        audio = resolve("audio", required=False)
        if loudness is None and audio is None:
            problems.append(f"{where}: needs a loudness or an audio file")
        pieces.append(ManifestPiece(pid, score, alignment, loudness, audio, entry.get("tags", {})))
    if not pieces and not problems:
        problems.append("manifest lists no pieces")
    if problems:
        raise ManifestError(problems)
    return pieces


def _policy_overrides(text):
    if not text:
        return None
    if os.path.isfile(text):
        text = Path(text).read_text()
    overrides = json.loads(text)
    if not isinstance(overrides, dict):
        raise ConfigurationError("policy overrides must be a JSON object")
    return overrides


def _extract_cached(score_path, cache_dir, policies):
    data = Path(score_path).read_bytes()
    key = hashlib.sha256(data + json.dumps(policies, sort_keys=True).encode()).hexdigest()[:32]
    prefix = Path(cache_dir) / key
    if prefix.with_name(key + ".json").is_file() and prefix.with_name(key + ".triplets").is_file():
        return read_piece_matrix(prefix)
    pm = score_to_piece_matrix(load_score(score_path, Path(score_path).stem), policies)
    write_piece_matrix(pm, prefix)
    return read_piece_matrix(prefix)


def _loudness_curve(piece: ManifestPiece):
    if piece.loudness is not None:
        times, lufs = read_loudness_csv(piece.loudness)
        return LoudnessCurve.from_samples(times, lufs)
    samples, rate = read_wav(piece.audio)
    return r128_loudness(samples, rate)


# ---------------------------------------------------------------------------


def cmd_extract(args):
    policies = _policy_overrides(args.policy_overrides)
    score = load_score(args.score, args.piece_id)
    pm = score_to_piece_matrix(score, policies, unfold=not args.no_unfold)
    out = Path(args.out)
    trip, side = write_piece_matrix(pm, out)
    print(f"{pm.piece_id}: {pm.shape[0]} onsets x {pm.shape[1]} basis functions -> {trip}, {side}")
    return EXIT_OK


def cmd_loudness(args):
    samples, rate = read_wav(args.wav)
    curve = r128_loudness(samples, rate)
    atomic_write_text(args.out, format_loudness_csv(curve.times, curve.lufs))
    print(f"{len(curve.times)} momentary loudness values -> {args.out}")
    return EXIT_OK


_VARIANT_FLAGS = {"lin": ["lin"], "ff": ["ff"], "rnn": ["rnn"], "all": ["rnn", "ff", "lin"]}


def _train_config(args):
    base = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        base = doc.get("train", doc)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(base) - known - {"seed", "jobs", "delta_beats", "variant", "policy_overrides"}
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    cfg = {k: v for k, v in base.items() if k in known}
    if args.hidden is not None:
        cfg["hidden"] = args.hidden
    if args.validation_pieces is not None:
        cfg["validation_pieces"] = args.validation_pieces
    return TrainConfig(**cfg), base


def cmd_evaluate(args):
    pieces = load_manifest(args.manifest)
    train_cfg, base = _train_config(args)
    seed = args.seed if args.seed is not None else int(base.get("seed", 0))
    delta = Fraction(args.delta_beats if args.delta_beats is not None
                     else base.get("delta_beats", "1/10")).limit_denominator(10**6)
    policies = _policy_overrides(args.policy_overrides or base.get("policy_overrides"))
    variant = args.variant or base.get("variant", "all")
    out = Path(args.out)
    cache = out / "cache"

    corpus = []
    for mp in pieces:
        try:
            pm = _extract_cached(mp.score, cache, policies)
            pm.piece_id = mp.piece_id
            align = Alignment.from_pairs(read_alignment_csv(mp.alignment))
            raw = sample_targets(align, _loudness_curve(mp), pm.onsets, delta)
            corpus.append(CorpusPiece(mp.piece_id, pm, standardize(raw)))
        except INPUT_ERRORS as exc:
            raise ManifestError([f"piece {mp.piece_id}: {type(exc).__name__}: {exc}"]) from exc

    config = ExperimentConfig(train=train_cfg, seed=seed, jobs=args.jobs)
    result = run_experiment(corpus, _VARIANT_FLAGS[variant], config)
    echo = {"version": __version__, "manifest": str(Path(args.manifest).name), "seed": seed,
            "variant": variant, "delta_beats": str(delta), "jobs_independent": True,
            "policy_overrides": policies, "train": asdict(train_cfg)}
    header = "config: " + json.dumps(echo, sort_keys=True) + "\n\n"
    atomic_write_text(out / "config.json", json.dumps(echo, indent=2, sort_keys=True) + "\n")
    written = write_report(result, out, header=header, raw=args.raw_metrics)
    sys.stdout.write(header + (out / "report.txt").read_text().split("\n\n", 1)[-1])
    LOGGER.info("wrote %d curve files to %s", len(written), out / "curves")
    failed = [r for r in result.reports if not r.ok]
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_synth(args):
    manifest = write_score_corpus(args.out, args.kind, args.pieces, args.seed, args.measures,
                                  args.noise)
    print(f"wrote {args.pieces} {args.kind} pieces -> {manifest}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="ensemble-dynamics", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="score -> piece basis matrix")
    p.add_argument("score")
    p.add_argument("out", help="output prefix; writes <out>.triplets and <out>.json")
    p.add_argument("--piece-id")
    p.add_argument("--policy-overrides", help="JSON object (or file) mapping label/group to max|mean|sum")
    p.add_argument("--no-unfold", action="store_true", help="keep repeats folded")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("loudness", help="WAV -> momentary loudness CSV")
    p.add_argument("wav")
    p.add_argument("out")
    p.set_defaults(func=cmd_loudness)

    p = sub.add_parser("evaluate", help="leave-one-out evaluation of a corpus")
    p.add_argument("manifest")
    p.add_argument("--out", default=os.environ.get("ENSEMBLE_DYNAMICS_OUT", "results"))
    p.add_argument("--config", help="JSON file with training settings")
    p.add_argument("--variant", choices=sorted(_VARIANT_FLAGS))
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--delta-beats", help="sampling offset after each onset, in beats (default 1/10)")
    p.add_argument("--validation-pieces", type=int)
    p.add_argument("--policy-overrides")
    p.add_argument("--raw-metrics", action="store_true", help="also report MSE in raw LU")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a synthetic corpus with a known generator")
    p.add_argument("out")
    p.add_argument("--kind", choices=KINDS, default="linear")
    p.add_argument("--pieces", type=int, default=6)
    p.add_argument("--measures", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
