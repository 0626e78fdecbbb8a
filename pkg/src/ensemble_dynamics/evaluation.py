"""Leave-one-out evaluation of the loudness models."""

from __future__ import annotations

import csv
import io
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fusion import ConfigurationError, PieceMatrix, assemble_dataset
from .io import atomic_write_text
from .models import (SHORT_NAMES, LinearSolveError, TrainConfig, TrainingDivergence,
                     predict, train)
from .targets import TargetVector

LOGGER = logging.getLogger(__name__)

# column order of the report: most to least expressive model
REPORT_VARIANTS = ("recurrent", "feedforward", "linear")
VARIANT_TAGS = {"recurrent": "RN", "feedforward": "FF", "linear": "Lin"}
MEASURES = ("mse", "r2", "r")


class UndefinedCorrelationError(ValueError):
    pass


class SplitError(ConfigurationError):
    pass


def _pair(y, y_hat):
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    if len(y) < 2:
        raise ValueError("need at least two values")
    return y, y_hat


def mse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean((y - y_hat) ** 2))


def r2(y, y_hat) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot`` (unbounded below)."""
    y, y_hat = _pair(y, y_hat)
    ss_res = float(np.sum((y - y_hat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise UndefinedCorrelationError("R^2 undefined for constant targets")
    return 1.0 - ss_res / ss_tot


def pearson(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    a = y - y.mean()
    b = y_hat - y_hat.mean()
    den = np.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(np.clip((a @ b) / den, -1.0, 1.0))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSpec:
    test: str
    validation: tuple
    train: tuple


def fold_seed(seed, *names) -> int:
    return zlib.crc32("|".join([str(seed), *names]).encode())


def loo_split(piece_ids, test, n_validation=2, seed=0) -> FoldSpec:
    """Hold out ``test``; draw ``n_validation`` validation pieces from the rest (seeded)."""
    ids = sorted(piece_ids)
    if test not in ids:
        raise SplitError(f"unknown test piece {test!r}")
    if len(ids) < n_validation + 2:
        raise SplitError(f"{len(ids)} pieces cannot provide a test piece, "
                         f"{n_validation} validation pieces and a training piece")
    rest = [p for p in ids if p != test]
    rng = np.random.default_rng(fold_seed(seed, "split", test))
    chosen = sorted(rng.choice(len(rest), size=n_validation, replace=False).tolist())
    validation = tuple(rest[i] for i in chosen)
    train_ids = tuple(p for p in rest if p not in validation)
    return FoldSpec(test, validation, train_ids)


@dataclass
class CorpusPiece:
    piece_id: str
    matrix: PieceMatrix
    targets: TargetVector


@dataclass
class FoldReport:
    piece_id: str
    variant: str
    mse: float = np.nan
    r2: float = np.nan
    r: float = np.nan
    train: tuple = ()
    validation: tuple = ()
    seed: int = 0
    epochs: int = 0
    best_epoch: int = 0
    best_validation_mse: float = np.nan
    mse_raw: float = np.nan
    error: str = ""

    @property
    def ok(self):
        return not self.error


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    jobs: int = 1
    add_const: bool = True


@dataclass
class ExperimentResult:
    reports: list
    variants: list
    piece_ids: list
    curves: dict
    singular: list
    n_rows: int
    n_columns: int

    def report(self, piece_id, variant):
        for rep in self.reports:
            if rep.piece_id == piece_id and rep.variant == variant:
                return rep
        raise KeyError((piece_id, variant))


def _run_fold(task):
    """Train one variant for one held-out piece; failures are recorded, not raised."""
    (variant, spec, seqs, test_X, test_y, target_std, config, seed) = task
    rep = FoldReport(spec.test, variant, train=spec.train, validation=spec.validation, seed=seed)
    try:
        params, trace = train(variant, [seqs[p] for p in spec.train],
                              [seqs[p] for p in spec.validation], config, seed=seed)
        y_hat = predict(params, test_X)
        if not np.all(np.isfinite(y_hat)):
            raise TrainingDivergence("non-finite predictions")
        rep.mse = mse(test_y, y_hat)
        rep.r2 = r2(test_y, y_hat)
        try:
            rep.r = pearson(test_y, y_hat)
        except UndefinedCorrelationError:
            rep.r = np.nan
        rep.mse_raw = rep.mse * target_std ** 2
        rep.epochs = trace[-1].epoch
        vals = [t.validation_mse for t in trace]
        if np.all(np.isnan(vals)):
            rep.best_epoch = 0
        else:
            rep.best_epoch = int(np.nanargmin(vals))
            rep.best_validation_mse = float(np.nanmin(vals))
        return rep, y_hat
    except (TrainingDivergence, LinearSolveError, FloatingPointError, ValueError) as exc:
        LOGGER.warning("fold %s/%s failed: %s", spec.test, variant, exc)
        rep.error = f"{type(exc).__name__}: {exc}"
        return rep, None


def run_experiment(pieces, variants=REPORT_VARIANTS, config: ExperimentConfig = None) -> ExperimentResult:
    """Leave-one-out evaluation of every variant on every piece.

    Each piece is held out in turn; validation pieces are drawn from the
    remaining ones and the rest are used for training.  A failing fold is
    recorded in its :class:`FoldReport` and the other folds still run.
    """
    config = config or ExperimentConfig()
    variants = [SHORT_NAMES[v] for v in variants]
    variants = [v for v in REPORT_VARIANTS if v in variants]
    pieces = sorted(pieces, key=lambda p: p.piece_id)
    ids = [p.piece_id for p in pieces]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate piece ids")
    dataset = assemble_dataset([p.matrix for p in pieces], add_const=config.add_const)
    seqs = {}
    for p in pieces:
        if len(p.targets) != p.matrix.shape[0]:
            raise ValueError(f"piece {p.piece_id}: {len(p.targets)} targets for "
                             f"{p.matrix.shape[0]} matrix rows")
        seqs[p.piece_id] = (dataset.block(p.piece_id), p.targets.values)

    tasks = []
    for p in pieces:
        spec = loo_split(ids, p.piece_id, config.train.validation_pieces, config.seed)
        for v in variants:
            tasks.append((v, spec, seqs, seqs[p.piece_id][0], p.targets.values, p.targets.std,
                          config.train, fold_seed(config.seed, "train", p.piece_id, v)))
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as ex:
            results = list(ex.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]

    curves = {p.piece_id: {"onsets": p.matrix.onsets, "actual": p.targets.values, "predicted": {}}
              for p in pieces}
    reports = []
    for rep, y_hat in results:
        reports.append(rep)
        if y_hat is not None:
            curves[rep.piece_id]["predicted"][rep.variant] = y_hat
    return ExperimentResult(reports, variants, ids, curves, dataset.singular,
                            dataset.shape[0], dataset.shape[1])


# ---------------------------------------------------------------------------
# reporting


def _best(values, measure):
    finite = [v for v in values if np.isfinite(v)]
    if not finite:
        return None
    return min(finite) if measure == "mse" else max(finite)


def _metric(rep, measure, raw):
    if measure == "mse":
        return rep.mse_raw if raw else rep.mse
    return rep.r2 if measure == "r2" else rep.r


def format_table(result: ExperimentResult, raw=False) -> str:
    """Plain-text table, pieces as rows and measure x variant as columns.

    The best value per piece and measure is marked with ``*``.
    """
    tags = [VARIANT_TAGS[v] for v in result.variants]
    heads = {"mse": "MSE (LU^2)" if raw else "MSE", "r2": "R2", "r": "r"}
    width = 8
    pid_w = max([5] + [len(p) for p in result.piece_ids])
    line1 = " " * pid_w
    line2 = "Piece".ljust(pid_w)
    for m in MEASURES:
        block = width * len(tags)
        line1 += "  " + heads[m].center(block)
        line2 += "  " + "".join(t.rjust(width) for t in tags)
    lines = [line1.rstrip(), line2, "-" * len(line2)]
    for pid in result.piece_ids:
        row = pid.ljust(pid_w)
        for m in MEASURES:
            vals = [_metric(result.report(pid, v), m, raw) for v in result.variants]
            best = _best(vals, m)
            row += "  "
            for v in vals:
                if not np.isfinite(v):
                    cell = "fail" if v is not None else "-"
                else:
                    cell = f"{v:.2f}" + ("*" if len(vals) > 1 and v == best else " ")
                row += cell.rjust(width)
        lines.append(row)
    failed = [r for r in result.reports if not r.ok]
    if failed:
        lines.append("")
        lines += [f"failed: {r.piece_id}/{r.variant}: {r.error}" for r in failed]
    return "\n".join(lines) + "\n"


def format_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["piece", "variant", "mse", "r2", "r", "mse_raw", "best_mse", "best_r2", "best_r",
                "epochs", "best_epoch", "seed", "train", "validation", "error"])
    for pid in result.piece_ids:
        reps = [result.report(pid, v) for v in result.variants]
        best = {m: _best([_metric(r, m, False) for r in reps], m) for m in MEASURES}
        for rep in reps:
            flags = [int(len(reps) > 1 and _metric(rep, m, False) == best[m]) for m in MEASURES]
            metrics = [repr(float(v)) for v in (rep.mse, rep.r2, rep.r, rep.mse_raw)]
            w.writerow([pid, VARIANT_TAGS[rep.variant], *metrics, *flags, rep.epochs,
                        rep.best_epoch, rep.seed, " ".join(rep.train), " ".join(rep.validation),
                        rep.error])
    return buf.getvalue()


def curve_variant(result: ExperimentResult, piece_id):
    """Variant whose predictions go into the curve file: the first in report order that succeeded."""
    preds = result.curves[piece_id]["predicted"]
    for v in REPORT_VARIANTS:
        if v in preds:
            return v
    return None


def format_curve_csv(onsets, actual, predicted) -> str:
    lines = ["onset_num,onset_den,actual,predicted"]
    for t, a, p in zip(onsets, actual, predicted):
        lines.append(f"{t.numerator},{t.denominator},{float(a)!r},{float(p)!r}")
    return "\n".join(lines) + "\n"


def curve_svg(onsets, actual, predicted, title="", width=900, height=360) -> str:
    """Two stacked polylines: actual loudness above, prediction below."""
    x = np.array([float(t) for t in onsets])
    span = (x.max() - x.min()) or 1.0
    pad = 20
    lane = (height - 3 * pad) / 2

    def poly(vals, top):
        vals = np.asarray(vals, dtype=float)
        lo, hi = float(vals.min()), float(vals.max())
        rng = (hi - lo) or 1.0
        xs = pad + (x - x.min()) / span * (width - 2 * pad)
        ys = top + lane - (vals - lo) / rng * lane
        return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))

    top1 = pad
    top2 = 2 * pad + lane
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{title}</title>',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{pad}" y="{pad - 5}" font-size="12">actual</text>',
        f'<polyline fill="none" stroke="black" stroke-width="1" points="{poly(actual, top1)}"/>',
        f'<text x="{pad}" y="{top2 - 5}" font-size="12">predicted</text>',
        f'<polyline fill="none" stroke="firebrick" stroke-width="1" points="{poly(predicted, top2)}"/>',
        "</svg>",
    ]) + "\n"


def write_report(result: ExperimentResult, out_dir, header="", raw=False):
    """Write ``report.txt``, ``report.csv``, ``singular_bases.csv`` and ``curves/``."""
    out_dir = Path(out_dir)
    text = header + format_table(result)
    if raw:
        text += "\nmetrics in raw loudness units:\n" + format_table(result, raw=True)
    text += (f"\ndataset: {result.n_rows} rows, {result.n_columns} basis functions, "
             f"{len(result.singular)} singular\n")
    atomic_write_text(out_dir / "report.txt", text)
    atomic_write_text(out_dir / "report.csv", format_csv(result))
    sing = ["piece,class,label"] + [f"{pid},{d.instrument},{d.label}" for d, pid in result.singular]
    atomic_write_text(out_dir / "singular_bases.csv", "\n".join(sing) + "\n")
    written = []
    for pid in result.piece_ids:
        v = curve_variant(result, pid)
        if v is None:
            continue
        c = result.curves[pid]
        atomic_write_text(out_dir / "curves" / f"{pid}.csv",
                          format_curve_csv(c["onsets"], c["actual"], c["predicted"][v]))
        atomic_write_text(out_dir / "curves" / f"{pid}.svg",
                          curve_svg(c["onsets"], c["actual"], c["predicted"][v],
                                    f"{pid}: actual vs {VARIANT_TAGS[v]} prediction"))
        written.append(pid)
    return written
