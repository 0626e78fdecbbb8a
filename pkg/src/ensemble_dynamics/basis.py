"""Basis functions evaluated on the notes of a score part.

Every basis maps a note to a real number.  A part is encoded as a
:class:`PartBasisMatrix` with one row per note (simultaneous notes in
consecutive rows) and one column per basis that the part triggers.

Column labels follow a small grammar, see :func:`parse_label`:

* ``pitch``, ``pitch^2``, ``pitch^3`` -- sounding pitch / 127 and powers
* ``duration``, ``ioi`` -- note duration and inter-onset interval in beats
* ``neighbors.lower|higher|total`` -- simultaneous-note counts
* ``metrical.<num>/<den>.beat<k>`` and ``metrical.<num>/<den>.offbeat``
* ``dyn.<marking>.step``, ``dyn.<marking>.antic.short|long``
* ``dyn.crescendo.ramp``, ``dyn.diminuendo.ramp``
* ``impulse.<name>`` for sfz, fp, marcato, accent, staccato, fermata,
  repeat-sign
* ``const`` -- the all-ones column added at dataset level
"""

from __future__ import annotations

import bisect
import logging
import re
from collections import namedtuple
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .score import (CONSTANT_DYNAMICS, IMPULSE_DYNAMICS, WEDGE_KINDS, Part,
                    TimeSignature, sounding_pitch)

LOGGER = logging.getLogger(__name__)

ANTICIPATION_SHORT = Fraction(1)
ANTICIPATION_LONG = Fraction(8)

POLICIES = ("max", "mean", "sum")
ARTICULATIONS = ("accent", "staccato", "fermata")
REPEAT_SIGN = "repeat-sign"


@dataclass(frozen=True)
class BasisDescriptor:
    instrument: str
    label: str
    policy: str = "max"

    @property
    def key(self):
        return (self.instrument, self.label)


LabelKind = namedtuple("LabelKind", "group name arg")

_GRAMMAR = [
    ("pitch", re.compile(r"^pitch(?:\^([23]))?$")),
    ("duration", re.compile(r"^(duration|ioi)$")),
    ("neighbors", re.compile(r"^neighbors\.(lower|higher|total)$")),
    ("metrical", re.compile(r"^metrical\.(\d+/\d+)\.(beat\d+|offbeat)$")),
    ("step", re.compile(r"^dyn\.(%s)\.step$" % "|".join(CONSTANT_DYNAMICS))),
    ("anticipation", re.compile(r"^dyn\.(%s)\.antic\.(short|long)$" % "|".join(CONSTANT_DYNAMICS))),
    ("ramp", re.compile(r"^dyn\.(%s)\.ramp$" % "|".join(WEDGE_KINDS))),
    ("impulse", re.compile(r"^impulse\.(%s)$" % "|".join(IMPULSE_DYNAMICS + ARTICULATIONS + (REPEAT_SIGN,)))),
    ("const", re.compile(r"^const$")),
]


def parse_label(label: str) -> LabelKind:
    """Parse a column label into ``(group, name, arg)``.

    Raises ``ValueError`` for labels outside the catalogue grammar.
    """
    for group, rx in _GRAMMAR:
        m = rx.match(label)
        if not m:
            continue
        if group == "pitch":
            return LabelKind(group, "pitch", int(m.group(1) or 1))
        if group in ("duration", "neighbors", "ramp", "impulse", "step"):
            return LabelKind(group, m.group(1), None)
        if group in ("metrical", "anticipation"):
            return LabelKind(group, m.group(1), m.group(2))
        return LabelKind(group, "const", None)
    raise ValueError(f"label {label!r} is not part of the basis catalogue")


def format_label(kind: LabelKind) -> str:
    g = kind.group
    if g == "pitch":
        return "pitch" if kind.arg == 1 else f"pitch^{kind.arg}"
    if g == "duration":
        return kind.name
    if g == "neighbors":
        return f"neighbors.{kind.name}"
    if g == "metrical":
        return f"metrical.{kind.name}.{kind.arg}"
    if g == "step":
        return f"dyn.{kind.name}.step"
    if g == "anticipation":
        return f"dyn.{kind.name}.antic.{kind.arg}"
    if g == "ramp":
        return f"dyn.{kind.name}.ramp"
    if g == "impulse":
        return f"impulse.{kind.name}"
    if g == "const":
        return "const"
    raise ValueError(f"unknown basis group {g!r}")


def default_policy(label: str) -> str:
    """Fusion policy: mean for pitch/duration/ioi, sum for neighbor counts, max otherwise."""
    group = parse_label(label).group
    if group in ("pitch", "duration"):
        return "mean"
    if group == "neighbors":
        return "sum"
    return "max"


@dataclass
class PartBasisMatrix:
    """Basis values for the notes of one part (or of a merged class).

    ``values[i, j]`` is basis ``labels[j]`` evaluated on the note in row
    ``i``; ``pitches`` holds the sounding pitch of each row.
    """

    instrument: str
    onsets: list
    labels: list
    values: np.ndarray
    pitches: np.ndarray
    policies: dict = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.onsets), len(self.labels))
        self.pitches = np.asarray(self.pitches, dtype=int)
        if self.policies is None:
            self.policies = {}

    @property
    def descriptors(self):
        return [BasisDescriptor(self.instrument, lab, self.policies.get(lab) or default_policy(lab))
                for lab in self.labels]

    def column(self, label):
        return self.values[:, self.labels.index(label)]

    def to_sparse_csv(self) -> str:
        """Header of labels, then ``onset_num,onset_den,<col>=<value>,...`` per row."""
        lines = [",".join(self.labels)]
        for onset, row in zip(self.onsets, self.values):
            cells = [str(onset.numerator), str(onset.denominator)]
            cells += [f"{j}={float(row[j])!r}" for j in np.flatnonzero(row)]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def read_sparse_csv(text: str, instrument: str = ""):
    """Inverse of :meth:`PartBasisMatrix.to_sparse_csv` (pitches are not stored)."""
    lines = text.strip("\n").split("\n")
    labels = lines[0].split(",") if lines[0] else []
    onsets, rows = [], []
    for line in lines[1:]:
        cells = line.split(",")
        onsets.append(Fraction(int(cells[0]), int(cells[1])))
        row = np.zeros(len(labels))
        for cell in cells[2:]:
            j, v = cell.split("=")
            row[int(j)] = float(v)
        rows.append(row)
    return PartBasisMatrix(instrument, onsets, labels, np.array(rows).reshape(len(onsets), len(labels)),
                           np.zeros(len(onsets), dtype=int))


# ---------------------------------------------------------------------------
# individual basis groups


def pitch_poly(pitch: int):
    """``(q, q**2, q**3)`` with ``q = pitch / 127``."""
    q = pitch / 127.0
    return q, q ** 2, q ** 3


def vertical_neighbors(simultaneous, index):
    """Counts of notes sounding with ``simultaneous[index]`` that are lower,
    higher, and in total (equal pitches count toward the total only)."""
    p = simultaneous[index]
    others = [q for i, q in enumerate(simultaneous) if i != index]
    lower = sum(q < p for q in others)
    higher = sum(q > p for q in others)
    return lower, higher, len(others)


def neighbor_counts(onsets, pitches) -> np.ndarray:
    """:func:`vertical_neighbors` for every row, grouping rows by equal onset."""
    pitches = np.asarray(pitches)
    out = np.zeros((len(onsets), 3))
    groups = {}
    for i, t in enumerate(onsets):
        groups.setdefault(t, []).append(i)
    for idx in groups.values():
        ps = pitches[idx]
        for r, i in enumerate(idx):
            out[i] = vertical_neighbors(ps, r)
    return out


def duration_and_ioi(part: Part):
    """Per note ``(duration, ioi)``; notes at the last onset use their duration as ioi."""
    onsets = sorted({n.onset for n in part.notes})
    res = []
    for n in part.notes:
        k = bisect.bisect_right(onsets, n.onset)
        ioi = onsets[k] - n.onset if k < len(onsets) else n.duration
        res.append((float(n.duration), float(ioi)))
    return res


def active_signature(onset, signatures) -> TimeSignature:
    active = signatures[0]
    for s in signatures:
        if s.onset <= onset:
            active = s
        else:
            break
    return active


def metrical_label(onset: Fraction, sig: TimeSignature) -> str:
    pos = (onset - sig.onset) % sig.bar_length
    beat = pos * sig.denominator / 4
    sig_name = f"{sig.numerator}/{sig.denominator}"
    if beat.denominator == 1:
        return f"metrical.{sig_name}.beat{beat.numerator}"
    return f"metrical.{sig_name}.offbeat"


def metrical_bases(onset: Fraction, sig: TimeSignature) -> dict:
    """One-hot metrical position of an onset: ``{label: 1.0}``."""
    return {metrical_label(onset, sig): 1.0}


def _snap(targets, note_onsets):
    """Map each target onset to the first note onset at or after it."""
    out = set()
    for t in targets:
        k = bisect.bisect_left(note_onsets, t)
        if k < len(note_onsets):
            out.add(note_onsets[k])
    return out


def articulation_impulses(part: Part) -> dict:
    """Impulse columns for note articulations and repeat signs."""
    cols = {}
    for name in ARTICULATIONS:
        v = np.array([float(getattr(n, name)) for n in part.notes])
        if v.any():
            cols[f"impulse.{name}"] = v
    if part.repeat_onsets:
        onsets = sorted({n.onset for n in part.notes})
        hits = _snap(part.repeat_onsets, onsets)
        v = np.array([float(n.onset in hits) for n in part.notes])
        if v.any():
            cols[f"impulse.{REPEAT_SIGN}"] = v
    return cols


def dynamics_bases(part: Part, short=ANTICIPATION_SHORT, long=ANTICIPATION_LONG) -> dict:
    """Step, anticipation, ramp and impulse columns from the part's markings.

    Returns ``{label: values}`` with one value per note; columns that are
    zero on every note are left out.
    """
    x = [n.onset for n in part.notes]
    n = len(x)
    cols = {}

    def add(label, values):
        if label in cols:
            cols[label] = np.maximum(cols[label], values)
        else:
            cols[label] = values

    consts = {}
    for m in part.markings:
        if m.kind == "dynamic":
            if m.onset in consts:
                LOGGER.warning("part %s: overlapping constant dynamics at %s, keeping %s",
                               part.part_id, m.onset, m.value)
            consts[m.onset] = m.value
    const_onsets = sorted(consts)

    for k, t in enumerate(const_onsets):
        name = consts[t]
        nxt = const_onsets[k + 1] if k + 1 < len(const_onsets) else None
        step = np.array([1.0 if xi >= t and (nxt is None or xi < nxt) else 0.0 for xi in x])
        add(f"dyn.{name}.step", step)
        prev = const_onsets[k - 1] if k > 0 else None
        for tag, length in (("short", short), ("long", long)):
            a = t - length
            if prev is not None and prev > a:
                a = prev
            if a >= t:
                continue
            ramp = np.array([float((xi - a) / (t - a)) if a <= xi <= t else 0.0 for xi in x])
            add(f"dyn.{name}.antic.{tag}", ramp)

    for m in part.markings:
        if m.kind != "wedge":
            continue
        s = m.onset
        e = m.end if m.end is not None else part.end
        stop = next((c for c in const_onsets if c > s), None)
        vals = np.zeros(n)
        for i, xi in enumerate(x):
            if xi < s or (stop is not None and xi >= stop):
                continue
            vals[i] = float((xi - s) / (e - s)) if xi <= e else 1.0
        add(f"dyn.{m.value}.ramp", vals)

    note_onsets = sorted(set(x))
    for m in part.markings:
        if m.kind != "impulse":
            continue
        hits = _snap([m.onset], note_onsets)
        add(f"impulse.{m.value}", np.array([float(xi in hits) for xi in x]))

    return {k: v for k, v in cols.items() if v.any()}


# ---------------------------------------------------------------------------


FIXED_LABELS = ["pitch", "pitch^2", "pitch^3", "duration", "ioi",
                "neighbors.lower", "neighbors.higher", "neighbors.total"]
_GROUP_ORDER = ["pitch", "duration", "neighbors", "metrical", "step", "anticipation",
                "ramp", "impulse", "const"]


def _group_order(label):
    """Sort key: the fixed catalogue columns first, then by group and label."""
    if label in FIXED_LABELS:
        return (0, FIXED_LABELS.index(label), "")
    return (1 + _GROUP_ORDER.index(parse_label(label).group), 0, label)


def extract_part_bases(part: Part) -> PartBasisMatrix:
    """Evaluate the whole basis catalogue on a part."""
    notes = part.notes
    pitches = np.array([sounding_pitch(nt, part.transposition) for nt in notes])
    onsets = [nt.onset for nt in notes]
    cols = {}
    poly = np.array([pitch_poly(p) for p in pitches])
    cols["pitch"], cols["pitch^2"], cols["pitch^3"] = poly.T
    dur = np.array(duration_and_ioi(part))
    cols["duration"], cols["ioi"] = dur.T
    nb = neighbor_counts(onsets, pitches)
    cols["neighbors.lower"], cols["neighbors.higher"], cols["neighbors.total"] = nb.T

    for i, nt in enumerate(notes):
        sig = active_signature(nt.onset, part.time_signatures)
        for lab, v in metrical_bases(nt.onset, sig).items():
            cols.setdefault(lab, np.zeros(len(notes)))[i] = v

    cols.update(dynamics_bases(part))
    cols.update(articulation_impulses(part))

    labels = sorted(cols, key=_group_order)
    values = np.column_stack([cols[k] for k in labels])
    return PartBasisMatrix(part.instrument.name, onsets, labels, values, pitches)
