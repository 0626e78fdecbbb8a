"""Synthetic corpora with known generating processes.

Matrix corpora (no score involved) draw basis values ``X`` uniformly from
[-1, 1] and produce targets by one of

* ``linear``:      ``y = X w* + eps``, ``eps ~ N(0, sigma^2 I)``; ``w*`` is scaled
                   so the noise-free signal has unit variance
* ``interaction``: ``y = x_0 * x_1`` (uncorrelated with every single column)
* ``lagged``:      ``y_n = x_{n-1} . w*``, ``y_0 = 0`` (depends only on the previous row)

Score corpora write random orchestral MusicXML files together with an
alignment (constant tempo) and a loudness curve built from the piece's own
basis matrix with the same three generators; they exercise the complete
file-based pipeline.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .io import atomic_write_text, format_alignment_csv, format_loudness_csv

KINDS = ("linear", "interaction", "lagged")


@dataclass
class SynthPiece:
    piece_id: str
    X: np.ndarray
    y: np.ndarray


def linear_weights(n_features, rng):
    return rng.normal(size=n_features)


def matrix_corpus(kind, n_pieces=6, n_rows=200, n_features=4, seed=0, noise=0.0):
    """Pieces of random basis values with targets from the ``kind`` generator.

    Returns ``(pieces, w_star)``; ``w_star`` is None for ``interaction``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic corpus kind {kind!r}")
    rng = np.random.default_rng(seed)
    w = linear_weights(n_features, rng)
    # Var(x . w) = |w|^2 / 3 for x ~ U(-1, 1)
    w = w / np.sqrt(np.sum(w * w) / 3.0)
    pieces = []
    for p in range(n_pieces):
        X = rng.uniform(-1.0, 1.0, (n_rows, n_features))
        # centre each piece so targets have (near) zero piece mean, as after standardization
        X -= X.mean(axis=0)
        if kind == "linear":
            y = X @ w
        elif kind == "interaction":
            y = X[:, 0] * X[:, 1]
        else:
            y = np.zeros(n_rows)
            y[1:] = X[:-1] @ w
        if noise:
            y = y + rng.normal(scale=noise, size=n_rows)
        pieces.append(SynthPiece(f"synth{p:02d}", X, y))
    return pieces, (None if kind == "interaction" else w)


# ---------------------------------------------------------------------------
# MusicXML corpus

_STEPS = [("C", 0), ("C", 1), ("D", 0), ("E", -1), ("E", 0), ("F", 0), ("F", 1),
          ("G", 0), ("A", -1), ("A", 0), ("B", -1), ("B", 0)]

# (part name, written range, transposition in semitones, always present)
_ENSEMBLE = [
    ("Violin 1", (62, 86), 0, True),
    ("Violin 2", (57, 79), 0, True),
    ("Viola", (50, 72), 0, False),
    ("Violoncello", (38, 62), 0, True),
    ("Flute", (62, 89), 0, False),
    ("Oboe 1", (60, 84), 0, False),
    ("Oboe 2", (58, 80), 0, False),
    ("Clarinet in Bb", (54, 82), -2, False),
    ("Horn in F", (55, 74), -7, False),
]


def _pitch_xml(midi):
    step, alter = _STEPS[midi % 12]
    octave = midi // 12 - 1
    alter_xml = f"<alter>{alter}</alter>" if alter else ""
    return f"<pitch><step>{step}</step>{alter_xml}<octave>{octave}</octave></pitch>"


_TYPES = {1: "eighth", 2: "quarter", 3: "quarter", 4: "half", 6: "half", 8: "whole"}


def _random_part(rng, n_measures, beats, lo, hi):
    """Events per measure: lists of (dur_divs, pitches or None, articulations), divisions=2."""
    measures = []
    bar = 2 * beats
    for m in range(n_measures):
        pos = 0
        events = []
        while pos < bar:
            dur = int(rng.choice([1, 2, 2, 2, 4]))
            dur = min(dur, bar - pos)
            if rng.random() < 0.12:
                events.append((dur, None, ()))
            else:
                base = int(rng.integers(lo, hi + 1))
                chord = [base]
                if rng.random() < 0.15 and base + 4 <= 127:
                    chord.append(base + int(rng.choice([3, 4, 7])))
                arts = []
                r = rng.random()
                if r < 0.06:
                    arts.append("accent")
                elif r < 0.09:
                    arts.append("strong-accent")
                elif r < 0.2:
                    arts.append("staccato")
                events.append((dur, chord, tuple(arts)))
            pos += dur
        measures.append(events)
    if measures[-1] and measures[-1][-1][1] is not None:
        d, ch, arts = measures[-1][-1]
        measures[-1][-1] = (d, ch, arts + ("fermata",))
    return measures


def _directions(rng, n_measures, beats):
    """Dynamics shared by all parts: {(measure, divs_offset): [xml snippets]}."""
    out = {}
    names = ["pp", "p", "mp", "mf", "f", "ff"]
    out.setdefault((0, 0), []).append(_dyn(rng.choice(names)))
    m = 0
    while True:
        m += int(rng.integers(2, 5))
        if m >= n_measures - 1:
            break
        r = rng.random()
        if r < 0.5:
            out.setdefault((m, 0), []).append(_dyn(rng.choice(names)))
        elif r < 0.8:
            kind = "crescendo" if rng.random() < 0.6 else "diminuendo"
            out.setdefault((m, 0), []).append(_wedge(kind))
            end = min(m + int(rng.integers(1, 3)), n_measures - 1)
            out.setdefault((end, 2 * beats - 1), []).append(_wedge("stop"))
        else:
            out.setdefault((m, 0), []).append(_dyn(rng.choice(["sfz", "fp"])))
    return out


def _dyn(name):
    return (f'<direction placement="below"><direction-type><dynamics><{name}/></dynamics>'
            f"</direction-type></direction>")


def _wedge(kind):
    return f'<direction><direction-type><wedge type="{kind}"/></direction-type></direction>'


def random_musicxml(seed, n_measures=16, beats=None, with_repeat=None) -> str:
    """A random orchestral score as a MusicXML string (partwise, divisions 2)."""
    rng = np.random.default_rng(seed)
    beats = beats or int(rng.choice([3, 4]))
    with_repeat = bool(rng.random() < 0.3) if with_repeat is None else with_repeat
    ensemble = [e for e in _ENSEMBLE if e[3] or rng.random() < 0.6]
    dirs = _directions(rng, n_measures, beats)
    rep = (2, 5) if with_repeat and n_measures > 6 else None

    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           '<score-partwise version="3.1">', "<part-list>"]
    for i, (name, _, _, _) in enumerate(ensemble):
        out.append(f'<score-part id="P{i + 1}"><part-name>{escape(name)}</part-name></score-part>')
    out.append("</part-list>")
    for i, (name, (lo, hi), transp, _) in enumerate(ensemble):
        out.append(f'<part id="P{i + 1}">')
        measures = _random_part(rng, n_measures, beats, lo, hi)
        for m, events in enumerate(measures):
            out.append(f'<measure number="{m + 1}">')
            if rep and m == rep[0]:
                out.append('<barline location="left"><bar-style>heavy-light</bar-style>'
                           '<repeat direction="forward"/></barline>')
            if m == 0:
                transpose = (f"<transpose><chromatic>{transp}</chromatic></transpose>"
                             if transp else "")
                out.append(f"<attributes><divisions>2</divisions><time><beats>{beats}</beats>"
                           f"<beat-type>4</beat-type></time>{transpose}</attributes>")
            pos = 0
            pending = {off: snippets for (mm, off), snippets in dirs.items() if mm == m}
            for dur, chord, arts in events:
                for off in sorted(k for k in pending if k <= pos):
                    out.extend(pending.pop(off))
                if chord is None:
                    out.append(f"<note><rest/><duration>{dur}</duration><voice>1</voice></note>")
                else:
                    for j, p in enumerate(chord):
                        art_xml = ""
                        if arts:
                            inner = "".join(f"<{a}/>" for a in arts if a != "fermata")
                            art_xml = "<notations>"
                            if inner:
                                art_xml += f"<articulations>{inner}</articulations>"
                            if "fermata" in arts:
                                art_xml += "<fermata/>"
                            art_xml += "</notations>"
                        chord_xml = "<chord/>" if j else ""
                        out.append(f"<note>{chord_xml}{_pitch_xml(p)}<duration>{dur}</duration>"
                                   f"<voice>1</voice><type>{_TYPES.get(dur, 'quarter')}</type>"
                                   f"{art_xml}</note>")
                pos += dur
            for off in sorted(pending):
                out.extend(pending[off])
            if rep and m == rep[1]:
                out.append('<barline location="right"><bar-style>light-heavy</bar-style>'
                           '<repeat direction="backward"/></barline>')
            out.append("</measure>")
        out.append("</part>")
    out.append("</score-partwise>")
    return "\n".join(out) + "\n"


def _descriptor_weight(instrument, label, seed):
    h = zlib.crc32(f"{seed}|{instrument}|{label}".encode())
    return np.random.default_rng(h).normal()


def score_targets(piece_matrix, kind, seed=0, noise=0.0, rng=None):
    """Raw (unstandardized) target values for a piece matrix."""
    X = piece_matrix.dense()
    if kind == "interaction":
        cols = {d.key: j for j, d in enumerate(piece_matrix.descriptors)}
        a = X[:, cols[("violin", "pitch")]]
        b = X[:, cols[("cello", "pitch")]]
        a = np.where(a > 0, a - a[a > 0].mean(), 0.0)
        b = np.where(b > 0, b - b[b > 0].mean(), 0.0)
        y = a * b
    else:
        w = np.array([_descriptor_weight(d.instrument, d.label, seed)
                      for d in piece_matrix.descriptors])
        y = X @ w
        if kind == "lagged":
            y = np.concatenate([[0.0], y[:-1]])
    if noise:
        rng = rng or np.random.default_rng(seed)
        y = y + rng.normal(scale=noise * (np.std(y) or 1.0), size=len(y))
    return y


def write_score_corpus(out_dir, kind="linear", n_pieces=6, seed=0, n_measures=16, noise=0.0):
    """Write scores, alignments, loudness curves and ``manifest.json``; return the manifest path.

    The alignment has constant tempo ``s`` seconds per beat, and the loudness
    curve has hop ``s / 10`` with knots at every ``onset + 0.1`` beats, so the
    targets sampled 1/10 beat after each onset reproduce the generated values.
    """
    from .fusion import score_to_piece_matrix
    from .score import parse_score

    if kind not in KINDS:
        raise ValueError(f"unknown synthetic corpus kind {kind!r}")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    entries = []
    for p in range(n_pieces):
        pid = f"piece{p:02d}"
        xml = random_musicxml(seed * 1000 + p, n_measures)
        score_path = out_dir / "scores" / f"{pid}.musicxml"
        atomic_write_text(score_path, xml)
        pm = score_to_piece_matrix(parse_score(xml.encode(), pid))
        y = score_targets(pm, kind, seed, noise, rng)
        y = (y - y.mean()) / (y.std() or 1.0)
        lufs = -20.0 + 4.0 * y

        spb = float(rng.choice([0.4, 0.5, 0.6]))
        end_beat = pm.onsets[-1] + 4
        beats = [Fraction(b) for b in range(int(end_beat) + 1)]
        align = [(b, float(b) * spb) for b in beats]
        atomic_write_text(out_dir / "alignments" / f"{pid}.csv", format_alignment_csv(align))

        hop = spb / 10.0
        knots_t = np.array([(float(t) + 0.1) * spb for t in pm.onsets])
        grid = np.arange(int(round(float(end_beat) * spb / hop)) + 1) * hop
        curve = np.interp(grid, knots_t, lufs)
        atomic_write_text(out_dir / "loudness" / f"{pid}.csv", format_loudness_csv(grid, curve))
        entries.append({
            "id": pid,
            "score": f"scores/{pid}.musicxml",
            "alignment": f"alignments/{pid}.csv",
            "loudness": f"loudness/{pid}.csv",
            "tags": {"generator": kind, "seed": seed, "seconds_per_beat": spb},
        })
    manifest = out_dir / "manifest.json"
    atomic_write_text(manifest, json.dumps({"pieces": entries}, indent=2, sort_keys=True) + "\n")
    return manifest
