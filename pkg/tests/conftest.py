"""Shared builders for small MusicXML documents and parts."""

from fractions import Fraction

import pytest

from ensemble_dynamics.score import (CanonicalInstrument, Marking, NoteEvent, Part,
                                     TimeSignature)

_STEPS = {0: ("C", 0), 1: ("C", 1), 2: ("D", 0), 3: ("E", -1), 4: ("E", 0), 5: ("F", 0),
          6: ("F", 1), 7: ("G", 0), 8: ("A", -1), 9: ("A", 0), 10: ("B", -1), 11: ("B", 0)}


def note(midi, dur=1, chord=False, voice=None, notations="", rest=False):
    """One ``<note>`` element; ``dur`` is in divisions."""
    head = "<chord/>" if chord else ""
    if rest:
        body = "<rest/>"
    else:
        step, alter = _STEPS[midi % 12]
        alter_xml = f"<alter>{alter}</alter>" if alter else ""
        body = f"<pitch><step>{step}</step>{alter_xml}<octave>{midi // 12 - 1}</octave></pitch>"
    v = f"<voice>{voice}</voice>" if voice else ""
    nt = f"<notations>{notations}</notations>" if notations else ""
    return f"<note>{head}{body}<duration>{dur}</duration>{v}{nt}</note>"


def direction(inner, offset=None):
    off = f"<offset>{offset}</offset>" if offset is not None else ""
    return f"<direction><direction-type>{inner}</direction-type>{off}</direction>"


def dynamic(value):
    return direction(f"<dynamics><{value}/></dynamics>")


def wedge(kind, number=1):
    return direction(f'<wedge type="{kind}" number="{number}"/>')


def forward(dur):
    return f"<forward><duration>{dur}</duration></forward>"


def backup(dur):
    return f"<backup><duration>{dur}</duration></backup>"


def attributes(divisions=1, time=(4, 4), transpose=None):
    tr = f"<transpose><chromatic>{transpose}</chromatic></transpose>" if transpose else ""
    ts = f"<time><beats>{time[0]}</beats><beat-type>{time[1]}</beat-type></time>" if time else ""
    return f"<attributes><divisions>{divisions}</divisions>{ts}{tr}</attributes>"


def barline(repeat=None, ending=None, ending_type="start"):
    inner = ""
    if ending is not None:
        inner += f'<ending number="{ending}" type="{ending_type}"/>'
    if repeat:
        inner += f'<repeat direction="{repeat}"/>'
    return f"<barline>{inner}</barline>"


def document(parts, divisions=1, time=(4, 4)):
    """``parts`` is a list of ``(name, [measure_content, ...])`` or ``(name, measures, transpose)``."""
    plist = []
    body = []
    for i, spec in enumerate(parts, 1):
        name, measures = spec[0], spec[1]
        transpose = spec[2] if len(spec) > 2 else None
        plist.append(f'<score-part id="P{i}"><part-name>{name}</part-name></score-part>')
        ms = []
        for j, content in enumerate(measures, 1):
            attrs = attributes(divisions, time, transpose) if j == 1 else ""
            ms.append(f'<measure number="{j}">{attrs}{content}</measure>')
        body.append(f'<part id="P{i}">{"".join(ms)}</part>')
    return ('<?xml version="1.0" encoding="UTF-8"?>\n<score-partwise version="3.1">'
            f'<part-list>{"".join(plist)}</part-list>{"".join(body)}</score-partwise>').encode()


def make_part(notes, markings=(), instrument="violin", sigs=None, part_id="P1", repeat_onsets=()):
    """Build a :class:`Part` from ``(onset, duration, pitch[, flags])`` tuples."""
    events = []
    for n in notes:
        onset, dur, pitch = Fraction(n[0]), Fraction(n[1]), n[2]
        flags = n[3] if len(n) > 3 else {}
        events.append(NoteEvent(onset, dur, pitch, **flags))
    events.sort(key=lambda e: (e.onset, e.pitch))
    marks = []
    for m in markings:
        kind, value, onset = m[0], m[1], Fraction(m[2])
        end = Fraction(m[3]) if len(m) > 3 else None
        marks.append(Marking(kind, value, onset, end))
    marks.sort(key=lambda m: m.onset)
    sigs = sigs or [(0, 4, 4)]
    return Part(part_id, instrument, CanonicalInstrument(instrument), tuple(events), tuple(marks),
                tuple(TimeSignature(Fraction(o), a, b) for o, a, b in sigs),
                repeat_onsets=tuple(Fraction(r) for r in repeat_onsets))


# Two oboes (divisions = 2): Oboe 1 plays 67 at beat 0 and 70 at beat 1;
# Oboe 2 rests, then plays 62 at beat 1 and 64 at beat 1.5.
TWO_OBOES_DOC = document([
    ("Oboe 1", [note(67, 2) + note(70, 2) + note(0, 4, rest=True)]),
    ("Oboe 2", [note(0, 2, rest=True) + note(62, 1) + note(64, 1) + note(0, 4, rest=True)]),
], divisions=2)


@pytest.fixture
def two_oboes_doc():
    return TWO_OBOES_DOC
