"""Internal score representation and MusicXML reading.

Onsets and durations are exact :class:`fractions.Fraction` values in
quarter-note beats, so that grouping notes by onset never depends on
floating point rounding.
"""

from __future__ import annotations

import io
import json
import logging
import re
import unicodedata
import xml.etree.ElementTree as ET
import zipfile
from dataclasses import dataclass, replace
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from typing import Iterable, Optional

LOGGER = logging.getLogger(__name__)

CONSTANT_DYNAMICS = ("ppp", "pp", "p", "mp", "mf", "f", "ff", "fff")
IMPULSE_DYNAMICS = ("sfz", "fp", "marcato")
WEDGE_KINDS = ("crescendo", "diminuendo")

# textual impulse spellings folded onto the closed impulse vocabulary
_IMPULSE_ALIASES = {"sfz": "sfz", "sf": "sfz", "sffz": "sfz", "sfzp": "sfz",
                    "rfz": "sfz", "rf": "sfz", "fz": "sfz", "fp": "fp", "sfp": "fp"}

MATCH_THRESHOLD = 0.6


class ScoreError(Exception):
    """Base class for score reading problems."""


class ScoreParseError(ScoreError):
    def __init__(self, msg, line=None):
        self.line = line
        if line is not None:
            msg = f"line {line}: {msg}"
        super().__init__(msg)


class StructuralError(ScoreError):
    pass


class UnresolvedInstrumentError(ScoreError):
    def __init__(self, raw_name, candidates):
        self.raw_name = raw_name
        self.candidates = candidates
        names = ", ".join(f"{c} ({s:.2f})" for c, s in candidates)
        super().__init__(f"cannot resolve instrument {raw_name!r}; nearest: {names}")


class PitchRangeError(ScoreError, ValueError):
    pass


@dataclass(frozen=True)
class CanonicalInstrument:
    name: str
    match_score: float = 1.0


@dataclass(frozen=True)
class NoteEvent:
    onset: Fraction
    duration: Fraction
    pitch: int
    accent: bool = False
    staccato: bool = False
    fermata: bool = False

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError(f"negative onset {self.onset}")
        if self.duration <= 0:
            raise ValueError(f"non-positive duration {self.duration}")
        if not 0 <= self.pitch <= 127:
            raise PitchRangeError(f"pitch {self.pitch} outside MIDI range")


@dataclass(frozen=True)
class Marking:
    """A dynamics marking.

    ``kind`` is one of ``"dynamic"`` (constant, ``value`` in
    :data:`CONSTANT_DYNAMICS`), ``"wedge"`` (``value`` crescendo or
    diminuendo, spanning ``onset`` to ``end``) or ``"impulse"``
    (``value`` in :data:`IMPULSE_DYNAMICS`).
    """

    kind: str
    value: str
    onset: Fraction
    end: Optional[Fraction] = None

    def __post_init__(self):
        if self.kind == "dynamic" and self.value not in CONSTANT_DYNAMICS:
            raise ValueError(f"unknown constant dynamic {self.value!r}")
        if self.kind == "wedge":
            if self.value not in WEDGE_KINDS:
                raise ValueError(f"unknown wedge {self.value!r}")
            if self.end is not None and not self.onset < self.end:
                raise ValueError(f"wedge start {self.onset} not before end {self.end}")
        if self.kind == "impulse" and self.value not in IMPULSE_DYNAMICS:
            raise ValueError(f"unknown impulse marking {self.value!r}")


@dataclass(frozen=True)
class TimeSignature:
    onset: Fraction
    numerator: int
    denominator: int

    @property
    def bar_length(self) -> Fraction:
        return Fraction(4 * self.numerator, self.denominator)


@dataclass(frozen=True)
class Measure:
    number: str
    start: Fraction
    end: Fraction
    repeat_forward: bool = False
    repeat_backward: bool = False
    repeat_times: int = 2
    endings: tuple = ()


@dataclass(frozen=True)
class Part:
    part_id: str
    raw_name: str
    instrument: CanonicalInstrument
    notes: tuple
    markings: tuple = ()
    time_signatures: tuple = (TimeSignature(Fraction(0), 4, 4),)
    transposition: int = 0
    voice: str = "1"
    repeat_onsets: tuple = ()

    def __post_init__(self):
        if not self.notes:
            raise ValueError(f"part {self.part_id} has no notes")
        if not -24 <= self.transposition <= 24:
            raise ValueError(f"transposition {self.transposition} out of range")
        if not self.time_signatures:
            raise ValueError("part needs at least one time signature")

    @property
    def end(self) -> Fraction:
        return max(n.onset + n.duration for n in self.notes)


@dataclass(frozen=True)
class Score:
    piece_id: str
    parts: tuple
    divisions: int = 1
    measures: tuple = ()

    @property
    def notes(self):
        return [n for p in self.parts for n in p.notes]


def sounding_pitch(note: NoteEvent, transposition: int) -> int:
    """Concert pitch of a written note."""
    p = note.pitch + transposition
    if not 0 <= p <= 127:
        raise PitchRangeError(
            f"sounding pitch {p} (written {note.pitch}, transposition {transposition}) "
            "outside MIDI range")
    return p


# ---------------------------------------------------------------------------
# instrument names


def _fold(text):
    text = unicodedata.normalize("NFKD", text)
    text = "".join(c for c in text if not unicodedata.combining(c))
    return text.lower()


_ROMAN = {"i", "ii", "iii", "iv", "v", "vi"}
_KEY_SUFFIX = re.compile(r"\s+(in|en)\s+[a-h](\s*(b|flat|es|s|#|sharp|is))?$")


def normalize_instrument_name(raw: str) -> str:
    """Lowercase, fold diacritics, drop punctuation and instance numbers.

    >>> normalize_instrument_name("Vln. 2")
    'vln'
    >>> normalize_instrument_name("Clarinetto I in B♭")
    'clarinetto'
    """
    s = _fold(raw).replace("♭", "b").replace("♯", "#")
    s = re.sub(r"[().,:;/\-_\[\]]", " ", s)
    s = re.sub(r"\s+", " ", s).strip()
    s = _KEY_SUFFIX.sub("", s)
    tokens = s.split(" ")
    # instance numbers, leading ("2 Flutes") or trailing ("Violino II")
    while len(tokens) > 1 and (tokens[-1].isdigit() or tokens[-1] in _ROMAN
                               or re.fullmatch(r"\d+(st|nd|rd|th)?", tokens[-1])):
        tokens.pop()
    while len(tokens) > 1 and tokens[0].isdigit():
        tokens.pop(0)
    s = " ".join(tokens)
    s = re.sub(r"(?<=[a-z])\d+$", "", s)
    return s.strip()


@lru_cache(maxsize=1)
def alias_table() -> dict:
    with resources.files(__package__).joinpath("data/instruments.json").open("r", encoding="utf8") as fh:
        table = json.load(fh)
    return {name: tuple(sorted({normalize_instrument_name(a) for a in aliases + [name]}))
            for name, aliases in table.items()}


def canonical_names():
    return sorted(alias_table())


def edit_similarity(a: str, b: str) -> float:
    """``1 - levenshtein(a, b) / max(len(a), len(b))``."""
    if a == b:
        return 1.0
    if not a or not b:
        return 0.0
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return 1.0 - prev[-1] / max(len(a), len(b))


def _class_scores(raw_name):
    key = normalize_instrument_name(raw_name)
    return {name: max(edit_similarity(key, a) for a in aliases)
            for name, aliases in alias_table().items()}


def resolve_instrument(raw_name: str, threshold: float = MATCH_THRESHOLD) -> CanonicalInstrument:
    """Map a (possibly abbreviated or non-English) name to its canonical class.

    Ties on similarity are broken by alphabetical class name.
    """
    if not raw_name or not raw_name.strip():
        raise ValueError("empty instrument name")
    scores = _class_scores(raw_name)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    name, score = ranked[0]
    if score < threshold:
        raise UnresolvedInstrumentError(raw_name, ranked[:3])
    return CanonicalInstrument(name, score)


# ---------------------------------------------------------------------------
# MusicXML


_IGNORED = {"print", "sound", "layout", "staff-layout", "system-layout", "listen",
            "bookmark", "link", "grouping", "figured-bass"}


def _read_document(document: bytes) -> bytes:
    if document[:2] == b"PK":
        with zipfile.ZipFile(io.BytesIO(document)) as zf:
            names = zf.namelist()
            target = None
            if "META-INF/container.xml" in names:
                root = ET.fromstring(zf.read("META-INF/container.xml"))
                for rf in root.iter():
                    if rf.tag.endswith("rootfile") and rf.get("full-path"):
                        target = rf.get("full-path")
                        break
            if target is None:
                cands = [n for n in names if n.endswith((".xml", ".musicxml"))
                         and not n.startswith("META-INF")]
                if not cands:
                    raise ScoreParseError("compressed container holds no MusicXML file")
                target = cands[0]
            return zf.read(target)
    return document


def _int_text(el, tag, default=None):
    child = el.find(tag)
    if child is None or child.text is None:
        return default
    return int(child.text.strip())


_STEP = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}


def _midi(pitch_el):
    step = pitch_el.findtext("step").strip()
    octave = int(pitch_el.findtext("octave"))
    alter = pitch_el.findtext("alter")
    alter = int(round(float(alter))) if alter else 0
    return 12 * (octave + 1) + _STEP[step] + alter


class _VoiceBuffer:
    def __init__(self):
        self.notes = []
        self.open_ties = {}


class _PartReader:
    """Walks one ``<part>`` element, collecting notes per voice and markings."""

    def __init__(self, part_el, part_id, raw_name):
        self.part_el = part_el
        self.part_id = part_id
        self.raw_name = raw_name
        self.voices = {}
        self.markings = []
        self.words = []  # (onset, "crescendo"|"diminuendo")
        self.time_signatures = []
        self.transposition = 0
        self.measures = []
        self.divisions = None
        self.open_wedges = {}
        self.active_ending = ()

    def warn(self, msg):
        LOGGER.warning("part %s: %s", self.part_id, msg)

    def run(self):
        pos = Fraction(0)
        divisions = 1
        for m_el in self.part_el.findall("measure"):
            number = m_el.get("number", str(len(self.measures) + 1))
            start = pos
            cursor = pos
            high = pos
            last_onset = pos
            fwd = bwd = False
            times = 2
            endings = self.active_ending
            close_ending = False
            for el in m_el:
                tag = el.tag
                if tag == "attributes":
                    d = _int_text(el, "divisions")
                    if d:
                        divisions = d
                        self.divisions = self.divisions or d
                    for t in el.findall("time"):
                        beats = t.findtext("beats")
                        btype = t.findtext("beat-type")
                        if beats is None or btype is None or "+" in beats:
                            self.warn(f"measure {number}: unsupported time signature skipped")
                            continue
                        ts = TimeSignature(cursor, int(beats), int(btype))
                        self.time_signatures = [s for s in self.time_signatures
                                                if s.onset != cursor] + [ts]
                    tr = el.find("transpose")
                    if tr is not None:
                        self.transposition = (_int_text(tr, "chromatic", 0)
                                              + 12 * _int_text(tr, "octave-change", 0))
                elif tag == "note":
                    cursor, last_onset = self._note(el, cursor, last_onset, divisions, number)
                elif tag == "backup":
                    cursor -= Fraction(_int_text(el, "duration", 0), divisions)
                elif tag == "forward":
                    cursor += Fraction(_int_text(el, "duration", 0), divisions)
                elif tag == "direction":
                    self._direction(el, cursor, divisions, number)
                elif tag == "barline":
                    rep = el.find("repeat")
                    if rep is not None:
                        if rep.get("direction") == "forward":
                            fwd = True
                        elif rep.get("direction") == "backward":
                            bwd = True
                            times = int(rep.get("times", 2))
                    end_el = el.find("ending")
                    if end_el is not None:
                        if end_el.get("type") == "start":
                            nums = re.findall(r"\d+", end_el.get("number", ""))
                            endings = self.active_ending = tuple(int(n) for n in nums)
                        else:
                            close_ending = True
                elif tag in _IGNORED:
                    pass
                else:
                    self.warn(f"measure {number}: unsupported element <{tag}> skipped")
                high = max(high, cursor)
            pos = high
            self.measures.append(Measure(number, start, pos, fwd, bwd, times, endings))
            if close_ending:
                self.active_ending = ()
        if self.open_wedges:
            kind, _, measure = next(iter(self.open_wedges.values()))
            raise StructuralError(
                f"part {self.part_id} ({self.raw_name}): {kind} wedge opened in measure "
                f"{measure} is never closed")
        return self

    def _note(self, el, cursor, last_onset, divisions, measure):
        if el.find("grace") is not None:
            self.warn(f"measure {measure}: grace note skipped")
            return cursor, last_onset
        if el.find("cue") is not None:
            return cursor, last_onset
        dur = Fraction(_int_text(el, "duration", 0), divisions)
        chord = el.find("chord") is not None
        onset = last_onset if chord else cursor
        if not chord:
            cursor = cursor + dur
        if el.find("rest") is not None:
            return cursor, onset
        pitch_el = el.find("pitch")
        if pitch_el is None:
            # unpitched percussion: use display position
            unp = el.find("unpitched")
            if unp is None:
                self.warn(f"measure {measure}: note without pitch skipped")
                return cursor, onset
            pitch = 12 * (int(unp.findtext("display-octave", "4")) + 1) + _STEP[unp.findtext("display-step", "C")]
        else:
            pitch = _midi(pitch_el)
        voice = (el.findtext("voice") or "1").strip()
        buf = self.voices.setdefault(voice, _VoiceBuffer())

        accent = staccato = fermata = False
        notations = el.find("notations")
        ties = {t.get("type") for t in el.findall("tie")}
        if notations is not None:
            ties |= {t.get("type") for t in notations.findall("tied")}
            for art in notations.findall("articulations"):
                for a in art:
                    if a.tag == "accent":
                        accent = True
                    elif a.tag == "strong-accent":
                        accent = True
                        self.markings.append(Marking("impulse", "marcato", onset))
                    elif a.tag in ("staccato", "staccatissimo", "spiccato"):
                        staccato = True
            if notations.find("fermata") is not None:
                fermata = True
            for orn in notations.findall("ornaments"):
                if len(orn):
                    self.warn(f"measure {measure}: ornament <{orn[0].tag}> ignored")
            for dyn in notations.findall("dynamics"):
                self._dynamics(dyn, onset)
        if dur <= 0:
            self.warn(f"measure {measure}: zero-duration note skipped")
            return cursor, onset

        if "stop" in ties and pitch in buf.open_ties:
            idx = buf.open_ties.pop(pitch)
            prev = buf.notes[idx]
            buf.notes[idx] = replace(prev, duration=prev.duration + dur,
                                     fermata=prev.fermata or fermata)
            if "start" in ties:
                buf.open_ties[pitch] = idx
            return cursor, onset
        buf.notes.append(NoteEvent(onset, dur, pitch, accent, staccato, fermata))
        if "start" in ties:
            buf.open_ties[pitch] = len(buf.notes) - 1
        return cursor, onset

    def _dynamics(self, dyn_el, onset):
        for d in dyn_el:
            tag = d.tag
            if tag == "other-dynamics":
                tag = (d.text or "").strip().lower()
            if tag in CONSTANT_DYNAMICS:
                self.markings.append(Marking("dynamic", tag, onset))
            elif tag in _IMPULSE_ALIASES:
                self.markings.append(Marking("impulse", _IMPULSE_ALIASES[tag], onset))
            else:
                self.warn(f"dynamics <{tag}> not supported, skipped")

    def _direction(self, el, cursor, divisions, measure):
        onset = cursor
        off = el.find("offset")
        if off is not None and off.text:
            onset = max(Fraction(0), cursor + Fraction(int(off.text.strip()), divisions))
        for dt in el.findall("direction-type"):
            for child in dt:
                if child.tag == "dynamics":
                    self._dynamics(child, onset)
                elif child.tag == "wedge":
                    num = child.get("number", "1")
                    wtype = child.get("type")
                    if wtype in WEDGE_KINDS:
                        self.open_wedges[num] = (wtype, onset, measure)
                    elif wtype == "stop":
                        if num not in self.open_wedges:
                            self.warn(f"measure {measure}: wedge stop without start ignored")
                            continue
                        kind, start, _ = self.open_wedges.pop(num)
                        if onset > start:
                            self.markings.append(Marking("wedge", kind, start, onset))
                        else:
                            self.warn(f"measure {measure}: empty wedge dropped")
                elif child.tag == "words":
                    text = _fold(child.text or "").strip()
                    if re.match(r"^(poco\s+a\s+poco\s+|sempre\s+|molto\s+)?cresc", text):
                        self.words.append((onset, "crescendo"))
                    elif re.match(r"^(poco\s+a\s+poco\s+|sempre\s+|molto\s+)?(dim|decresc)", text):
                        self.words.append((onset, "diminuendo"))
                elif child.tag in ("rehearsal", "segno", "coda", "metronome", "dashes",
                                   "bracket", "pedal", "octave-shift", "other-direction"):
                    pass
                else:
                    self.warn(f"measure {measure}: direction <{child.tag}> skipped")


def _close_textual_wedges(words, markings, part_end):
    """Turn textual cresc./dim. into wedges ending at the next constant dynamic."""
    consts = sorted(m.onset for m in markings if m.kind == "dynamic")
    out = []
    for onset, kind in words:
        end = next((c for c in consts if c > onset), part_end)
        if end > onset:
            out.append(Marking("wedge", kind, onset, end))
    return out


def _dedupe_constants(markings, part_id):
    """Keep the last constant marking among those sharing an onset."""
    seen = {}
    for i, m in enumerate(markings):
        if m.kind == "dynamic":
            if m.onset in seen:
                LOGGER.warning("part %s: several constant dynamics at onset %s, keeping the last",
                               part_id, m.onset)
            seen[m.onset] = i
    keep = set(seen.values())
    return [m for i, m in enumerate(markings) if m.kind != "dynamic" or i in keep]


def _part_names(root):
    names = {}
    pl = root.find("part-list")
    if pl is None:
        return names
    for sp in pl.findall("score-part"):
        cands = [sp.findtext("part-name"), sp.findtext("part-abbreviation")]
        cands += [si.findtext("instrument-name") for si in sp.findall("score-instrument")]
        names[sp.get("id")] = [c.strip() for c in cands if c and c.strip()]
    return names


def _resolve_any(names):
    err = None
    for n in names:
        try:
            return n, resolve_instrument(n)
        except UnresolvedInstrumentError as exc:
            err = err or exc
    if err is None:
        raise UnresolvedInstrumentError("", [])
    raise err


def parse_score(document: bytes, piece_id: str = "piece") -> Score:
    """Read a MusicXML (``.xml`` or compressed ``.mxl``) document.

    Each voice of a ``<part>`` becomes its own :class:`Part`; all voices
    of a part share the part's canonical instrument.
    """
    data = _read_document(document)
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise ScoreParseError(f"malformed XML: {exc}", line=exc.position[0]) from exc
    if root.tag == "score-timewise":
        raise ScoreParseError("score-timewise documents are not supported")
    if root.tag != "score-partwise":
        raise ScoreParseError(f"unexpected root element <{root.tag}>")

    names = _part_names(root)
    parts = []
    measures = None
    divisions = None
    for part_el in root.findall("part"):
        pid = part_el.get("id")
        cands = names.get(pid) or [pid]
        raw_name, instrument = _resolve_any(cands)
        reader = _PartReader(part_el, pid, raw_name).run()
        if measures is None:
            measures = tuple(reader.measures)
            divisions = reader.divisions
        elif len(reader.measures) != len(measures):
            LOGGER.warning("part %s has %d measures, expected %d", pid,
                           len(reader.measures), len(measures))
        sigs = sorted(reader.time_signatures, key=lambda s: s.onset) or [TimeSignature(Fraction(0), 4, 4)]
        if sigs[0].onset > 0:
            sigs.insert(0, replace(sigs[0], onset=Fraction(0)))
        voices = {v: b for v, b in reader.voices.items() if b.notes}
        if not voices:
            LOGGER.warning("part %s (%s) has no notes, dropped", pid, raw_name)
            continue
        part_end = max(n.onset + n.duration for b in voices.values() for n in b.notes)
        markings = _dedupe_constants(reader.markings, pid)
        markings += _close_textual_wedges(reader.words, markings, part_end)
        markings.sort(key=lambda m: m.onset)
        for v in sorted(voices, key=_voice_key):
            notes = sorted(voices[v].notes, key=lambda n: (n.onset, n.pitch))
            parts.append(Part(
                part_id=pid if len(voices) == 1 else f"{pid}.v{v}",
                raw_name=raw_name, instrument=instrument, notes=tuple(notes),
                markings=tuple(markings), time_signatures=tuple(sigs),
                transposition=reader.transposition, voice=v))
    if not parts:
        raise StructuralError("score contains no notes")
    return Score(piece_id, tuple(parts), divisions or 1, measures or ())


def _voice_key(v):
    return (0, int(v), v) if v.isdigit() else (1, 0, v)


def load_score(path, piece_id=None) -> Score:
    from pathlib import Path
    path = Path(path)
    return parse_score(path.read_bytes(), piece_id or path.stem)


# ---------------------------------------------------------------------------
# repeats


def _repeat_structure(measures):
    """Static analysis of repeat barlines.

    Returns ``(closes, owner)``: for every backward repeat the index of the
    measure it jumps back to, and for every measure inside a volta the start
    of the repeat whose pass number selects that volta.  A backward repeat
    without a matching forward repeat returns to the start of the piece, or
    to the measure after the previous closed repeat.
    """
    closes = {}
    owner = {}
    run_start = {}
    stack = [0]
    for i, m in enumerate(measures):
        if m.endings:
            prev = measures[i - 1] if i else None
            if prev is not None and prev.endings:
                owner[i] = owner[i - 1]
                run_start[i] = run_start[i - 1]
            else:
                owner[i] = stack[-1]
                run_start[i] = i
        if m.repeat_forward and stack[-1] != i:
            stack.append(i)
        if m.repeat_backward:
            # inside a volta the jump goes back to the repeat owning the volta,
            # unless a repeat opened within the volta is still open
            in_volta = m.endings and stack[-1] < run_start[i]
            target = owner[i] if in_volta else stack[-1]
            closes[i] = target
            if stack[-1] == target:
                if len(stack) > 1:
                    stack.pop()
                elif not in_volta:
                    stack[0] = i + 1
        if (m.endings and len(stack) == 1 and owner[i] == stack[0]
                and (i + 1 == len(measures) or not measures[i + 1].endings)):
            # the volta section of a repeat from the start is over
            stack[0] = i + 1
    if len(stack) > 1:
        m = measures[stack[-1]]
        raise StructuralError(f"forward repeat at measure {m.number} has no matching backward repeat")
    return closes, owner


def playback_order(measures: Iterable[Measure]) -> list:
    """Indices of ``measures`` in performed order, with repeats and voltas expanded."""
    measures = list(measures)
    n = len(measures)
    closes, owner = _repeat_structure(measures)
    starts = set(closes.values())
    passes = {}
    taken = {}
    seq = []
    i = 0
    jumped = False
    guard = 0
    while i < n:
        guard += 1
        if guard > 100 * (n + 1):
            raise StructuralError("repeat structure does not terminate")
        m = measures[i]
        if i in starts and not jumped:
            passes[i] = 1
        jumped = False
        if m.endings and passes.get(owner[i], 1) not in m.endings:
            i += 1
            continue
        seq.append(i)
        if m.repeat_backward:
            done = taken.get(i, 0)
            if done < m.repeat_times - 1:
                taken[i] = done + 1
                target = closes[i]
                passes[target] = passes.get(target, 1) + 1
                i = target
                jumped = True
                continue
            taken[i] = 0
        i += 1
    return seq


def _check_repeats(measures):
    depth = 0
    for m in measures:
        if m.repeat_forward:
            depth += 1
        if m.repeat_backward:
            depth = max(depth - 1, 0)
    if depth:
        raise StructuralError("mismatched repeat barlines: unclosed forward repeat")


def _segments(measures, order):
    """Group the playback order into runs of consecutive measures: (first, last, new_start)."""
    segs = []
    t = Fraction(0)
    for idx in order:
        m = measures[idx]
        if segs and segs[-1][1] == idx - 1:
            segs[-1][1] = idx
        else:
            segs.append([idx, idx, t])
        t += m.end - m.start
    return [(measures[a].start, measures[b].end, new) for a, b, new in segs], t


def unfold_repeats(score: Score) -> Score:
    """Expand repeats so the score timeline matches the performed timeline.

    The onsets where a repeated section begins or is left (in the unfolded
    timeline) are stored on every part as ``repeat_onsets``.
    """
    measures = list(score.measures)
    if not any(m.repeat_forward or m.repeat_backward or m.endings for m in measures):
        return score
    _check_repeats(measures)
    order = playback_order(measures)
    segs, _ = _segments(measures, order)

    marks = set()
    t = Fraction(0)
    prev = None
    for idx in order:
        m = measures[idx]
        if m.repeat_forward or (prev is not None and measures[prev].repeat_backward):
            marks.add(t)
        t += m.end - m.start
        prev = idx
    repeat_onsets = tuple(sorted(marks))

    new_parts = []
    for part in score.parts:
        notes = []
        markings = []
        sigs = []
        for lo, hi, new in segs:
            shift = new - lo
            notes += [replace(n, onset=n.onset + shift) for n in part.notes if lo <= n.onset < hi]
            for mk in part.markings:
                if lo <= mk.onset < hi:
                    end = mk.end
                    if end is not None:
                        end = min(end, hi) + shift
                        if end <= mk.onset + shift:
                            continue
                    markings.append(replace(mk, onset=mk.onset + shift, end=end))
            active = [s for s in part.time_signatures if s.onset <= lo]
            inside = [s for s in part.time_signatures if lo < s.onset < hi]
            if active:
                sigs.append(replace(active[-1], onset=new))
            sigs += [replace(s, onset=s.onset + shift) for s in inside]
        dedup = []
        for s in sigs:
            if dedup and (dedup[-1].numerator, dedup[-1].denominator) == (s.numerator, s.denominator):
                continue
            dedup.append(s)
        if not notes:
            continue
        notes.sort(key=lambda n: (n.onset, n.pitch))
        markings.sort(key=lambda m: m.onset)
        new_parts.append(replace(part, notes=tuple(notes), markings=tuple(markings),
                                 time_signatures=tuple(dedup), repeat_onsets=repeat_onsets))

    new_measures = []
    t = Fraction(0)
    for idx in order:
        m = measures[idx]
        length = m.end - m.start
        new_measures.append(Measure(m.number, t, t + length))
        t += length
    return replace(score, parts=tuple(new_parts), measures=tuple(new_measures))


# ---------------------------------------------------------------------------
# debugging dump


def _frac(x):
    return None if x is None else [x.numerator, x.denominator]


def score_to_dict(score: Score) -> dict:
    return {
        "piece_id": score.piece_id,
        "divisions": score.divisions,
        "measures": [{"number": m.number, "start": _frac(m.start), "end": _frac(m.end),
                      "repeat_forward": m.repeat_forward, "repeat_backward": m.repeat_backward,
                      "repeat_times": m.repeat_times, "endings": list(m.endings)}
                     for m in score.measures],
        "parts": [{
            "part_id": p.part_id,
            "raw_name": p.raw_name,
            "instrument": {"name": p.instrument.name, "match_score": p.instrument.match_score},
            "voice": p.voice,
            "transposition": p.transposition,
            "time_signatures": [{"onset": _frac(s.onset), "numerator": s.numerator,
                                 "denominator": s.denominator} for s in p.time_signatures],
            "repeat_onsets": [_frac(t) for t in p.repeat_onsets],
            "markings": [{"kind": m.kind, "value": m.value, "onset": _frac(m.onset),
                          "end": _frac(m.end)} for m in p.markings],
            "notes": [{"onset": _frac(n.onset), "duration": _frac(n.duration), "pitch": n.pitch,
                       "accent": n.accent, "staccato": n.staccato, "fermata": n.fermata}
                      for n in p.notes],
        } for p in score.parts],
    }


def score_to_json(score: Score) -> str:
    """Canonical JSON dump (sorted keys, two-space indent)."""
    return json.dumps(score_to_dict(score), sort_keys=True, indent=2)
