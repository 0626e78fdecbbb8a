from fractions import Fraction
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_part
from ensemble_dynamics.basis import (ANTICIPATION_LONG, ANTICIPATION_SHORT, FIXED_LABELS,
                                     LabelKind, articulation_impulses, default_policy,
                                     duration_and_ioi, dynamics_bases, extract_part_bases,
                                     format_label, metrical_bases, parse_label, pitch_poly,
                                     read_sparse_csv, vertical_neighbors)
from ensemble_dynamics.score import CONSTANT_DYNAMICS, TimeSignature


def test_pitch_poly():
    assert pitch_poly(0) == (0, 0, 0)
    assert pitch_poly(127) == (1, 1, 1)
    assert np.allclose(pitch_poly(60), (0.472441, 0.223200, 0.105449), atol=5e-7)


def test_vertical_neighbors():
    assert vertical_neighbors([60], 0) == (0, 0, 0)
    assert vertical_neighbors([60, 64, 67], 1) == (1, 1, 2)
    assert vertical_neighbors([60, 60], 0) == (0, 0, 1)


@pytest.mark.parametrize("onset, sig, label", [
    (4, (0, 4, 4), "metrical.4/4.beat0"),
    (Fraction(9, 2), (0, 4, 4), "metrical.4/4.offbeat"),
    (5, (0, 3, 4), "metrical.3/4.beat2"),
    (Fraction(5, 2), (0, 6, 8), "metrical.6/8.beat5"),
    (7, (4, 3, 4), "metrical.3/4.beat0"),
])
def test_metrical_bases(onset, sig, label):
    assert metrical_bases(Fraction(onset), TimeSignature(Fraction(sig[0]), sig[1], sig[2])) == {label: 1.0}


def test_duration_and_ioi():
    assert duration_and_ioi(make_part([(0, 1, 60), (1, 1, 62)]))[0] == (1, 1)
    assert duration_and_ioi(make_part([(0, 2, 60), (1, 1, 62)]))[0] == (2, 1)
    assert duration_and_ioi(make_part([(0, 1, 60), (1, 2, 62)]))[1] == (2, 2)


def test_articulation_impulses():
    part = make_part([(0, 1, 60, {"accent": True}), (1, 1, 62), (2, 2, 64, {"fermata": True}),
                      (2, 2, 67, {"fermata": True})])
    cols = articulation_impulses(part)
    assert list(cols["impulse.accent"]) == [1, 0, 0, 0]
    assert list(cols["impulse.fermata"]) == [0, 0, 1, 1]
    assert "impulse.staccato" not in cols
    plain = make_part([(0, 1, 60)])
    assert articulation_impulses(plain) == {}


def test_repeat_sign_impulse_snaps_to_next_note():
    part = make_part([(0, 2, 60), (2, 2, 62), (4, 2, 64)], repeat_onsets=[0, Fraction(3)])
    assert list(articulation_impulses(part)["impulse.repeat-sign"]) == [1, 0, 1]


def _sixteen_beats(markings=()):
    return make_part([(t, 1, 60) for t in range(16)], markings)


def test_lone_forte_step():
    cols = dynamics_bases(_sixteen_beats([("dynamic", "f", 8)]))
    step = cols["dyn.f.step"]
    assert list(step) == [0.0] * 8 + [1.0] * 8


def test_crescendo_then_forte():
    cols = dynamics_bases(_sixteen_beats([("wedge", "crescendo", 0, 4), ("dynamic", "f", 8)]))
    ramp = cols["dyn.crescendo.ramp"]
    assert ramp[2] == 0.5
    assert ramp[6] == 1.0
    assert ramp[8] == 0.0
    assert list(cols["dyn.f.step"][7:9]) == [0.0, 1.0]


def test_anticipation_clipped_at_previous_constant():
    cols = dynamics_bases(_sixteen_beats([("dynamic", "p", 0), ("dynamic", "f", 4)]))
    assert cols["dyn.f.antic.short"][3] == 0.0 and cols["dyn.f.antic.short"][4] == 1.0
    # long anticipation would start at -4 but is clipped to the p at 0
    assert np.allclose(cols["dyn.f.antic.long"][:6], [0, 0.25, 0.5, 0.75, 1.0, 0])
    # the first marking's long ramp starts at -8 and only its end is inside the part
    assert cols["dyn.p.antic.long"][0] == 1.0


def test_no_markings_no_dynamics_columns():
    assert dynamics_bases(_sixteen_beats()) == {}


def test_single_note_columns():
    m = extract_part_bases(make_part([(0, 1, 60)]))
    assert m.labels == FIXED_LABELS + ["metrical.4/4.beat0"]


def test_mixed_marking_fixture_labels():
    notes = [(t, 1, 60 + t % 5, {"accent": t == 6}) for t in range(12)]
    marks = [("dynamic", "p", 0), ("wedge", "crescendo", 2, 6), ("dynamic", "f", 8),
             ("impulse", "marcato", 6)]
    labels = set(extract_part_bases(make_part(notes, marks)).labels)
    assert {"dyn.p.step", "dyn.crescendo.ramp", "dyn.f.step", "impulse.marcato",
            "impulse.accent"} <= labels


def test_sparse_csv_round_trip():
    part = make_part([(0, 1, 60), (Fraction(1, 2), 1, 64), (Fraction(1, 2), 1, 67)],
                     [("dynamic", "mf", 0)])
    m = extract_part_bases(part)
    text = m.to_sparse_csv()
    assert text.splitlines()[0] == ",".join(m.labels)
    back = read_sparse_csv(text, m.instrument)
    assert back.labels == m.labels and back.onsets == m.onsets
    assert np.array_equal(back.values, m.values)


# ---------------------------------------------------------------------------
# label grammar


def test_label_round_trip_examples():
    for label in ["pitch", "pitch^2", "pitch^3", "duration", "ioi", "neighbors.total",
                  "metrical.12/8.beat11", "metrical.4/4.offbeat", "dyn.ppp.step",
                  "dyn.mf.antic.long", "dyn.diminuendo.ramp", "impulse.repeat-sign",
                  "impulse.fp", "const"]:
        assert format_label(parse_label(label)) == label


@pytest.mark.parametrize("label", ["pitch^4", "dyn.sfz.step", "metrical.4/4.beatx", "loudness"])
def test_bad_labels_rejected(label):
    with pytest.raises(ValueError):
        parse_label(label)


def test_default_policies():
    assert default_policy("pitch^2") == "mean"
    assert default_policy("ioi") == "mean"
    assert default_policy("neighbors.lower") == "sum"
    assert default_policy("dyn.f.step") == "max"
    assert default_policy("metrical.3/4.beat1") == "max"


# ---------------------------------------------------------------------------
# naive oracle


def oracle_value(part, i, label):
    """Evaluate one basis on one note straight from the definitions."""
    note = part.notes[i]
    x = note.onset
    xs = [n.onset for n in part.notes]
    p = note.pitch + part.transposition
    kind = parse_label(label)
    consts = sorted((m.onset, m.value) for m in part.markings if m.kind == "dynamic")
    if kind.group == "pitch":
        return (p / 127) ** kind.arg
    if label == "duration":
        return float(note.duration)
    if label == "ioi":
        later = [t for t in xs if t > x]
        return float(min(later) - x) if later else float(note.duration)
    if kind.group == "neighbors":
        others = [part.notes[j].pitch for j in range(len(xs)) if j != i and xs[j] == x]
        return float({"lower": sum(q < note.pitch for q in others),
                      "higher": sum(q > note.pitch for q in others),
                      "total": len(others)}[kind.name])
    if kind.group == "metrical":
        sig = [s for s in part.time_signatures if s.onset <= x][-1]
        bar = Fraction(4 * sig.numerator, sig.denominator)
        rel = x - sig.onset
        pos = rel - bar * math.floor(rel / bar)
        units = pos / Fraction(4, sig.denominator)
        name = f"{sig.numerator}/{sig.denominator}"
        if name != kind.name:
            return 0.0
        if units.denominator != 1:
            return float(kind.arg == "offbeat")
        return float(kind.arg == f"beat{units.numerator}")
    if kind.group == "step":
        best = 0.0
        for k, (t, v) in enumerate(consts):
            nxt = consts[k + 1][0] if k + 1 < len(consts) else None
            if v == kind.name and t <= x and (nxt is None or x < nxt):
                best = 1.0
        return best
    if kind.group == "anticipation":
        L = ANTICIPATION_SHORT if kind.arg == "short" else ANTICIPATION_LONG
        best = 0.0
        for k, (t, v) in enumerate(consts):
            if v != kind.name:
                continue
            start = t - L
            if k > 0:
                start = max(start, consts[k - 1][0])
            if start < t and start <= x <= t:
                best = max(best, float((x - start) / (t - start)))
        return best
    if kind.group == "ramp":
        best = 0.0
        for m in part.markings:
            if m.kind != "wedge" or m.value != kind.name:
                continue
            stop = min([t for t, _ in consts if t > m.onset], default=None)
            if x < m.onset or (stop is not None and x >= stop):
                continue
            best = max(best, min(float((x - m.onset) / (m.end - m.onset)), 1.0))
        return best
    if kind.group == "impulse":
        if kind.name in ("accent", "staccato", "fermata"):
            return float(getattr(note, kind.name))
        if kind.name == "repeat-sign":
            targets = part.repeat_onsets
        else:
            targets = [m.onset for m in part.markings if m.kind == "impulse" and m.value == kind.name]
        for t in targets:
            first = min([o for o in xs if o >= t], default=None)
            if first == x:
                return 1.0
        return 0.0
    raise AssertionError(label)


def candidate_labels(part):
    labels = set(FIXED_LABELS)
    for s in part.time_signatures:
        name = f"{s.numerator}/{s.denominator}"
        labels |= {f"metrical.{name}.beat{k}" for k in range(s.numerator)}
        labels.add(f"metrical.{name}.offbeat")
    for m in part.markings:
        if m.kind == "dynamic":
            labels |= {f"dyn.{m.value}.step", f"dyn.{m.value}.antic.short",
                       f"dyn.{m.value}.antic.long"}
        elif m.kind == "wedge":
            labels.add(f"dyn.{m.value}.ramp")
        else:
            labels.add(f"impulse.{m.value}")
    labels |= {"impulse.accent", "impulse.staccato", "impulse.fermata", "impulse.repeat-sign"}
    return labels


def oracle_matrix(part):
    cols = {}
    for label in sorted(candidate_labels(part)):
        col = [oracle_value(part, i, label) for i in range(len(part.notes))]
        if label in FIXED_LABELS or any(col):
            cols[label] = col
    return cols


halves = st.integers(0, 32).map(lambda k: Fraction(k, 2))


@st.composite
def random_parts(draw):
    n = draw(st.integers(1, 20))
    notes = []
    for _ in range(n):
        flags = {"accent": draw(st.booleans()), "staccato": draw(st.booleans()),
                 "fermata": draw(st.sampled_from([False, False, True]))}
        notes.append((draw(halves), Fraction(draw(st.integers(1, 8)), 2),
                      draw(st.integers(30, 100)), flags))
    markings = []
    used_const = set()
    for _ in range(draw(st.integers(0, 3))):
        kind = draw(st.sampled_from(["dynamic", "wedge", "impulse"]))
        t = draw(halves)
        if kind == "dynamic":
            if t in used_const:
                continue
            used_const.add(t)
            markings.append(("dynamic", draw(st.sampled_from(CONSTANT_DYNAMICS)), t))
        elif kind == "wedge":
            e = t + Fraction(draw(st.integers(1, 12)), 2)
            markings.append(("wedge", draw(st.sampled_from(["crescendo", "diminuendo"])), t, e))
        else:
            markings.append(("impulse", draw(st.sampled_from(["sfz", "fp", "marcato"])), t))
    sigs = [(0, *draw(st.sampled_from([(4, 4), (3, 4), (6, 8), (2, 2)])))]
    if draw(st.booleans()):
        sigs.append((draw(st.sampled_from([4, 6, 8])), *draw(st.sampled_from([(3, 4), (5, 8)]))))
    repeats = draw(st.lists(halves, max_size=2, unique=True))
    return make_part(notes, markings, sigs=sigs, repeat_onsets=sorted(repeats))


@settings(max_examples=200, deadline=None)
@given(random_parts())
def test_extract_matches_naive_oracle(part):
    m = extract_part_bases(part)
    expected = oracle_matrix(part)
    assert set(m.labels) == set(expected)
    for label, col in expected.items():
        assert np.array_equal(m.column(label), np.array(col)), label


@settings(max_examples=200, deadline=None)
@given(random_parts())
def test_basis_value_ranges(part):
    m = extract_part_bases(part)
    assert np.all(np.isfinite(m.values))
    for label in m.labels:
        group = parse_label(label).group
        col = m.column(label)
        if group in ("step", "impulse", "metrical"):
            assert set(np.unique(col)) <= {0.0, 1.0}
        if group in ("ramp", "anticipation", "pitch"):
            assert np.all((col >= 0) & (col <= 1))
        if group == "step":
            # a single rectangular pulse over the onset-ordered notes
            order = np.argsort([float(t) for t in m.onsets], kind="stable")
            seq = col[order]
            changes = np.count_nonzero(np.diff(seq))
            assert changes <= 2 and (changes < 2 or seq[0] == 0)
    assert len(set(m.labels)) == len(m.labels)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(["pitch", "duration", "neighbors", "metrical", "step", "anticipation",
                        "ramp", "impulse"]), st.data())
def test_label_grammar_round_trip(group, data):
    if group == "pitch":
        kind = LabelKind("pitch", "pitch", data.draw(st.sampled_from([1, 2, 3])))
    elif group == "duration":
        kind = LabelKind(group, data.draw(st.sampled_from(["duration", "ioi"])), None)
    elif group == "neighbors":
        kind = LabelKind(group, data.draw(st.sampled_from(["lower", "higher", "total"])), None)
    elif group == "metrical":
        num, den = data.draw(st.integers(1, 16)), data.draw(st.sampled_from([1, 2, 4, 8, 16]))
        pos = data.draw(st.one_of(st.just("offbeat"), st.integers(0, 15).map(lambda k: f"beat{k}")))
        kind = LabelKind(group, f"{num}/{den}", pos)
    elif group == "step":
        kind = LabelKind(group, data.draw(st.sampled_from(CONSTANT_DYNAMICS)), None)
    elif group == "anticipation":
        kind = LabelKind(group, data.draw(st.sampled_from(CONSTANT_DYNAMICS)),
                         data.draw(st.sampled_from(["short", "long"])))
    elif group == "ramp":
        kind = LabelKind(group, data.draw(st.sampled_from(["crescendo", "diminuendo"])), None)
    else:
        kind = LabelKind(group, data.draw(st.sampled_from(
            ["sfz", "fp", "marcato", "accent", "staccato", "fermata", "repeat-sign"])), None)
    label = format_label(kind)
    assert parse_label(label) == kind
    assert format_label(parse_label(label)) == label
