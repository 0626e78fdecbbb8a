import wave
from fractions import Fraction

import numpy as np
import pytest
import scipy.io.wavfile
from hypothesis import given, settings
from hypothesis import strategies as st

from ensemble_dynamics.io import (format_alignment_csv, format_loudness_csv, read_alignment_csv,
                                  read_loudness_csv)
from ensemble_dynamics.targets import (Alignment, AudioFormatError, CoverageError,
                                       DegenerateTargetError, LoudnessCurve,
                                       k_weighting_coefficients, r128_loudness, read_wav,
                                       sample_targets, standardize)

RATE = 48000


def sine(seconds, rate=RATE, freq=1000.0, amp=1.0):
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


def test_coefficient_table_matches_formulas_at_48k():
    table = k_weighting_coefficients(48000)
    # the formula branch, evaluated at 48 kHz, must reproduce the tabulated values
    formula = k_weighting_coefficients(48000.0 + 1e-9)
    for (b1, a1), (b2, a2) in zip(table, formula):
        assert np.allclose(b1, b2, atol=1e-8) and np.allclose(a1, a2, atol=1e-8)


def test_silence_is_all_sentinel():
    curve = r128_loudness(np.zeros(RATE * 2), RATE)
    assert len(curve.times) == 17
    assert np.all(curve.lufs == -np.inf)


def test_sample_count_and_centres():
    curve = r128_loudness(sine(10), RATE)
    assert len(curve.times) == 97
    assert curve.times[0] == pytest.approx(0.2)
    assert np.allclose(np.diff(curve.times), 0.1)


@pytest.mark.parametrize("rate", [48000, 44100])
def test_full_scale_sine_single_channel(rate):
    curve = r128_loudness(sine(3, rate), rate)
    assert np.all(np.abs(curve.lufs[2:] - (-3.01)) < 0.1)


def test_halving_amplitude():
    a = r128_loudness(sine(3), RATE)
    b = r128_loudness(sine(3, amp=0.5), RATE)
    assert np.allclose(b.lufs - a.lufs, -6.0206, atol=1e-3)


def test_short_input_gives_empty_curve():
    assert len(r128_loudness(np.zeros(100), RATE).times) == 0


def test_rejects_bad_layouts():
    with pytest.raises(AudioFormatError):
        r128_loudness(np.zeros((RATE, 3)), RATE)
    with pytest.raises(AudioFormatError):
        r128_loudness(np.zeros(RATE), 4000)
    with pytest.raises(AudioFormatError):
        r128_loudness(np.zeros(RATE, dtype=np.int16), RATE)


def test_shift_by_one_hop():
    rng = np.random.default_rng(0)
    x = rng.normal(scale=0.1, size=RATE * 2)
    a = r128_loudness(x, RATE)
    b = r128_loudness(np.concatenate([np.zeros(RATE // 10), x]), RATE)
    assert np.allclose(b.lufs[1:], a.lufs[:len(b.lufs) - 1], atol=1e-9)


def test_independent_reference_meter():
    pyln = pytest.importorskip("pyloudnorm")
    rng = np.random.default_rng(1)
    x = 0.1 * rng.normal(size=(RATE * 4, 2))
    ours = r128_loudness(x, RATE)
    # for stationary noise the momentary values all sit at the integrated loudness
    ref = pyln.Meter(RATE).integrated_loudness(x)
    assert abs(np.mean(ours.lufs) - ref) < 0.1


# ---------------------------------------------------------------------------
# WAV input


def _write_24bit(path, data, rate):
    ints = np.round(data * (2 ** 23 - 1)).astype(np.int32)
    raw = b"".join(int(v).to_bytes(3, "little", signed=True) for v in ints)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(3)
        w.setframerate(rate)
        w.writeframes(raw)


@pytest.mark.parametrize("fmt", ["int16", "int32", "float32", "int24"])
def test_read_wav_formats(tmp_path, fmt):
    x = 0.5 * np.sin(np.linspace(0, 20, 4800))
    path = tmp_path / f"{fmt}.wav"
    if fmt == "int16":
        scipy.io.wavfile.write(path, RATE, np.round(x * 32767).astype(np.int16))
    elif fmt == "int32":
        scipy.io.wavfile.write(path, RATE, np.round(x * (2 ** 31 - 1)).astype(np.int32))
    elif fmt == "float32":
        scipy.io.wavfile.write(path, RATE, x.astype(np.float32))
    else:
        _write_24bit(path, x, RATE)
    data, rate = read_wav(path)
    assert rate == RATE
    assert np.allclose(data, x, atol=1e-4)


@pytest.mark.filterwarnings("ignore::scipy.io.wavfile.WavFileWarning")
def test_read_wav_rejects_garbage(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"RIFF0000WAVEjunk")
    with pytest.raises(AudioFormatError):
        read_wav(path)


# ---------------------------------------------------------------------------
# sampling


def constant_curve(value, seconds=20.0):
    times = np.arange(0, seconds, 0.1) + 0.2
    return LoudnessCurve(times, np.full(len(times), value))


def test_constant_curve_gives_constant_targets():
    align = Alignment.from_pairs([(Fraction(0), 0.0), (Fraction(3), 1.0), (Fraction(10), 9.5)])
    got = sample_targets(align, constant_curve(0.7), [Fraction(k, 3) for k in range(27)])
    assert np.all(got == 0.7)


def test_sample_time_rule():
    align = Alignment.from_pairs([(Fraction(0), 0.0), (Fraction(16), 8.0)])
    assert align.time_at([Fraction(4) + Fraction(1, 10)])[0] == pytest.approx(2.05, abs=1e-12)


def test_ramp_curve():
    times = np.round(np.arange(0, 101) * 0.1, 10)
    curve = LoudnessCurve(times, times.copy())
    align = Alignment.from_pairs([(Fraction(0), 0.0), (Fraction(10), 10.0)])
    assert sample_targets(align, curve, [Fraction(3)])[0] == pytest.approx(3.1, abs=1e-12)


def test_coverage_error_names_onset():
    align = Alignment.from_pairs([(Fraction(0), 0.0), (Fraction(4), 2.0)])
    with pytest.raises(CoverageError, match="onset 4"):
        sample_targets(align, constant_curve(1.0), [Fraction(0), Fraction(4)])


def test_below_gate_filled_with_margin():
    times = np.arange(5) * 0.1
    curve = LoudnessCurve(times, np.array([-30.0, -np.inf, -20.0, -25.0, -np.inf]))
    assert curve.filled().tolist() == [-30.0, -40.0, -20.0, -25.0, -40.0]
    with pytest.raises(DegenerateTargetError):
        LoudnessCurve(times, np.full(5, -np.inf)).filled()


def test_curve_requires_constant_hop():
    with pytest.raises(ValueError):
        LoudnessCurve(np.array([0.0, 0.1, 0.3]), np.zeros(3))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.2, 2.0), min_size=2, max_size=8),
       st.lists(st.integers(0, 40), min_size=1, max_size=10))
def test_targets_monotone_for_increasing_curve(gaps, onset_ticks):
    beats = [Fraction(2 * k) for k in range(len(gaps) + 1)]
    secs = np.concatenate([[0.0], np.cumsum(gaps)])
    align = Alignment(tuple(beats), secs)
    times = np.arange(0, secs[-1] + 1, 0.1)
    curve = LoudnessCurve(times, np.sqrt(times) - 30)
    top = beats[-1] - Fraction(1, 10)
    onsets = sorted(min(Fraction(t, 4), top) for t in onset_ticks)
    y = sample_targets(align, curve, onsets)
    assert np.all(np.diff(y) >= 0)


# ---------------------------------------------------------------------------
# standardization


def test_standardize_two_points():
    tv = standardize([0.0, 2.0])
    assert tv.values.tolist() == [-1.0, 1.0]
    assert (tv.mean, tv.std) == (1.0, 1.0)


def test_standardize_rejects_degenerate():
    with pytest.raises(DegenerateTargetError):
        standardize([3.0, 3.0, 3.0])
    with pytest.raises(DegenerateTargetError):
        standardize([1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-80, 0, allow_nan=False), min_size=2, max_size=200))
def test_standardize_moments_and_inverse(raw):
    raw = np.array(raw)
    if np.ptp(raw) < 1e-6:
        return
    tv = standardize(raw)
    assert abs(tv.values.mean()) < 1e-9
    assert abs(tv.values.var() - 1.0) < 1e-9
    # independent two-pass recomputation
    mu = sum(raw) / len(raw)
    sd = (sum((v - mu) ** 2 for v in raw) / len(raw)) ** 0.5
    assert tv.mean == pytest.approx(mu, rel=1e-12, abs=1e-12)
    assert tv.std == pytest.approx(sd, rel=1e-9)
    assert np.allclose(tv.destandardize(), raw, rtol=1e-12, atol=1e-12 * np.abs(raw).max())


# ---------------------------------------------------------------------------
# CSV formats


def test_csv_round_trips():
    entries = [(Fraction(0), 0.0), (Fraction(7, 3), 1.25)]
    assert read_alignment_csv(format_alignment_csv(entries)) == entries
    times, lufs = np.array([0.2, 0.3]), np.array([-23.5, -np.inf])
    t2, l2 = read_loudness_csv(format_loudness_csv(times, lufs))
    assert np.array_equal(t2, times) and np.array_equal(l2, lufs)
    assert read_alignment_csv("0,1,0.0\n1,1,0.5\n") == [(Fraction(0), 0.0), (Fraction(1), 0.5)]
