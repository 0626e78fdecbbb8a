"""Loudness targets: R128 momentary loudness, onset sampling and standardization."""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.signal

LOGGER = logging.getLogger(__name__)

WINDOW_SECONDS = 0.4
HOP_SECONDS = 0.1
ABSOLUTE_GATE = -70.0
BELOW_GATE = -np.inf
SENTINEL_MARGIN = 10.0
DEFAULT_DELTA = Fraction(1, 10)

# BS.1770 pre-filter and RLB high-pass coefficients at 48 kHz
_SHELF_48K = ([1.53512485958697, -2.69169618940638, 1.19839281085285],
              [1.0, -1.69065929318241, 0.73248077421585])
_HIGHPASS_48K = ([1.0, -2.0, 1.0],
                 [1.0, -1.99004745483398, 0.99007225036621])


class AudioFormatError(ValueError):
    pass


class CoverageError(ValueError):
    pass


class DegenerateTargetError(ValueError):
    pass


def k_weighting_coefficients(rate):
    """``[(b, a), (b, a)]`` for the shelving and high-pass stages at ``rate`` Hz.

    At 48 kHz the tabulated coefficients are returned unchanged; other
    rates use the bilinear-transform designs the table was derived from.
    """
    if rate == 48000:
        return [tuple(np.array(c) for c in _SHELF_48K), tuple(np.array(c) for c in _HIGHPASS_48K)]
    f0 = 1681.974450955533
    gain_db = 3.999843853973347
    q = 0.7071752369554196
    k = np.tan(np.pi * f0 / rate)
    vh = 10.0 ** (gain_db / 20.0)
    vb = vh ** 0.4996667741545416
    a0 = 1.0 + k / q + k * k
    shelf_b = np.array([(vh + vb * k / q + k * k) / a0, 2.0 * (k * k - vh) / a0,
                        (vh - vb * k / q + k * k) / a0])
    shelf_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])

    f0 = 38.13547087602444
    q = 0.5003270373238773
    k = np.tan(np.pi * f0 / rate)
    hp_b = np.array([1.0, -2.0, 1.0])
    hp_a = np.array([1.0, 2.0 * (k * k - 1.0) / (1.0 + k / q + k * k),
                     (1.0 - k / q + k * k) / (1.0 + k / q + k * k)])
    return [(shelf_b, shelf_a), (hp_b, hp_a)]


@dataclass(frozen=True)
class LoudnessCurve:
    times: np.ndarray
    lufs: np.ndarray
    hop: float = HOP_SECONDS
    gate: float = ABSOLUTE_GATE
    window: float = WINDOW_SECONDS

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        lufs = np.asarray(self.lufs, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "lufs", lufs)
        if times.shape != lufs.shape:
            raise ValueError("times and loudness differ in length")
        if len(times) > 1:
            steps = np.diff(times)
            if np.any(steps <= 0):
                raise ValueError("loudness curve times must be strictly increasing")
            if np.max(np.abs(steps - self.hop)) > 1e-6 * max(self.hop, 1e-9) + 1e-9:
                raise ValueError(f"loudness curve hop is not constant {self.hop}")
        if np.any(np.isnan(lufs)) or np.any(lufs == np.inf):
            raise ValueError("loudness must be finite or the below-gate sentinel")

    @classmethod
    def from_samples(cls, times, lufs):
        times = np.asarray(times, dtype=float)
        hop = float(np.median(np.diff(times))) if len(times) > 1 else HOP_SECONDS
        return cls(times, lufs, hop)

    def filled(self, margin=SENTINEL_MARGIN) -> np.ndarray:
        """Loudness with below-gate samples replaced by (minimum finite - margin)."""
        finite = np.isfinite(self.lufs)
        if not finite.any():
            raise DegenerateTargetError("loudness curve is entirely below the gate")
        floor = self.lufs[finite].min() - margin
        return np.where(finite, self.lufs, floor)


def _as_channels(samples):
    x = np.asarray(samples)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] not in (1, 2):
        raise AudioFormatError(f"expected mono or stereo samples, got shape {np.shape(samples)}")
    if np.issubdtype(x.dtype, np.integer):
        raise AudioFormatError("integer samples must be scaled to [-1, 1] first (see read_wav)")
    return x.astype(float)


def r128_loudness(samples, rate) -> LoudnessCurve:
    """Momentary (400 ms, ungated) loudness every 100 ms.

    ``samples`` is ``(n,)`` or ``(n, channels)`` float PCM with one or two
    channels.  Each value is ``-0.691 + 10 log10(sum of per-channel mean
    squares)`` of the K-weighted signal; windows below -70 LUFS hold the
    sentinel ``-inf``.  Times are window centres.
    """
    if rate < 8000:
        raise AudioFormatError(f"sample rate {rate} Hz below 8 kHz")
    x = _as_channels(samples)
    for b, a in k_weighting_coefficients(rate):
        x = scipy.signal.lfilter(b, a, x, axis=0)
    win = int(round(WINDOW_SECONDS * rate))
    hop = int(round(HOP_SECONDS * rate))
    n = x.shape[0]
    if n < win:
        return LoudnessCurve(np.zeros(0), np.zeros(0))
    count = (n - win) // hop + 1
    # channel weights are 1.0 for left/right/centre
    power = np.sum(x * x, axis=1)
    csum = np.concatenate([[0.0], np.cumsum(power)])
    starts = np.arange(count) * hop
    ms = (csum[starts + win] - csum[starts]) / win
    ms = np.maximum(ms, 0.0)
    with np.errstate(divide="ignore"):
        lufs = -0.691 + 10.0 * np.log10(ms)
    lufs = np.where(lufs < ABSOLUTE_GATE, BELOW_GATE, lufs)
    times = (starts + win / 2.0) / rate
    return LoudnessCurve(times, lufs, hop / rate)


def read_wav(path):
    """Read a RIFF WAV file as float samples in [-1, 1] and its rate."""
    import scipy.io.wavfile
    try:
        rate, data = scipy.io.wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise AudioFormatError(f"{path}: unsupported or corrupt WAV ({exc})") from exc
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        # 24-bit samples arrive left-justified in int32
        data = data / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(float) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(float)
    else:
        raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}")
    if data.ndim == 2 and data.shape[1] > 2:
        raise AudioFormatError(f"{path}: {data.shape[1]} channels, only mono/stereo supported")
    return data, rate


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Alignment:
    """Monotone map from score beats to performance seconds."""

    beats: tuple
    seconds: np.ndarray

    def __post_init__(self):
        beats = tuple(Fraction(b) for b in self.beats)
        seconds = np.asarray(self.seconds, dtype=float)
        object.__setattr__(self, "beats", beats)
        object.__setattr__(self, "seconds", seconds)
        if len(beats) != len(seconds) or len(beats) < 2:
            raise ValueError("alignment needs at least two (beat, seconds) pairs")
        if any(b <= a for a, b in zip(beats, beats[1:])):
            raise ValueError("alignment beats must be strictly increasing")
        if np.any(np.diff(seconds) <= 0):
            raise ValueError("alignment times must be strictly increasing")

    @classmethod
    def from_pairs(cls, pairs):
        pairs = list(pairs)
        return cls(tuple(b for b, _ in pairs), np.array([s for _, s in pairs]))

    def time_at(self, beats) -> np.ndarray:
        """Piecewise-linear performance time for each beat position."""
        beats = list(beats)
        lo, hi = self.beats[0], self.beats[-1]
        for b in beats:
            if b < lo or b > hi:
                raise CoverageError(f"beat {b} outside alignment range [{lo}, {hi}]")
        return _interp_exact(beats, self.beats, self.seconds)


def _interp_exact(xq, xs, ys):
    """Linear interpolation with the segment position computed in exact arithmetic."""
    out = np.empty(len(xq))
    for i, x in enumerate(xq):
        k = max(bisect.bisect_right(xs, x) - 1, 0)
        if k >= len(xs) - 1:
            out[i] = ys[-1]
            continue
        frac = (x - xs[k]) / (xs[k + 1] - xs[k])
        out[i] = ys[k] + float(frac) * (ys[k + 1] - ys[k])
    return out


def sample_targets(alignment: Alignment, curve: LoudnessCurve, onsets, delta=DEFAULT_DELTA) -> np.ndarray:
    """Loudness at ``onset + delta`` beats for each onset.

    Beats map to seconds through the alignment; the loudness curve is then
    linearly interpolated (held constant beyond its ends).
    """
    delta = Fraction(delta).limit_denominator(10**9) if not isinstance(delta, Fraction) else delta
    if delta < 0:
        raise ValueError("delta must be non-negative")
    positions = []
    lo, hi = alignment.beats[0], alignment.beats[-1]
    for t in onsets:
        b = Fraction(t) + delta
        if b < lo or b > hi:
            raise CoverageError(f"onset {t} (+{delta}) outside alignment range [{lo}, {hi}]")
        positions.append(b)
    times = alignment.time_at(positions)
    if len(curve.times) == 0:
        raise CoverageError("empty loudness curve")
    return np.interp(times, curve.times, curve.filled())


@dataclass(frozen=True)
class TargetVector:
    values: np.ndarray
    mean: float
    std: float

    def __len__(self):
        return len(self.values)

    def destandardize(self, y=None) -> np.ndarray:
        y = self.values if y is None else np.asarray(y, dtype=float)
        return y * self.std + self.mean


def standardize(raw) -> TargetVector:
    """Zero mean, unit (population) variance per piece."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 1 or len(raw) < 2:
        raise DegenerateTargetError("need at least two target values")
    mu = float(np.mean(raw))
    centred = raw - mu
    s = float(np.sqrt(np.mean(centred * centred)))
    if not s > 0 or not np.isfinite(s):
        raise DegenerateTargetError("constant target vector cannot be standardized")
    y = centred / s
    # second pass removes residual rounding in the mean
    y = y - y.mean()
    return TargetVector(y, mu, s)
