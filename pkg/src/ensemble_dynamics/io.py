"""Small file helpers: atomic writes and the CSV formats used between stages."""

import csv
import io
import os
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf8"))


def _rows(path_or_text):
    if isinstance(path_or_text, (str, os.PathLike)) and "\n" not in str(path_or_text):
        text = Path(path_or_text).read_text()
    else:
        text = str(path_or_text)
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    # optional header line
    if rows:
        try:
            float(rows[0][0])
        except ValueError:
            rows = rows[1:]
    return rows


def read_alignment_csv(path_or_text):
    """``beat_num,beat_den,seconds`` rows -> list of ``(Fraction, float)``."""
    return [(Fraction(int(r[0]), int(r[1])), float(r[2])) for r in _rows(path_or_text)]


def format_alignment_csv(entries) -> str:
    lines = ["beat_num,beat_den,seconds"]
    lines += [f"{Fraction(b).numerator},{Fraction(b).denominator},{float(s)!r}" for b, s in entries]
    return "\n".join(lines) + "\n"


def read_loudness_csv(path_or_text):
    """``seconds,lufs`` rows -> ``(times, lufs)`` arrays; ``-inf`` marks below-gate windows."""
    rows = _rows(path_or_text)
    times = np.array([float(r[0]) for r in rows])
    lufs = np.array([float(r[1]) for r in rows])
    return times, lufs


def format_loudness_csv(times, lufs) -> str:
    lines = ["seconds,lufs"]
    lines += [f"{float(t)!r},{float(v)!r}" for t, v in zip(times, lufs)]
    return "\n".join(lines) + "\n"
