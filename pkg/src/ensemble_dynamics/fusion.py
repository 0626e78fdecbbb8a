"""Combine per-part basis matrices into instrument-class, piece and dataset matrices.

merge
    stack the rows of all parts of one instrument class, ordered by onset
fuse
    reduce rows sharing an onset to a single row, per column policy
aggregate_piece
    place every class block on the piece-wide onset union
assemble_dataset
    embed piece matrices into one global column index
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .basis import (POLICIES, BasisDescriptor, PartBasisMatrix, _group_order,
                    default_policy, extract_part_bases, neighbor_counts, parse_label)
from .score import Score, unfold_repeats

LOGGER = logging.getLogger(__name__)

NEIGHBOR_LABELS = ("neighbors.lower", "neighbors.higher", "neighbors.total")


class ContractError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class ClassBasisMatrix:
    instrument: str
    onsets: list
    descriptors: list
    values: np.ndarray

    @property
    def labels(self):
        return [d.label for d in self.descriptors]


@dataclass
class PieceMatrix:
    piece_id: str
    onsets: list
    descriptors: list
    matrix: sp.csr_matrix

    @property
    def shape(self):
        return self.matrix.shape

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass
class DatasetMatrix:
    descriptors: list
    piece_ids: list
    offsets: list
    matrix: sp.csr_matrix
    singular: list = field(default_factory=list)

    @property
    def shape(self):
        return self.matrix.shape

    def rows(self, piece_id):
        k = self.piece_ids.index(piece_id)
        return slice(self.offsets[k], self.offsets[k + 1])

    def block(self, piece_id) -> np.ndarray:
        return self.matrix[self.rows(piece_id)].toarray()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for d in self.descriptors:
            h.update(f"{d.instrument}\x1f{d.label}\x1e".encode())
        return h.hexdigest()


def resolve_policy(label, overrides=None):
    """Policy for ``label``: an override by exact label, then by basis group, then the default."""
    if overrides:
        if label in overrides:
            pol = overrides[label]
        else:
            pol = overrides.get(parse_label(label).group)
        if pol is not None:
            if pol not in POLICIES:
                raise ConfigurationError(f"unknown fusion policy {pol!r} for {label}")
            return pol
    return default_policy(label)


def merge(parts) -> PartBasisMatrix:
    """Stack same-class part matrices; rows ordered by onset, ties kept in part order."""
    parts = list(parts)
    if not parts:
        raise ContractError("nothing to merge")
    classes = {p.instrument for p in parts}
    if len(classes) > 1:
        raise ContractError(f"cannot merge parts of different instrument classes: {sorted(classes)}")
    if len(parts) == 1:
        p = parts[0]
        return PartBasisMatrix(p.instrument, list(p.onsets), list(p.labels), p.values.copy(),
                               p.pitches.copy(), dict(p.policies))
    labels = []
    seen = set()
    for p in parts:
        for lab in p.labels:
            if lab not in seen:
                seen.add(lab)
                labels.append(lab)
    labels.sort(key=_group_order)
    col = {lab: j for j, lab in enumerate(labels)}
    keyed = []
    for pi, p in enumerate(parts):
        idx = [col[lab] for lab in p.labels]
        for r, t in enumerate(p.onsets):
            keyed.append((t, pi, r, p, idx))
    keyed.sort(key=lambda k: (k[0], k[1], k[2]))
    values = np.zeros((len(keyed), len(labels)))
    onsets, pitches = [], []
    for i, (t, _, r, p, idx) in enumerate(keyed):
        values[i, idx] = p.values[r]
        onsets.append(t)
        pitches.append(p.pitches[r])
    policies = {}
    for p in parts:
        policies.update(p.policies)
    return PartBasisMatrix(parts[0].instrument, onsets, labels, values, np.array(pitches), policies)


def recount_neighbors(merged: PartBasisMatrix) -> PartBasisMatrix:
    """Recompute vertical-neighbor columns over all notes of the merged class."""
    counts = neighbor_counts(merged.onsets, merged.pitches)
    values = merged.values.copy()
    for k, lab in enumerate(NEIGHBOR_LABELS):
        if lab in merged.labels:
            values[:, merged.labels.index(lab)] = counts[:, k]
    return PartBasisMatrix(merged.instrument, list(merged.onsets), list(merged.labels), values,
                           merged.pitches.copy(), dict(merged.policies))


_REDUCERS = {
    "max": lambda block: block.max(axis=0),
    "mean": lambda block: block.mean(axis=0),
    "sum": lambda block: block.sum(axis=0),
}


def fuse(merged: PartBasisMatrix, policies=None) -> ClassBasisMatrix:
    """One row per distinct onset; each column reduced with its fusion policy.

    ``policies`` maps labels (or basis groups) to ``"max"``, ``"mean"`` or
    ``"sum"``; unlisted columns use :func:`default_policy`.
    """
    if any(b < a for a, b in zip(merged.onsets, merged.onsets[1:])):
        raise ContractError("merged rows must be sorted by onset")
    pols = [resolve_policy(lab, policies) for lab in merged.labels]
    for p in pols:
        if p not in _REDUCERS:
            raise ConfigurationError(f"unknown fusion policy {p!r}")
    onsets = []
    starts = []
    for i, t in enumerate(merged.onsets):
        if not onsets or t != onsets[-1]:
            onsets.append(t)
            starts.append(i)
    bounds = starts + [len(merged.onsets)]
    out = np.zeros((len(onsets), len(merged.labels)))
    by_policy = {}
    for j, p in enumerate(pols):
        by_policy.setdefault(p, []).append(j)
    for r in range(len(onsets)):
        block = merged.values[bounds[r]:bounds[r + 1]]
        for p, cols in by_policy.items():
            out[r, cols] = _REDUCERS[p](block[:, cols])
    descriptors = [BasisDescriptor(merged.instrument, lab, p) for lab, p in zip(merged.labels, pols)]
    return ClassBasisMatrix(merged.instrument, onsets, descriptors, out)


def aggregate_piece(classes, piece_id="piece") -> PieceMatrix:
    """Place the class blocks side by side on the union of their onsets."""
    classes = list(classes)
    if not classes:
        raise ContractError("aggregate_piece needs at least one class matrix")
    keys = set()
    descriptors = []
    for c in classes:
        for d in c.descriptors:
            if d.key in keys:
                raise ContractError(f"duplicate basis {d.key} in piece {piece_id}")
            keys.add(d.key)
            descriptors.append(d)
    onsets = sorted({t for c in classes for t in c.onsets})
    row_of = {t: i for i, t in enumerate(onsets)}
    rows, cols, vals = [], [], []
    offset = 0
    for c in classes:
        r_idx = np.array([row_of[t] for t in c.onsets], dtype=int)
        nz_r, nz_c = np.nonzero(c.values)
        rows.append(r_idx[nz_r])
        cols.append(nz_c + offset)
        vals.append(c.values[nz_r, nz_c])
        offset += len(c.descriptors)
    mat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(len(onsets), offset))
    mat.sort_indices()
    return PieceMatrix(piece_id, onsets, descriptors, mat)


def assemble_dataset(pieces, add_const=False) -> DatasetMatrix:
    """Stack piece matrices over the global descriptor index.

    Pieces are ordered by id and descriptors indexed in first-seen order,
    so the result does not depend on input order.  With ``add_const`` a
    trailing all-ones ``const`` column is appended.  ``singular`` lists
    ``(descriptor, piece_id)`` for bases active in exactly one piece.
    """
    pieces = sorted(pieces, key=lambda p: p.piece_id)
    if not pieces:
        raise ContractError("assemble_dataset needs at least one piece")
    index = OrderedDict()
    for p in pieces:
        for d in p.descriptors:
            index.setdefault(d.key, d)
    if add_const:
        index.setdefault(("*", "const"), BasisDescriptor("*", "const", "max"))
    col_of = {k: j for j, k in enumerate(index)}
    k_s = len(index)
    blocks, offsets = [], [0]
    active_in = {}
    for p in pieces:
        m = p.matrix.tocoo()
        mapping = np.array([col_of[d.key] for d in p.descriptors], dtype=int)
        new_cols = mapping[m.col] if m.nnz else m.col
        rows, cols, vals = m.row, new_cols, m.data
        if add_const:
            n = p.matrix.shape[0]
            rows = np.concatenate([rows, np.arange(n)])
            cols = np.concatenate([cols, np.full(n, col_of[("*", "const")])])
            vals = np.concatenate([vals, np.ones(n)])
        block = sp.csr_matrix((vals, (rows, cols)), shape=(p.matrix.shape[0], k_s))
        block.sort_indices()
        blocks.append(block)
        offsets.append(offsets[-1] + p.matrix.shape[0])
        for j in np.unique(mapping[m.col[m.data != 0]]) if m.nnz else []:
            active_in.setdefault(int(j), []).append(p.piece_id)
    matrix = sp.vstack(blocks, format="csr") if blocks else sp.csr_matrix((0, k_s))
    descriptors = list(index.values())
    singular = [(descriptors[j], ids[0]) for j, ids in sorted(active_in.items()) if len(ids) == 1]
    return DatasetMatrix(descriptors, [p.piece_id for p in pieces], offsets, matrix, singular)


def project(piece: PieceMatrix, descriptors) -> np.ndarray:
    """Dense piece matrix laid out over a given descriptor list (missing columns are 0)."""
    col_of = {d.key: j for j, d in enumerate(descriptors)}
    out = np.zeros((piece.matrix.shape[0], len(descriptors)))
    dense = piece.dense()
    for j, d in enumerate(piece.descriptors):
        if d.key in col_of:
            out[:, col_of[d.key]] = dense[:, j]
    if ("*", "const") in col_of:
        out[:, col_of[("*", "const")]] = 1.0
    return out


# ---------------------------------------------------------------------------
# score -> piece matrix


def class_matrices(score: Score, policies=None):
    """Per-class fused matrices for a score, classes in order of first appearance."""
    groups = OrderedDict()
    for part in score.parts:
        groups.setdefault(part.instrument.name, []).append(extract_part_bases(part))
    out = []
    for name, mats in groups.items():
        merged = recount_neighbors(merge(mats))
        out.append(fuse(merged, policies))
    return out


def score_to_piece_matrix(score: Score, policies=None, unfold=True) -> PieceMatrix:
    if unfold:
        score = unfold_repeats(score)
    return aggregate_piece(class_matrices(score, policies), score.piece_id)


# ---------------------------------------------------------------------------
# serialization


def _frac(t):
    return [t.numerator, t.denominator]


def write_piece_matrix(piece: PieceMatrix, prefix) -> tuple:
    """Write ``<prefix>.triplets`` (``row col value`` lines) and ``<prefix>.json``."""
    from .io import atomic_write_text
    prefix = Path(prefix)
    coo = piece.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lines = [f"{coo.row[i]} {coo.col[i]} {float(coo.data[i])!r}" for i in order]
    trip = prefix.with_name(prefix.name + ".triplets")
    side = prefix.with_name(prefix.name + ".json")
    atomic_write_text(trip, "".join(line + "\n" for line in lines))
    meta = {
        "piece_id": piece.piece_id,
        "shape": list(piece.matrix.shape),
        "onsets": [_frac(t) for t in piece.onsets],
        "descriptors": [{"class": d.instrument, "label": d.label, "policy": d.policy}
                        for d in piece.descriptors],
    }
    atomic_write_text(side, json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return trip, side


def read_piece_matrix(prefix) -> PieceMatrix:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_name(prefix.name + ".json").read_text())
    rows, cols, vals = [], [], []
    for line in prefix.with_name(prefix.name + ".triplets").read_text().splitlines():
        r, c, v = line.split()
        rows.append(int(r))
        cols.append(int(c))
        vals.append(float(v))
    shape = tuple(meta["shape"])
    mat = sp.csr_matrix((vals, (rows, cols)), shape=shape)
    mat.sort_indices()
    descriptors = [BasisDescriptor(d["class"], d["label"], d["policy"]) for d in meta["descriptors"]]
    onsets = [Fraction(n, d) for n, d in meta["onsets"]]
    return PieceMatrix(meta["piece_id"], onsets, descriptors, mat)
