"""Readers and writers for weights, activations and LUT tables."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse

from .acsr import SparseMatrix
from .fc_engine import ActivationList
from .microcode import value_range


def quantize(values, frac: int, bits: int, signed: bool = True) -> np.ndarray:
    """round-half-even(value * 2**frac), saturated to the integer range."""
    lo, hi = value_range(bits, signed)
    q = np.rint(np.asarray(values, dtype=np.float64) * float(2**frac))
    return np.clip(q, lo, hi).astype(np.int64)


def read_matrix_market(path, bits: int = 16, frac: int = 0) -> SparseMatrix:
    """Load a coordinate Matrix Market file as integer weights.

    Integer files are taken verbatim (range errors surface at encoding); real
    files are quantized with ``frac`` fractional bits. Zero entries are dropped.
    """
    path = Path(path)
    rows, cols, _, fmt, field, _ = scipy.io.mminfo(path)
    if fmt != "coordinate":
        raise ValueError(f"{path}: expected coordinate format, got {fmt}")
    if field == "complex":
        raise ValueError(f"{path}: complex matrices are not supported")
    coo = scipy.sparse.coo_matrix(scipy.io.mmread(path))
    coo.sum_duplicates()
    if field == "pattern":
        vals = np.ones(coo.nnz, dtype=np.int64)
    elif field == "integer":
        vals = np.asarray(coo.data, dtype=np.int64)
    else:
        vals = quantize(coo.data, frac, bits)
    keep = vals != 0
    return SparseMatrix(rows, cols, coo.row[keep], coo.col[keep], vals[keep], bits, frac if field == "real" else 0)


def write_matrix_market(path, matrix: SparseMatrix) -> None:
    coo = scipy.sparse.coo_matrix(
        (matrix.values, (matrix.rows, matrix.cols)), shape=(matrix.n_rows, matrix.n_cols), dtype=np.int64
    )
    scipy.io.mmwrite(str(path), coo, field="integer")


def _numeric_rows(path):
    with open(path, newline="") as fp:
        for rec in csv.reader(fp):
            rec = [c.strip() for c in rec if c.strip()]
            if not rec or rec[0].startswith("#"):
                continue
            try:
                yield [float(c) if any(ch in c for ch in ".eE") else int(c) for c in rec]
            except ValueError:
                continue  # header line


def read_activations(path, bits: int = 16, signed: bool = False, frac: int = 0) -> ActivationList:
    """Read ``index,value`` pairs, or a dense vector with one value per line.

    Non-integer values are quantized with ``frac`` fractional bits.
    """
    recs = list(_numeric_rows(path))
    if recs and len(recs[0]) == 2:
        idx = [int(r[0]) for r in recs]
        raw = [r[1] for r in recs]
    elif all(len(r) == 1 for r in recs):
        idx = list(range(len(recs)))
        raw = [r[0] for r in recs]
    else:
        raise ValueError(f"{path}: expected 'index,value' rows or one value per line")
    if any(isinstance(v, float) for v in raw):
        vals = quantize(raw, frac, bits, signed).tolist()
    else:
        vals = [int(v) for v in raw]
    pairs = [(i, v) for i, v in zip(idx, vals) if v]
    return ActivationList(tuple(i for i, _ in pairs), tuple(v for _, v in pairs), bits, signed, frac)


def write_activations(path, acts: ActivationList) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["index", "value"])
        w.writerows(zip(acts.indices, acts.values))


def read_lut(path) -> dict:
    """LUT as ``input,output`` integer rows."""
    table = {}
    for rec in _numeric_rows(path):
        if len(rec) != 2:
            raise ValueError(f"{path}: LUT rows must be 'input,output'")
        x, y = int(rec[0]), int(rec[1])
        if x in table:
            raise ValueError(f"{path}: duplicate LUT input {x}")
        table[x] = y
    return table
