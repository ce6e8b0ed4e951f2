"""Associative CSR encoding and the per-PU field layout."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .ap_core import ApContractError, ApState
from .microcode import FieldRef, bits_to_int, check_range, peek_field

FIRST, MIDDLE, LAST, SINGLE = "01", "00", "10", "11"
_FLAG_GRAMMAR = re.compile(r"(?:01(?:00)*10|11)*")


class QuantizationError(ValueError):
    pass


class FlagValidationError(ValueError):
    pass


@dataclass
class SparseMatrix:
    """Integer-valued sparse matrix in coordinate form.

    ``bits`` is the declared two's-complement weight wordlength, ``frac`` the
    number of fractional bits the integers carry.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    bits: int = 16
    frac: int = 0

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        self.cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.int64).reshape(-1)
        if not (self.rows.size == self.cols.size == self.values.size):
            raise ValueError("rows, cols and values must have equal length")
        if self.n_rows < 0 or self.n_cols < 0:
            raise ValueError("negative matrix dimensions")
        if self.nnz:
            if self.rows.min() < 0 or self.rows.max() >= self.n_rows:
                raise ValueError("row index out of range")
            if self.cols.min() < 0 or self.cols.max() >= self.n_cols:
                raise ValueError("column index out of range")
            keys = self.rows * max(self.n_cols, 1) + self.cols
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate (row, col) entry")

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @classmethod
    def from_dense(cls, dense, bits: int = 16, frac: int = 0) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=np.int64)
        r, c = np.nonzero(dense)
        return cls(dense.shape[0], dense.shape[1], r, c, dense[r, c], bits, frac)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols), dtype=np.int64)
        out[self.rows, self.cols] = self.values
        return out

    def sorted_entries(self) -> list[tuple[int, int, int]]:
        return sorted(zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()))

    def __eq__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (
            (self.n_rows, self.n_cols, self.bits, self.frac) == (other.n_rows, other.n_cols, other.bits, other.frac)
            and self.sorted_entries() == other.sorted_entries()
        )


@dataclass
class AcsrImage:
    """Weights as stored in the CAM: one nonzero per PU.

    ``block_starts`` and ``row_ids`` are host bookkeeping: the first PU of
    each stored row and that row's index in the original matrix.
    """

    values: np.ndarray
    col_index: np.ndarray
    row_flag: tuple
    block_starts: np.ndarray
    row_ids: np.ndarray
    n_rows: int
    n_cols: int
    bits: int
    frac: int = 0

    @property
    def depth(self) -> int:
        return int(self.values.size)

    nnz = depth

    @property
    def block_lengths(self) -> np.ndarray:
        return np.diff(np.append(self.block_starts, self.depth))

    @property
    def max_block_len(self) -> int:
        return int(self.block_lengths.max()) if self.depth else 0


def encode_acsr(M: SparseMatrix) -> AcsrImage:
    order = np.lexsort((M.cols, M.rows))
    rows, cols, vals = M.rows[order], M.cols[order], M.values[order]
    for r, c, v in zip(rows.tolist(), cols.tolist(), vals.tolist()):
        try:
            check_range(v, M.bits, True, "weight")
        except ValueError as exc:
            raise QuantizationError(f"weight at ({r}, {c}): {exc}") from None
    flags = []
    starts = []
    row_ids = []
    i = 0
    while i < rows.size:
        j = i
        while j + 1 < rows.size and rows[j + 1] == rows[i]:
            j += 1
        starts.append(i)
        row_ids.append(int(rows[i]))
        if i == j:
            flags.append(SINGLE)
        else:
            flags.extend([FIRST] + [MIDDLE] * (j - i - 1) + [LAST])
        i = j + 1
    return AcsrImage(
        values=vals.copy(),
        col_index=cols.copy(),
        row_flag=tuple(flags),
        block_starts=np.asarray(starts, dtype=np.int64),
        row_ids=np.asarray(row_ids, dtype=np.int64),
        n_rows=M.n_rows,
        n_cols=M.n_cols,
        bits=M.bits,
        frac=M.frac,
    )


@dataclass(frozen=True)
class FlagViolation:
    index: int
    expected: str
    actual: str

    def __str__(self):
        return f"PU {self.index}: expected {self.expected}, found {self.actual}"


def validate_flags(flags) -> FlagViolation | None:
    """Check the row-flag sequence; returns the first violation or None."""
    flags = list(flags.row_flag if isinstance(flags, AcsrImage) else flags)
    in_block = False
    for i, f in enumerate(flags):
        if in_block:
            if f == LAST:
                in_block = False
            elif f != MIDDLE:
                return FlagViolation(i, "00|10", f)
        elif f == FIRST:
            in_block = True
        elif f != SINGLE:
            return FlagViolation(i, "01|11", f)
    if in_block:
        return FlagViolation(len(flags), "00|10", "<end>")
    return None


def flags_match_grammar(flags) -> bool:
    """Regular-expression reference for ``validate_flags``."""
    flags = list(flags)
    if any(len(f) != 2 or set(f) - {"0", "1"} for f in flags):
        return False
    return _FLAG_GRAMMAR.fullmatch("".join(flags)) is not None


def col_index_bits(n_cols: int) -> int:
    return max(1, math.ceil(math.log2(n_cols))) if n_cols > 1 else 1


def min_accumulator_bits(m: int, n: int, max_block_len: int) -> int:
    log_term = math.ceil(math.log2(max_block_len)) if max_block_len > 1 else 0
    return m + n + log_term + 1


@dataclass(frozen=True)
class FieldMap:
    """Bit-column layout of a PU.

    Order from column 0: row_flag, pristine_flag, col_index, W, B, C, T. The
    temporary field holds the product bit, the carry and a k+1-bit staging
    field (k data bits plus the incoming row-flag MSB) used by reduction.
    """

    n_cols: int
    m: int
    n: int
    k: int
    col_bits: int
    fields: dict = field(compare=False)

    @property
    def width(self) -> int:
        return self.t.stop

    @property
    def row_flag(self) -> FieldRef:
        return self.fields["row_flag"]

    @property
    def pristine_flag(self) -> FieldRef:
        return self.fields["pristine_flag"]

    @property
    def col_index(self) -> FieldRef:
        return self.fields["col_index"]

    @property
    def w(self) -> FieldRef:
        return self.fields["W"]

    @property
    def b(self) -> FieldRef:
        return self.fields["B"]

    @property
    def c(self) -> FieldRef:
        return self.fields["C"]

    @property
    def t(self) -> FieldRef:
        return self.fields["T"]

    @property
    def flag_msb(self) -> int:
        return self.row_flag.col(1)

    @property
    def flag_lsb(self) -> int:
        return self.row_flag.col(0)

    @property
    def t_prod(self) -> int:
        return self.t.col(0)

    @property
    def t_carry(self) -> int:
        return self.t.col(1)

    @property
    def staging(self) -> FieldRef:
        """Staging data bits (k) for the value shifted in during reduction."""
        return self.t.sub(2, self.k, "S")

    @property
    def staging_msb(self) -> int:
        return self.t.col(2 + self.k)

    @property
    def staging_all(self) -> FieldRef:
        return self.t.sub(2, self.k + 1, "S+")


def build_field_map(n_cols: int, m: int, n: int, max_block_len: int, k: int | None = None) -> FieldMap:
    if n_cols < 1 or m < 1 or n < 1 or max_block_len < 0:
        raise ValueError("field widths must be positive")
    k_min = min_accumulator_bits(m, n, max(max_block_len, 1))
    if k is None:
        k = k_min
    elif k < k_min:
        raise ValueError(f"accumulator width {k} below the safe minimum {k_min}")
    col_bits = col_index_bits(n_cols)
    sizes = [
        ("row_flag", 2),
        ("pristine_flag", 2),
        ("col_index", col_bits),
        ("W", m),
        ("B", n),
        ("C", k),
        ("T", 2 + k + 1),
    ]
    fields = {}
    base = 0
    for name, length in sizes:
        fields[name] = FieldRef(base, length, name)
        base += length
    return FieldMap(n_cols, m, n, k, col_bits, fields)


def load_image(ap: ApState, image: AcsrImage, fmap: FieldMap) -> None:
    """Write the image into the array, one host load cycle per PU.

    Populates W, col_index and both flag fields; B, C and T are zeroed.
    """
    if ap.depth < image.depth:
        raise ApContractError(f"array depth {ap.depth} < image nnz {image.depth}")
    if ap.width < fmap.width:
        raise ApContractError(f"array width {ap.width} < layout width {fmap.width}")
    if image.bits != fmap.m:
        raise ApContractError(f"image wordlength {image.bits} != layout W width {fmap.m}")
    if image.n_cols > 1 << fmap.col_bits:
        raise ApContractError("column index field too narrow for the image")
    if image.depth == 0:
        return
    n = image.depth
    lsb = np.array([int(f[1]) for f in image.row_flag], dtype=bool)
    msb = np.array([int(f[0]) for f in image.row_flag], dtype=bool)
    parts = [lsb, msb, lsb, msb]
    parts += [(image.col_index >> i) & 1 for i in range(fmap.col_index.length)]
    wv = image.values & ((1 << fmap.m) - 1)
    parts += [(wv >> i) & 1 for i in range(fmap.m)]
    block = np.zeros((n, fmap.width), dtype=bool)
    block[:, : fmap.b.base] = np.stack(parts, axis=1)
    ap.load_rows(0, np.arange(fmap.width), block)


def read_flags(ap: ApState, fmap: FieldMap, depth: int | None = None, pristine: bool = False) -> list[str]:
    f = fmap.pristine_flag if pristine else fmap.row_flag
    vals = peek_field(ap, f)[: ap.depth if depth is None else depth]
    return [format(int(v), "02b") for v in vals]


def decode_image(ap: ApState, fmap: FieldMap, image: AcsrImage) -> SparseMatrix:
    """Rebuild the matrix from the array contents and host row bookkeeping."""
    depth = image.depth
    flags = read_flags(ap, fmap, depth)
    bad = validate_flags(flags)
    if bad is not None:
        raise FlagValidationError(str(bad))
    starts = [i for i, f in enumerate(flags) if f in (FIRST, SINGLE)]
    if len(starts) != len(image.row_ids):
        raise FlagValidationError(f"{len(starts)} blocks in array, bookkeeping has {len(image.row_ids)}")
    vals = peek_field(ap, fmap.w, True)[:depth]
    cols = peek_field(ap, fmap.col_index)[:depth]
    rows = np.empty(depth, dtype=np.int64)
    bounds = starts + [depth]
    for b, rid in enumerate(image.row_ids.tolist()):
        rows[bounds[b]:bounds[b + 1]] = rid
    return SparseMatrix(image.n_rows, image.n_cols, rows, cols, vals, image.bits, image.frac)


def row_bits_to_field(bits, f: FieldRef, signed: bool = False) -> int:
    return bits_to_int(list(bits[f.base:f.stop]), signed)
