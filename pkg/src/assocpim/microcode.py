"""Perfect-induction microcode built on the associative instruction set.

Every routine here is a sequence of ``ApState`` instructions. Functions are
evaluated by matching truth-table entries against bit-columns and writing the
precomputed outputs into all tagged rows, one entry per cycle.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ap_core import LONG, SHORT, UP, ApContractError, ApState, KeyMask


class HazardError(ApContractError):
    """An in-place truth table has no safe sequential issue order."""


class LutCoverageError(ValueError):
    def __init__(self, message: str, rows=()):
        super().__init__(message)
        self.rows = list(rows)


@dataclass(frozen=True)
class FieldRef:
    """Contiguous range of bit-columns, LSB at ``base``."""

    base: int
    length: int
    name: str = ""

    def __post_init__(self):
        if self.base < 0 or self.length < 0:
            raise ValueError(f"invalid field {self}")

    @property
    def stop(self) -> int:
        return self.base + self.length

    @property
    def columns(self) -> range:
        return range(self.base, self.stop)

    def col(self, i: int) -> int:
        if not 0 <= i < self.length:
            raise IndexError(f"bit {i} outside field {self.name or self.base}[{self.length}]")
        return self.base + i

    @property
    def msb(self) -> int:
        return self.col(self.length - 1)

    def sub(self, offset: int, length: int, name: str | None = None) -> "FieldRef":
        if offset < 0 or offset + length > self.length:
            raise ValueError(f"sub-field [{offset}, {offset + length}) outside {self}")
        return FieldRef(self.base + offset, length, name if name is not None else self.name)

    def overlaps(self, other: "FieldRef") -> bool:
        return self.length > 0 and other.length > 0 and self.base < other.stop and other.base < self.stop

    def pattern(self, value: int, signed: bool = False) -> dict:
        """Column -> bit mapping for ``value`` in this field's width."""
        check_range(value, self.length, signed, self.name)
        value &= (1 << self.length) - 1
        return {self.base + i: (value >> i) & 1 for i in range(self.length)}


def value_range(bits: int, signed: bool) -> tuple[int, int]:
    if signed:
        return -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


def check_range(value: int, bits: int, signed: bool, what: str = "value") -> None:
    lo, hi = value_range(bits, signed)
    if not lo <= value <= hi:
        kind = "signed" if signed else "unsigned"
        raise ValueError(f"{what}: {value} does not fit {bits}-bit {kind}")


def bits_to_int(bits: Sequence[int], signed: bool = False) -> int:
    """LSB-first bit sequence to integer."""
    v = 0
    for i, b in enumerate(bits):
        v |= int(b) << i
    if signed and bits and bits[-1]:
        v -= 1 << len(bits)
    return v


def peek_field(ap: ApState, f: FieldRef, signed: bool = False) -> np.ndarray:
    """Host backdoor read of a field in every row. Costs no cycles."""
    cols = ap.bits[:, f.base:f.stop]
    if f.length == 0:
        return np.zeros(ap.depth, dtype=np.int64)
    if f.length <= 62:
        vals = cols.astype(np.int64) @ (np.int64(1) << np.arange(f.length, dtype=np.int64))
        if signed:
            vals = np.where(cols[:, -1], vals - (np.int64(1) << f.length), vals)
        return vals
    return np.array([bits_to_int(row, signed) for row in cols.tolist()], dtype=object)


def poke_field(ap: ApState, f: FieldRef, values, signed: bool = False) -> None:
    """Host backdoor write of one value per row. Costs no cycles; test seeding only."""
    values = list(values)
    if len(values) != ap.depth:
        raise ValueError(f"need {ap.depth} values, got {len(values)}")
    for v in values:
        check_range(int(v), f.length, signed, f.name or "field")
    for i in range(f.length):
        ap._cols[f.base + i] = [(int(v) >> i) & 1 for v in values]


# --- truth tables ---------------------------------------------------------


@lru_cache(maxsize=None)
def _sequential_mismatch(n_inputs: int, out_pos: tuple, entries: tuple, assume_cleared: bool):
    """Return the first input seeding where sequential issue differs from atomic, else None.

    ``out_pos[o]`` is the input position aliased by output ``o`` or -1 when
    the output column is not an input.
    """
    n_out = len(out_pos)
    table = {e_in: e_out for e_in, e_out in entries}
    for seed in itertools.product((0, 1), repeat=n_inputs):
        outs0 = tuple(seed[p] if p >= 0 else 0 for p in out_pos)
        # atomic
        atomic_in = list(seed)
        atomic_out = list(outs0)
        if seed in table:
            for o, bit in enumerate(table[seed]):
                atomic_out[o] = bit
                if out_pos[o] >= 0:
                    atomic_in[out_pos[o]] = bit
        # sequential
        row_in = list(seed)
        row_out = list(outs0)
        for e_in, e_out in entries:
            if tuple(row_in) == e_in:
                for o in range(n_out):
                    row_out[o] = e_out[o]
                    if out_pos[o] >= 0:
                        row_in[out_pos[o]] = e_out[o]
        if row_in != atomic_in or row_out != atomic_out:
            return seed
    return None


@dataclass(frozen=True)
class TruthTablePass:
    """A truth table over bit-columns, applied by perfect induction.

    ``entries`` map input patterns (ordered like ``inputs``) to output
    patterns (ordered like ``outputs``). When outputs alias inputs the pass is
    in place and its entry order must be hazard free: no row may be rewritten
    into a pattern that a later entry matches. ``assume_cleared`` declares the
    non-aliased outputs to be zero beforehand so all-zero outputs are skipped.
    """

    inputs: tuple
    outputs: tuple
    entries: tuple
    assume_cleared: bool = False

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(int(c) for c in self.inputs))
        object.__setattr__(self, "outputs", tuple(int(c) for c in self.outputs))
        entries = tuple((tuple(int(b) for b in i), tuple(int(b) for b in o)) for i, o in self.entries)
        object.__setattr__(self, "entries", entries)
        if len(set(self.inputs)) != len(self.inputs) or len(set(self.outputs)) != len(self.outputs):
            raise ApContractError("duplicate column in truth table inputs or outputs")
        seen = set()
        for e_in, e_out in entries:
            if len(e_in) != len(self.inputs) or len(e_out) != len(self.outputs):
                raise ApContractError(f"entry {e_in}->{e_out} has wrong arity")
            if e_in in seen:
                raise ApContractError(f"duplicate input pattern {e_in}")
            seen.add(e_in)
        if self.in_place:
            bad = _sequential_mismatch(len(self.inputs), self.out_positions, entries, self.assume_cleared)
            if bad is not None:
                raise HazardError(f"entry order is not hazard free: input state {bad} is corrupted")

    @property
    def out_positions(self) -> tuple:
        where = {c: i for i, c in enumerate(self.inputs)}
        return tuple(where.get(c, -1) for c in self.outputs)

    @property
    def in_place(self) -> bool:
        return any(p >= 0 for p in self.out_positions)

    def _is_noop(self, e_in, e_out) -> bool:
        for p, bit in zip(self.out_positions, e_out):
            if p >= 0:
                if e_in[p] != bit:
                    return False
            elif not self.assume_cleared or bit:
                return False
        return True

    @property
    def issued(self) -> tuple:
        """Entries that are actually executed; fixed points are skipped."""
        return tuple(e for e in self.entries if not self._is_noop(*e))

    @property
    def cost(self) -> int:
        return len(self.issued)

    def function(self, inputs: Sequence[int]) -> tuple | None:
        """Atomic table lookup; None when no entry matches."""
        for e_in, e_out in self.entries:
            if tuple(inputs) == e_in:
                return e_out
        return None


def check_atomicity(n_inputs: int, out_positions: Sequence[int], entries, assume_cleared: bool = False):
    """Exhaustively compare sequential issue against atomic application.

    Returns the first offending input seeding, or None if the order is safe.
    """
    entries = tuple((tuple(i), tuple(o)) for i, o in entries)
    return _sequential_mismatch(n_inputs, tuple(out_positions), entries, assume_cleared)


def find_hazard_free_order(n_inputs: int, out_positions: Sequence[int], entries, assume_cleared: bool = False):
    """Search permutations of ``entries`` for a hazard-free order (None if none exists)."""
    entries = [(tuple(i), tuple(o)) for i, o in entries]
    if len(entries) > 8:
        raise ValueError("exhaustive order search limited to 8 entries")
    for perm in itertools.permutations(entries):
        if check_atomicity(n_inputs, out_positions, perm, assume_cleared) is None:
            return list(perm)
    return None


def _key(ap: ApState, bits: Mapping[int, int], gate: Mapping[int, int] | None = None) -> KeyMask:
    if gate:
        bits = {**gate, **bits}
    return KeyMask.from_columns(ap.width, bits)


def run_tt_pass(ap: ApState, tt: TruthTablePass, gate: Mapping[int, int] | None = None) -> None:
    """Issue one fused compare/write per non-trivial entry.

    ``gate`` adds fixed compare conditions to every entry, restricting the
    pass to rows that satisfy them.
    """
    if gate and (set(gate) & set(tt.outputs)):
        raise ApContractError("gate columns may not be written by the pass")
    for e_in, e_out in tt.issued:
        cmp = _key(ap, dict(zip(tt.inputs, e_in)), gate)
        wr = _key(ap, dict(zip(tt.outputs, e_out)))
        ap.compare_write(cmp, wr, in_place=tt.in_place)


# Full adder over (p, s, c) -> (s, c), p = addend bit, s = accumulator bit.
# Each written pattern can only match an entry issued earlier.
FULL_ADD_ORDER = (
    ((0, 0, 1), (1, 0)),
    ((0, 1, 1), (0, 1)),
    ((1, 1, 0), (0, 1)),
    ((1, 0, 0), (1, 0)),
)
# Full subtractor (p, s, borrow) -> (s, borrow): s := s - p - borrow.
FULL_SUB_ORDER = (
    ((0, 1, 1), (0, 0)),
    ((0, 0, 1), (1, 1)),
    ((1, 0, 0), (1, 1)),
    ((1, 1, 0), (0, 0)),
)
# Restrictions to p = 0 over (s, c), used for zero-extended addends.
HALF_ADD_ORDER = (((0, 1), (1, 0)), ((1, 1), (0, 1)))
HALF_SUB_ORDER = (((1, 1), (0, 0)), ((0, 1), (1, 1)))
AND_TABLE = (((0, 0), (0,)), ((0, 1), (0,)), ((1, 0), (0,)), ((1, 1), (1,)))


def _distinct(*cols: int) -> None:
    if len(set(cols)) != len(cols):
        raise ApContractError(f"aliased columns {cols}")


def clear_field(ap: ApState, f: FieldRef) -> None:
    """Zero a field in every row: one tag-all compare/write, free when empty."""
    if f.length == 0:
        return
    ap.compare_write(KeyMask.empty(ap.width), _key(ap, {c: 0 for c in f.columns}))


def bit_and(ap: ApState, dst: int, a: int, b: int, clear: bool = True) -> None:
    """dst := a AND b in all rows (clear + one pass)."""
    _distinct(dst, a, b)
    if clear:
        ap.compare_write(KeyMask.empty(ap.width), _key(ap, {dst: 0}))
    run_tt_pass(ap, TruthTablePass((a, b), (dst,), AND_TABLE, assume_cleared=True))


def full_add(ap: ApState, s: int, p: int, carry: int, gate: Mapping[int, int] | None = None) -> None:
    """(s, carry) := (s ^ p ^ carry, maj(s, p, carry)) in place, 4 cycles."""
    _distinct(s, p, carry)
    run_tt_pass(ap, TruthTablePass((p, s, carry), (s, carry), FULL_ADD_ORDER), gate)


def full_sub(ap: ApState, s: int, p: int, borrow: int, gate: Mapping[int, int] | None = None) -> None:
    """(s, borrow) := s - p - borrow in place, 4 cycles."""
    _distinct(s, p, borrow)
    run_tt_pass(ap, TruthTablePass((p, s, borrow), (s, borrow), FULL_SUB_ORDER), gate)


def add_fields(
    ap: ApState,
    acc: FieldRef,
    addend: FieldRef,
    carry: int,
    signed: bool = True,
    subtract: bool = False,
    gate: Mapping[int, int] | None = None,
) -> None:
    """acc := acc (+|-) addend modulo 2**acc.length, bit-serially.

    The addend is sign- or zero-extended to the accumulator. Cost is one carry
    clear plus 4 cycles per bit, except 2 cycles per zero-extension bit.
    """
    if acc.overlaps(addend):
        raise ApContractError(f"fields {acc} and {addend} overlap")
    if carry in acc.columns or carry in addend.columns:
        raise ApContractError("carry column aliases an operand field")
    if addend.length < 1 or acc.length < addend.length:
        raise ApContractError("accumulator must be at least as wide as a non-empty addend")
    if gate and (set(gate) & (set(acc.columns) | {carry})):
        raise ApContractError("gate columns overlap written columns")
    ap.compare_write(KeyMask.empty(ap.width), _key(ap, {carry: 0}))
    op = full_sub if subtract else full_add
    half = HALF_SUB_ORDER if subtract else HALF_ADD_ORDER
    for i in range(acc.length):
        s = acc.col(i)
        if i < addend.length or signed:
            op(ap, s, addend.col(min(i, addend.length - 1)), carry, gate)
        else:
            run_tt_pass(ap, TruthTablePass((s, carry), (s, carry), half), gate)


def multiply_width(m: int, n: int, b_signed: bool = False) -> int:
    """Smallest accumulator width holding every m-bit x n-bit product."""
    return m + n + (1 if b_signed else 0)


def multiply_cycles(m: int, n: int, c_len: int) -> int:
    """Closed-form cost of ``multiply_fields``.

    Per multiplier bit j: one carry clear, then for each accumulator position
    i < c_len - j an AND (2 cycles, only while i < m) and an add (4 cycles).
    """
    total = 0
    for j in range(n):
        span = c_len - j
        total += 1 + 6 * min(m, span) + 4 * max(0, span - m)
    return total


def multiply_fields(
    ap: ApState,
    c: FieldRef,
    w: FieldRef,
    b: FieldRef,
    t: FieldRef,
    b_signed: bool = False,
) -> None:
    """c := w * b in every row by shift-and-add.

    ``w`` is two's complement, ``b`` unsigned unless ``b_signed``. ``c`` must be
    cleared. For each bit j of b the partial product w*b_j (sign extended) is
    rippled into c from offset j up to c's top bit, so no carry is lost. When
    b is signed, its top bit's partial product is subtracted instead.
    ``t`` supplies two scratch columns: product bit and carry.
    """
    need = multiply_width(w.length, b.length, b_signed)
    if c.length < need:
        raise ApContractError(f"accumulator {c.length} bits < required {need} for {w.length}x{b.length}")
    if t.length < 2:
        raise ApContractError("multiply needs two scratch columns")
    fields = (c, w, b, t)
    for f1, f2 in itertools.combinations(fields, 2):
        if f1.overlaps(f2):
            raise ApContractError(f"fields {f1} and {f2} overlap")
    prod, carry = t.col(0), t.col(1)
    tag_all = KeyMask.empty(ap.width)
    clear_carry = _key(ap, {carry: 0})
    m = w.length
    for j in range(b.length):
        ap.compare_write(tag_all, clear_carry)
        op = full_sub if (b_signed and j == b.length - 1) else full_add
        for i in range(c.length - j):
            if i < m:
                bit_and(ap, prod, w.col(i), b.col(j))
            # i >= m: prod still holds w_sign AND b_j
            op(ap, c.col(i + j), prod, carry)


def lut_multiply(
    ap: ApState,
    c: FieldRef,
    w: FieldRef,
    b: FieldRef,
    products: Mapping[tuple, int],
    w_signed: bool = True,
    b_signed: bool = False,
    verify: bool = False,
) -> None:
    """Bit-parallel multiply: one compare/write per (w, b) table entry.

    Rows whose operand pair is absent from the table keep their previous c;
    with ``verify`` such rows are reported via ``LutCoverageError``.
    """
    for f1, f2 in itertools.combinations((c, w, b), 2):
        if f1.overlaps(f2):
            raise ApContractError(f"fields {f1} and {f2} overlap")
    for (wv, bv), prod in sorted(products.items()):
        cmp = _key(ap, {**w.pattern(wv, w_signed), **b.pattern(bv, b_signed)})
        ap.compare_write(cmp, _key(ap, c.pattern(prod, True)))
    if verify:
        wv = peek_field(ap, w, w_signed)
        bv = peek_field(ap, b, b_signed)
        missing = [i for i, pair in enumerate(zip(wv.tolist(), bv.tolist())) if tuple(pair) not in products]
        if missing:
            raise LutCoverageError(f"{len(missing)} rows have operands outside the product table", missing)


def lut_apply(
    ap: ApState,
    dst: FieldRef,
    src: FieldRef,
    table: Mapping[int, int],
    src_signed: bool = True,
    dst_signed: bool = True,
) -> None:
    """dst := table[src] per row; one compare/write per table entry."""
    if dst.overlaps(src):
        raise ApContractError(f"fields {dst} and {src} overlap")
    lo, hi = value_range(src.length, src_signed)
    domain = set(range(lo, hi + 1))
    missing = domain - set(table)
    if missing:
        raise LutCoverageError(f"table misses {len(missing)} of {len(domain)} source values, e.g. {min(missing)}")
    extra = set(table) - domain
    if extra:
        raise LutCoverageError(f"table keys {sorted(extra)[:4]} outside the {src.length}-bit source domain")
    for x in sorted(table):
        ap.compare_write(_key(ap, src.pattern(x, src_signed)), _key(ap, dst.pattern(table[x], dst_signed)))


def move_steps(distance: int, long_step: int) -> tuple[str, int]:
    """Decompose a tag relocation into (step kind, count)."""
    if distance < 1:
        raise ApContractError(f"distance must be >= 1, got {distance}")
    if distance < long_step:
        return SHORT, distance
    if distance % long_step:
        raise ApContractError(f"distance {distance} is not a multiple of long_step {long_step}")
    return LONG, distance // long_step


def shift_field_copy(
    ap: ApState,
    dst: FieldRef,
    src: FieldRef,
    distance: int,
    extra_bits: Iterable[tuple[int, int]] = (),
) -> None:
    """dst[i] := src[i + distance] for every row i, zero-filled past the end.

    Copies one bit-column at a time: compare the source bit, move the tag up,
    write a 1 into the destination bit. ``dst`` must be cleared; sources are
    left untouched. ``extra_bits`` are (source column, destination column)
    pairs copied the same way.
    """
    if dst.length != src.length:
        raise ApContractError("shift_field_copy needs equal field lengths")
    step, count = move_steps(distance, ap.long_step)
    pairs = list(zip(src.columns, dst.columns)) + [tuple(p) for p in extra_bits]
    srcs = {s for s, _ in pairs}
    for _, d in pairs:
        if d in srcs:
            raise ApContractError(f"destination column {d} is also a source")
    for s, d in pairs:
        ap.compare(_key(ap, {s: 1}))
        for _ in range(count):
            ap.move_tag(UP, step)
        ap.write(_key(ap, {d: 1}))


def shift_copy_cycles(n_columns: int, distance: int, long_step: int) -> int:
    return n_columns * (2 + move_steps(distance, long_step)[1])
