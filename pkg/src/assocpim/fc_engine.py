"""Fully-connected layer execution on the associative processor.

A layer runs in four stages over all PUs at once: activation broadcast,
bit-serial (or table) multiplication, segmented soft reduction into the first
PU of every stored row, and the activation function. Results are read from
the block-start PUs and requantized on the host.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import microcode as mc
from .acsr import AcsrImage, FieldMap, SparseMatrix, build_field_map, encode_acsr, load_image
from .ap_core import ApContractError, ApState, CycleCounters, KeyMask
from .microcode import bits_to_int, check_range, value_range

ACTIVATIONS = ("relu", "sigmoid", "tanh", "none")
STAGES = ("broadcast", "multiply", "reduce", "activation", "extract", "restore")


class LayerConfigError(ValueError):
    pass


class ReductionError(RuntimeError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class ActivationList:
    """Sparse activation vector of ``bits``-bit integers (zeros omitted)."""

    indices: tuple = ()
    values: tuple = ()
    bits: int = 16
    signed: bool = False
    frac: int = 0

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values differ in length")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("duplicate activation index")
        for i, v in zip(self.indices, self.values):
            if i < 0:
                raise ValueError(f"negative activation index {i}")
            if v == 0:
                raise ValueError(f"zero activation at index {i}; zeros are implicit")
            check_range(v, self.bits, self.signed, f"activation[{i}]")

    @property
    def nnz(self) -> int:
        return len(self.indices)

    @classmethod
    def from_dense(cls, dense, bits: int = 16, signed: bool = False, frac: int = 0) -> "ActivationList":
        dense = [int(v) for v in dense]
        idx = [i for i, v in enumerate(dense) if v]
        return cls(tuple(idx), tuple(dense[i] for i in idx), bits, signed, frac)

    def to_dense(self, size: int) -> list[int]:
        out = [0] * size
        for i, v in zip(self.indices, self.values):
            out[i] = v
        return out

    def as_dict(self) -> dict:
        return dict(zip(self.indices, self.values))


def requantize(value: int, shift: int, bits: int, signed: bool) -> int:
    """Arithmetic right shift with round-half-even, then saturate."""
    if shift > 0:
        q = value >> shift
        rem = value - (q << shift)
        half = 1 << (shift - 1)
        if rem > half or (rem == half and q & 1):
            q += 1
    else:
        q = value << -shift
    lo, hi = value_range(bits, signed)
    return min(max(q, lo), hi)


def make_activation_table(kind: str, window: int = 8, in_frac: int = 4, out_frac: int = 7) -> dict:
    """Host-side fixed-point table for a LUT activation over a signed window.

    Input q stands for q / 2**in_frac, output is round-half-even(f(x) * 2**out_frac).
    """
    funcs = {"sigmoid": lambda x: 1.0 / (1.0 + math.exp(-x)), "tanh": math.tanh, "identity": lambda x: x}
    if kind not in funcs:
        raise LayerConfigError(f"no table for activation {kind!r}")
    lo, hi = value_range(window, True)
    xs = np.arange(lo, hi + 1)
    ys = np.rint(np.array([funcs[kind](x / (1 << in_frac)) for x in xs]) * (1 << out_frac))
    return {int(x): int(y) for x, y in zip(xs, ys)}


@dataclass
class LayerConfig:
    """Everything needed to run one FC layer.

    ``shift``/``out_bits``/``out_signed`` define the requantization from k-bit
    accumulators to the next layer's activations. ``multiply`` selects
    bit-serial arithmetic or the bit-parallel product table, which needs the
    finite set of activation values in ``act_codebook``.
    """

    image: AcsrImage
    fmap: FieldMap
    activation: str = "relu"
    act_signed: bool = False
    shift: int = 0
    out_bits: int | None = None
    out_signed: bool | None = None
    lut: Mapping[int, int] | None = None
    lut_window: int = 8
    long_step: int = 16
    multiply: str = "bitserial"
    act_codebook: tuple | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise LayerConfigError(f"unknown activation {self.activation!r}")
        if self.out_bits is None:
            self.out_bits = self.fmap.n
        if self.out_signed is None:
            self.out_signed = self.act_signed
        if self.image.bits != self.fmap.m:
            raise LayerConfigError("weight wordlength differs from field map")
        if self.image.max_block_len and mc.multiply_width(self.fmap.m, self.fmap.n, self.act_signed) > self.fmap.k:
            raise LayerConfigError("accumulator narrower than a single product")
        if self.activation in ("sigmoid", "tanh"):
            self.lut_window = min(self.lut_window, self.fmap.k)
            if self.lut is None:
                self.lut = make_activation_table(self.activation, self.lut_window)
            lo, hi = value_range(self.lut_window, True)
            if set(self.lut) != set(range(lo, hi + 1)):
                raise LayerConfigError(f"LUT must cover the {self.lut_window}-bit window [{lo}, {hi}]")
            for v in self.lut.values():
                check_range(v, self.fmap.k, True, "LUT output")
        if self.multiply not in ("bitserial", "lut"):
            raise LayerConfigError(f"unknown multiply mode {self.multiply!r}")
        if self.multiply == "lut":
            if not self.act_codebook:
                raise LayerConfigError("table multiply needs an activation codebook")
            self.act_codebook = tuple(sorted({int(v) for v in self.act_codebook if v}))

    @property
    def n_rows(self) -> int:
        return self.image.n_rows

    @property
    def n_cols(self) -> int:
        return self.image.n_cols

    def product_table(self) -> dict:
        ws = sorted({int(v) for v in self.image.values.tolist()})
        return {(w, b): w * b for w in ws for b in self.act_codebook}

    @classmethod
    def from_matrix(
        cls,
        matrix: SparseMatrix,
        act_bits: int,
        k: int | None = None,
        max_block_len: int | None = None,
        **kwargs,
    ) -> "LayerConfig":
        """Encode ``matrix`` and derive its field map."""
        image = encode_acsr(matrix)
        mbl = image.max_block_len if max_block_len is None else max_block_len
        fmap = build_field_map(matrix.n_cols, matrix.bits, act_bits, max(mbl, 1), k)
        return cls(image, fmap, **kwargs)


@dataclass
class LayerResult:
    outputs: ActivationList
    accumulators: dict
    activated: dict
    report: dict = field(default_factory=dict)

    @property
    def cycles(self) -> int:
        return sum(c.cycles for c in self.report.values())

    def total(self) -> CycleCounters:
        out = CycleCounters()
        for c in self.report.values():
            out = out + c
        return out


# --- closed-form stage costs ------------------------------------------------


def broadcast_cycles(nnz_b: int) -> int:
    return 1 + nnz_b


def product_width(fmap: FieldMap, act_signed: bool) -> int:
    return mc.multiply_width(fmap.m, fmap.n, act_signed)


def multiply_stage_cycles(fmap: FieldMap, act_signed: bool = False, table_size: int | None = None) -> int:
    """Clear C and T, multiply into the product-width low part of C, sign-extend."""
    width = product_width(fmap, act_signed)
    extend = 1 if fmap.k > width else 0
    if table_size is not None:
        return 1 + table_size + extend
    return 1 + mc.multiply_cycles(fmap.m, fmap.n, width) + extend


def reduction_rounds(max_block_len: int) -> int:
    return math.ceil(math.log2(max_block_len)) if max_block_len > 1 else 0


def reduce_cycles(k: int, max_block_len: int, long_step: int) -> int:
    """Termination checks (compare + if_match) bracket R rounds; each round
    clears staging, copies k+1 columns, runs a gated k-bit add and updates flags.
    """
    rounds = reduction_rounds(max_block_len)
    total = 2 * (rounds + 1)
    for r in range(rounds):
        total += 1 + mc.shift_copy_cycles(k + 1, 1 << r, long_step) + (1 + 4 * k) + 1
    return total


def lut_activation_cycles(k: int, window: int) -> int:
    return 1 + 2 * (k - window) + 2 + 1 + window + (1 << window)


def activation_cycles(cfg: LayerConfig) -> int:
    if cfg.activation == "relu":
        return 1
    if cfg.activation == "none":
        return 0
    return lut_activation_cycles(cfg.fmap.k, cfg.lut_window)


RESTORE_CYCLES = 4


def layer_cycles(cfg: LayerConfig, nnz_b: int) -> dict:
    table = len(cfg.product_table()) if cfg.multiply == "lut" else None
    return {
        "broadcast": broadcast_cycles(nnz_b),
        "multiply": multiply_stage_cycles(cfg.fmap, cfg.act_signed, table),
        "reduce": reduce_cycles(cfg.fmap.k, cfg.image.max_block_len, cfg.long_step),
        "activation": activation_cycles(cfg),
        "extract": len(cfg.image.row_ids),
        "restore": RESTORE_CYCLES,
    }


# --- stages -----------------------------------------------------------------


def _km(ap: ApState, bits: Mapping[int, int]) -> KeyMask:
    return KeyMask.from_columns(ap.width, bits)


def broadcast_activations(ap: ApState, fmap: FieldMap, acts: ActivationList, signed: bool | None = None) -> None:
    """B := activation whose index equals the PU's column index, else 0."""
    signed = acts.signed if signed is None else signed
    if acts.bits > fmap.n:
        raise ApContractError(f"{acts.bits}-bit activations exceed the {fmap.n}-bit B field")
    for i in acts.indices:
        if i >= fmap.n_cols:
            raise ApContractError(f"activation index {i} >= {fmap.n_cols} columns")
    mc.clear_field(ap, fmap.b)
    for i, v in zip(acts.indices, acts.values):
        ap.compare_write(_km(ap, fmap.col_index.pattern(i)), _km(ap, fmap.b.pattern(v, signed)))


def multiply_stage(ap: ApState, fmap: FieldMap, act_signed: bool = False, products: Mapping | None = None) -> None:
    """C := W * B in every PU.

    The product is formed in the low product-width bits of C and then
    sign-extended across the rest of C with one fused compare/write.
    """
    ap.compare_write(KeyMask.empty(ap.width), _km(ap, {c: 0 for c in range(fmap.c.base, fmap.t.stop)}))
    width = product_width(fmap, act_signed)
    low = fmap.c.sub(0, width, "C.lo")
    if products is None:
        mc.multiply_fields(ap, low, fmap.w, fmap.b, fmap.t.sub(0, 2, "T.mul"), b_signed=act_signed)
    else:
        mc.lut_multiply(ap, low, fmap.w, fmap.b, products, True, act_signed)
    if fmap.k > width:
        ap.compare_write(_km(ap, {low.msb: 1}), _km(ap, {c: 1 for c in range(low.stop, fmap.c.stop)}))


def soft_reduce(ap: ApState, fmap: FieldMap) -> int:
    """Segmented tree sum of C into each block's first PU; returns round count.

    Round r copies C and the row-flag MSB from 2**r PUs below into staging,
    adds staging into C where the PU's own MSB is still 0, then marks PUs that
    received an MSB of 1. Stops once no '01' flag remains.
    """
    first = _km(ap, {fmap.flag_msb: 0, fmap.flag_lsb: 1})
    max_rounds = math.ceil(math.log2(ap.depth)) + 1 if ap.depth > 1 else 1
    staged = fmap.staging
    rounds = 0
    while True:
        ap.compare(first)
        if not ap.if_match():
            return rounds
        if rounds >= max_rounds:
            raise ReductionError(
                f"no convergence after {rounds} rounds; {int(ap.tag.sum())} PUs still flagged '01'"
            )
        distance = 1 << rounds
        mc.clear_field(ap, fmap.staging_all)
        mc.shift_field_copy(ap, staged, fmap.c, distance, [(fmap.flag_msb, fmap.staging_msb)])
        mc.add_fields(ap, fmap.c, staged, fmap.t_carry, signed=True, gate={fmap.flag_msb: 0})
        ap.compare_write(_km(ap, {fmap.staging_msb: 1}), _km(ap, {fmap.flag_msb: 1}))
        rounds += 1


def relu_stage(ap: ApState, fmap: FieldMap) -> None:
    """Zero every negative C in one in-place pass keyed on the sign bit."""
    c = fmap.c
    tt = mc.TruthTablePass((c.msb,), tuple(c.columns), (((1,), (0,) * c.length),))
    mc.run_tt_pass(ap, tt)


def apply_lut_activation(ap: ApState, fmap: FieldMap, table: Mapping[int, int], window: int = 8) -> None:
    """C := table[clamp(C)] with C saturated to a signed ``window``-bit range.

    Overflow is detected per upper bit into two scratch flags, saturated C is
    copied into staging, and the table is applied from staging back into C.
    """
    c, k = fmap.c, fmap.k
    if not 1 <= window <= k:
        raise ApContractError(f"LUT window {window} outside [1, {k}]")
    pos, neg = fmap.t_prod, fmap.t_carry
    sign = c.msb
    ap.compare_write(KeyMask.empty(ap.width), _km(ap, {pos: 0, neg: 0}))
    for b in range(window - 1, k - 1):
        ap.compare_write(_km(ap, {sign: 0, c.col(b): 1}), _km(ap, {pos: 1}))
        ap.compare_write(_km(ap, {sign: 1, c.col(b): 0}), _km(ap, {neg: 1}))
    lo, hi = value_range(window, True)
    ap.compare_write(_km(ap, {pos: 1}), _km(ap, c.pattern(hi, True)))
    ap.compare_write(_km(ap, {neg: 1}), _km(ap, c.pattern(lo, True)))
    src = fmap.staging.sub(0, window, "S.win")
    mc.clear_field(ap, src)
    for b in range(window):
        ap.compare_write(_km(ap, {c.col(b): 1}), _km(ap, {src.col(b): 1}))
    mc.lut_apply(ap, c, src, table, True, True)


def restore_flags(ap: ApState, fmap: FieldMap) -> None:
    for b in range(2):
        p, f = fmap.pristine_flag.col(b), fmap.row_flag.col(b)
        ap.compare_write(_km(ap, {p: 1}), _km(ap, {f: 1}))
        ap.compare_write(_km(ap, {p: 0}), _km(ap, {f: 0}))


def extract_activations(ap: ApState, fmap: FieldMap, image: AcsrImage, shift: int, bits: int, signed: bool):
    """Read C from each block-start PU; returns (activations, raw C by row id)."""
    raw = {}
    idx, vals = [], []
    for start, rid in zip(image.block_starts.tolist(), image.row_ids.tolist()):
        row = ap.read_row(start)
        acc = bits_to_int(row[fmap.c.base:fmap.c.stop].tolist(), True)
        raw[rid] = acc
        q = requantize(acc, shift, bits, signed)
        if q:
            idx.append(rid)
            vals.append(q)
    return ActivationList(tuple(idx), tuple(vals), bits, signed), raw


# --- layer / network ----------------------------------------------------------


def prepare_ap(cfg: LayerConfig, trace: bool = False) -> ApState:
    """Fresh array sized to the layer, with the weight image loaded."""
    ap = ApState(max(cfg.image.depth, 1), cfg.fmap.width, cfg.long_step, trace=trace)
    load_image(ap, cfg.image, cfg.fmap)
    return ap


def _check_acts(cfg: LayerConfig, acts: ActivationList) -> None:
    if acts.signed != cfg.act_signed:
        raise LayerConfigError(f"activations signed={acts.signed}, layer expects signed={cfg.act_signed}")
    if acts.bits > cfg.fmap.n:
        raise LayerConfigError(f"{acts.bits}-bit activations exceed layer input width {cfg.fmap.n}")
    for i in acts.indices:
        if i >= cfg.n_cols:
            raise LayerConfigError(f"activation index {i} >= layer input size {cfg.n_cols}")
    if cfg.multiply == "lut":
        outside = sorted(set(acts.values) - set(cfg.act_codebook))
        if outside:
            raise LayerConfigError(f"activation values {outside[:4]} outside the product-table codebook")


def run_layer(ap: ApState, cfg: LayerConfig, acts: ActivationList) -> LayerResult:
    """Execute C = f(W x B) for one layer on a loaded array."""
    _check_acts(cfg, acts)
    fmap = cfg.fmap
    report = {}
    pre_activation = {}

    def stage(name, fn, *args):
        before = ap.counters.snapshot()
        try:
            out = fn(*args)
        except (ApContractError, ReductionError, mc.LutCoverageError) as exc:
            raise StageError(name, exc) from exc
        report[name] = ap.counters.snapshot() - before
        return out

    stage("broadcast", broadcast_activations, ap, fmap, acts, cfg.act_signed)
    products = cfg.product_table() if cfg.multiply == "lut" else None
    stage("multiply", multiply_stage, ap, fmap, cfg.act_signed, products)
    stage("reduce", soft_reduce, ap, fmap)
    if cfg.image.depth:
        c_vals = mc.peek_field(ap, fmap.c, True)
        pre_activation = {
            rid: int(c_vals[s]) for s, rid in zip(cfg.image.block_starts.tolist(), cfg.image.row_ids.tolist())
        }
    if cfg.activation == "relu":
        stage("activation", relu_stage, ap, fmap)
    elif cfg.activation in ("sigmoid", "tanh"):
        stage("activation", apply_lut_activation, ap, fmap, cfg.lut, cfg.lut_window)
    else:
        report["activation"] = CycleCounters()
    outputs, activated = stage(
        "extract", extract_activations, ap, fmap, cfg.image, cfg.shift, cfg.out_bits, cfg.out_signed
    )
    stage("restore", restore_flags, ap, fmap)
    return LayerResult(outputs, pre_activation, activated, report)


def activate(cfg: LayerConfig, acc: int) -> int:
    if cfg.activation == "relu":
        return max(acc, 0)
    if cfg.activation == "none":
        return acc
    lo, hi = value_range(cfg.lut_window, True)
    return int(cfg.lut[min(max(acc, lo), hi)])


class AccumulatorOverflowError(LayerConfigError):
    pass


def reference_layer(cfg: LayerConfig, acts: ActivationList) -> LayerResult:
    """Unbounded-integer evaluation of the layer; the ground truth for the simulator."""
    _check_acts(cfg, acts)
    b = acts.as_dict()
    img = cfg.image
    bounds = img.block_starts.tolist() + [img.depth]
    accs, activated = {}, {}
    idx, vals = [], []
    lo, hi = value_range(cfg.fmap.k, True)
    for blk, rid in enumerate(img.row_ids.tolist()):
        acc = 0
        for p in range(bounds[blk], bounds[blk + 1]):
            acc += int(img.values[p]) * b.get(int(img.col_index[p]), 0)
        if not lo <= acc <= hi:
            raise AccumulatorOverflowError(f"row {rid}: accumulator {acc} overflows {cfg.fmap.k} bits")
        accs[rid] = acc
        out = activate(cfg, acc)
        activated[rid] = out
        q = requantize(out, cfg.shift, cfg.out_bits, cfg.out_signed)
        if q:
            idx.append(rid)
            vals.append(q)
    return LayerResult(ActivationList(tuple(idx), tuple(vals), cfg.out_bits, cfg.out_signed), accs, activated)


@dataclass
class NetworkResult:
    outputs: ActivationList
    layers: list
    load: CycleCounters
    traces: list = field(default_factory=list)

    def report(self) -> dict:
        """Per-stage counters summed over layers (load excluded)."""
        out = {}
        for lr in self.layers:
            for name, c in lr.report.items():
                out[name] = out[name] + c if name in out else c
        return out

    @property
    def cycles(self) -> int:
        return sum(lr.cycles for lr in self.layers)


def check_chain(layers: Sequence[LayerConfig]) -> None:
    if not layers:
        raise LayerConfigError("network has no layers")
    for i in range(1, len(layers)):
        prev, cur = layers[i - 1], layers[i]
        if cur.n_cols != prev.n_rows:
            raise LayerConfigError(f"layer {i} expects {cur.n_cols} inputs, layer {i - 1} produces {prev.n_rows}")
        if prev.out_bits > cur.fmap.n or prev.out_signed != cur.act_signed:
            raise LayerConfigError(f"layer {i - 1} output format does not match layer {i} input")


def run_network(layers: Sequence[LayerConfig], inputs: ActivationList, trace: bool = False) -> NetworkResult:
    """One array per layer; activations pass through the host between layers."""
    check_chain(layers)
    acts = inputs
    results = []
    load = CycleCounters()
    traces = []
    for cfg in layers:
        ap = prepare_ap(cfg, trace=trace)
        load = load + ap.counters.snapshot()
        start = len(ap.counters.log) if trace else 0
        res = run_layer(ap, cfg, acts)
        if trace:
            traces.append(ap.counters.log[start:])
        results.append(res)
        acts = res.outputs
    return NetworkResult(acts, results, load, traces)


def reference_network(layers: Sequence[LayerConfig], inputs: ActivationList) -> NetworkResult:
    check_chain(layers)
    acts = inputs
    results = []
    for cfg in layers:
        res = reference_layer(cfg, acts)
        results.append(res)
        acts = res.outputs
    return NetworkResult(acts, results, CycleCounters())


def nnz_effective(cfg: LayerConfig, acts: ActivationList) -> int:
    """Multiply-accumulates that meet a nonzero activation."""
    present = np.zeros(max(cfg.n_cols, 1), dtype=bool)
    if acts.indices:
        present[list(acts.indices)] = True
    return int(present[cfg.image.col_index].sum()) if cfg.image.depth else 0
