"""Area, energy and throughput estimates plus design-space sweeps."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .acsr import SparseMatrix, build_field_map, encode_acsr
from .ap_core import CycleCounters
from .fc_engine import (
    ActivationList,
    LayerConfig,
    broadcast_activations,
    multiply_stage,
    prepare_ap,
    run_layer,
)


@dataclass(frozen=True)
class CostConstants:
    """28nm figures. Per-bitcell compare/write energies are uncalibrated placeholders."""

    a_cell_um2: float = 0.135
    a_tag_um2: float = 7.1
    e_tag_fj: float = 5.6
    e_cell_cmp_fj: float = 1.0
    e_cell_wr_fj: float = 1.0
    freq_mhz: float = 1000.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")
        if self.freq_mhz == 0:
            raise ValueError("frequency must be positive")

    @classmethod
    def from_json(cls, path) -> "CostConstants":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown cost constants: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class Estimates:
    area_mm2: float
    energy_J: float
    latency_s: float
    inferences_per_s: float
    gops: float

    def as_dict(self) -> dict:
        return asdict(self)


def estimate_area(depth: int, width: int, consts: CostConstants = CostConstants()) -> float:
    """CAM bitcells plus one tag cell per row, in mm^2. Periphery excluded."""
    return depth * (width * consts.a_cell_um2 + consts.a_tag_um2) * 1e-6


def estimate_energy(report: CycleCounters, consts: CostConstants = CostConstants()) -> float:
    fj = (
        report.cmp_cell_events * consts.e_cell_cmp_fj
        + report.wr_cell_events * consts.e_cell_wr_fj
        + report.tag_events * consts.e_tag_fj
    )
    return fj * 1e-15


def estimate_throughput(
    report: CycleCounters | int,
    consts: CostConstants = CostConstants(),
    nnz_effective: int = 0,
    area_mm2: float = 0.0,
    energy_J: float | None = None,
) -> Estimates:
    cycles = report if isinstance(report, (int, np.integer)) else report.cycles
    if cycles <= 0:
        raise ValueError("throughput needs a positive cycle count")
    latency = cycles / (consts.freq_mhz * 1e6)
    if energy_J is None:
        energy_J = 0.0 if isinstance(report, (int, np.integer)) else estimate_energy(report, consts)
    return Estimates(area_mm2, energy_J, latency, 1.0 / latency, 2 * nnz_effective / latency * 1e-9)


# --- sweeps -----------------------------------------------------------------


@dataclass(frozen=True)
class SweepBase:
    """Synthetic single-layer workload used by the sweeps."""

    n_rows: int = 64
    n_cols: int = 64
    wbits: int = 8
    abits: int = 8
    density: float = 1.0
    act_density: float = 0.5
    activation: str = "relu"
    long_step: int = 16
    seed: int = 0
    multiply: str = "bitserial"
    codebook_size: int = 16


def random_layer(base: SweepBase, rng: np.random.Generator, max_block_len: int | None = None):
    """Random weights at the base density plus a random activation vector.

    Table-multiply workloads draw weights and activations from codebooks of
    ``codebook_size`` values.
    """
    total = base.n_rows * base.n_cols
    nnz = int(round(base.density * total))
    flat = np.sort(rng.choice(total, size=nnz, replace=False))
    rows, cols = np.divmod(flat, base.n_cols)
    wlo, whi = -(1 << (base.wbits - 1)), (1 << (base.wbits - 1)) - 1
    ahi = (1 << base.abits) - 1
    if base.multiply == "lut":
        wbook = _codebook(rng, wlo, whi, base.codebook_size)
        abook = _codebook(rng, 1, ahi, base.codebook_size)
        vals = rng.choice(wbook, size=nnz)
    else:
        abook = None
        vals = rng.integers(wlo, whi + 1, size=nnz)
        vals[vals == 0] = whi if whi else wlo
    matrix = SparseMatrix(base.n_rows, base.n_cols, rows, cols, vals, base.wbits)
    image = encode_acsr(matrix)
    mbl = image.max_block_len if max_block_len is None else max_block_len
    fmap = build_field_map(base.n_cols, base.wbits, base.abits, max(mbl, 1))
    cfg = LayerConfig(
        image,
        fmap,
        activation=base.activation,
        long_step=base.long_step,
        multiply=base.multiply,
        act_codebook=tuple(abook) if abook is not None else None,
    )
    n_act = int(round(base.act_density * base.n_cols))
    idx = np.sort(rng.choice(base.n_cols, size=n_act, replace=False))
    avals = rng.choice(abook, size=n_act) if abook is not None else rng.integers(1, ahi + 1, size=n_act)
    acts = ActivationList(tuple(idx.tolist()), tuple(int(v) for v in avals), base.abits, False)
    return cfg, acts


def _codebook(rng, lo, hi, size):
    pool = [v for v in range(lo, hi + 1) if v]
    size = min(size, len(pool))
    return sorted(int(v) for v in rng.choice(pool, size=size, replace=False))


def _sparsity_point(args):
    base, density, consts = args
    point = replace(base, density=density)
    cfg, acts = random_layer(point, np.random.default_rng(base.seed), max_block_len=base.n_cols)
    ap = prepare_ap(cfg)
    res = run_layer(ap, cfg, acts)
    total = res.total()
    return {
        "density": density,
        "nnz": cfg.image.depth,
        "width": cfg.fmap.width,
        "area_mm2": estimate_area(cfg.image.depth, cfg.fmap.width, consts),
        "energy_per_inference_J": estimate_energy(total, consts),
        "cycles": total.cycles,
    }


def _wordlength_point(args):
    base, q, consts = args
    point = replace(base, wbits=q, abits=q)
    cfg, acts = random_layer(point, np.random.default_rng(base.seed))
    ap = prepare_ap(cfg)
    broadcast_activations(ap, cfg.fmap, acts)
    before = ap.counters.snapshot()
    products = cfg.product_table() if cfg.multiply == "lut" else None
    multiply_stage(ap, cfg.fmap, False, products)
    cycles_mul = (ap.counters.snapshot() - before).cycles
    res = run_layer(prepare_ap(cfg), cfg, acts)
    return {
        "wordlength": q,
        "width": cfg.fmap.width,
        "area_mm2": estimate_area(cfg.image.depth, cfg.fmap.width, consts),
        "cycles_mul": cycles_mul,
        "energy_per_inference_J": estimate_energy(res.total(), consts),
        "cycles": res.cycles,
    }


def _map(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def sweep_sparsity(base: SweepBase, densities, consts: CostConstants = CostConstants(), jobs: int = 1) -> list[dict]:
    """One row per weight density; the field layout is fixed to the dense case."""
    for d in densities:
        if not 0 < d <= 1:
            raise ValueError(f"density {d} outside (0, 1]")
    return _map(_sparsity_point, [(base, float(d), consts) for d in densities], jobs)


def sweep_wordlength(base: SweepBase, wordlengths, consts: CostConstants = CostConstants(), jobs: int = 1) -> list[dict]:
    """One row per m = n wordlength: multiply-stage cycles and full-layer energy."""
    for q in wordlengths:
        if int(q) < 1:
            raise ValueError(f"wordlength {q} < 1")
    return _map(_wordlength_point, [(base, int(q), consts) for q in wordlengths], jobs)


def format_csv(rows: list[dict]) -> str:
    """Header plus one line per row; floats in scientific notation, 6 significant digits."""
    buf = io.StringIO()
    if not rows:
        return ""
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(rows[0]))
    for row in rows:
        writer.writerow([f"{v:.5e}" if isinstance(v, float) else v for v in row.values()])
    return buf.getvalue()
