"""Command-line driver: run, check, sweep and trace.

Exit codes: 0 success, 1 configuration or input error, 2 internal contract
violation, 3 simulator/reference mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import cost_model as cm
from .acsr import QuantizationError
from .ap_core import ApContractError
from .fc_engine import (
    LayerConfig,
    LayerConfigError,
    ReductionError,
    StageError,
    nnz_effective,
    reference_network,
    run_network,
)
from .formats import read_activations, read_lut, read_matrix_market

log = logging.getLogger("assocpim")

EXIT_OK, EXIT_CONFIG, EXIT_CONTRACT, EXIT_MISMATCH = 0, 1, 2, 3


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    weights: list = field(default_factory=list)
    input: str | None = None
    wbits: int = 16
    abits: int = 16
    kbits: int | None = None
    activation: str | list = "relu"
    scale: int = 0
    act_scale: int | None = None
    signed_acts: bool = False
    shift: int | list = 0
    lut: str | list | None = None
    lut_window: int = 8
    multiply: str = "bitserial"
    act_codebook: list | None = None
    long_step: int = 16
    costs: str | None = None
    seed: int = 0
    out: str | None = None
    trace: str | None = None
    limit: int | None = None
    jobs: int = 1
    param: str | None = None
    grid: list | None = None
    sweep_rows: int = 64
    sweep_cols: int = 64
    act_density: float = 0.5

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> "RunConfig":
        data = {}
        if path:
            try:
                data = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: top level must be an object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if isinstance(self.weights, str):
            self.weights = [self.weights]
        for name in ("wbits", "abits", "long_step", "jobs", "lut_window"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.limit is not None and self.limit < 0:
            raise ConfigError("limit must be >= 0")
        if self.param not in (None, "sparsity", "wordlength"):
            raise ConfigError(f"unknown sweep parameter {self.param!r}")
        if self.multiply not in ("bitserial", "lut"):
            raise ConfigError(f"unknown multiply mode {self.multiply!r}")

    def per_layer(self, name: str, i: int):
        v = getattr(self, name)
        if isinstance(v, list):
            if len(v) != len(self.weights):
                raise ConfigError(f"{name} lists {len(v)} values for {len(self.weights)} layers")
            return v[i]
        return v

    def cost_constants(self) -> cm.CostConstants:
        if not self.costs:
            return cm.CostConstants()
        try:
            return cm.CostConstants.from_json(self.costs)
        except FileNotFoundError:
            raise ConfigError(f"cost constants file not found: {self.costs}") from None
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{self.costs}: {exc}") from None


def build_layers(cfg: RunConfig) -> list[LayerConfig]:
    if not cfg.weights:
        raise ConfigError("no weight files given")
    layers = []
    for i, path in enumerate(cfg.weights):
        if not Path(path).is_file():
            raise ConfigError(f"weights file not found: {path}")
        try:
            matrix = read_matrix_market(path, cfg.wbits, cfg.scale)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        lut_path = cfg.per_layer("lut", i)
        lut = None
        if lut_path:
            if not Path(lut_path).is_file():
                raise ConfigError(f"LUT file not found: {lut_path}")
            lut = read_lut(lut_path)
        try:
            layers.append(
                LayerConfig.from_matrix(
                    matrix,
                    cfg.abits,
                    k=cfg.kbits,
                    activation=cfg.per_layer("activation", i),
                    act_signed=cfg.signed_acts,
                    shift=int(cfg.per_layer("shift", i)),
                    out_bits=cfg.abits,
                    out_signed=cfg.signed_acts,
                    lut=lut,
                    lut_window=cfg.lut_window,
                    long_step=cfg.long_step,
                    multiply=cfg.multiply,
                    act_codebook=tuple(cfg.act_codebook) if cfg.act_codebook else None,
                )
            )
        except (QuantizationError, ValueError) as exc:
            raise ConfigError(f"layer {i} ({path}): {exc}") from None
    return layers


def load_inputs(cfg: RunConfig):
    if not cfg.input:
        raise ConfigError("no activation input given")
    if not Path(cfg.input).is_file():
        raise ConfigError(f"activation file not found: {cfg.input}")
    frac = cfg.scale if cfg.act_scale is None else cfg.act_scale
    try:
        return read_activations(cfg.input, cfg.abits, cfg.signed_acts, frac)
    except ValueError as exc:
        raise ConfigError(f"{cfg.input}: {exc}") from None


def _acts_dict(acts) -> dict:
    return {"indices": list(acts.indices), "values": list(acts.values), "bits": acts.bits, "signed": acts.signed}


def summarize(layers, result, inputs, consts: cm.CostConstants) -> dict:
    total = None
    area = 0.0
    nnz_eff = 0
    acts = inputs
    layer_out = []
    for cfg, lr in zip(layers, result.layers):
        counters = lr.total()
        total = counters if total is None else total + counters
        area += cm.estimate_area(max(cfg.image.depth, 1), cfg.fmap.width, consts)
        nnz_eff += nnz_effective(cfg, acts)
        layer_out.append(
            {
                "nnz": cfg.image.depth,
                "width": cfg.fmap.width,
                "k": cfg.fmap.k,
                "stage_cycles": {k: v.cycles for k, v in lr.report.items()},
                "accumulators": {str(k): v for k, v in sorted(lr.accumulators.items())},
                "outputs": _acts_dict(lr.outputs),
            }
        )
        acts = lr.outputs
    est = cm.estimate_throughput(total, consts, nnz_eff, area_mm2=area)
    return {
        "outputs": _acts_dict(result.outputs),
        "layers": layer_out,
        "cycles": total.cycles,
        "load_cycles": result.load.cycles,
        "estimates": est.as_dict(),
    }


def _write_text(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_run(cfg: RunConfig) -> int:
    layers = build_layers(cfg)
    inputs = load_inputs(cfg)
    consts = cfg.cost_constants()
    result = run_network(layers, inputs)
    _write_text(cfg.out, json.dumps(summarize(layers, result, inputs, consts), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def first_mismatch(sim, ref):
    """(layer, row, what, simulated, expected) for the first difference, else None."""
    for li, (s, r) in enumerate(zip(sim.layers, ref.layers)):
        for what in ("accumulators", "activated"):
            a, b = getattr(s, what), getattr(r, what)
            for row in sorted(set(a) | set(b)):
                if a.get(row) != b.get(row):
                    return li, row, what, a.get(row), b.get(row)
        sa, ra = s.outputs.as_dict(), r.outputs.as_dict()
        for row in sorted(set(sa) | set(ra)):
            if sa.get(row, 0) != ra.get(row, 0):
                return li, row, "outputs", sa.get(row, 0), ra.get(row, 0)
    return None


def cmd_check(cfg: RunConfig, fault: tuple[int, int] | None = None) -> int:
    layers = build_layers(cfg)
    inputs = load_inputs(cfg)
    sim = run_network(layers, inputs)
    try:
        ref = reference_network(layers, inputs)
    except LayerConfigError as exc:
        raise ConfigError(str(exc)) from None
    if fault is not None:
        li, row = fault
        sim.layers[li].accumulators[row] = sim.layers[li].accumulators.get(row, 0) + 1
    bad = first_mismatch(sim, ref)
    if bad is None:
        n = sum(len(l.accumulators) for l in ref.layers)
        _write_text(cfg.out, f"OK: {len(layers)} layers, {n} rows bit-exact\n")
        return EXIT_OK
    li, row, what, got, want = bad
    _write_text(cfg.out, f"MISMATCH layer {li} row {row} {what}: simulator={got} reference={want}\n")
    return EXIT_MISMATCH


def cmd_sweep(cfg: RunConfig) -> int:
    if cfg.param is None:
        raise ConfigError("sweep needs --param sparsity|wordlength")
    grid = cfg.grid
    if grid is None:
        grid = [0.05, 0.1, 0.2, 0.4] if cfg.param == "sparsity" else [4, 8, 16]
    base = cm.SweepBase(
        n_rows=cfg.sweep_rows,
        n_cols=cfg.sweep_cols,
        wbits=cfg.wbits,
        abits=cfg.abits,
        act_density=cfg.act_density,
        activation=cfg.activation if isinstance(cfg.activation, str) else cfg.activation[0],
        long_step=cfg.long_step,
        seed=cfg.seed,
        multiply=cfg.multiply,
    )
    consts = cfg.cost_constants()
    try:
        if cfg.param == "sparsity":
            rows = cm.sweep_sparsity(base, [float(g) for g in grid], consts, cfg.jobs)
        else:
            rows = cm.sweep_wordlength(base, [int(g) for g in grid], consts, cfg.jobs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _write_text(cfg.out, cm.format_csv(rows))
    return EXIT_OK


def cmd_trace(cfg: RunConfig) -> int:
    layers = build_layers(cfg)
    inputs = load_inputs(cfg)
    result = run_network(layers, inputs, trace=True)
    limit = cfg.limit
    lines = []
    seq = 0
    for records in result.traces:
        for r in records:
            if limit is not None and seq >= limit:
                break
            d = r.as_dict()
            d["seq"] = seq
            lines.append(json.dumps(d) + "\n")
            seq += 1
    _write_text(cfg.trace or cfg.out, "".join(lines))
    return EXIT_OK


def _grid(text: str) -> list:
    return [float(x) if "." in x else int(x) for x in text.split(",") if x.strip()]


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="assocpim", description="Associative in-memory FC-layer simulator")
    p.add_argument("command", choices=["run", "check", "sweep", "trace"])
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--weights", nargs="+", help="Matrix Market weight files, one per layer")
    p.add_argument("--input", help="activation file (index,value CSV or dense vector)")
    p.add_argument("--wbits", type=int)
    p.add_argument("--abits", type=int)
    p.add_argument("--kbits", type=int)
    p.add_argument("--activation", choices=["relu", "sigmoid", "tanh", "none"])
    p.add_argument("--scale", type=int, help="fractional bits used to quantize real weights")
    p.add_argument("--signed-acts", dest="signed_acts", action="store_const", const=True)
    p.add_argument("--long-step", dest="long_step", type=int)
    p.add_argument("--costs", help="JSON file with cost constants")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--trace")
    p.add_argument("--limit", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--param", choices=["sparsity", "wordlength"])
    p.add_argument("--grid", type=_grid)
    p.add_argument("--inject-fault", dest="inject_fault", help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "inject_fault", "verbose")}
    try:
        cfg = RunConfig.load(args.config, overrides)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "check":
            fault = None
            if args.inject_fault:
                li, row = args.inject_fault.split(":")
                fault = (int(li), int(row))
            return cmd_check(cfg, fault)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        return cmd_trace(cfg)
    except (ConfigError, LayerConfigError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: simulation failed in {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ApContractError, ReductionError) as exc:
        print(f"error: contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
