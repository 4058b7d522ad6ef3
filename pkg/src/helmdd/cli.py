"""Command-line entry point: ``helmdd <verb> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .grid import FrequencySpec, InvalidArgument
from .harness import (ConfigError, RunConfig, build_model, iteration_frequency_sweep, reference_fields, run,
                      scaling_study, source_positions)
from .oracle import ErrorMetricConfig, error_metric, export_slice_csv, load_field, save_field
from .stencil import FitConfig, build_weight_table

log = logging.getLogger("helmdd")


def _parse_partition(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"partition {text!r} is not of the form PXxPYxPZ")
    return tuple(int(p) for p in parts)


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    shortcuts = {"out": "output", "seed": "seed", "precision": "solver.precision", "tol": "solver.tol",
                 "ortho": "solver.ortho", "restart": "solver.restart", "max_iterations": "solver.max_iterations",
                 "workers": "partition.workers", "ovl": "partition.ovl", "interface": "partition.interface",
                 "level": "preconditioner.level", "oracle": "oracle.kind", "sources": "sources.count"}
    for attr, key in shortcuts.items():
        v = getattr(args, attr, None)
        if v is not None:
            overrides.append(f"{key}={json.dumps(v)}")
    if getattr(args, "frequency", None):
        overrides.append(f"frequencies={json.dumps(args.frequency)}")
    if getattr(args, "partition", None):
        px, py, pz = args.partition
        overrides += [f"partition.px={px}", f"partition.py={py}", f"partition.pz={pz}"]
    if args.config is None:
        from .harness import apply_overrides
        return RunConfig.from_dict(apply_overrides({}, overrides))
    return RunConfig.from_toml(args.config, overrides)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="TOML run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any configuration key, e.g. --set model.shape=[48,48,48]")
    p.add_argument("--out", help="output directory")
    p.add_argument("--frequency", type=float, nargs="+", help="frequencies in Hz")
    p.add_argument("--partition", type=_parse_partition, help="subdomains as PXxPYxPZ")
    p.add_argument("--ovl", type=int)
    p.add_argument("--interface", choices=("pml", "robin", "dirichlet"))
    p.add_argument("--level", choices=("none", "one", "two"))
    p.add_argument("--precision", choices=("single", "double"))
    p.add_argument("--tol", type=float)
    p.add_argument("--ortho", choices=("cgs", "mgs"))
    p.add_argument("--restart", type=int)
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sources", type=int, help="number of sources")
    p.add_argument("--oracle", choices=("none", "analytic", "cbs"))


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run(cfg)
    for r in res.results:
        err = "" if r.errors is None else " Err=" + ",".join(f"{e:.4f}" for e in r.errors)
        print(f"f={r.frequency:g} Hz dofs={r.dofs} subdomains={r.subdomains} its={r.report.iterations} "
              f"T_f={r.report.setup_time:.2f}s T_s={r.report.solve_time:.2f}s{err}")
    print(f"artifacts in {cfg.output}")
    return res.exit_code


def cmd_sweep(args) -> int:
    cfg = _config(args)
    freqs = args.frequency or cfg.frequencies
    table = iteration_frequency_sweep(cfg, freqs, args.subdomain_size)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(table.to_dict(), indent=1))
    for f, it, n in zip(table.frequencies, table.iterations, table.subdomains):
        print(f"f={f:g} Hz its={it} subdomains={n}")
    print(f"growth exponent {table.exponent:.3f}")
    return 0 if table.all_converged else 1


def cmd_scaling(args) -> int:
    cfg = _config(args)
    parts = args.cases
    freqs = args.frequency or cfg.frequencies
    if len(freqs) == 1:
        freqs = freqs * len(parts)
    if len(freqs) != len(parts):
        raise ConfigError("give one frequency or one per partition")
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    records = scaling_study(cfg, list(zip(freqs, parts)), args.mode, out / "scaling.jsonl")
    for r in records:
        print(f"f={r.frequency:g} dofs={r.dofs:.0f} workers={r.workers} its={r.iterations} "
              f"T_tot={r.total_time:.2f}s E={r.efficiency:.3f}")
    return 0


def cmd_fit_weights(args) -> int:
    table = build_weight_table(args.g_min, args.g_max, args.samples,
                               FitConfig(n_directions=args.directions, ridge=args.ridge))
    table.save(args.output)
    print(f"wrote {len(table.G_values)} samples to {args.output}")
    return 0


def cmd_oracle(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.oracle.kind == "none":
        cfg = replace(cfg, oracle=replace(cfg.oracle, kind=args.method))
    for f in cfg.frequencies:
        freq = FrequencySpec(f)
        model = build_model(cfg, f)
        sources = source_positions(cfg, model)
        ref = reference_fields(cfg, model, freq, sources)
        stem = out / f"reference_f{f:g}Hz"
        save_field(stem.with_suffix(".json"), stem.with_suffix(".bin"), ref, model.grid, "complex128",
                   meta={"frequency": f, "oracle": cfg.oracle.kind,
                         "sources": [list(s.position) for s in sources]})
        if args.slice_csv:
            export_slice_csv(out / f"reference_f{f:g}Hz_slice.csv", ref[..., 0], model.grid)
        print(f"wrote {stem}.json/.bin")
    return 0


def cmd_compare(args) -> int:
    ref, g_ref, h_ref = load_field(args.reference_header, args.reference_data)
    test, g_test, _ = load_field(args.test_header, args.test_data)
    if g_ref.shape != g_test.shape or ref.shape != test.shape:
        raise InvalidArgument(f"grids differ: {ref.shape} vs {test.shape}")
    sources = args.source or h_ref.get("meta", {}).get("sources")
    if not sources:
        raise InvalidArgument("source position unknown: pass --source X Y Z")
    if args.source:
        sources = [args.source]
    errs = []
    for j in range(ref.shape[3]):
        src = sources[min(j, len(sources) - 1)]
        cfg = ErrorMetricConfig(tuple(src), args.wavelength, args.mute)
        errs.append(error_metric(ref[..., j], test[..., j], g_ref, cfg))
    print(json.dumps({"err": errs}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="helmdd", description="Domain-decomposed 3D Helmholtz solver and benchmarks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="solve every configured frequency and write artifacts")
    _common(r)
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="iteration counts against frequency at fixed points per wavelength")
    _common(s)
    s.add_argument("--subdomain-size", type=int, default=None, help="nodes per subdomain along each axis")
    s.set_defaults(fn=cmd_sweep)

    sc = sub.add_parser("scaling", help="weak or strong scaling records (JSON lines)")
    _common(sc)
    sc.add_argument("--cases", type=_parse_partition, nargs="+", required=True, help="partitions, e.g. 1x1x1 2x2x2")
    sc.add_argument("--mode", choices=("weak", "strong"), default="strong")
    sc.set_defaults(fn=cmd_scaling)

    fw = sub.add_parser("fit-weights", help="fit and save the stencil weight table")
    fw.add_argument("--g-min", type=float, default=4.0)
    fw.add_argument("--g-max", type=float, default=40.0)
    fw.add_argument("--samples", type=int, default=25)
    fw.add_argument("--directions", type=int, default=96)
    fw.add_argument("--ridge", type=float, default=1e-6)
    fw.add_argument("--output", "-o", default="weights.json")
    fw.set_defaults(fn=cmd_fit_weights)

    o = sub.add_parser("oracle", help="write reference fields (analytic or Born series)")
    _common(o)
    o.add_argument("--method", choices=("analytic", "cbs"), default="cbs")
    o.add_argument("--slice-csv", action="store_true", help="also export the middle z-slice as CSV")
    o.set_defaults(fn=cmd_oracle)

    c = sub.add_parser("compare", help="weighted error between two field files")
    c.add_argument("reference_header")
    c.add_argument("reference_data")
    c.add_argument("test_header")
    c.add_argument("test_data")
    c.add_argument("--source", type=float, nargs=3, metavar=("X", "Y", "Z"))
    c.add_argument("--wavelength", type=float, required=True, help="mute unit in metres")
    c.add_argument("--mute", type=float, default=1.0, help="mute radius in wavelengths")
    c.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return int(args.fn(args))
    except (ConfigError, InvalidArgument, ValueError) as exc:
        print(f"helmdd {args.verb}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
