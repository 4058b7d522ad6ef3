"""Benchmark orchestration: configuration, runs, sweeps and scaling records."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .assembly import BoundarySpec, PmlProfile, assemble, build_rhs, SOURCE_SPREADS
from .grid import (FrequencySpec, InvalidArgument, PointSource, VelocityModel, attenuate, build_gradient,
                   build_homogeneous, build_layered_random, load_raw_model)
from .krylov import KrylovConfig, SolveReport, gmres
from .local import INTERFACES
from .oracle import (CbsConfig, ErrorMetricConfig, analytic_on_grid, cbs_solve, error_metric, save_field)
from .oras import TwoLevelOras, build_coarse_space, build_oras
from .partition import WorkerPool, distributed_matvec, gather, partition_grid, restrict_operator, scatter
from .schemas import validate
from .stencil import WeightTable, default_table

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

MODEL_KINDS = ("homogeneous", "gradient", "layered-random", "raw")
SOURCE_LAYOUTS = ("center", "grid", "explicit")
LEVELS = ("none", "one", "two")
ORACLES = ("none", "analytic", "cbs")


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    kind: str = "homogeneous"
    shape: tuple[int, int, int] | None = (32, 32, 32)
    extent: tuple[float, float, float] | None = None
    c0: float = 1500.0
    alpha: float = 0.0
    axis: int = 1
    ppw: float = 4.0
    c_range: tuple[float, float] = (1500.0, 3000.0)
    n_layers: int | None = None
    lateral: float = 0.2
    header: str | None = None
    data: str | None = None
    Q: float | None = None


@dataclass
class PartitionSection:
    px: int = 1
    py: int = 1
    pz: int = 1
    ovl: int = 3
    interface: str = "pml"
    workers: int = 1


@dataclass
class PreconditionerSection:
    level: str = "one"
    coarsening: int = 2
    coarse_ovl: int = 1
    inner_tol: float = 1e-1
    coarse_operator: str = "rediscretized"
    exact_coarse: bool = False


@dataclass
class SourceSection:
    layout: str = "center"
    count: int = 1
    plane: float = 0.5          # fractional position of the source plane along z
    positions: list = field(default_factory=list)
    spread: str = "mass"


@dataclass
class OracleSection:
    kind: str = "none"
    mute_wavelengths: float = 1.0
    cbs: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    frequencies: list = field(default_factory=lambda: [10.0])
    boundary: dict = field(default_factory=dict)
    pml: dict = field(default_factory=dict)
    partition: PartitionSection = field(default_factory=PartitionSection)
    solver: dict = field(default_factory=dict)
    preconditioner: PreconditionerSection = field(default_factory=PreconditionerSection)
    sources: SourceSection = field(default_factory=SourceSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    output: str = "out"
    seed: int = 0
    weight_table: str | None = None
    write_fields: bool = True
    distributed: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        m = self.model
        if m.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {m.kind!r}")
        if m.kind == "raw":
            for p in (m.header, m.data):
                if p is None or not Path(p).exists():
                    raise ConfigError(f"raw model file {p!r} does not exist")
        elif m.shape is None and m.extent is None:
            raise ConfigError("model needs a shape or an extent")
        if m.kind == "layered-random" and m.shape is None:
            raise ConfigError("layered-random models are defined by their shape")
        if self.weight_table is not None and not Path(self.weight_table).exists():
            raise ConfigError(f"weight table {self.weight_table!r} does not exist")
        if not self.frequencies or any(f <= 0 for f in self.frequencies):
            raise ConfigError("need at least one positive frequency")
        if self.partition.interface not in INTERFACES:
            raise ConfigError(f"unknown interface {self.partition.interface!r}")
        if self.preconditioner.level not in LEVELS:
            raise ConfigError(f"unknown preconditioner level {self.preconditioner.level!r}")
        if self.sources.layout not in SOURCE_LAYOUTS:
            raise ConfigError(f"unknown source layout {self.sources.layout!r}")
        if self.sources.spread not in SOURCE_SPREADS:
            raise ConfigError(f"unknown source spread {self.sources.spread!r}")
        if self.sources.layout == "explicit" and not self.sources.positions:
            raise ConfigError("explicit source layout needs positions")
        if self.sources.count < 1:
            raise ConfigError("need at least one source")
        if self.oracle.kind not in ORACLES:
            raise ConfigError(f"unknown oracle {self.oracle.kind!r}")
        try:
            self.krylov
            self.boundary_spec
            self.pml_profile
            self.cbs_config
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def krylov(self) -> KrylovConfig:
        flexible = self.preconditioner.level == "two" or self.solver.get("flexible", False)
        return KrylovConfig(**{**self.solver, "flexible": flexible})

    @property
    def boundary_spec(self) -> BoundarySpec:
        if isinstance(self.boundary, str):
            return BoundarySpec.uniform(self.boundary)
        b = dict(self.boundary)
        return BoundarySpec.from_mapping(b, default=b.pop("default", "pml"))

    @property
    def pml_profile(self) -> PmlProfile:
        return PmlProfile(**self.pml)

    @property
    def cbs_config(self) -> CbsConfig:
        return CbsConfig(**self.oracle.cbs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {"model": ModelSection, "partition": PartitionSection, "preconditioner": PreconditionerSection,
                    "sources": SourceSection, "oracle": OracleSection}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in sections:
                sec = sections[k]
                names = {f.name for f in fields(sec)}
                bad = set(v) - names
                if bad:
                    raise ConfigError(f"unknown keys in [{k}]: {sorted(bad)}")
                v = dict(v)
                for key in ("shape", "extent", "c_range"):
                    if v.get(key) is not None and key in names:
                        v[key] = tuple(v[key])
                kw[k] = sec(**v)
            else:
                kw[k] = v
        if "frequencies" in kw:
            kw["frequencies"] = [float(f) for f in np.atleast_1d(kw["frequencies"])]
        return cls(**kw)

    @classmethod
    def from_toml(cls, path, overrides: Sequence[str] = ()) -> "RunConfig":
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
        return cls.from_dict(apply_overrides(d, overrides))


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as TOML literals."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return d


# -- model and sources ------------------------------------------------------

def build_model(cfg: RunConfig, f: float) -> VelocityModel:
    m = cfg.model
    if m.kind == "raw":
        model = load_raw_model(m.header, m.data)
    elif m.kind == "layered-random":
        model = build_layered_random(m.shape, f, m.ppw, m.c_range, seed=cfg.seed, n_layers=m.n_layers,
                                     lateral=m.lateral)
    else:
        c_min = m.c0 if m.kind == "homogeneous" or m.alpha >= 0 else None
        extent = m.extent
        if extent is None:
            if c_min is None:
                raise ConfigError("a decreasing gradient needs an explicit extent")
            h = c_min / (f * m.ppw)
            extent = tuple((n - 1) * h for n in m.shape)
        if m.kind == "homogeneous":
            model = build_homogeneous(extent, m.c0, f, m.ppw)
        else:
            model = build_gradient(extent, m.c0, m.alpha, m.axis, f, m.ppw)
    if m.Q is not None:
        model = attenuate(model, m.Q)
    return model


def source_positions(cfg: RunConfig, model: VelocityModel) -> list[PointSource]:
    s = cfg.sources
    g = model.grid
    if s.layout == "explicit":
        return [PointSource(tuple(p)) for p in s.positions]
    centre = [g.origin[a] + g.h * (g.shape[a] // 2) for a in range(3)]
    if s.layout == "center":
        return [PointSource(tuple(centre)) for _ in range(s.count)]
    # regular array of nodes in the plane z = plane * extent, inset by one node
    na = int(math.ceil(math.sqrt(s.count)))
    nb = int(math.ceil(s.count / na))
    iz = int(round(s.plane * (g.nz - 1)))
    xs = np.linspace(1, g.nx - 2, na).round().astype(int) if g.nx > 2 else np.zeros(na, int)
    ys = np.linspace(1, g.ny - 2, nb).round().astype(int) if g.ny > 2 else np.zeros(nb, int)
    out = []
    for iy in ys:
        for ix in xs:
            if len(out) == s.count:
                break
            out.append(PointSource((g.origin[0] + g.h * ix, g.origin[1] + g.h * iy, g.origin[2] + g.h * iz)))
    return out


# -- single run -------------------------------------------------------------

@dataclass
class FrequencyResult:
    frequency: float
    model: VelocityModel
    sources: list[PointSource]
    report: SolveReport
    fields: np.ndarray            # model grid shape + (nrhs,)
    dofs: int
    subdomains: int
    errors: list[float] | None = None

    def summary(self) -> dict:
        r = self.report
        return {"frequency": self.frequency, "dofs": self.dofs, "subdomains": self.subdomains,
                "nrhs": len(self.sources), "iterations": r.iterations, "converged": r.converged,
                "setup_time": r.setup_time, "solve_time": r.solve_time,
                "total_time": r.setup_time + r.solve_time, "err": self.errors}


@dataclass
class RunResult:
    config: RunConfig
    results: list[FrequencyResult]

    @property
    def all_converged(self) -> bool:
        return all(r.report.all_converged for r in self.results)

    @property
    def exit_code(self) -> int:
        return 0 if self.all_converged else 1

    def summary(self) -> dict:
        return {"all_converged": self.all_converged, "frequencies": [r.summary() for r in self.results]}


def solve_frequency(cfg: RunConfig, f: float, pool: WorkerPool | None = None,
                    table: WeightTable | None = None) -> FrequencyResult:
    """Assemble, set up the preconditioner, solve every source, and score against the oracle."""
    table = table or (WeightTable.load(cfg.weight_table) if cfg.weight_table else default_table())
    kcfg = cfg.krylov
    prec = kcfg.precision
    pc = cfg.preconditioner
    freq = FrequencySpec(f)
    model = build_model(cfg, f)
    multiple = pc.coarsening if pc.level == "two" else 1
    A = assemble(model, freq, table, cfg.boundary_spec, cfg.pml_profile, prec, multiple)
    disc = A.discretization
    sources = source_positions(cfg, model)
    F = build_rhs(model, disc, sources, prec, cfg.sources.spread)
    pp = cfg.partition
    part = partition_grid(disc.shape, pp.px, pp.py, pp.pz, pp.ovl)

    if cfg.distributed and part.n_sub > 1:
        local_ops = restrict_operator(A.matrix, part)

        def A_apply(X):
            return gather(distributed_matvec(local_ops, scatter(part, X), pool))
    else:
        def A_apply(X):
            return A.matrix @ X

    t0 = time.perf_counter()
    M = None
    if pc.level != "none":
        P = build_oras(disc, part, pp.interface, prec, pool, A=A.matrix)
        if cfg.distributed:
            def M(V):
                return gather(P.apply_one_level(scatter(part, V)))
        else:
            M = P
        if pc.level == "two":
            cs = build_coarse_space(disc, part, pc.coarsening, pc.coarse_ovl, pc.coarse_operator, A.matrix,
                                    pc.inner_tol, pc.exact_coarse, prec, pp.interface, pool)
            M = TwoLevelOras(P, cs, A_apply, one_level_apply=M)
    setup = time.perf_counter() - t0
    log.info("f=%g Hz: %d dofs, %d subdomains, setup %.2fs", f, disc.size, part.n_sub, setup)
    U, report = gmres(A_apply, M, F, kcfg)
    report.setup_time = setup
    report.meta.update({"frequency": f, "dofs": disc.size, "subdomains": part.n_sub,
                        "level": pc.level, "interface": pp.interface, "ovl": pp.ovl})
    fields_ = A.layout.extract_interior(U).reshape(model.grid.shape + (len(sources),))
    errors = None
    if cfg.oracle.kind != "none":
        errors = score(cfg, model, freq, sources, fields_)
    return FrequencyResult(f, model, sources, report, fields_, disc.size, part.n_sub, errors)


def reference_fields(cfg: RunConfig, model: VelocityModel, freq: FrequencySpec,
                     sources: list[PointSource]) -> np.ndarray:
    if cfg.oracle.kind == "analytic":
        if not model.is_homogeneous():
            raise ConfigError("the analytic oracle needs a homogeneous model")
        k = freq.omega / complex(model.c.flat[0])
        return np.stack([analytic_on_grid(model.grid, k, s.position) for s in sources], axis=-1)
    return cbs_solve(model, freq, sources, cfg.cbs_config).fields


def score(cfg: RunConfig, model, freq, sources, fields_) -> list[float]:
    ref = reference_fields(cfg, model, freq, sources)
    out = []
    for j, s in enumerate(sources):
        mcfg = ErrorMetricConfig.for_model(model, freq, s.position, cfg.oracle.mute_wavelengths)
        out.append(error_metric(ref[..., j], fields_[..., j], model.grid, mcfg))
    return out


def write_artifacts(res: FrequencyResult, outdir: Path, precision: str, write_fields: bool = True) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    res.report.write_csv(outdir / "convergence.csv")
    d = res.report.to_dict()
    validate(d, "solve_report")
    (outdir / "report.json").write_text(json.dumps(d, indent=1))
    if write_fields:
        dtype = "complex64" if precision == "single" else "complex128"
        save_field(outdir / "field.json", outdir / "field.bin", res.fields, res.model.grid, dtype,
                   meta={"frequency": res.frequency,
                         "sources": [list(s.position) for s in res.sources]})


def run(cfg: RunConfig, write: bool = True) -> RunResult:
    """Solve every configured frequency; artifacts go to ``cfg.output``."""
    out = Path(cfg.output)
    results = []
    table = WeightTable.load(cfg.weight_table) if cfg.weight_table else default_table()
    with WorkerPool(cfg.partition.workers) as pool:
        for f in cfg.frequencies:
            res = solve_frequency(cfg, f, pool, table)
            results.append(res)
            if write:
                write_artifacts(res, out / f"f{f:g}Hz", cfg.krylov.precision, cfg.write_fields)
    rr = RunResult(cfg, results)
    if write:
        summary = rr.summary()
        validate(summary, "run_summary")
        (out / "summary.json").write_text(json.dumps(summary, indent=1))
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, default=list))
    return rr


# -- scaling ----------------------------------------------------------------

@dataclass(frozen=True)
class ScalingRecord:
    frequency: float
    dofs: float
    workers: int
    iterations: int
    setup_time: float
    solve_time: float
    efficiency: float | None = None

    def __post_init__(self):
        if self.efficiency is not None and not self.efficiency > 0:
            raise InvalidArgument("efficiency must be positive")

    @property
    def total_time(self) -> float:
        return self.setup_time + self.solve_time

    def to_dict(self) -> dict:
        return {**asdict(self), "total_time": self.total_time}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _checked_total(r: ScalingRecord) -> float:
    if not r.total_time > 0:
        raise InvalidArgument("total time must be positive")
    return r.total_time


def weak_efficiency(record: ScalingRecord, reference: ScalingRecord) -> float:
    """``(T_ref * cores_ref / dof_ref) / (T * cores / dof)``."""
    ref = _checked_total(reference) * reference.workers / reference.dofs
    return ref / (_checked_total(record) * record.workers / record.dofs)


def strong_efficiency(record: ScalingRecord, reference: ScalingRecord) -> float:
    """``(T_ref * cores_ref) / (T * cores)``."""
    return (_checked_total(reference) * reference.workers) / (_checked_total(record) * record.workers)


def with_efficiencies(records: Sequence[ScalingRecord], mode: str = "strong") -> list[ScalingRecord]:
    """Attach efficiencies against the smallest problem (weak) or smallest worker count (strong)."""
    if not records:
        raise InvalidArgument("no scaling records")
    if mode == "weak":
        ref = min(records, key=lambda r: (r.dofs, r.workers))
        fn = weak_efficiency
    elif mode == "strong":
        ref = min(records, key=lambda r: r.workers)
        fn = strong_efficiency
    else:
        raise InvalidArgument(f"unknown scaling mode {mode!r}")
    return [replace(r, efficiency=fn(r, ref)) for r in records]


def scaling_study(template: RunConfig, cases: Sequence[tuple[float, tuple[int, int, int]]],
                  mode: str = "strong", jsonl: Path | None = None) -> list[ScalingRecord]:
    """Run ``(frequency, (px, py, pz))`` cases and record T_f, T_s and efficiency."""
    records = []
    for f, (px, py, pz) in cases:
        cfg = replace(template, frequencies=[f], partition=replace(template.partition, px=px, py=py, pz=pz),
                      oracle=replace(template.oracle, kind="none"))
        res = run(cfg, write=False).results[0]
        records.append(ScalingRecord(f, res.dofs, res.subdomains, res.report.max_iterations,
                                     res.report.setup_time, res.report.solve_time))
    records = with_efficiencies(records, mode)
    if jsonl is not None:
        lines = []
        for r in records:
            d = r.to_dict()
            validate(d, "scaling_record")
            lines.append(json.dumps(d))
        Path(jsonl).write_text("\n".join(lines) + "\n")
    return records


# -- frequency sweep --------------------------------------------------------

def growth_exponent(frequencies, iterations) -> float:
    """Least-squares slope of log(iterations) against log(frequency)."""
    f = np.asarray(frequencies, dtype=float)
    it = np.maximum(np.asarray(iterations, dtype=float), 1.0)
    if f.size < 2:
        raise InvalidArgument("need at least two frequencies")
    return float(np.polyfit(np.log(f), np.log(it), 1)[0])


@dataclass
class SweepTable:
    frequencies: list[float]
    iterations: list[int]
    converged: list[bool]
    subdomains: list[int]
    dofs: list[int]
    exponent: float

    @property
    def all_converged(self) -> bool:
        return all(self.converged)

    def to_dict(self) -> dict:
        return asdict(self)


def scaled_config(template: RunConfig, f: float, f0: float, subdomain_size: int | None) -> RunConfig:
    """Template re-targeted to ``f``: the model shape grows with f/f0 (fixed ppw) and,
    when ``subdomain_size`` is set, the partition keeps subdomains near that many nodes."""
    m = template.model
    ratio = f / f0
    model = m
    if m.kind != "raw":
        if m.shape is not None and m.extent is None:
            model = replace(m, shape=tuple(int(round((n - 1) * ratio)) + 1 for n in m.shape))
    cfg = replace(template, frequencies=[f], model=model)
    if subdomain_size:
        model_probe = build_model(cfg, f)
        npml = cfg.pml_profile.npml
        faces = cfg.boundary_spec.faces
        p = []
        for a, n in enumerate(model_probe.grid.shape):
            padded = n + npml * ((faces[2 * a] == "pml") + (faces[2 * a + 1] == "pml"))
            p.append(max(1, int(round(padded / subdomain_size))))
        cfg = replace(cfg, partition=replace(cfg.partition, px=p[0], py=p[1], pz=p[2]))
    return cfg


def iteration_frequency_sweep(template: RunConfig, frequencies: Sequence[float],
                              subdomain_size: int | None = None,
                              solve: Callable[[RunConfig, float], FrequencyResult] | None = None) -> SweepTable:
    """Iteration counts at fixed ppw over ``frequencies`` and their growth exponent."""
    freqs = sorted(float(f) for f in frequencies)
    if len(freqs) < 3:
        raise InvalidArgument("a sweep needs at least three frequencies")
    solve = solve or (lambda c, f: solve_frequency(c, f))
    its, conv, nsub, dofs = [], [], [], []
    for f in freqs:
        cfg = scaled_config(template, f, freqs[0], subdomain_size)
        res = solve(cfg, f)
        its.append(res.report.max_iterations)
        conv.append(res.report.all_converged)
        nsub.append(res.subdomains)
        dofs.append(res.dofs)
        log.info("sweep f=%g: %d its, %d subdomains, %d dofs", f, its[-1], nsub[-1], dofs[-1])
    table = SweepTable(freqs, its, conv, nsub, dofs, growth_exponent(freqs, its))
    if not table.all_converged:
        log.warning("sweep contains non-converged runs")
    return table
