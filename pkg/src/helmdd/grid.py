"""Cartesian grids, velocity models and frequency bookkeeping.

Arrays are indexed ``c[ix, iy, iz]``.  Flattening uses C order, so ``z`` is the
fastest index of the solver's unknown vector.  Raw model files use the opposite
(``x`` fastest) layout; the loader handles the transpose.

The time convention is ``exp(-i omega t)``.  Outgoing waves behave as
``exp(+ikr)`` and a decaying plane wave needs ``Im(k) > 0``, i.e. ``Im(c) < 0``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class InvalidArgument(ValueError):
    pass


class ModelLoadError(ValueError):
    pass


@dataclass(frozen=True)
class CartesianGrid:
    nx: int
    ny: int
    nz: int
    h: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for n in self.shape:
            if int(n) != n or n < 2:
                raise InvalidArgument(f"grid counts must be integers >= 2, got {self.shape}")
        if not (self.h > 0 and math.isfinite(self.h)):
            raise InvalidArgument(f"grid interval must be positive, got {self.h}")
        if len(self.origin) != 3:
            raise InvalidArgument("origin must be a 3-vector")
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def extent(self) -> np.ndarray:
        return (np.array(self.shape) - 1) * self.h

    def axis(self, a: int) -> np.ndarray:
        return self.origin[a] + self.h * np.arange(self.shape[a])

    def nearest_index(self, position) -> tuple[int, int, int]:
        """Index of the grid node closest to ``position``; raises if outside the extent."""
        pos = np.asarray(position, dtype=float)
        rel = (pos - np.array(self.origin)) / self.h
        tol = 1e-9
        if np.any(rel < -tol) or np.any(rel > np.array(self.shape) - 1 + tol):
            raise InvalidArgument(f"position {tuple(pos)} lies outside the grid extent")
        idx = np.clip(np.rint(rel).astype(int), 0, np.array(self.shape) - 1)
        return tuple(int(i) for i in idx)

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "nz": self.nz, "h": self.h, "origin": list(self.origin)}


@dataclass(frozen=True)
class FrequencySpec:
    f: float

    def __post_init__(self):
        if not (self.f > 0 and math.isfinite(self.f)):
            raise InvalidArgument(f"frequency must be positive, got {self.f}")

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.f

    def wavenumber(self, c):
        """k = omega / c, complex when c is."""
        return self.omega / np.asarray(c)


@dataclass(frozen=True)
class PointSource:
    position: tuple[float, float, float]
    amplitude: complex = 1.0

    def __post_init__(self):
        if len(self.position) != 3:
            raise InvalidArgument("source position must be a 3-vector")
        object.__setattr__(self, "position", tuple(float(p) for p in self.position))


@dataclass(frozen=True, eq=False)
class VelocityModel:
    grid: CartesianGrid
    c: np.ndarray
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        c = np.asarray(self.c)
        if c.shape != self.grid.shape:
            raise InvalidArgument(f"wavespeed shape {c.shape} does not match grid {self.grid.shape}")
        c = c.astype(np.complex128)
        if not np.all(np.isfinite(c)):
            raise InvalidArgument("wavespeed contains non-finite values")
        if np.any(c.real <= 0):
            raise InvalidArgument("real part of the wavespeed must be positive")
        if np.any(c.imag > 0):
            raise InvalidArgument("attenuation must give Im(c) <= 0 under exp(-i omega t)")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    @property
    def c_min(self) -> float:
        return float(self.c.real.min())

    @property
    def c_max(self) -> float:
        return float(self.c.real.max())

    def points_per_wavelength(self, freq: FrequencySpec) -> np.ndarray:
        """Local G = lambda / h from the real wavespeed."""
        return self.c.real / (freq.f * self.grid.h)

    def k2(self, freq: FrequencySpec) -> np.ndarray:
        return (freq.omega / self.c) ** 2

    def is_homogeneous(self) -> bool:
        return bool(np.all(self.c == self.c.flat[0]))


def grid_interval(extent, h_max: float, max_divisions: int = 100000) -> float:
    """Largest h <= h_max such that every extent is an integer multiple of h."""
    ext = np.asarray(extent, dtype=float)
    if np.any(ext <= 0) or not np.all(np.isfinite(ext)):
        raise InvalidArgument(f"extent must be positive, got {extent}")
    if h_max <= 0:
        raise InvalidArgument("grid interval bound must be positive")
    ref = ext.max()
    m0 = max(1, math.ceil(ref / h_max - 1e-9))
    for m in range(m0, m0 + max_divisions):
        h = ref / m
        ratios = ext / h
        if np.all(np.abs(ratios - np.rint(ratios)) <= 1e-9 * np.maximum(ratios, 1.0)):
            return float(h)
    raise InvalidArgument(f"no grid interval <= {h_max} divides extent {tuple(ext)}")


def _grid_for(extent, h: float, origin=(0.0, 0.0, 0.0)) -> CartesianGrid:
    n = np.rint(np.asarray(extent, dtype=float) / h).astype(int) + 1
    return CartesianGrid(int(n[0]), int(n[1]), int(n[2]), h, tuple(origin))


def build_homogeneous(extent, c0: float, f: float, ppw: float, origin=(0.0, 0.0, 0.0)) -> VelocityModel:
    if not c0 > 0:
        raise InvalidArgument(f"wavespeed must be positive, got {c0}")
    if ppw < 2:
        raise InvalidArgument(f"points per wavelength must be >= 2, got {ppw}")
    FrequencySpec(f)
    h = grid_interval(extent, (c0 / f) / ppw)
    grid = _grid_for(extent, h, origin)
    c = np.full(grid.shape, c0, dtype=np.complex128)
    return VelocityModel(grid, c, label="homogeneous")


def build_gradient(extent, c0: float, alpha: float, axis: int, f: float, ppw_min: float,
                   origin=(0.0, 0.0, 0.0)) -> VelocityModel:
    """c = c0 + alpha * (distance along ``axis`` from the origin)."""
    if not c0 > 0:
        raise InvalidArgument(f"wavespeed must be positive, got {c0}")
    if axis not in (0, 1, 2):
        raise InvalidArgument(f"axis must be 0, 1 or 2, got {axis}")
    if ppw_min < 2:
        raise InvalidArgument(f"points per wavelength must be >= 2, got {ppw_min}")
    FrequencySpec(f)
    ext = np.asarray(extent, dtype=float)
    c_far = c0 + alpha * ext[axis]
    if c_far <= 0:
        raise InvalidArgument(f"gradient gives non-positive wavespeed {c_far} at the far face")
    c_min = min(c0, c_far)
    h = grid_interval(ext, (c_min / f) / ppw_min)
    grid = _grid_for(ext, h, origin)
    coord = h * np.arange(grid.shape[axis])
    profile = c0 + alpha * coord
    shape = [1, 1, 1]
    shape[axis] = -1
    c = np.broadcast_to(profile.reshape(shape), grid.shape).astype(np.complex128)
    return VelocityModel(grid, c, label="gradient")


def _smooth_lateral_field(rng: np.random.Generator, nx: int, ny: int, modes: int = 4) -> np.ndarray:
    """Random smooth field on [0,1]^2 scaled to max |p| = 1."""
    x = np.linspace(0.0, 1.0, nx)[:, None]
    y = np.linspace(0.0, 1.0, ny)[None, :]
    p = np.zeros((nx, ny))
    for _ in range(modes):
        kx, ky = rng.uniform(0.5, 2.5, size=2) * np.pi
        phase = rng.uniform(0, 2 * np.pi)
        p += rng.normal() * np.cos(kx * x + ky * y + phase)
    peak = np.abs(p).max()
    return p / peak if peak > 0 else p


def build_layered_random(shape, f: float, ppw_min: float = 4.0, c_range=(1500.0, 3000.0),
                         seed: int = 0, n_layers: int | None = None, lateral: float = 0.2,
                         origin=(0.0, 0.0, 0.0)) -> VelocityModel:
    """Seeded layered medium along z with a smooth lateral perturbation.

    Layer speeds are drawn in ``c_range`` and multiplied by ``1 + lateral * p(x, y)``
    with ``|p| <= 1``.  The grid interval is set from the lowest possible speed
    ``(1 - lateral) * c_range[0]`` so the requested sampling holds for any seed.
    """
    shape = tuple(int(n) for n in shape)
    lo, hi = (float(v) for v in c_range)
    if not 0 < lo <= hi:
        raise InvalidArgument(f"bad wavespeed range {c_range}")
    if not 0 <= lateral < 1:
        raise InvalidArgument("lateral perturbation must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    if n_layers is None:
        n_layers = int(rng.integers(5, 11))
    if n_layers < 1:
        raise InvalidArgument("need at least one layer")
    h = (1.0 - lateral) * lo / (f * ppw_min)
    grid = CartesianGrid(*shape, h=h, origin=tuple(origin))
    nz = shape[2]
    cuts = np.sort(rng.choice(np.arange(1, nz), size=min(n_layers - 1, nz - 1), replace=False))
    speeds = np.sort(rng.uniform(lo, hi, size=len(cuts) + 1))
    layer_of = np.searchsorted(cuts, np.arange(nz), side="right")
    profile = speeds[layer_of]
    p = _smooth_lateral_field(rng, shape[0], shape[1])
    c = profile[None, None, :] * (1.0 + lateral * p[:, :, None])
    return VelocityModel(grid, c.astype(np.complex128), label="layered-random",
                         meta={"seed": seed, "n_layers": int(len(cuts) + 1)})


def attenuate(model: VelocityModel, Q) -> VelocityModel:
    """Complex wavespeed c * (1 - i / (2Q)); waves then decay under exp(-i omega t)."""
    q = np.asarray(Q, dtype=float)
    if np.any(~(q > 0)):
        raise InvalidArgument("quality factor must be positive")
    with np.errstate(divide="ignore"):
        factor = 1.0 - 0.5j / q
    c = model.c * np.broadcast_to(factor, model.grid.shape)
    return VelocityModel(model.grid, c, label=model.label + "+Q", meta=dict(model.meta))


_RAW_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_raw_model(model: VelocityModel, header_path, data_path, dtype: str = "float32") -> None:
    if dtype not in _RAW_DTYPES:
        raise ModelLoadError(f"unsupported dtype {dtype!r}")
    if np.any(model.c.imag != 0):
        raise ModelLoadError("raw model files hold real wavespeeds only")
    g = model.grid
    header = {**g.to_dict(), "dtype": dtype, "order": "x-fastest"}
    Path(header_path).write_text(json.dumps(header, indent=2))
    np.ascontiguousarray(model.c.real.transpose(2, 1, 0)).astype(_RAW_DTYPES[dtype]).tofile(data_path)


def load_raw_model(header_path, data_path, label: str = "") -> VelocityModel:
    try:
        header = json.loads(Path(header_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelLoadError(f"cannot read header {header_path}: {exc}") from exc
    missing = {"nx", "ny", "nz", "h", "dtype"} - header.keys()
    if missing:
        raise ModelLoadError(f"header lacks fields {sorted(missing)}")
    dtype = header["dtype"]
    if dtype not in _RAW_DTYPES:
        raise ModelLoadError(f"unsupported dtype {dtype!r}")
    nx, ny, nz = int(header["nx"]), int(header["ny"]), int(header["nz"])
    raw = np.fromfile(data_path, dtype=_RAW_DTYPES[dtype])
    if raw.size != nx * ny * nz:
        raise ModelLoadError(f"header expects {nx * ny * nz} values, file holds {raw.size}")
    if not np.all(np.isfinite(raw)):
        raise ModelLoadError("model file contains non-finite values")
    try:
        grid = CartesianGrid(nx, ny, nz, float(header["h"]), tuple(header.get("origin", (0.0, 0.0, 0.0))))
        c = raw.reshape(nz, ny, nx).transpose(2, 1, 0)
        return VelocityModel(grid, c, label=label or Path(data_path).stem)
    except InvalidArgument as exc:
        raise ModelLoadError(str(exc)) from exc
