"""Reference wavefields and the weighted error metric.

* ``analytic_homogeneous``: outgoing free-space Green's function.
* ``cbs_solve``: convergent Born series on a uniform (optionally refined) grid,
  with the background Green's operator applied by FFT.
* ``error_metric``: sum of the l1 errors of the real and imaginary parts, each
  weighted by the distance from the source and normalized by the reference.

Fields exchanged with other tools use raw little-endian complex data, x fastest,
next to a JSON header.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from scipy.ndimage import map_coordinates

from .grid import CartesianGrid, FrequencySpec, InvalidArgument, ModelLoadError, PointSource, VelocityModel
from .schemas import validate

GREEN_OPERATORS = ("periodic", "free-space")


def analytic_homogeneous(k, source, points) -> np.ndarray:
    """``-exp(ikr) / (4 pi r)`` at ``points`` (shape ``(..., 3)``)."""
    k = complex(k)
    if k.imag < 0:
        raise InvalidArgument("wavenumber must have Im(k) >= 0")
    pts = np.asarray(points, dtype=float)
    r = np.linalg.norm(pts - np.asarray(source, dtype=float), axis=-1)
    if np.any(r == 0):
        raise InvalidArgument("the Green's function is singular at the source")
    return -np.exp(1j * k * r) / (4 * np.pi * r)


def distance_from(grid: CartesianGrid, position) -> np.ndarray:
    x, y, z = (grid.axis(a) - float(position[a]) for a in range(3))
    return np.sqrt(x[:, None, None] ** 2 + y[None, :, None] ** 2 + z[None, None, :] ** 2)


def analytic_on_grid(grid: CartesianGrid, k, source) -> np.ndarray:
    """Green's function on every grid node; a node sitting on the source is set to 0."""
    r = distance_from(grid, source)
    out = np.zeros(grid.shape, dtype=np.complex128)
    m = r > 0
    out[m] = -np.exp(1j * complex(k) * r[m]) / (4 * np.pi * r[m])
    return out


# -- convergent Born series -------------------------------------------------

class CbsConvergenceError(RuntimeError):
    def __init__(self, msg: str, result: "CbsResult | None" = None):
        super().__init__(msg)
        self.result = result


@dataclass(frozen=True)
class CbsConfig:
    """Settings of the Born-series reference solver.

    ``green="periodic"`` embeds the model in ``boundary_wavelengths`` of padding
    per face, continued from the model edges, with a smooth absorbing ramp
    ``i * taper_strength * Re(k_edge^2)`` added to ``k^2``.  ``"free-space"``
    uses a truncated kernel on an enlarged FFT grid; it radiates into the
    uniform background medium and is exact for homogeneous models without any
    padding.  ``refine`` subdivides each model cell; ``source_width`` (metres)
    replaces the grid delta by a normalized Gaussian.

    ``eps_floor`` (relative to k0^2) defaults to 1e-3 for the periodic operator
    and 1e-9 for the free-space one, whose exterior medium carries the damping
    and would otherwise reflect at the domain edge.
    """
    tol: float = 1e-12
    max_iterations: int = 20000
    boundary_wavelengths: float = 2.0
    taper_strength: float = 1.0
    green: str = "periodic"
    refine: int = 1
    source_width: float | None = None
    eps_floor: float | None = None
    eps: float | None = None

    def __post_init__(self):
        if self.green not in GREEN_OPERATORS:
            raise InvalidArgument(f"unknown Green's operator {self.green!r}")
        if not 0 < self.tol < 1:
            raise InvalidArgument("tolerance must lie in (0, 1)")
        if self.max_iterations < 1 or self.refine < 1:
            raise InvalidArgument("max_iterations and refine must be >= 1")
        if self.boundary_wavelengths < 0 or self.taper_strength < 0 or (self.eps_floor is not None and self.eps_floor <= 0):
            raise InvalidArgument("boundary width, taper strength and eps floor must be non-negative")
        if self.source_width is not None and self.source_width <= 0:
            raise InvalidArgument("source width must be positive")

    @property
    def damping_floor(self) -> float:
        if self.eps_floor is not None:
            return self.eps_floor
        return 1e-3 if self.green == "periodic" else 1e-9


@dataclass
class CbsResult:
    fields: np.ndarray                 # model grid shape + (nrhs,)
    iterations: list[int]
    history: list[list[float]]
    converged: list[bool]
    k0_squared: complex
    eps: float
    grid_shape: tuple[int, int, int]   # Born-series grid incl. padding
    solve_time: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def final_backward_error(self) -> list[float]:
        return [h[-1] for h in self.history]

    def column(self, j: int = 0) -> np.ndarray:
        return self.fields[..., j]


def smooth_step(t) -> np.ndarray:
    """C-infinity ramp from 0 (t <= 0) to 1 (t >= 1)."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


def born_parameters(k2: np.ndarray, eps_floor: float = 1e-3, eps: float | None = None) -> tuple[float, float]:
    """Background ``k0^2`` (midpoint of the Re k^2 range) and damping ``eps``.

    ``eps`` must be at least ``max |k^2 - k0^2|``; the default takes 1.05 times
    that bound, floored at ``eps_floor * k0^2``.
    """
    k0sq = 0.5 * (float(k2.real.min()) + float(k2.real.max()))
    if k0sq <= 0:
        raise InvalidArgument("background wavenumber must be positive")
    bound = float(np.abs(k2 - k0sq).max())
    if eps is None:
        return k0sq, max(1.05 * bound, eps_floor * k0sq)
    if eps < bound:
        raise InvalidArgument(f"eps={eps:.4g} is below max|k^2 - k0^2| = {bound:.4g}; the series would diverge")
    return k0sq, float(eps)


@dataclass(frozen=True)
class _BornGrid:
    shape: tuple[int, int, int]
    pad: int
    q: int
    h: float
    n_in: tuple[int, int, int]


def _born_grid(model: VelocityModel, freq: FrequencySpec, cfg: CbsConfig) -> _BornGrid:
    q = cfg.refine
    hc = model.grid.h / q
    n_in = tuple((n - 1) * q + 1 for n in model.grid.shape)
    lam_max = model.c_max / freq.f
    pad = int(np.ceil(cfg.boundary_wavelengths * lam_max / hc)) if cfg.green == "periodic" else 0
    shape = tuple(n + 2 * pad for n in n_in)
    return _BornGrid(shape, pad, q, hc, n_in)

# the Born grid for 'periodic' is [pad | interior | pad] and wraps around;
# both halves of the wrapped gap are continued from their nearer model edge


def _padded_k2(model: VelocityModel, freq: FrequencySpec, bg: _BornGrid, strength: float) -> np.ndarray:
    k2m = model.k2(freq)
    coords = [np.clip((np.arange(n) - bg.pad) / bg.q, 0, m - 1) for n, m in zip(bg.shape, model.grid.shape)]
    if bg.q == 1:
        idx = [np.rint(c).astype(int) for c in coords]
        k2 = k2m[np.ix_(*idx)]
    else:
        mesh = np.meshgrid(*coords, indexing="ij")
        k2 = (map_coordinates(k2m.real, mesh, order=1, mode="nearest")
              + 1j * map_coordinates(k2m.imag, mesh, order=1, mode="nearest"))
    if bg.pad == 0 or strength == 0:
        return k2.astype(np.complex128)
    ramp = np.zeros(bg.shape)
    for a, (n, n_in) in enumerate(zip(bg.shape, bg.n_in)):
        i = np.arange(n)
        depth = np.maximum(bg.pad - i, i - (bg.pad + n_in - 1)).clip(min=0)
        s = smooth_step(depth / bg.pad)
        ramp += s.reshape([-1 if b == a else 1 for b in range(3)])
    return k2 + 1j * strength * np.abs(k2.real) * ramp


def _frequencies_squared(shape, h) -> np.ndarray:
    p = [2 * np.pi * sfft.fftfreq(n, d=h) for n in shape]
    return p[0][:, None, None] ** 2 + p[1][None, :, None] ** 2 + p[2][None, None, :] ** 2


def truncated_green_symbol(shape, h: float, kappa: complex, radius: float) -> np.ndarray:
    """DFT symbol of the free-space Green's function cut off beyond ``radius``.

    On a grid whose period exceeds the domain size plus ``radius`` the cyclic
    convolution reproduces the linear one inside the domain.
    """
    pr = np.sqrt(_frequencies_squared(shape, h))
    kr = kappa * radius
    with np.errstate(divide="ignore", invalid="ignore"):
        g = (1 - np.exp(1j * kr) * (np.cos(pr * radius) - 1j * kr * np.sinc(pr * radius / np.pi))) / (kappa ** 2 - pr ** 2)
    if not np.all(np.isfinite(g)):
        raise InvalidArgument("truncated kernel needs Im(kappa) > 0")
    return g


def _source_field(bg: _BornGrid, model: VelocityModel, src: PointSource, k_src: float,
                  width: float | None) -> np.ndarray:
    g = model.grid
    idx = g.nearest_index(src.position)  # validates the position
    pos = np.array(src.position, dtype=float) - np.array(g.origin)
    f = np.zeros(bg.shape, dtype=np.complex128)
    if width is None:
        c = tuple(int(i) * bg.q + bg.pad for i in idx)
        f[c] = src.amplitude / bg.h ** 3
        return f
    ax = [(np.arange(n) - bg.pad) * bg.h - pos[a] for a, n in enumerate(bg.shape)]
    r2 = ax[0][:, None, None] ** 2 + ax[1][None, :, None] ** 2 + ax[2][None, None, :] ** 2
    gauss = np.exp(-r2 / (2 * width ** 2)) / (2 * np.pi * width ** 2) ** 1.5
    # the Gaussian's spectrum at the radiating wavenumber, divided out so the far
    # field matches a unit point source
    return src.amplitude * np.exp(0.5 * width ** 2 * k_src ** 2) * gauss


def cbs_solve(model: VelocityModel, freq: FrequencySpec, sources: list[PointSource],
              config: CbsConfig = CbsConfig(), callback=None) -> CbsResult:
    """Solve ``(Delta + k^2) u = f`` with the preconditioned Born series.

    Per iteration ``U = G0 (f - V u)`` and ``u <- u + (i/eps) V (U - u)`` with
    ``V = k^2 - k0^2 - i eps`` and ``G0 = (Delta + k0^2 + i eps)^-1``.  The
    periodic operator stops on the true residual ``||(Delta + k^2) u - f||^2 / ||f||^2``
    (computed spectrally); the free-space operator stops on ``||V (U - u)||^2 / ||f||^2``.
    Returned fields are sampled at the model nodes.
    """
    t0 = time.perf_counter()
    bg = _born_grid(model, freq, config)
    k2 = _padded_k2(model, freq, bg, config.taper_strength)
    k0sq, eps = born_parameters(k2, config.damping_floor, config.eps)
    kappa2 = k0sq + 1j * eps
    V = k2 - kappa2
    if config.green == "periodic":
        fft_shape = bg.shape
        P2 = _frequencies_squared(fft_shape, bg.h)
        G0 = 1.0 / (kappa2 - P2)
        Ginv = kappa2 - P2
    else:
        L = float(np.max((np.array(bg.shape) - 1) * bg.h))
        radius = np.sqrt(3.0) * L * 1.001
        fft_shape = tuple(sfft.next_fast_len(int(np.ceil((L + radius) / bg.h)) + 2) for _ in range(3))
        G0 = truncated_green_symbol(fft_shape, bg.h, np.sqrt(kappa2), radius)
        Ginv = None
    inner = tuple(slice(0, n) for n in bg.shape)

    def green(g):
        if fft_shape == bg.shape:
            return sfft.ifftn(G0 * sfft.fftn(g))
        buf = np.zeros(fft_shape, dtype=np.complex128)
        buf[inner] = g
        return sfft.ifftn(G0 * sfft.fftn(buf))[inner]

    sel = tuple(slice(bg.pad, bg.pad + n, bg.q) for n in bg.n_in)
    out = np.zeros(model.grid.shape + (len(sources),), dtype=np.complex128)
    iterations, history, converged = [], [], []
    for j, src in enumerate(sources):
        idx = model.grid.nearest_index(src.position)
        k_src = float(np.sqrt(model.k2(freq)[idx]).real)
        f = _source_field(bg, model, src, k_src, config.source_width)
        fn = float(np.linalg.norm(f))
        u = np.zeros(bg.shape, dtype=np.complex128)
        if fn == 0:
            iterations.append(0)
            history.append([0.0])
            converged.append(True)
            continue
        hist: list[float] = []
        ok = False
        it = 0
        while True:
            rhs = f - V * u
            if Ginv is not None:
                # residual of the current iterate, via Parseval
                rhs_hat = sfft.fftn(rhs)
                r_hat = Ginv * sfft.fftn(u) - rhs_hat
                be = (np.linalg.norm(r_hat) / np.sqrt(r_hat.size) / fn) ** 2
                hist.append(float(be))
                ok = be <= config.tol
                if ok or it >= config.max_iterations or not np.isfinite(be):
                    break
                U = sfft.ifftn(G0 * rhs_hat)
                u += (1j / eps) * V * (U - u)
            else:
                if it >= config.max_iterations:
                    break
                r = V * (green(rhs) - u)
                be = (np.linalg.norm(r) / fn) ** 2
                u += (1j / eps) * r
                hist.append(float(be))
            it += 1
            if callback is not None:
                callback(j, it, be)
            if Ginv is None and (be <= config.tol or not np.isfinite(be)):
                ok = be <= config.tol
                break
        out[..., j] = u[sel]
        iterations.append(it)
        history.append(hist)
        converged.append(ok)
    result = CbsResult(out, iterations, history, converged, k0sq, eps, bg.shape, time.perf_counter() - t0,
                       meta={"config": asdict(config), "pad": bg.pad})
    if not all(converged):
        bad = [j for j, c in enumerate(converged) if not c]
        raise CbsConvergenceError(f"Born series did not reach {config.tol:g} for sources {bad} "
                                  f"(last backward errors {[history[j][-1] for j in bad]})", result)
    return result


# -- error metric -----------------------------------------------------------

@dataclass(frozen=True)
class ErrorMetricConfig:
    """Distance-gain weighting around ``source``; nodes closer than
    ``mute_wavelengths * wavelength`` get zero weight."""
    source: tuple[float, float, float]
    wavelength: float
    mute_wavelengths: float = 1.0

    def __post_init__(self):
        if self.mute_wavelengths < 0:
            raise InvalidArgument("mute radius must be non-negative")
        if self.wavelength <= 0:
            raise InvalidArgument("wavelength must be positive")

    @classmethod
    def for_model(cls, model: VelocityModel, freq: FrequencySpec, source, mute_wavelengths: float = 1.0):
        """Mute radius in units of the local wavelength at the source."""
        idx = model.grid.nearest_index(source)
        return cls(tuple(float(s) for s in source), float(model.c[idx].real / freq.f), mute_wavelengths)

    def weights(self, grid: CartesianGrid) -> np.ndarray:
        r = distance_from(grid, self.source)
        return np.where(r >= self.mute_wavelengths * self.wavelength, r, 0.0)


def error_metric(u_ref: np.ndarray, u_test: np.ndarray, grid: CartesianGrid, cfg: ErrorMetricConfig) -> float:
    """``|W Re(ref - test)|_1 / |W Re ref|_1 + |W Im(ref - test)|_1 / |W Im ref|_1``."""
    u_ref = np.asarray(u_ref).reshape(grid.shape)
    u_test = np.asarray(u_test).reshape(grid.shape)
    W = cfg.weights(grid)
    d = u_ref.astype(np.complex128) - u_test
    total = 0.0
    for part in (np.real, np.imag):
        den = float(np.abs(W * part(u_ref)).sum())
        if den == 0:
            raise InvalidArgument("weighted reference vanishes (everything muted or zero field)")
        total += float(np.abs(W * part(d)).sum()) / den
    return total


# -- field files ------------------------------------------------------------

_FIELD_DTYPES = {"complex64": "<c8", "complex128": "<c16"}


def save_field(header_path, data_path, u: np.ndarray, grid: CartesianGrid, dtype: str = "complex128",
               meta: dict | None = None) -> None:
    """Write ``u`` (grid shape, optionally with a trailing RHS axis) x-fastest."""
    if dtype not in _FIELD_DTYPES:
        raise InvalidArgument(f"unsupported field dtype {dtype!r}")
    u = np.asarray(u)
    if u.shape[:3] != grid.shape:
        u = u.reshape(grid.shape + (-1,))
    if u.ndim == 3:
        u = u[..., None]
    header = {**grid.to_dict(), "dtype": dtype, "order": "x-fastest", "nrhs": int(u.shape[3]), "meta": meta or {}}
    validate(header, "field_header")
    Path(header_path).write_text(json.dumps(header, indent=2))
    np.ascontiguousarray(u.transpose(3, 2, 1, 0)).astype(_FIELD_DTYPES[dtype]).tofile(data_path)


def load_field(header_path, data_path) -> tuple[np.ndarray, CartesianGrid, dict]:
    """Returns ``(u, grid, header)`` with ``u`` shaped ``(nx, ny, nz, nrhs)``."""
    try:
        header = json.loads(Path(header_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelLoadError(f"cannot read field header {header_path}: {exc}") from exc
    dtype = header.get("dtype")
    if dtype not in _FIELD_DTYPES:
        raise ModelLoadError(f"unsupported field dtype {dtype!r}")
    grid = CartesianGrid(int(header["nx"]), int(header["ny"]), int(header["nz"]), float(header["h"]),
                         tuple(header.get("origin", (0.0, 0.0, 0.0))))
    m = int(header.get("nrhs", 1))
    raw = np.fromfile(data_path, dtype=_FIELD_DTYPES[dtype])
    if raw.size != grid.size * m:
        raise ModelLoadError(f"header expects {grid.size * m} values, file holds {raw.size}")
    u = raw.reshape(m, grid.nz, grid.ny, grid.nx).transpose(3, 2, 1, 0)
    return u, grid, header


def export_slice_csv(path, u: np.ndarray, grid: CartesianGrid, axis: int = 2, index: int | None = None) -> None:
    """Plane ``axis = index`` (default: middle) as ``x1, x2, real, imag`` rows."""
    u = np.asarray(u).reshape(grid.shape)
    index = grid.shape[axis] // 2 if index is None else int(index)
    if not 0 <= index < grid.shape[axis]:
        raise InvalidArgument(f"slice index {index} outside axis of length {grid.shape[axis]}")
    plane = np.take(u, index, axis=axis)
    a1, a2 = (a for a in range(3) if a != axis)
    x1, x2 = grid.axis(a1), grid.axis(a2)
    names = "xyz"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([names[a1], names[a2], "real", "imag"])
        for i, p in enumerate(x1):
            for j, q in enumerate(x2):
                w.writerow([repr(float(p)), repr(float(q)), repr(float(plane[i, j].real)), repr(float(plane[i, j].imag))])
