"""Wavelength-adaptive 27-point stencil: dispersion symbol, weight fitting, tables.

The stiffness part mixes three second-difference families along each axis,
differing in how they average over the two transverse directions:

* ``axis``:   no transverse averaging (the 7-point Laplacian),
* ``face``:   averaging over the 4 transverse face neighbours (2/3 centre, 1/12 each),
* ``corner``: averaging over the full 3x3 transverse plane (1/3 centre, 1/12 others).

The mass part spreads ``k^2 u`` over the centre, 6 face, 12 edge and 8 corner
neighbours with weights ``wm[0]``, ``wm[1]/6``, ``wm[2]/12`` and ``wm[3]/8``.
Both weight groups sum to one, which makes the scheme consistent.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

TABLE_FORMAT = "helmdd-weight-table"
TABLE_VERSION = 1


class BelowNyquist(ValueError):
    pass


class FitError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class StencilWeights:
    w: tuple[float, float, float]
    wm: tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.w) != 3 or len(self.wm) != 4:
            raise ValueError("need 3 stiffness and 4 mass weights")
        object.__setattr__(self, "w", tuple(float(v) for v in self.w))
        object.__setattr__(self, "wm", tuple(float(v) for v in self.wm))

    @classmethod
    def classical(cls) -> "StencilWeights":
        """Plain 7-point Laplacian with a lumped mass term."""
        return cls((1.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0))

    def as_array(self) -> np.ndarray:
        return np.r_[self.w, self.wm]


def fibonacci_directions(n: int = 96) -> np.ndarray:
    """Quasi-uniform unit vectors on the sphere (golden-angle spiral)."""
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azim = np.pi * (1.0 + 5.0 ** 0.5) * i
    return np.stack([np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)], axis=1)


def symbol_parts(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-family stiffness symbols (times h^2) and mass symbols at phases ``theta`` (..., 3)."""
    c = np.cos(theta)
    ca, cb, cc = c[..., 0], c[..., 1], c[..., 2]

    def face(b, d):
        return (2.0 + 0.5 * (b + d)) / 3.0

    def corner(b, d):
        return 1.0 / 3.0 + (b + d) / 6.0 + b * d / 3.0

    s_axis = 2.0 * ((ca - 1) + (cb - 1) + (cc - 1))
    s_face = 2.0 * ((ca - 1) * face(cb, cc) + (cb - 1) * face(ca, cc) + (cc - 1) * face(ca, cb))
    s_corner = 2.0 * ((ca - 1) * corner(cb, cc) + (cb - 1) * corner(ca, cc) + (cc - 1) * corner(ca, cb))
    mass = [np.ones_like(ca), (ca + cb + cc) / 3.0, (ca * cb + cb * cc + ca * cc) / 3.0, ca * cb * cc]
    return np.stack([s_axis, s_face, s_corner], axis=-1), np.stack(mass, axis=-1)


def _ratio(w: np.ndarray, wm: np.ndarray, G: float, directions: np.ndarray) -> np.ndarray:
    theta = (2.0 * np.pi / G) * directions
    stiff, mass = symbol_parts(theta)
    return np.sqrt(-(stiff @ w) / (mass @ wm)) / (2.0 * np.pi / G)


def numerical_phase_velocity(weights: StencilWeights, G: float, direction) -> np.ndarray | float:
    """Numerical over true phase velocity for a plane wave sampled at G points per wavelength.

    ``direction`` may be a single unit vector or an ``(n, 3)`` array of them.
    """
    if not G > 2:
        raise BelowNyquist(f"G={G} is at or below the Nyquist limit of 2")
    d = np.asarray(direction, dtype=float)
    norms = np.linalg.norm(d, axis=-1)
    if not np.allclose(norms, 1.0, atol=1e-12):
        raise ValueError("direction must be a unit vector")
    r = _ratio(np.asarray(weights.w), np.asarray(weights.wm), G, d)
    return float(r) if r.ndim == 0 else r


def dispersion_objective(weights: StencilWeights, G: float, directions: np.ndarray) -> float:
    r = _ratio(np.asarray(weights.w), np.asarray(weights.wm), G, directions)
    return float(np.sum((r - 1.0) ** 2))


@dataclass(frozen=True)
class FitConfig:
    """Least-squares setup for the adaptive weights.

    ``ridge`` pulls the five free parameters toward ``prior``.  Without it the fit at
    fine sampling is nearly degenerate and wanders to large, mutually cancelling
    weights; a tiny ridge keeps them O(1) at no visible dispersion cost.
    """
    n_directions: int = 96
    ridge: float = 1e-6
    prior: tuple[float, ...] = (0.27, 0.6, 0.6, 0.28, 0.13)

    def to_dict(self) -> dict:
        return {"n_directions": self.n_directions, "ridge": self.ridge, "prior": list(self.prior)}


def _unpack(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.r_[p[:2], 1.0 - p[:2].sum()], np.r_[p[2:], 1.0 - p[2:].sum()]


def fit_weights(G: float, config: FitConfig = FitConfig()) -> StencilWeights:
    if G < 4:
        raise ValueError(f"weights are fitted for G >= 4, got {G}")
    dirs = fibonacci_directions(config.n_directions)
    prior = np.asarray(config.prior, dtype=float)
    sqrt_ridge = np.sqrt(config.ridge)

    def residual(p):
        w, wm = _unpack(p)
        return np.r_[_ratio(w, wm, G, dirs) - 1.0, sqrt_ridge * (p - prior)]

    with np.errstate(invalid="ignore"):
        sol = least_squares(residual, prior, xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    res = float(np.linalg.norm(sol.fun))
    if sol.status <= 0 or not np.all(np.isfinite(sol.fun)):
        raise FitError(f"dispersion fit at G={G} did not converge: {sol.message}", res)
    w, wm = _unpack(sol.x)
    return StencilWeights(tuple(w), tuple(wm))


@dataclass(frozen=True)
class WeightTable:
    G_values: tuple[float, ...]
    weights: tuple[StencilWeights, ...]
    fit: dict = field(default_factory=dict)

    def __post_init__(self):
        g = np.asarray(self.G_values, dtype=float)
        if len(g) != len(self.weights) or len(g) == 0:
            raise ValueError("table needs one weight set per G sample")
        if np.any(np.diff(g) <= 0):
            raise ValueError("G samples must be strictly increasing")

    @functools.cached_property
    def _coeffs(self) -> np.ndarray:
        return np.array([wt.as_array() for wt in self.weights])

    def lookup_array(self, G) -> np.ndarray:
        """Coefficients (..., 7) linearly interpolated in 1/G, clamped to the table range."""
        G = np.asarray(G, dtype=float)
        x = 1.0 / np.clip(G, self.G_values[0], self.G_values[-1])
        xs = 1.0 / np.asarray(self.G_values)[::-1]
        table = self._coeffs[::-1]
        out = np.empty(G.shape + (7,))
        for j in range(7):
            out[..., j] = np.interp(x, xs, table[:, j])
        return out

    def lookup(self, G: float) -> StencilWeights:
        a = self.lookup_array(G)
        return StencilWeights(tuple(a[:3]), tuple(a[3:]))

    def to_json(self) -> str:
        doc = {
            "format": TABLE_FORMAT,
            "version": TABLE_VERSION,
            "fit": self.fit,
            "samples": [{"G": g, "w": list(wt.w), "wm": list(wt.wm)} for g, wt in zip(self.G_values, self.weights)],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "WeightTable":
        doc = json.loads(text)
        if doc.get("format") != TABLE_FORMAT:
            raise ValueError("not a weight table file")
        if doc.get("version") != TABLE_VERSION:
            raise ValueError(f"unsupported weight table version {doc.get('version')}")
        samples = doc["samples"]
        return cls(tuple(s["G"] for s in samples),
                   tuple(StencilWeights(tuple(s["w"]), tuple(s["wm"])) for s in samples),
                   doc.get("fit", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "WeightTable":
        return cls.from_json(Path(path).read_text())


def build_weight_table(G_min: float = 4.0, G_max: float = 40.0, samples: int = 25,
                       config: FitConfig = FitConfig()) -> WeightTable:
    """Fit weights at ``samples`` points spaced uniformly in 1/G over [G_min, G_max]."""
    if G_min < 4:
        raise ValueError("table must start at G >= 4")
    if G_max <= G_min or samples < 2:
        raise ValueError("need G_max > G_min and at least two samples")
    inv = np.linspace(1.0 / G_min, 1.0 / G_max, samples)
    G = np.sort(1.0 / inv)
    G[0], G[-1] = G_min, G_max
    weights = tuple(fit_weights(float(g), config) for g in G)
    return WeightTable(tuple(float(g) for g in G), weights, config.to_dict())


@functools.lru_cache(maxsize=4)
def default_table() -> WeightTable:
    return build_weight_table()


def constant_table(weights: StencilWeights) -> WeightTable:
    """A table that returns the same weights for every G (forced-stencil studies)."""
    return WeightTable((4.0, 40.0), (weights, weights), {"constant": True})
