"""Right-preconditioned pseudo-block GMRES / FGMRES.

Every right-hand side runs its own Arnoldi process with its own basis; only the
operator and preconditioner applications are fused over the still-active
columns.  Converged columns drop out of the fused block.

The stopping quantity is ``||A u - f||^2 / ||f||^2`` (squared ratio).
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

from .assembly import complex_dtype

Apply = Callable[[np.ndarray], np.ndarray]
ORTHO_SCHEMES = ("cgs", "mgs")


@dataclass(frozen=True)
class KrylovConfig:
    tol: float = 1e-4
    max_iterations: int = 500
    restart: int | None = None
    ortho: str = "cgs"
    precision: str = "double"
    flexible: bool = False

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise ValueError(f"tolerance must lie in (0, 1), got {self.tol}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.restart is not None and self.restart < 1:
            raise ValueError("restart must be >= 1")
        if self.ortho not in ORTHO_SCHEMES:
            raise ValueError(f"unknown orthogonalization {self.ortho!r}")
        complex_dtype(self.precision)


@dataclass
class SolveReport:
    iterations: list[int]
    history: list[list[float]]
    converged: list[bool]
    final_backward_error: list[float]
    setup_time: float = 0.0
    solve_time: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def all_converged(self) -> bool:
        return all(self.converged)

    @property
    def max_iterations(self) -> int:
        return max(self.iterations) if self.iterations else 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_time"] = self.setup_time + self.solve_time
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rhs_id", "iteration", "backward_error"])
            for rhs, hist in enumerate(self.history):
                for it, be in enumerate(hist):
                    w.writerow([rhs, it, repr(float(be))])


def backward_error(A_apply: Apply, u: np.ndarray, f: np.ndarray):
    """``||A u - f||^2 / ||f||^2``; per column for blocks."""
    fn = np.linalg.norm(f, axis=0)
    if np.any(fn == 0):
        raise ValueError("backward error is undefined for a zero right-hand side")
    r = A_apply(u) - f
    be = (np.linalg.norm(r, axis=0) / fn) ** 2
    return float(be) if np.ndim(be) == 0 else be


class Orthogonalization(NamedTuple):
    coeffs: np.ndarray
    norm: float
    vector: np.ndarray
    breakdown: bool


def _breakdown_tol(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.complex64 else 1e-14


def orthogonalize(basis, w: np.ndarray, scheme: str = "cgs") -> Orthogonalization:
    """Orthogonalize ``w`` against the orthonormal rows/columns of ``basis``.

    ``basis`` is an ``(j, n)`` array of row vectors (or a list of vectors).
    Returns the projection coefficients, the norm of the remainder, the
    normalized remainder and a breakdown flag (remainder ~ 0, i.e. ``w`` lies in
    the span).
    """
    if scheme not in ORTHO_SCHEMES:
        raise ValueError(f"unknown orthogonalization {scheme!r}")
    B = np.asarray(basis, dtype=w.dtype).reshape(-1, w.shape[0])
    w = w.copy()
    ref = np.linalg.norm(w)
    if scheme == "cgs":
        coeffs = np.conj(B @ np.conj(w))
        w -= B.T @ coeffs
    else:
        coeffs = np.empty(B.shape[0], dtype=w.dtype)
        for i in range(B.shape[0]):
            coeffs[i] = np.vdot(B[i], w)
            w -= coeffs[i] * B[i]
    nrm = float(np.linalg.norm(w))
    broke = nrm <= _breakdown_tol(w.dtype) * max(ref, np.finfo(float).tiny)
    vec = w / nrm if not broke else np.zeros_like(w)
    return Orthogonalization(coeffs.astype(np.complex128), nrm, vec, broke)


class _Arnoldi:
    """Arnoldi/GMRES state of a single right-hand side within one cycle."""

    def __init__(self, r0: np.ndarray, beta: float, cap: int, flexible: bool):
        n = r0.shape[0]
        self.n = n
        self.flexible = flexible
        self.V = np.empty((min(cap, 16) + 1, n), dtype=r0.dtype)
        self.Z = np.empty_like(self.V) if flexible else None
        self.V[0] = r0 / beta
        self.cap = cap
        self.H = np.zeros((cap + 1, cap), dtype=np.complex128)
        self.g = np.zeros(cap + 1, dtype=np.complex128)
        self.g[0] = beta
        self.cs = np.zeros(cap, dtype=np.complex128)
        self.sn = np.zeros(cap, dtype=np.complex128)
        self.k = 0
        self.breakdown = False

    def _grow(self, rows: int):
        if rows <= self.V.shape[0]:
            return
        new = min(self.cap + 1, max(rows, 2 * self.V.shape[0]))
        V = np.empty((new, self.n), dtype=self.V.dtype)
        V[:self.V.shape[0]] = self.V
        self.V = V
        if self.flexible:
            Z = np.empty_like(V)
            Z[:self.Z.shape[0]] = self.Z
            self.Z = Z

    def step(self, z: np.ndarray, w: np.ndarray, scheme: str) -> float:
        """Extend the basis with ``w = A z``; returns the new residual-norm estimate."""
        k = self.k
        self._grow(k + 2)
        if self.flexible:
            self.Z[k] = z
        o = orthogonalize(self.V[:k + 1], w, scheme)
        h = self.H[:, k]
        h[:k + 1] = o.coeffs
        h[k + 1] = o.norm
        self.V[k + 1] = o.vector
        self.breakdown = o.breakdown
        for i in range(k):
            t = self.cs[i] * h[i] + self.sn[i] * h[i + 1]
            h[i + 1] = -np.conj(self.sn[i]) * h[i] + np.conj(self.cs[i]) * h[i + 1]
            h[i] = t
        a, b = h[k], h[k + 1]
        d = np.hypot(abs(a), abs(b))
        if d == 0:
            c, s = 1.0, 0.0
        elif a == 0:
            c, s = 0.0, np.conj(b) / abs(b)
        else:
            c = abs(a) / d
            s = (a / abs(a)) * np.conj(b) / d
        self.cs[k], self.sn[k] = c, s
        h[k] = c * a + s * b
        h[k + 1] = 0.0
        self.g[k + 1] = -np.conj(s) * self.g[k]
        self.g[k] = c * self.g[k]
        self.k = k + 1
        return float(abs(self.g[k + 1]))

    def coefficients(self) -> np.ndarray:
        k = self.k
        if k == 0:
            return np.zeros(0, dtype=np.complex128)
        return solve_triangular(self.H[:k, :k], self.g[:k])

    def combination(self, y: np.ndarray, basis: np.ndarray) -> np.ndarray:
        return basis[:self.k].T @ y.astype(basis.dtype)


def _as_block(F: np.ndarray, dtype) -> tuple[np.ndarray, bool]:
    one = F.ndim == 1
    F = np.asarray(F)
    return (F[:, None] if one else F).astype(dtype, copy=False), one


def _identity(x):
    return x


def gmres(A_apply: Apply, M_apply: Apply | None, F: np.ndarray, config: KrylovConfig = KrylovConfig(),
          callback: Callable[[int, np.ndarray], None] | None = None) -> tuple[np.ndarray, SolveReport]:
    """Solve ``A M^{-1} y = f``, ``u = M^{-1} y`` for every column of ``F``.

    ``config.flexible`` stores the preconditioned vectors (FGMRES), which keeps
    the method correct when ``M_apply`` changes between applications.
    """
    t0 = time.perf_counter()
    dtype = complex_dtype(config.precision)
    M_apply = M_apply or _identity
    F, one = _as_block(F, dtype)
    n, m = F.shape
    fnorm = np.linalg.norm(F.astype(np.complex128), axis=0)
    if np.any(fnorm == 0):
        raise ValueError("zero right-hand side column")
    X = np.zeros((n, m), dtype=dtype)
    iters = np.zeros(m, dtype=int)
    history = [[1.0] for _ in range(m)]
    converged = np.zeros(m, dtype=bool)
    final_be = np.ones(m)
    restart = config.restart or config.max_iterations
    R = F.copy()
    while True:
        cols = [c for c in range(m) if not converged[c] and iters[c] < config.max_iterations]
        if not cols:
            break
        beta = np.linalg.norm(R[:, cols].astype(np.complex128), axis=0)
        cap = min(restart, config.max_iterations - int(iters[cols].min()))
        states = {c: _Arnoldi(R[:, c], float(b), cap, config.flexible) for c, b in zip(cols, beta)}
        active = list(cols)
        while active:
            Vblk = np.stack([states[c].V[states[c].k] for c in active], axis=1)
            Zblk = np.asarray(M_apply(Vblk), dtype=dtype)
            Wblk = np.asarray(A_apply(Zblk), dtype=dtype)
            still = []
            for i, c in enumerate(active):
                st = states[c]
                res = st.step(Zblk[:, i], Wblk[:, i], config.ortho)
                iters[c] += 1
                be = (res / fnorm[c]) ** 2
                history[c].append(be)
                if be <= config.tol or st.breakdown:
                    continue
                if st.k >= cap or iters[c] >= config.max_iterations:
                    continue
                still.append(c)
            if callback is not None:
                callback(int(iters.max()), np.array([history[c][-1] for c in range(m)]))
            active = still
        # form the updates, fused over the block for the non-flexible preconditioner
        ys = {c: states[c].coefficients() for c in cols}
        if config.flexible:
            for c in cols:
                if states[c].k:
                    X[:, c] += states[c].combination(ys[c], states[c].Z)
        else:
            comb = np.stack([states[c].combination(ys[c], states[c].V) for c in cols], axis=1)
            X[:, cols] += np.asarray(M_apply(comb), dtype=dtype)
        R[:, cols] = F[:, cols] - np.asarray(A_apply(X[:, cols]), dtype=dtype)
        true_be = (np.linalg.norm(R[:, cols].astype(np.complex128), axis=0) / fnorm[cols]) ** 2
        for c, be in zip(cols, true_be):
            final_be[c] = be
            if be <= config.tol:
                converged[c] = True
    report = SolveReport(
        iterations=[int(i) for i in iters],
        history=[[float(v) for v in h] for h in history],
        converged=[bool(c) for c in converged],
        final_backward_error=[float(v) for v in final_be],
        solve_time=time.perf_counter() - t0,
        meta={"tol": config.tol, "ortho": config.ortho, "precision": config.precision,
              "flexible": config.flexible, "restart": config.restart},
    )
    return (X[:, 0] if one else X), report


def fgmres(A_apply: Apply, M_apply: Apply | None, F: np.ndarray, config: KrylovConfig = KrylovConfig(),
           callback=None) -> tuple[np.ndarray, SolveReport]:
    cfg = config if config.flexible else KrylovConfig(**{**asdict(config), "flexible": True})
    return gmres(A_apply, M_apply, F, cfg, callback)
