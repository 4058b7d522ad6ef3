"""One- and two-level optimized restricted additive Schwarz preconditioners.

One level:  M1^{-1} = sum_j R_j^T D_j B_j^{-1} R_j  with absorbing local operators B_j.
Two levels: M2^{-1} = M1^{-1} (I - A Q) + Q,  Q = Z E^{-1} Z^T, where Z is trilinear
interpolation from a grid coarsened by ``s`` and E is the operator rediscretized on
that grid.  E^{-1} is applied inexactly by an inner one-level-preconditioned GMRES,
so the outer solver must be flexible.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import Discretization, assemble_box, coarsen, complex_dtype
from .krylov import KrylovConfig, SolveReport, gmres
from .local import FactorizationError, LocalFactorization, LocalOperator, assemble_local, factorize, solve_block
from .partition import (BoxPartition, DistributedVectorBlock, PartitionOfUnity, WorkerPool,
                        build_partition_of_unity, gather, halo_exchange, scatter)


class CoarseSolveError(RuntimeError):
    def __init__(self, msg: str, residual):
        super().__init__(f"{msg} (coarse backward error {np.max(residual):.3e})")
        self.residual = residual


@dataclass(eq=False)
class OrasPreconditioner:
    partition: BoxPartition
    pou: PartitionOfUnity
    factors: list[LocalFactorization]
    interface: str = "pml"
    precision: str = "double"
    pool: WorkerPool | None = None
    setup_time: float = 0.0
    coarse: "CoarseSpace | None" = None

    @property
    def level(self) -> str:
        return "two" if self.coarse is not None else "one"

    def _solve(self, j: int, y: np.ndarray) -> np.ndarray:
        try:
            return solve_block(self.factors[j], y)
        except (ValueError, RuntimeError) as exc:
            raise FactorizationError(j, f"local solve failed: {exc}") from exc

    def apply_one_level(self, dv: DistributedVectorBlock) -> DistributedVectorBlock:
        """u_j = D_j B_j^{-1} v_j + sum_{i in O(j)} R_j R_i^T D_i B_i^{-1} v_i (consistent output)."""
        p = self.partition
        out = np.empty(dv.data.shape, dtype=complex_dtype(self.precision))

        def local(j):
            out[p.offsets[j]:p.offsets[j + 1]] = self._solve(j, dv.local(j))

        _map(self.pool, local, range(p.n_sub))
        return halo_exchange(DistributedVectorBlock(p, out), self.pool)

    def __call__(self, V: np.ndarray) -> np.ndarray:
        """Monolithic application ``sum_j R_j^T D_j B_j^{-1} R_j V``."""
        p = self.partition
        one = V.ndim == 1
        V2 = V[:, None] if one else V
        out = np.zeros(V2.shape, dtype=complex_dtype(self.precision))

        def local(j):
            return self._solve(j, V2[p.indices[j]])

        results = _map(self.pool, local, range(p.n_sub))
        for j, y in enumerate(results):
            m = p.owned_mask[j]
            out[p.indices[j][m]] += y[m]
        return out[:, 0] if one else out

    def timings(self) -> list[dict]:
        return [f.timing() for f in self.factors]


def _map(pool, fn, items):
    return pool.map(fn, items) if pool is not None else [fn(x) for x in items]


def build_oras(disc: Discretization, partition: BoxPartition, interface: str = "pml", precision: str = "double",
               pool: WorkerPool | None = None, A: sp.spmatrix | None = None,
               scale: float = 1.0) -> OrasPreconditioner:
    """Assemble and factor every local operator (the setup phase).

    ``scale`` multiplies every local matrix; the coarse level uses it to match
    its s^3-scaled operator.
    """
    t0 = time.perf_counter()

    def setup(j):
        op = assemble_local(disc, partition, j, interface, A=A)
        if scale != 1.0:
            op = LocalOperator(op.subdomain, op.matrix * scale, op.interface, op.shape)
        return factorize(op, precision)

    factors = _map(pool, setup, range(partition.n_sub))
    return OrasPreconditioner(partition, build_partition_of_unity(partition), factors, interface, precision,
                              pool, time.perf_counter() - t0)


def interpolation_1d(n_fine: int, s: int) -> sp.csr_matrix:
    """Linear interpolation from every ``s``-th node to all ``n_fine`` nodes."""
    if (n_fine - 1) % s:
        raise ValueError(f"{n_fine} points are not nested under coarsening by {s}")
    n_c = (n_fine - 1) // s + 1
    i = np.arange(n_fine)
    lo = i // s
    frac = (i % s) / s
    rows = np.r_[i, i[frac > 0]]
    cols = np.r_[lo, lo[frac > 0] + 1]
    vals = np.r_[1.0 - frac, frac[frac > 0]]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_fine, n_c))


def trilinear_interpolation(fine_shape, s: int) -> sp.csr_matrix:
    Px, Py, Pz = (interpolation_1d(n, s) for n in fine_shape)
    return sp.kron(sp.kron(Px, Py), Pz, format="csr")


def coarse_partition(fine: BoxPartition, s: int, ovl: int = 1) -> BoxPartition:
    """Same subdomains on the coarse grid: coarse node c belongs where fine node s*c is owned."""
    shape_c = tuple((n - 1) // s + 1 for n in fine.shape)
    ranges = []
    for a, r in enumerate(fine.ranges):
        ranges.append([(-(-lo // s), -(-hi // s)) for lo, hi in r])
        ranges[-1][-1] = (ranges[-1][-1][0], shape_c[a])
    return BoxPartition(shape_c, ranges, ovl)


@dataclass(eq=False)
class CoarseSpace:
    s: int
    Z: sp.csr_matrix
    E: sp.csr_matrix
    disc: Discretization
    partition: BoxPartition | None
    inner: OrasPreconditioner | None
    exact: LocalFactorization | None
    inner_config: KrylovConfig = field(default_factory=lambda: KrylovConfig(tol=1e-1, max_iterations=200))
    setup_time: float = 0.0
    inner_reports: list[SolveReport] = field(default_factory=list)

    def solve(self, rc: np.ndarray) -> np.ndarray:
        """Approximate E^{-1} rc (exact when built with ``exact=True``)."""
        if self.exact is not None:
            return solve_block(self.exact, rc)
        out = np.zeros(rc.shape, dtype=complex_dtype(self.inner_config.precision))
        nz = np.flatnonzero(np.linalg.norm(rc, axis=0) > 0)
        if nz.size == 0:
            return out
        E = self.E
        y, rep = gmres(lambda x: E @ x, self.inner, rc[:, nz], self.inner_config)
        self.inner_reports.append(rep)
        if not rep.all_converged:
            raise CoarseSolveError("inner coarse GMRES did not reach its tolerance", rep.final_backward_error)
        out[:, nz] = y
        return out


def build_coarse_space(disc: Discretization, fine_partition: BoxPartition, s: int = 2, coarse_ovl: int = 1,
                       operator: str = "rediscretized", A: sp.spmatrix | None = None,
                       inner_tol: float = 1e-1, exact: bool = False, precision: str = "double",
                       interface: str = "pml", pool: WorkerPool | None = None,
                       min_ppw: float = 4.0) -> CoarseSpace:
    """Grid coarse space: trilinear Z and coarse operator E.

    The rediscretized E is scaled by s^3, the row-sum of Z^T, so that
    ``Z E^{-1} Z^T`` has the scale of ``A^{-1}`` on smooth vectors, as the
    Galerkin product ``Z^T A Z`` would.
    """
    t0 = time.perf_counter()
    dtype = complex_dtype(precision)
    disc_c = coarsen(disc, s, min_ppw=min_ppw)
    Z = trilinear_interpolation(disc.shape, s)
    if operator == "rediscretized":
        E = assemble_box(disc_c) * float(s) ** 3
    elif operator == "galerkin":
        if A is None:
            raise ValueError("Galerkin coarse operator needs the fine matrix")
        E = (Z.T @ sp.csr_matrix(A, dtype=np.complex128) @ Z).tocsr()
    else:
        raise ValueError(f"unknown coarse operator {operator!r}")
    E = sp.csr_matrix(E, dtype=dtype)
    part_c = None
    inner = None
    fac = None
    if exact:
        fac = factorize(E, precision, shape=disc_c.shape, subdomain="coarse")
    else:
        part_c = coarse_partition(fine_partition, s, coarse_ovl)
        if operator == "galerkin":
            inner = build_oras(disc_c, part_c, "dirichlet", precision, pool, A=E)
        else:
            inner = build_oras(disc_c, part_c, interface, precision, pool, scale=float(s) ** 3)
    cfg = KrylovConfig(tol=inner_tol, max_iterations=200, precision=precision)
    return CoarseSpace(s, Z.astype(dtype), E, disc_c, part_c, inner, fac, cfg, time.perf_counter() - t0)


def apply_two_level(P: OrasPreconditioner, A_apply, V: np.ndarray, one_level=None) -> np.ndarray:
    """M1^{-1} (V - A Q V) + Q V  with  Q V = Z E^{-1} Z^T V.

    ``one_level`` overrides how M1^{-1} is applied (default: ``P`` itself).
    """
    cs = P.coarse
    if cs is None:
        raise ValueError("preconditioner has no coarse space")
    one = V.ndim == 1
    V2 = V[:, None] if one else V
    QV = cs.Z @ cs.solve(cs.Z.T @ V2)
    QV = QV.astype(V2.dtype, copy=False)
    out = (one_level or P)(V2 - A_apply(QV)) + QV
    return out[:, 0] if one else out


class TwoLevelOras:
    """Callable two-level preconditioner bound to a fine operator application."""

    def __init__(self, one_level: OrasPreconditioner, coarse: CoarseSpace, A_apply, one_level_apply=None):
        self.one_level = one_level
        one_level.coarse = coarse
        self.coarse = coarse
        self.A_apply = A_apply
        self.one_level_apply = one_level_apply

    def __call__(self, V):
        return apply_two_level(self.one_level, self.A_apply, V, self.one_level_apply)

    @property
    def setup_time(self) -> float:
        return self.one_level.setup_time + self.coarse.setup_time
