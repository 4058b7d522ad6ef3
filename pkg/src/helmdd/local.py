"""Per-subdomain operators with absorbing interface closures, and their exact LU factors."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from .assembly import Discretization, assemble_box, complex_dtype
from .partition import BoxPartition

INTERFACES = ("pml", "robin", "dirichlet")


class FactorizationError(RuntimeError):
    def __init__(self, subdomain, detail: str):
        super().__init__(f"subdomain {subdomain}: {detail}")
        self.subdomain = subdomain
        self.detail = detail


@dataclass(frozen=True, eq=False)
class LocalOperator:
    subdomain: int
    matrix: sp.csr_matrix
    interface: str
    shape: tuple[int, int, int]


def assemble_local(disc: Discretization, partition: BoxPartition, j: int, interface: str = "pml",
                   A: sp.spmatrix | None = None) -> LocalOperator:
    """Rediscretize the global problem ``disc`` on subdomain ``j``'s extended box.

    Faces on the global boundary keep the global condition.  Interface faces get a
    PML of width ``ovl`` living in the overlap (damping added to any global PML
    damping), or a first-order Robin closure with the pointwise local k.
    ``interface="dirichlet"`` extracts ``R_j A R_j^T`` from ``A`` instead (plain RAS).
    """
    if interface not in INTERFACES:
        raise ValueError(f"unknown interface condition {interface!r}")
    ext = partition.extended[j]
    own = partition.owned[j]
    if interface == "dirichlet":
        if A is None:
            raise ValueError("Dirichlet extraction needs the global matrix")
        idx = partition.indices[j]
        return LocalOperator(j, sp.csr_matrix(A)[idx][:, idx].tocsr(), interface, ext.shape)
    on_boundary = partition.boundary_faces(j)
    faces = []
    sig_node = [s[b].copy() for s, b in zip(disc.sigma_node, ext.slices)]
    sig_half = [s[b.start:b.stop - 1].copy() for s, b in zip(disc.sigma_half, ext.slices)]
    for a in range(3):
        for side in range(2):
            f = 2 * a + side
            if on_boundary[f]:
                faces.append(disc.faces[f])
                continue
            if interface == "robin":
                faces.append("robin")
                continue
            width = own.lo[a] - ext.lo[a] if side == 0 else ext.hi[a] - own.hi[a]
            if width < 1:
                raise ValueError(f"subdomain {j}: overlap too thin for an interface PML")
            thickness = width * disc.h
            edge = (own.lo[a] if side == 0 else own.hi[a] - 1) - ext.lo[a]
            x_node = np.arange(ext.shape[a], dtype=float)
            x_half = np.arange(ext.shape[a] - 1) + 0.5
            for arr, x in ((sig_node[a], x_node), (sig_half[a], x_half)):
                depth = (edge - x if side == 0 else x - edge) * disc.h
                arr += np.where(depth > 0, disc.pml.sigma(depth, thickness, disc.c_ref), 0.0)
            faces.append("open")
    sub = disc.sub_box(ext.slices, tuple(faces))
    sub = replace(sub, sigma_node=tuple(sig_node), sigma_half=tuple(sig_half))
    return LocalOperator(j, assemble_box(sub), interface, ext.shape)


def nested_dissection(shape, leaf: int = 16) -> np.ndarray:
    """Geometric nested-dissection ordering of a box of nodes.

    Recursively cut along the longest axis; each separator plane is numbered after
    the two halves it separates.
    """
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    out = []
    stack = [(idx, False)]  # (block, already split)
    while stack:
        block, expanded = stack.pop()
        if expanded:
            out.append(block.ravel())
            continue
        if block.size <= leaf or max(block.shape) < 3:
            out.append(block.ravel())
            continue
        ax = int(np.argmax(block.shape))
        mid = block.shape[ax] // 2
        sl = [slice(None)] * 3
        sl[ax] = slice(0, mid)
        left = block[tuple(sl)]
        sl[ax] = slice(mid + 1, None)
        right = block[tuple(sl)]
        sl[ax] = slice(mid, mid + 1)
        sep = block[tuple(sl)]
        stack.append((sep, True))
        stack.append((right, False))
        stack.append((left, False))
    return np.concatenate(out)


@dataclass(eq=False)
class LocalFactorization:
    subdomain: int
    perm: np.ndarray
    lu: object
    precision: str
    n: int
    nnz: int
    setup_time: float

    @property
    def dtype(self):
        return complex_dtype(self.precision)

    def solve(self, Y: np.ndarray) -> np.ndarray:
        return solve_block(self, Y)

    def timing(self) -> dict:
        return {"subdomain": self.subdomain, "n": self.n, "factor_nnz": self.nnz, "factor_seconds": self.setup_time}


def factorize(op: LocalOperator | sp.spmatrix, precision: str = "double", shape=None,
              subdomain=None, leaf: int = 16) -> LocalFactorization:
    """Exact sparse LU (SuperLU) on a nested-dissection ordered matrix.

    Threshold partial pivoting (0.1) prefers the diagonal, which keeps the
    symmetric fill pattern the ordering was built for.
    """
    if isinstance(op, LocalOperator):
        matrix, shape, subdomain = op.matrix, op.shape, op.subdomain
    else:
        matrix = sp.csr_matrix(op)
    n = matrix.shape[0]
    if matrix.shape != (n, n):
        raise FactorizationError(subdomain, f"matrix is not square: {matrix.shape}")
    dtype = complex_dtype(precision)
    perm = nested_dissection(shape, leaf) if shape is not None else np.arange(n)
    if perm.size != n:
        raise FactorizationError(subdomain, f"ordering covers {perm.size} nodes, matrix has {n}")
    t0 = time.perf_counter()
    Ap = sp.csc_matrix(matrix[perm][:, perm], dtype=dtype)
    try:
        lu = spl.splu(Ap, permc_spec="NATURAL", diag_pivot_thresh=0.1,
                      options=dict(SymmetricMode=True))
    except RuntimeError as exc:
        diag = np.abs(Ap.diagonal())
        raise FactorizationError(subdomain, f"{exc}; smallest |diagonal| {diag.min():.3e} "
                                            f"at row {int(perm[np.argmin(diag)])}") from exc
    elapsed = time.perf_counter() - t0
    return LocalFactorization(subdomain, perm, lu, precision, n, int(lu.nnz), elapsed)


def solve_block(fact: LocalFactorization, Y: np.ndarray) -> np.ndarray:
    """Solve B X = Y for all columns of Y at once."""
    if Y.shape[0] != fact.n:
        raise ValueError(f"block has {Y.shape[0]} rows, factor has {fact.n}")
    one = Y.ndim == 1
    Yp = np.asarray(Y, dtype=fact.dtype)[fact.perm]
    Xp = fact.lu.solve(Yp if not one else Yp[:, None])
    X = np.empty_like(Xp)
    X[fact.perm] = Xp
    return X[:, 0] if one else X
