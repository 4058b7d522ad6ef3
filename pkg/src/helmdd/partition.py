"""Overlapping box decomposition of a structured grid and its distributed vector algebra.

Subdomain ``j`` owns a cuboid of nodes and works on the owned box dilated by
``ovl`` points (clipped to the grid).  With the boolean owner partition of unity
every node has exactly one owner, so a consistent distributed vector stores, in
each subdomain copy, the owner's value of every node.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class InvalidPartition(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]  # exclusive

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def intersect(self, other: "Box") -> "Box | None":
        lo = tuple(max(a, b) for a, b in zip(self.lo, other.lo))
        hi = tuple(min(a, b) for a, b in zip(self.hi, other.hi))
        if any(a >= b for a, b in zip(lo, hi)):
            return None
        return Box(lo, hi)

    def local_flat(self, sub: "Box") -> np.ndarray:
        """Flat positions (C order within ``self``) of the nodes of ``sub``."""
        coords = np.indices(sub.shape).reshape(3, -1) + np.array(sub.lo)[:, None] - np.array(self.lo)[:, None]
        return np.ravel_multi_index(tuple(coords), self.shape)


class WorkerPool:
    """Ordered map over subdomains; ``workers=1`` runs inline."""

    def __init__(self, workers: int = 1):
        self.workers = max(1, int(workers))
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def map(self, fn, items):
        items = list(items)
        if self._pool is None:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_SERIAL = WorkerPool(1)


def _pool(pool: WorkerPool | None) -> WorkerPool:
    return pool if pool is not None else _SERIAL


class BoxPartition:
    def __init__(self, shape, ranges, ovl: int = 3):
        self.shape = tuple(int(n) for n in shape)
        self.ovl = int(ovl)
        if self.ovl < 0:
            raise InvalidPartition("overlap must be >= 0")
        self.ranges = [list((int(a), int(b)) for a, b in r) for r in ranges]
        self.counts = tuple(len(r) for r in self.ranges)
        for a, r in enumerate(self.ranges):
            if r[0][0] != 0 or r[-1][1] != self.shape[a] or any(r[i][1] != r[i + 1][0] for i in range(len(r) - 1)):
                raise InvalidPartition(f"axis {a}: owned ranges {r} do not tile [0, {self.shape[a]})")
            for lo, hi in r:
                if len(r) > 1 and hi - lo < 2 * self.ovl + 1:
                    raise InvalidPartition(
                        f"axis {a}: owned width {hi - lo} is thinner than 2*ovl+1 = {2 * self.ovl + 1}")
                if hi <= lo:
                    raise InvalidPartition(f"axis {a}: empty owned range")
        self.owned: list[Box] = []
        self.extended: list[Box] = []
        for ix in range(self.counts[0]):
            for iy in range(self.counts[1]):
                for iz in range(self.counts[2]):
                    rr = (self.ranges[0][ix], self.ranges[1][iy], self.ranges[2][iz])
                    own = Box(tuple(r[0] for r in rr), tuple(r[1] for r in rr))
                    ext = Box(tuple(max(0, a - self.ovl) for a in own.lo),
                              tuple(min(n, b + self.ovl) for b, n in zip(own.hi, self.shape)))
                    self.owned.append(own)
                    self.extended.append(ext)
        self.n_sub = len(self.owned)
        flat = np.arange(int(np.prod(self.shape))).reshape(self.shape)
        self.indices = [flat[e.slices].ravel() for e in self.extended]
        self.owned_mask = []
        for own, ext in zip(self.owned, self.extended):
            m = np.zeros(ext.size, dtype=bool)
            m[ext.local_flat(own)] = True
            self.owned_mask.append(m)
        self.sizes = np.array([e.size for e in self.extended])
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.neighbours: list[list[int]] = [[] for _ in range(self.n_sub)]
        # shared[(i, j)] = (positions in i, positions in j) of nodes owned by i inside j's box
        self.shared: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        for j in range(self.n_sub):
            for i in range(self.n_sub):
                if i == j or self.extended[i].intersect(self.extended[j]) is None:
                    continue
                self.neighbours[j].append(i)
                common = self.owned[i].intersect(self.extended[j])
                if common is None:
                    continue
                self.shared[(i, j)] = (self.extended[i].local_flat(common), self.extended[j].local_flat(common))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def subdomain_id(self, ix: int, iy: int, iz: int) -> int:
        return (ix * self.counts[1] + iy) * self.counts[2] + iz

    def boundary_faces(self, j: int) -> tuple[bool, ...]:
        """Per face (x-, x+, ...): True if the extended box reaches the global grid boundary."""
        ext = self.extended[j]
        out = []
        for a in range(3):
            out += [ext.lo[a] == 0, ext.hi[a] == self.shape[a]]
        return tuple(out)

    def restriction(self, j: int) -> sp.csr_matrix:
        n_j = self.sizes[j]
        return sp.csr_matrix((np.ones(n_j), (np.arange(n_j), self.indices[j])), shape=(n_j, self.size))

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "counts": list(self.counts),
            "ovl": self.ovl,
            "ranges": [[list(r) for r in ax] for ax in self.ranges],
            "subdomains": [
                {"id": j, "owned": [list(o.lo), list(o.hi)], "extended": [list(e.lo), list(e.hi)],
                 "neighbours": self.neighbours[j]}
                for j, (o, e) in enumerate(zip(self.owned, self.extended))
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "BoxPartition":
        return cls(d["shape"], d["ranges"], d["ovl"])


def partition_grid(shape, px: int, py: int, pz: int, ovl: int = 3) -> BoxPartition:
    """Balanced owned boxes (sizes differ by at most one per axis)."""
    counts = (px, py, pz)
    if any(int(c) != c or c < 1 for c in counts):
        raise InvalidPartition(f"subdomain counts must be positive integers, got {counts}")
    ranges = []
    for n, p in zip(shape, counts):
        if p > n:
            raise InvalidPartition(f"{p} subdomains along an axis of {n} points")
        edges = [int(c[0]) for c in np.array_split(np.arange(n), p)] + [n]
        ranges.append([(edges[i], edges[i + 1]) for i in range(p)])
    return BoxPartition(shape, ranges, ovl)


@dataclass(frozen=True, eq=False)
class PartitionOfUnity:
    weights: tuple[np.ndarray, ...]

    def materialize(self, partition: BoxPartition) -> sp.csr_matrix:
        """Sum_j R_j^T D_j R_j as a sparse matrix (identity when valid)."""
        total = sp.csr_matrix((partition.size, partition.size))
        for j, d in enumerate(self.weights):
            R = partition.restriction(j)
            total = total + R.T @ sp.diags(d) @ R
        return total.tocsr()


def build_partition_of_unity(partition: BoxPartition, kind: str = "boolean-owner") -> PartitionOfUnity:
    if kind != "boolean-owner":
        raise ValueError(f"unsupported partition of unity {kind!r}")
    return PartitionOfUnity(tuple(m.astype(float) for m in partition.owned_mask))


class DistributedVectorBlock:
    """Stacked local copies ``(sum_j n_j, m)``; ``local(j)`` is a view."""

    def __init__(self, partition: BoxPartition, data: np.ndarray, consistent: bool = False):
        if data.ndim == 1:
            data = data[:, None]
        if data.shape[0] != partition.offsets[-1]:
            raise ProtocolError(f"stacked length {data.shape[0]} != {partition.offsets[-1]}")
        self.partition = partition
        self.data = data
        self.consistent = consistent

    @property
    def nrhs(self) -> int:
        return self.data.shape[1]

    def local(self, j: int) -> np.ndarray:
        p = self.partition
        return self.data[p.offsets[j]:p.offsets[j + 1]]

    def copy(self) -> "DistributedVectorBlock":
        return DistributedVectorBlock(self.partition, self.data.copy(), self.consistent)

    def is_consistent(self) -> bool:
        """Every shared copy equals the owner's value (bitwise)."""
        for (i, j), (pi, pj) in self.partition.shared.items():
            if not np.array_equal(self.local(i)[pi], self.local(j)[pj]):
                return False
        return True


def scatter(partition: BoxPartition, v: np.ndarray) -> DistributedVectorBlock:
    v2 = v[:, None] if v.ndim == 1 else v
    data = v2[np.concatenate(partition.indices)]
    return DistributedVectorBlock(partition, data, consistent=True)


def gather(dv: DistributedVectorBlock, check_consistent: bool = False) -> np.ndarray:
    """Sum_j R_j^T D_j v_j; with boolean weights this copies each owner's values."""
    p = dv.partition
    if check_consistent and not dv.is_consistent():
        raise ProtocolError("gather of an inconsistent distributed vector")
    out = np.zeros((p.size, dv.nrhs), dtype=dv.data.dtype)
    for j in range(p.n_sub):
        m = p.owned_mask[j]
        out[p.indices[j][m]] += dv.local(j)[m]
    return out


def halo_exchange(dv: DistributedVectorBlock, pool: WorkerPool | None = None) -> DistributedVectorBlock:
    """v_j <- D_j v_j + sum_{i in O(j)} R_j R_i^T D_i v_i, summed in ascending i."""
    p = dv.partition
    pool = _pool(pool)

    def send(i):
        vi = dv.local(i)
        return {j: vi[pi] for (src, j), (pi, _) in p.shared.items() if src == i}

    outboxes = pool.map(send, range(p.n_sub))
    out = np.empty_like(dv.data)

    def receive(j):
        res = out[p.offsets[j]:p.offsets[j + 1]]
        res[...] = dv.local(j) * p.owned_mask[j][:, None]
        for i in p.neighbours[j]:
            buf = outboxes[i].get(j)
            if buf is None:
                continue
            pos = p.shared[(i, j)][1]
            if buf.shape[0] != pos.size:
                raise ProtocolError(f"message {i}->{j} has {buf.shape[0]} rows, expected {pos.size}")
            res[pos] += buf

    pool.map(receive, range(p.n_sub))
    return DistributedVectorBlock(p, out, consistent=True)


def restrict_operator(A: sp.spmatrix, partition: BoxPartition) -> list[sp.csr_matrix]:
    """A_j = R_j A R_j^T for every subdomain."""
    A = sp.csr_matrix(A)
    return [A[idx][:, idx].tocsr() for idx in partition.indices]


def distributed_matvec(local_ops: list, dv: DistributedVectorBlock,
                       pool: WorkerPool | None = None) -> DistributedVectorBlock:
    """u_j = D_j A_j v_j + sum_{i in O(j)} R_j R_i^T D_i A_i v_i."""
    p = dv.partition
    if len(local_ops) != p.n_sub:
        raise ValueError(f"{len(local_ops)} local operators for {p.n_sub} subdomains")
    out = np.empty_like(dv.data)

    def local(j):
        A_j = local_ops[j]
        if A_j.shape[1] != p.sizes[j]:
            raise ValueError(f"subdomain {j}: operator has {A_j.shape[1]} columns, box has {p.sizes[j]} nodes")
        out[p.offsets[j]:p.offsets[j + 1]] = A_j @ dv.local(j)

    _pool(pool).map(local, range(p.n_sub))
    return halo_exchange(DistributedVectorBlock(p, out), pool)
