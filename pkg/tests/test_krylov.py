import csv
import json

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from hypothesis import given
from hypothesis import strategies as st

from helmdd.assembly import BoundarySpec, assemble
from helmdd.krylov import KrylovConfig, backward_error, fgmres, gmres, orthogonalize

from conftest import homogeneous


def _indefinite(n, rng):
    """Random complex symmetric indefinite matrix with a spread spectrum."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.linspace(-2.0, 3.0, n) + 0.05j
    lam[np.abs(lam) < 0.2] += 0.4
    return (Q * lam) @ Q.T


def _apply(A):
    return lambda X: A @ X


def _well_conditioned(n, rng):
    return np.eye(n) * 4.0 + (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(n)


def test_backward_error_basic(rng):
    A = _well_conditioned(20, rng)
    u = rng.standard_normal(20) + 0j
    f = A @ u
    assert backward_error(_apply(A), u, f) == 0.0
    assert backward_error(_apply(A), np.zeros(20), f) == pytest.approx(1.0)
    d = 1e-3 * rng.standard_normal(20)
    expect = np.linalg.norm(A @ d) ** 2 / np.linalg.norm(f) ** 2
    assert backward_error(_apply(A), u + d, f) == pytest.approx(expect, rel=1e-8)
    with pytest.raises(ValueError):
        backward_error(_apply(A), u, np.zeros(20))


def test_identity_converges_in_one_step(rng):
    F = rng.standard_normal((30, 3)) + 1j * rng.standard_normal((30, 3))
    U, rep = gmres(lambda x: x, None, F)
    assert rep.iterations == [1, 1, 1] and rep.all_converged
    np.testing.assert_allclose(U, F, rtol=1e-14)


def test_dense_oracle(rng):
    A = _indefinite(50, rng)
    f = rng.standard_normal(50) + 1j * rng.standard_normal(50)
    # the stopping quantity is squared: 1e-20 is a 1e-10 relative residual
    u, rep = gmres(_apply(A), None, f, KrylovConfig(tol=1e-20, max_iterations=60))
    ref = np.linalg.solve(A, f)
    assert rep.converged == [True]
    assert np.linalg.norm(u - ref) <= 1e-8 * np.linalg.norm(ref)


@pytest.mark.parametrize("ortho", ["cgs", "mgs"])
def test_pseudo_block_equals_sequential(table, ortho):
    model, freq = homogeneous(10, G=10.0)
    A = assemble(model, freq, table, BoundarySpec.uniform("robin")).matrix
    rng = np.random.default_rng(5)
    F = rng.standard_normal((A.shape[0], 8)) + 1j * rng.standard_normal((A.shape[0], 8))
    F[:, 3] *= 1e3
    ilu = spla.spilu(A.tocsc(), drop_tol=1e-2)
    M = ilu.solve
    cfg = KrylovConfig(tol=1e-8, ortho=ortho)
    U, rep = gmres(_apply(A), M, F, cfg)
    for j in range(8):
        u, r = gmres(_apply(A), M, F[:, j], cfg)
        assert r.iterations[0] == rep.iterations[j]
        assert np.linalg.norm(u - U[:, j]) <= 1e-12 * np.linalg.norm(u)
    assert rep.all_converged


def test_fgmres_with_constant_preconditioner_matches_gmres(rng):
    A = _indefinite(40, rng)
    P = np.diag(1.0 / np.diag(A))
    f = rng.standard_normal(40) + 0j
    cfg = KrylovConfig(tol=1e-12, max_iterations=60)
    u1, r1 = gmres(_apply(A), _apply(P), f, cfg)
    u2, r2 = fgmres(_apply(A), _apply(P), f, cfg)
    assert r1.iterations == r2.iterations
    np.testing.assert_allclose(r1.history[0], r2.history[0], rtol=1e-8)
    assert np.linalg.norm(u1 - u2) <= 1e-10 * np.linalg.norm(u1)


def test_fgmres_identity_reproduces_plain_history(rng):
    A = _indefinite(30, rng)
    f = rng.standard_normal(30) + 0j
    _, plain = gmres(_apply(A), None, f, KrylovConfig(tol=1e-10))
    _, flex = fgmres(_apply(A), lambda v: v.copy(), f, KrylovConfig(tol=1e-10))
    assert plain.iterations == flex.iterations
    np.testing.assert_allclose(plain.history[0], flex.history[0], rtol=1e-10, atol=1e-30)


def test_fgmres_with_inner_iterative_solve(table):
    model, freq = homogeneous(20, G=10.0)
    A = assemble(model, freq, table, BoundarySpec.uniform("robin")).matrix
    ilu = spla.spilu(A.tocsc(), drop_tol=1e-1, fill_factor=2)
    inner_cfg = KrylovConfig(tol=1e-1, max_iterations=20)
    calls = []

    def inner(V):
        X, rep = gmres(_apply(A), ilu.solve, V, inner_cfg)
        calls.append(rep.iterations)
        return X

    f = np.zeros(A.shape[0], dtype=complex)
    f[A.shape[0] // 2] = 1.0
    u, rep = fgmres(_apply(A), inner, f, KrylovConfig(tol=1e-4, max_iterations=100))
    assert rep.converged == [True]
    assert backward_error(_apply(A), u, f) <= 1e-4
    assert len(calls) >= rep.iterations[0]
    # tightening the outer tolerance drives the iterate onto the direct solution
    ref = spla.spsolve(A.tocsc(), f)
    u_tight, rep_tight = fgmres(_apply(A), inner, f, KrylovConfig(tol=1e-16, max_iterations=200))
    assert rep_tight.converged == [True]
    assert np.linalg.norm(u_tight - ref) <= 1e-5 * np.linalg.norm(ref)
    assert np.linalg.norm(u_tight - ref) < np.linalg.norm(u - ref)


def test_max_iterations_flags_partial_result(rng):
    A = _indefinite(40, rng)
    f = rng.standard_normal(40) + 0j
    u, rep = gmres(_apply(A), None, f, KrylovConfig(tol=1e-12, max_iterations=5))
    assert rep.converged == [False] and rep.iterations == [5]
    assert rep.final_backward_error[0] == pytest.approx(backward_error(_apply(A), u, f), rel=1e-8)
    assert rep.final_backward_error[0] < 1.0


def test_restart_still_converges(rng):
    A = _well_conditioned(60, rng)
    f = rng.standard_normal(60) + 0j
    u, rep = gmres(_apply(A), None, f, KrylovConfig(tol=1e-14, restart=4, max_iterations=200))
    assert rep.all_converged
    assert backward_error(_apply(A), u, f) <= 1e-14


@given(st.integers(5, 60), st.integers(0, 2 ** 16))
def test_converges_within_n_and_monotone(n, seed):
    rng = np.random.default_rng(seed)
    A = _well_conditioned(n, rng) + np.diag(rng.uniform(-3, 3, n))
    if np.linalg.cond(A) > 1e6:
        A += 5.0 * np.eye(n)
    f = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    u, rep = gmres(_apply(A), None, f, KrylovConfig(tol=1e-12, max_iterations=n))
    assert rep.iterations[0] <= n and rep.converged == [True]
    h = np.array(rep.history[0])
    assert np.all(np.diff(h) <= 1e-12 * h[:-1])


@given(st.integers(0, 2 ** 16))
def test_any_preconditioner_meets_tolerance(seed):
    rng = np.random.default_rng(seed)
    A = _indefinite(30, rng)
    M = np.diag(rng.uniform(0.2, 5.0, 30)) + 0.1 * rng.standard_normal((30, 30))
    f = rng.standard_normal(30) + 0j
    u, rep = gmres(_apply(A), _apply(M), f, KrylovConfig(tol=1e-8, max_iterations=60))
    assert rep.converged == [True]
    assert backward_error(_apply(A), u, f) <= 1e-8


def test_single_and_double_precision_agree(rng):
    A = sp.csr_matrix(_well_conditioned(200, rng))
    f = rng.standard_normal(200) + 1j * rng.standard_normal(200)
    cfg = KrylovConfig(tol=1e-8)
    u64, r64 = gmres(_apply(A), None, f, cfg)
    u32, r32 = gmres(_apply(A.astype(np.complex64)), None, f, KrylovConfig(tol=1e-8, precision="single"))
    assert u32.dtype == np.complex64
    assert abs(r32.iterations[0] - r64.iterations[0]) <= 0.1 * r64.iterations[0]
    assert np.linalg.norm(u32 - u64) <= 5e-4 * np.linalg.norm(u64)


def test_orthogonalize_breakdown_and_empty(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((50, 5)) + 1j * rng.standard_normal((50, 5)))
    B = Q.T
    w = B.T @ (rng.standard_normal(5) + 0j)
    for scheme in ("cgs", "mgs"):
        o = orthogonalize(B, w, scheme)
        assert o.breakdown
        np.testing.assert_allclose(B.T @ o.coeffs, w, atol=1e-12)
    v = rng.standard_normal(50) + 1j * rng.standard_normal(50)
    o = orthogonalize(np.empty((0, 50), dtype=complex), v)
    assert o.norm == pytest.approx(np.linalg.norm(v))
    np.testing.assert_allclose(o.vector, v / np.linalg.norm(v))
    with pytest.raises(ValueError):
        orthogonalize(B, v, "householder")


def _loss_of_orthogonality(scheme, n=200, dim=30):
    # columns of a Hilbert-like matrix: nearly dependent stream
    i = np.arange(n)[:, None]
    j = np.arange(dim)[None, :]
    H = (1.0 / (i + j + 1.0)).astype(complex)
    V = []
    for k in range(dim):
        o = orthogonalize(np.array(V) if V else np.empty((0, n), complex), H[:, k], scheme)
        if o.breakdown:
            break
        V.append(o.vector)
    V = np.array(V).T
    return np.linalg.norm(V.conj().T @ V - np.eye(V.shape[1]))


def test_mgs_loses_less_orthogonality_than_cgs():
    assert _loss_of_orthogonality("mgs") <= _loss_of_orthogonality("cgs")


def test_orthogonality_on_well_conditioned_basis(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((80, 10)) + 1j * rng.standard_normal((80, 10)))
    w = rng.standard_normal(80) + 1j * rng.standard_normal(80)
    for scheme, dtype, tol in (("cgs", np.complex128, 1e-12), ("mgs", np.complex128, 1e-12),
                               ("cgs", np.complex64, 1e-6)):
        o = orthogonalize(Q.T.astype(dtype), w.astype(dtype), scheme)
        assert np.max(np.abs(Q.conj().T @ o.vector)) <= tol


def test_config_validation():
    for bad in (dict(tol=0.0), dict(tol=1.0), dict(restart=0), dict(ortho="qr"), dict(precision="half"),
                dict(max_iterations=0)):
        with pytest.raises(ValueError):
            KrylovConfig(**bad)
    with pytest.raises(ValueError):
        gmres(lambda x: x, None, np.zeros((4, 2)))


def test_report_serialization(tmp_path, rng):
    A = _well_conditioned(20, rng)
    F = rng.standard_normal((20, 2)) + 0j
    _, rep = gmres(_apply(A), None, F, KrylovConfig(tol=1e-10))
    path = tmp_path / "conv.csv"
    rep.write_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["rhs_id", "iteration", "backward_error"]
    assert len(rows) - 1 == sum(len(h) for h in rep.history)
    assert float(rows[1][2]) == 1.0
    d = json.loads(rep.to_json())
    assert d["iterations"] == rep.iterations and "total_time" in d


def test_callback_sees_every_iteration(rng):
    A = _well_conditioned(20, rng)
    seen = []
    gmres(_apply(A), None, rng.standard_normal(20) + 0j, KrylovConfig(tol=1e-10),
          callback=lambda it, be: seen.append(it))
    assert seen == list(range(1, len(seen) + 1))
