import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from barrierfield import gmrf
from barrierfield.gmrf import NotPositiveDefiniteError, analyze, condition, factorize
from barrierfield.mesh import BarrierGeometry, mark_barrier, project_points, regular_mesh
from barrierfield.precision import build_model


def random_spd(n, seed, density=None):
    rng = np.random.default_rng(seed)
    density = min(1.0, 5.0 / n) if density is None else density
    M = sp.random(n, n, density=density, random_state=rng)
    return (M.T @ M + sp.identity(n)).tocsc()


def test_identity_and_diagonal():
    f = factorize(sp.identity(5))
    assert f.logdet == 0.0
    assert np.allclose(f.L.toarray(), np.eye(5))
    assert np.allclose(f.solve(np.arange(5.0)), np.arange(5.0))
    assert np.allclose(f.solve(np.zeros(5)), 0.0)
    assert np.allclose(f.marginal_variances(), 1.0)
    d = factorize(sp.diags([2.0, 2.0, 2.0]))
    assert d.logdet == pytest.approx(3 * np.log(2))
    v = np.array([1.0, 4.0, 0.5, 9.0])
    fv = factorize(sp.diags(v))
    assert fv.logdet == pytest.approx(np.log(v).sum())
    assert np.allclose(fv.marginal_variances(), 1 / v)


def test_random_50_reconstruction():
    rng = np.random.default_rng(3)
    M = rng.standard_normal((50, 50))
    Q = M.T @ M + np.eye(50)
    f = factorize(Q)
    L = f.L.toarray()
    PQP = Q[np.ix_(f.perm, f.perm)]
    assert np.linalg.norm(L @ L.T - PQP) / np.linalg.norm(Q) < 1e-10


@pytest.mark.parametrize("n,seed", [(1, 0), (2, 1), (7, 2), (40, 3), (120, 4), (200, 5)])
def test_dense_oracles(n, seed):
    Q = random_spd(n, seed)
    D = Q.toarray()
    f = factorize(Q)
    L = f.L.toarray()
    assert np.linalg.norm(L @ L.T - D[np.ix_(f.perm, f.perm)]) / np.linalg.norm(D) < 1e-8
    b = np.random.default_rng(seed).standard_normal((n, 3))
    x = f.solve(b)
    assert np.abs(D @ x - b).max() / np.abs(b).max() < 1e-8
    assert np.allclose(f.solve(b[:, 0]), np.linalg.solve(D, b[:, 0]), rtol=1e-8, atol=1e-10)
    ev = np.linalg.eigvalsh(D)
    assert f.logdet == pytest.approx(np.log(ev).sum(), rel=1e-8)
    Sigma = np.linalg.inv(D)
    assert np.allclose(f.marginal_variances(), np.diag(Sigma), rtol=1e-8)
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    cov = f.covariance_entries(rows.ravel(), cols.ravel()).reshape(n, n)
    assert np.allclose(cov, Sigma, rtol=1e-8, atol=1e-12)


def test_supernodal_matches_uplooking():
    mesh = mark_barrier(regular_mesh((0, 4, 0, 4), 0.2, 1.0), BarrierGeometry.rectangles((-2, 6, 2, 2.3)))
    Qs = [build_model(mesh, "MB").precision(1.5).Q, random_spd(300, 9), random_spd(150, 10, 0.2)]
    for Q in Qs:
        s = analyze(Q)
        a = factorize(Q, s, method="supernodal")
        b = factorize(Q, s, method="uplooking")
        assert np.array_equal(a.L.indices, b.L.indices)
        assert np.abs(a.L.data - b.L.data).max() <= 1e-12 * np.abs(b.L.data).max()


def test_natural_ordering_same_answers():
    Q = random_spd(80, 11)
    b = np.arange(80.0)
    a = factorize(Q)
    n = factorize(Q, ordering="natural")
    assert np.array_equal(n.perm, np.arange(80))
    assert np.allclose(a.solve(b), n.solve(b), rtol=1e-10)
    assert a.logdet == pytest.approx(n.logdet, rel=1e-12)
    assert analyze(Q).nnz_factor <= analyze(Q, "natural").nnz_factor


def test_symbolic_reuse_and_mismatch():
    Q = random_spd(60, 12)
    s = analyze(Q)
    f = factorize(2 * Q, s)
    assert f.logdet == pytest.approx(factorize(Q).logdet + 60 * np.log(2))
    other = random_spd(60, 13)
    if not s.covers(other.tocsc()):
        with pytest.raises(ValueError):
            factorize(other, s)


def test_errors():
    with pytest.raises(NotPositiveDefiniteError) as exc:
        factorize(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert exc.value.pivot in (0, 1)
    with pytest.raises(NotPositiveDefiniteError) as exc:
        factorize(sp.diags([1.0, -1.0, 1.0]))
    assert exc.value.pivot == 1
    # failure deep inside a larger matrix names the original index
    Q = random_spd(30, 14).tolil()
    Q[17, 17] = 1e-3
    Q[17, 3] = Q[3, 17] = 5.0
    with pytest.raises(NotPositiveDefiniteError) as exc:
        factorize(Q.tocsc())
    assert exc.value.pivot in (3, 17)
    with pytest.raises(ValueError):
        factorize(np.array([[2.0, 1.0], [0.0, 2.0]]))
    with pytest.raises(ValueError):
        factorize(sp.identity(3)).solve(np.ones(4))
    with pytest.raises(ValueError):
        factorize(np.ones((2, 3)))


def test_sampler_determinism_and_identity_moments():
    f = factorize(sp.identity(4))
    a = f.sample(np.random.default_rng(5))
    assert np.array_equal(a, f.sample(np.random.default_rng(5)))
    assert np.array_equal(gmrf.sample(f, 5), gmrf.sample(f, 5))
    x = f.sample(np.random.default_rng(6), size=100_000)
    assert np.abs(x.mean(axis=1)).max() < 0.02
    assert np.abs(x.var(axis=1) - 1).max() < 0.05


def test_sampler_covariance_and_whitening():
    Q = random_spd(20, 15, 0.3)
    f = factorize(Q)
    x = f.sample(np.random.default_rng(7), size=100_000)
    assert np.abs(np.cov(x) - np.linalg.inv(Q.toarray())).max() < 0.05
    y = f.sample(np.random.default_rng(8), size=10_000)
    stat = np.einsum("is,is->s", y, Q @ y) / 20
    # mean of chi2_20 / 20 over 1e4 draws, 4 sigma
    assert abs(stat.mean() - 1) < 4 * np.sqrt(2 / 20 / 10_000)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(0, 2**32 - 1))
def test_permutation_invariance(n, seed):
    Q = random_spd(n, seed)
    rng = np.random.default_rng(seed)
    p = rng.permutation(n)
    b = rng.standard_normal(n)
    x = factorize(Q).solve(b)
    Qp = Q[p][:, p]
    xp = factorize(Qp).solve(b[p])
    assert np.allclose(xp, x[p], rtol=1e-8, atol=1e-10)
    assert factorize(Qp).logdet == pytest.approx(factorize(Q).logdet, rel=1e-10, abs=1e-10)
    assert np.allclose(factorize(Qp).marginal_variances(), factorize(Q).marginal_variances()[p], rtol=1e-8)


@pytest.fixture(scope="module")
def small_prior():
    mesh = regular_mesh((0, 2, 0, 2), 0.25, 0.5)
    return mesh, build_model(mesh, "MS").precision(1.0).Q


def test_condition_no_observations(small_prior):
    mesh, Q = small_prior
    proj = project_points(mesh, np.zeros((0, 2)))
    mean, post = condition(Q, proj, 0.1, [], extra_flat_effects=1)
    assert np.all(mean == 0)
    assert abs(post[:-1, :-1] - Q).max() == 0
    assert post[-1, -1] == pytest.approx(1e-6)


def test_condition_scalar_oracle(small_prior):
    mesh, Q = small_prior
    node = mesh.nearest_node((1, 1))
    proj = project_points(mesh, [mesh.vertices[node]])
    var = np.linalg.inv(Q.toarray())[node, node]
    for noise in (1e-8, 0.3):
        mean, _ = condition(Q, proj, noise, [2.5], extra_flat_effects=0)
        assert mean[node] == pytest.approx(var / (var + noise) * 2.5, rel=1e-8)
    mean, _ = condition(Q, proj, 1e-8, [2.5], extra_flat_effects=0)
    assert abs(mean[node] - 2.5) < 1e-3
    # with the intercept, field plus intercept reproduces the datum
    mean, _ = condition(Q, proj, 1e-8, [2.5], extra_flat_effects=1)
    assert abs(mean[node] + mean[-1] - 2.5) < 1e-3


def test_condition_duplicates_and_vague_noise(small_prior):
    mesh, Q = small_prior
    pts = np.array([[0.3, 0.4], [1.2, 1.7], [1.9, 0.1]])
    y = np.array([1.0, -0.5, 2.0])
    proj = project_points(mesh, pts)
    dup = project_points(mesh, np.vstack([pts, pts]))
    m1, p1 = condition(Q, proj, 0.05, y)
    m2, p2 = condition(Q, dup, 0.1, np.concatenate([y, y]))
    assert np.allclose(m1, m2, rtol=1e-9, atol=1e-12)
    assert abs(p1 - p2).max() <= 1e-9 * abs(p1).max()
    m3, p3 = condition(Q, proj, 1e12, y)
    prior = sp.block_diag([Q, 1e-6 * sp.identity(1)])
    assert abs(p3 - prior).max() <= 1e-10
    assert np.abs(m3[:-1]).max() <= 1e-10


def test_condition_errors(small_prior):
    mesh, Q = small_prior
    proj = project_points(mesh, [[0.5, 0.5], [9, 9], [1, 1], [-4, 0]])
    with pytest.raises(ValueError, match=r"\[1, 3\]"):
        condition(Q, proj, 0.1, [1, 2, 3, 4])
    with pytest.raises(ValueError):
        condition(Q, project_points(mesh, [[0.5, 0.5]]), 0.0, [1.0])
    with pytest.raises(ValueError):
        condition(Q, project_points(mesh, [[0.5, 0.5]]), 0.1, [1.0, 2.0])
