import numpy as np
import pytest

from tomoconvex.basis import (AlphaQuadrature, build_basis, certificate_components,
                              default_quadrature, gauss_legendre_quadrature,
                              positivity_certificate, project_to_basis, reconstruct)

QUAD = default_quadrature(15)


def gram(basis):
    return np.einsum("q,nq,mq->nm", basis.quad.weights, basis.psi, basis.psi)


def test_quadrature_invariants():
    q = gauss_legendre_quadrature(64)
    assert np.all(np.diff(q.nodes) > 0)
    assert q.nodes[0] > 0 and q.nodes[-1] < 1
    assert np.all(q.weights > 0)
    assert abs(q.weights.sum() - 1.0) < 1e-12


def test_psi1_closed_form():
    # single-mode basis: e^alpha / sqrt((e^2 - 1)/2)
    basis = build_basis(1, 1.0, gauss_legendre_quadrature(16))
    ref = np.exp(basis.quad.nodes) / np.sqrt((np.e ** 2 - 1.0) / 2.0)
    assert np.abs(basis.psi[0] - ref).max() < 1e-13


@pytest.mark.parametrize("N", range(1, 16))
def test_orthonormality_and_M_structure(N):
    b = build_basis(N, 1.0, QUAD)
    assert np.abs(gram(b) - np.eye(N)).max() <= 1e-10
    assert np.abs(np.diag(b.M) - 1.0).max() <= 1e-10
    assert np.abs(np.tril(b.M, -1)).max() <= 1e-10


@pytest.mark.parametrize("N", range(1, 7))
def test_M_inverse(N):
    # cond(M_N) grows like ~1e3 at N=5 and ~1e18 at N=15; the inverse identity
    # is only meaningful at the small N the solver actually uses
    b = build_basis(N, 1.0, QUAD)
    assert np.abs(b.M @ b.M_inv - np.eye(N)).max() <= 1e-10


def test_X_maps_generators_to_basis():
    b = build_basis(4, 1.0, QUAD)
    al = b.quad.nodes
    xi = np.stack([(al + 1.0) ** k * np.exp(al) for k in range(4)])
    assert np.abs(b.X @ xi - b.psi).max() < 1e-8


def test_derivative_consistency_fd():
    b = build_basis(9, 1.0, QUAD)
    for al0 in (0.15, 0.5, 0.85):
        for st in (1e-4, 5e-5):
            fd = (b.evaluate(al0 + st, n=9) - b.evaluate(al0 - st, n=9)) / (2 * st)
            err = abs(fd - b.evaluate(al0, n=9, deriv=1))
            # central differences: O(step^2) with a generous constant
            assert err <= 1e4 * st ** 2


def test_evaluate_matches_node_tables():
    b = build_basis(6, 1.0, QUAD)
    k = 21
    al = b.quad.nodes[k]
    assert abs(b.evaluate(al, n=4) - b.psi[3, k]) < 1e-11
    assert abs(b.evaluate(al, n=4, deriv=1) - b.dpsi[3, k]) < 1e-10


def test_degenerate_pivot_reports_index():
    with pytest.raises(ValueError, match="index"):
        build_basis(3, 1.0, AlphaQuadrature(np.array([0.5]), np.array([1.0])))


def test_build_basis_rejects_bad_args():
    with pytest.raises(ValueError):
        build_basis(0, 1.0)
    with pytest.raises(ValueError):
        build_basis(3, -1.0)


# ---------------------------------------------------------------------------
# positivity certificate (the sufficient condition behind the convex set)


def test_certificate_zero_vector_false():
    b = build_basis(3, 1.0, QUAD)
    assert positivity_certificate(b, np.zeros(3)) is False


def test_certificate_generator_sum_true():
    # q = xi_1 + xi_2 projects exactly for N = 2 and has transformed
    # components (1, 1)
    b = build_basis(2, 1.0, QUAD)
    al = b.quad.nodes
    samples = (al + 2.0) * np.exp(al)
    coeffs = project_to_basis(b, samples)
    assert positivity_certificate(b, coeffs)
    assert np.abs(b.X.T @ coeffs - 1.0).max() < 1e-10


def test_certificate_soundness_sampled():
    # positive transformed components imply q(alpha) > 0 on a dense sample
    b = build_basis(4, 1.0, QUAD)
    rng = np.random.default_rng(0)
    al = np.linspace(0.0, 1.0, 1000)
    vals = b.evaluate(al)
    for _ in range(100):
        coeffs = rng.standard_normal(4)
        if positivity_certificate(b, coeffs):
            q = coeffs @ vals
            assert q.min() > 0.0


def test_certificate_components_leading_axis():
    b = build_basis(3, 1.0, QUAD)
    arr = np.random.default_rng(1).standard_normal((3, 4, 5))
    comp = certificate_components(b, arr)
    assert comp.shape == (3, 4, 5)
    assert np.allclose(comp[:, 2, 3], b.X.T @ arr[:, 2, 3])


# ---------------------------------------------------------------------------
# projection


def test_project_basis_function_gives_unit_vector():
    b = build_basis(5, 1.0, QUAD)
    co = project_to_basis(b, b.psi[1])
    ref = np.zeros(5)
    ref[1] = 1.0
    assert np.abs(co - ref).max() <= 1e-10


def test_project_zero():
    b = build_basis(5, 1.0, QUAD)
    assert np.all(project_to_basis(b, np.zeros(b.quad.Q)) == 0.0)


def test_project_reconstruct_inside_span():
    # (alpha + a) e^alpha lies in the span of the first two generators
    b = build_basis(2, 1.0, QUAD)
    al = b.quad.nodes
    samples = (al + 1.0) * np.exp(al)
    rec = reconstruct(b, project_to_basis(b, samples))
    assert np.abs(rec - samples).max() <= 1e-9


def test_project_leading_axes():
    b = build_basis(3, 1.0, QUAD)
    rng = np.random.default_rng(2)
    co = rng.standard_normal((4, 7, 3))
    samples = reconstruct(b, co)
    back = project_to_basis(b, samples)
    assert np.abs(back - co).max() < 1e-12
