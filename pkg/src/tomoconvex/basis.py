"""Orthonormal source-parameter basis psi_n(alpha) = P_{n-1}(alpha + a) e^alpha.

Gram-Schmidt (run twice, to suppress loss of orthogonality at larger N) is
applied to the generating set xi_n(alpha) = (alpha + a)^{n-1} e^alpha,
n = 1..N, under the L2(0,1) scalar product realized by a Gauss-Legendre
quadrature.  The polynomial factors are carried as Legendre series on [0,1],
which keeps both evaluation and differentiation stable; monomial coefficients
are derivable for inspection dumps.

Two matrices accompany the basis:

* ``X`` maps generator values to basis values, ``psi^N = X xi^N``; its
  transpose drives the positivity certificate (all components of ``X^T q``
  positive forces sum q_n psi_n > 0 on [0,1], because the generators are
  positive functions).
* ``M`` with entries ``a_{mn} = {psi_n', psi_m}`` is unit upper triangular,
  hence invertible; its inverse closes the coefficient-space fixed-point
  equation of the inversion operator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as npleg
from numpy.polynomial import polynomial as nppoly

_DOMAIN = (0.0, 1.0)


@dataclass(frozen=True)
class AlphaQuadrature:
    """Nodes/weights realizing the L2(0,1) scalar product in alpha."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        n, w = np.asarray(self.nodes, float), np.asarray(self.weights, float)
        if n.ndim != 1 or n.shape != w.shape:
            raise ValueError("nodes and weights must be 1D arrays of equal length")
        if np.any(np.diff(n) <= 0) or n[0] < 0.0 or n[-1] > 1.0:
            raise ValueError("nodes must be strictly increasing within [0, 1]")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        object.__setattr__(self, "nodes", n)
        object.__setattr__(self, "weights", w)

    @property
    def Q(self) -> int:
        return len(self.nodes)


def gauss_legendre_quadrature(Q: int) -> AlphaQuadrature:
    """Gauss-Legendre rule mapped from [-1,1] to [0,1]."""
    x, w = np.polynomial.legendre.leggauss(Q)
    return AlphaQuadrature(0.5 * (x + 1.0), 0.5 * w)


def default_quadrature(N: int, floor: int = 64) -> AlphaQuadrature:
    """Node count Q = max(4N+8, floor): exact for the basis products, and the
    fixed floor keeps alpha-differentiation of data accurate."""
    return gauss_legendre_quadrature(max(4 * N + 8, floor))


def _shift_poly_coeffs(a: float, degree: int) -> np.ndarray:
    """Monomial (alpha) coefficients of (alpha + a)^degree."""
    c = np.array([1.0])
    for _ in range(degree):
        c = nppoly.polymul(c, np.array([a, 1.0]))
    return c


@dataclass(frozen=True)
class BasisSet:
    """Orthonormal basis with values, derivatives and coupling matrices.

    ``leg``: (N, N) Legendre coefficients (domain [0,1]) of each polynomial
    factor P_{n-1}; row n-1 holds P_{n-1}.  ``psi``/``dpsi``: (N, Q) values of
    psi_n and psi_n' at the quadrature nodes.
    """

    N: int
    a: float
    quad: AlphaQuadrature
    leg: np.ndarray
    psi: np.ndarray
    dpsi: np.ndarray
    X: np.ndarray
    M: np.ndarray
    M_inv: np.ndarray

    def evaluate(self, alpha, n: int | None = None, deriv: int = 0) -> np.ndarray:
        """Evaluate psi_n (or all rows) at arbitrary alpha from the stored
        polynomial coefficients; deriv=1 gives psi_n'."""
        alpha = np.asarray(alpha, dtype=float)
        rows = range(self.N) if n is None else [n - 1]
        out = []
        for r in rows:
            c = npleg.Legendre(self.leg[r], domain=_DOMAIN)
            if deriv == 0:
                out.append(c(alpha) * np.exp(alpha))
            elif deriv == 1:
                out.append((c(alpha) + c.deriv(1)(alpha)) * np.exp(alpha))
            else:
                raise ValueError("deriv must be 0 or 1")
        res = np.stack(out)
        return res[0] if n is not None else res

    def monomial_coeffs(self, n: int) -> np.ndarray:
        """Ascending monomial (in alpha) coefficients of P_{n-1}; inspection only."""
        return npleg.Legendre(self.leg[n - 1], domain=_DOMAIN).convert(kind=nppoly.Polynomial).coef


def build_basis(N: int, a: float, quad: AlphaQuadrature | None = None) -> BasisSet:
    """Gram-Schmidt construction of the basis, its derivative table and the
    matrices X, M, M^{-1}.

    Raises ValueError on a degenerate pivot (norm below 1e-13 relative),
    which signals a quadrature too coarse for the requested N.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if a <= 0:
        raise ValueError(f"shift constant a must be positive, got {a}")
    if quad is None:
        quad = default_quadrature(N)

    al, wq = quad.nodes, quad.weights
    ealpha = np.exp(al)
    s = al + a
    wexp = wq * ealpha ** 2  # weight of the polynomial-factor inner product

    def inner(u, v):
        return float(np.sum(wexp * u * v))

    # Orthonormal polynomial factors P_k(s) under the e^{2 alpha} weight via
    # the Stieltjes three-term recurrence, in node-value space with the
    # derivative values tracked through the same recurrence.  Plain
    # Gram-Schmidt on the generators (alpha+a)^k e^alpha loses the polynomial
    # subspace in double precision near N = 15 (generator condition ~ 1e13),
    # which destroys the triangular structure of M; the recurrence computes
    # the identical basis without that cancellation.  A re-orthogonalization
    # sweep follows as a final polish.
    p = np.zeros((N, quad.Q))   # polynomial factor values
    dp = np.zeros((N, quad.Q))  # d/ds of the polynomial factor
    scale0 = np.sqrt(inner(np.ones(quad.Q), np.ones(quad.Q)))
    pk = np.ones(quad.Q)
    dk = np.zeros(quad.Q)
    pkm1 = np.zeros(quad.Q)
    dkm1 = np.zeros(quad.Q)
    nrm2_prev = None
    for k in range(N):
        nrm2 = inner(pk, pk)
        nrm = np.sqrt(nrm2)
        if nrm < 1e-13 * scale0:
            raise ValueError(
                f"degenerate orthogonalization pivot at basis index {k + 1}: "
                f"norm {nrm:.3e}; quadrature too coarse for N = {N}"
            )
        p[k] = pk / nrm
        dp[k] = dk / nrm
        ak = inner(s * pk, pk) / nrm2
        bk = 0.0 if nrm2_prev is None else nrm2 / nrm2_prev
        pk, pkm1, nrm2_prev = (s - ak) * pk - bk * pkm1, pk, nrm2
        dk, dkm1 = pkm1 + (s - ak) * dk - bk * dkm1, dk

    # polish: one modified Gram-Schmidt sweep over the (already nearly
    # orthonormal) rows, derivative rows updated with identical coefficients
    for n in range(N):
        for m in range(n):
            proj = inner(p[n], p[m])
            p[n] -= proj * p[m]
            dp[n] -= proj * dp[m]
        nrm = np.sqrt(inner(p[n], p[n]))
        p[n] /= nrm
        dp[n] /= nrm

    psi = p * ealpha
    dpsi = (dp + p) * ealpha  # psi' = (P' + P) e^alpha

    # Legendre coefficients of P_{n-1} by orthogonal projection of the node
    # values (exact for this quadrature, stable: recurrence values stay inside
    # the polynomial subspace).
    deg = np.arange(N)
    Lvals = np.stack([npleg.legval(2.0 * al - 1.0, np.eye(N)[k]) for k in range(N)])
    leg = np.einsum("q,nq,kq->nk", wq, psi / ealpha, Lvals) * (2.0 * deg + 1.0)
    # fix sign: positive leading coefficient
    for n in range(N):
        if leg[n, n] < 0:
            leg[n] = -leg[n]
            psi[n] = -psi[n]
            dpsi[n] = -dpsi[n]

    # X from the triangular relation psi_leg = X xi_leg
    xi_leg = np.zeros((N, N))
    for n in range(N):
        series = nppoly.Polynomial(_shift_poly_coeffs(a, n)).convert(
            kind=npleg.Legendre, domain=_DOMAIN)
        xi_leg[n, : len(series.coef)] = series.coef
    X = np.linalg.solve(xi_leg.T, leg.T).T

    M = np.einsum("q,nq,mq->mn", wq, dpsi, psi)
    # a_{mn} = 0 for n < m holds exactly (degree argument); invert by back
    # substitution on the exact triangle.  cond(M) grows fast with N (~1e3 at
    # N=5, ~1e18 at N=15), so the inverse identity degrades at large N no
    # matter the algorithm; the inversion solver works at small N.
    from scipy.linalg import solve_triangular

    M_inv = solve_triangular(np.triu(M), np.eye(N))
    return BasisSet(N=N, a=a, quad=quad, leg=leg, psi=psi, dpsi=dpsi, X=X, M=M, M_inv=M_inv)


def project_to_basis(basis: BasisSet, samples: np.ndarray) -> np.ndarray:
    """Fourier coefficients q_n = sum_q w_q samples_q psi_n(alpha_q).

    ``samples`` may carry leading axes; the quadrature axis is the last one.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.shape[-1] != basis.quad.Q:
        raise ValueError("last axis of samples must match the quadrature node count")
    return np.einsum("...q,nq,q->...n", samples, basis.psi, basis.quad.weights)


def reconstruct(basis: BasisSet, coeffs: np.ndarray) -> np.ndarray:
    """Evaluate sum_n coeffs_n psi_n at the quadrature nodes (coeff axis last)."""
    return np.einsum("...n,nq->...q", np.asarray(coeffs, float), basis.psi)


def positivity_certificate(basis: BasisSet, coeffs: np.ndarray) -> bool:
    """True iff every component of X^T coeffs is strictly positive.

    True implies sum_n coeffs_n psi_n(alpha) > 0 for all alpha in [0,1]: the
    transformed components are the expansion of the function over the strictly
    positive generators (alpha+a)^{n-1} e^alpha.
    """
    comps = basis.X.T @ np.asarray(coeffs, dtype=float)
    return bool(np.all(comps > 0.0))


def certificate_components(basis: BasisSet, coeffs: np.ndarray) -> np.ndarray:
    """X^T applied along the leading coefficient axis.

    ``coeffs`` has the basis axis first; trailing axes are carried through.
    """
    return np.einsum("nm,n...->m...", basis.X, np.asarray(coeffs, dtype=float))


def dump_basis_csv(basis: BasisSet, directory):
    """Write inspection CSVs: polynomial coefficients and the X, M matrices."""
    import csv
    import os

    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "basis_polynomials.csv"), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["n"] + [f"alpha^{k}" for k in range(basis.N)])
        for n in range(1, basis.N + 1):
            mono = basis.monomial_coeffs(n)
            row = [n] + [repr(float(c)) for c in mono] + ["0.0"] * (basis.N - len(mono))
            wr.writerow(row)
    for name, mat in (("basis_X.csv", basis.X), ("basis_M.csv", basis.M)):
        with open(os.path.join(directory, name), "w", newline="") as f:
            wr = csv.writer(f)
            for row in mat:
                wr.writerow([repr(float(v)) for v in row])
