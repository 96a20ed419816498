"""Synthetic media: squared refractive index presets and admissibility checks.

Every preset equals 1 in the free-space layer z < A, stays >= m0 = 1, and is
nondecreasing in depth, so the slab data-generation assumptions hold.  The
presets expose analytic values and gradients (geodesic shooting needs a
consistent gradient for tight Hamiltonian conservation) and can be sampled
onto any forward grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import Grid, ScalarField3D

PRESET_NAMES = ("freespace", "ramp", "bump")


@dataclass(frozen=True)
class AnalyticMedium:
    """Squared refractive index m(x, y, z) with an analytic gradient."""

    name: str
    m: Callable
    grad_m: Callable
    m0: float = 1.0

    def sample(self, xs, ys, zs) -> ScalarField3D:
        X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
        return ScalarField3D(self.m(X, Y, Z), xs, ys, zs)


def _smoothstep(t):
    """C^2 ramp: 0 for t <= 0, 1 for t >= 1, 10t^3 - 15t^4 + 6t^5 between."""
    t = np.clip(t, 0.0, 1.0)
    return t ** 3 * (10.0 - 15.0 * t + 6.0 * t * t)


def _dsmoothstep(t):
    inside = (t > 0.0) & (t < 1.0)
    tc = np.clip(t, 0.0, 1.0)
    return np.where(inside, 30.0 * tc ** 2 * (1.0 - tc) ** 2, 0.0)


def make_preset_medium(name: str, A: float, sigma: float,
                       contrast: float = 0.2, width: float = 0.25) -> AnalyticMedium:
    """Named medium on the slab geometry (A, sigma).

    freespace: m = 1 everywhere.
    ramp:      m = 1 + c max(0, z - A); linear depth gradient, laterally flat.
    bump:      m = 1 + c B(x,y) S(z) with a Gaussian lateral bump and a C^2
               nondecreasing depth ramp S vanishing to second order at z = A.
    """
    if name == "freespace":
        return AnalyticMedium(
            "freespace",
            m=lambda x, y, z: np.ones_like(np.asarray(x, dtype=float) + z),
            grad_m=lambda x, y, z: tuple(np.zeros_like(np.asarray(x, dtype=float) + z)
                                         for _ in range(3)),
        )
    if name == "ramp":
        c = contrast

        def m(x, y, z):
            z = np.asarray(z, dtype=float)
            return 1.0 + c * np.maximum(0.0, z - A) + 0.0 * np.asarray(x)

        def grad_m(x, y, z):
            z = np.asarray(z, dtype=float)
            zero = np.zeros_like(z + np.asarray(x, dtype=float))
            return zero, zero, np.where(z > A, c, 0.0) + zero

        return AnalyticMedium("ramp", m, grad_m)
    if name == "bump":
        c, w = contrast, width

        def lateral(x, y):
            return np.exp(-((x - 0.5) ** 2 + (y - 0.5) ** 2) / (2.0 * w * w))

        def m(x, y, z):
            return 1.0 + c * lateral(x, y) * _smoothstep((np.asarray(z, float) - A) / sigma)

        def grad_m(x, y, z):
            B = lateral(x, y)
            t = (np.asarray(z, dtype=float) - A) / sigma
            S = _smoothstep(t)
            dS = _dsmoothstep(t) / sigma
            gx = c * B * (-(x - 0.5) / (w * w)) * S
            gy = c * B * (-(y - 0.5) / (w * w)) * S
            gz = c * B * dS
            return gx, gy, gz

        return AnalyticMedium("bump", m, grad_m)
    raise ValueError(f"unknown preset '{name}'; choose from {PRESET_NAMES}")


def validate_medium_field(m: ScalarField3D, A: float, m0: float = 1.0,
                          tol: float = 1e-9, unit_layer: bool = True):
    """Check the admissibility conditions on a sampled medium.

    m >= m0 everywhere; m constant for z < A (and equal to 1 there when
    ``unit_layer`` is set); m nondecreasing in z.  Raises ValueError on
    violation.
    """
    v = m.values
    if v.min() < m0 - tol:
        raise ValueError(f"medium violates m >= m0 = {m0}: min = {v.min():g}")
    below = m.zs < A - 1e-12
    if np.any(below):
        layer = v[:, :, below]
        if np.ptp(layer) > tol:
            raise ValueError("medium is not constant in the free-space layer z < A")
        if unit_layer and abs(layer.flat[0] - 1.0) > tol:
            raise ValueError(
                f"medium must equal 1 in the free-space layer z < A, got {layer.flat[0]:g}")
    dz = np.diff(m.zs)
    if np.any(np.diff(v, axis=2) < -tol * np.maximum(dz, 1e-30)):
        raise ValueError("medium violates the depth monotonicity m_z >= 0")


def regularity_diagnostic(medium: AnalyticMedium, A: float, sigma: float,
                          n_samples: int = 9, step: float = 1e-4) -> dict:
    """Sample the geodesic-regularity sufficient condition on the slab.

    The condition asks the Hessian of ln n = ln(sqrt(m)) to be positive
    semidefinite.  It is sufficient only; mild violations are harmless.  The
    warning threshold is a focusing heuristic: a region of constant negative
    curvature kappa focuses rays after length ~ pi/sqrt(|kappa|), so we warn
    when min eig < -pi^2 / diam^2 with diam^2 = 2 + (A + sigma)^2.
    """
    xs = np.linspace(0.05, 0.95, n_samples)
    zs = np.linspace(A + 1e-3, A + sigma - 1e-3, n_samples)
    worst = 0.0

    def lnn(x, y, z):
        return 0.5 * np.log(medium.m(x, y, z))

    for x in xs:
        for y in xs:
            for z in zs:
                H = np.zeros((3, 3))
                pt = np.array([x, y, z])
                for i in range(3):
                    for j in range(i, 3):
                        ei = np.eye(3)[i] * step
                        ej = np.eye(3)[j] * step
                        H[i, j] = H[j, i] = (
                            lnn(*(pt + ei + ej)) - lnn(*(pt + ei - ej))
                            - lnn(*(pt - ei + ej)) + lnn(*(pt - ei - ej))
                        ) / (4.0 * step * step)
                worst = min(worst, float(np.linalg.eigvalsh(H)[0]))
    threshold = np.pi ** 2 / (2.0 + (A + sigma) ** 2)
    return {
        "min_eigenvalue": worst,
        "warn_threshold": -threshold,
        "warns": worst < -threshold,
    }
