"""tomoconvex: globally convergent travel-time tomography in a 3D slab.

Synthetic first-arrival data from a line of sources is inverted for the
squared refractive index by minimizing an exponentially weighted, strictly
convex regularized least-squares functional over a convex constraint set,
using gradient projection.  See README.md for the pipeline and CLI.
"""

from .basis import (AlphaQuadrature, BasisSet, build_basis, default_quadrature,
                    gauss_legendre_quadrature, positivity_certificate, project_to_basis)
from .core import (BoundaryData, CoeffField, ConvergenceError, Grid, InfeasibleError,
                   ScalarField3D, dx_central, dy_central, norm_H1h, norm_L2h)

__version__ = "0.1.0"
