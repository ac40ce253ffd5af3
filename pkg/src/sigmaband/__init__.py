"""Generating functions of complex-deformed random band matrices.

Three independent evaluations of the determinant-ratio generating function
are cross-checked: direct matrix Monte Carlo (:mod:`sigmaband.ensemble`), the
supersymmetric sigma-model integral (:mod:`sigmaband.sigma_model`, built on the
Grassmann engine in :mod:`sigmaband.superalgebra`) and the transfer-operator
representation (:mod:`sigmaband.transfer`).  :mod:`sigmaband.cli` ties them
together.
"""

__version__ = "0.1.0"

from . import ensemble, sigma_model, superalgebra, transfer  # noqa: E402

__all__ = ["ensemble", "sigma_model", "superalgebra", "transfer", "__version__"]
