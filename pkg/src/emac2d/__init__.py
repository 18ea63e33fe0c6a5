"""2D incompressible Navier-Stokes in the EMAC formulation.

Taylor-Hood finite elements with a one-level nonlinear scheme and two
two-level linearized schemes (Stokes and Newton corrections), plus
conservation diagnostics and benchmark drivers.
"""

__version__ = "0.1.0"
