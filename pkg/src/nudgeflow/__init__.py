"""Local-observation nudging data assimilation for 2D incompressible flow.

The package builds nested coarse/fine triangulations of the study domains,
discretizes the Navier-Stokes equations with Taylor-Hood elements and a
semi-implicit step, and feeds coarse velocity observations from a subregion
back into the simulation through an interpolation-based feedback term.
Twin-experiment drivers, synchronization-condition checks and verification
studies live in `scenarios` and `diagnostics`; the command line entry point
is `nudgeflow` (see `cli`).
"""

__version__ = "0.1.0"

from . import assimilation, diagnostics, fem, io, mesh, solver  # noqa: F401
