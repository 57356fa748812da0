"""Regression Monte Carlo for non-stationary optimal multiple switching.

Subpackages:

* ``pathgen``: Euler path engine with bit-reproducible backward replay.
* ``localbasis``: hypercube partitions and truncated local least squares.
* ``switching``: backward induction solver, policies, brute-force oracle.
* ``power``: structural electricity-investment instance.
* ``cli``: configuration-driven experiment runner.
"""

from . import errors, instances, localbasis, pathgen, power, rng, switching

__all__ = ["errors", "instances", "localbasis", "pathgen", "power", "rng", "switching"]
__version__ = "0.1.0"
