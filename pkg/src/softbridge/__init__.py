"""Particle solver for steering SDE path laws through soft marginal constraints.

The package trains a trio of networks (initial adjoint, Brownian coefficient,
running force) so that a controlled Euler rollout matches prescribed marginal
distributions at observed times, together with the transport benchmarks and
metrics used to score it.
"""

__version__ = "0.1.0"
