"""Density-based motion planning toolkit.

Propagates state densities of a closed-loop car through the transport
equation, optimizes reference-trajectory parameters against time-indexed
probabilistic occupancy grids, and ships MPC/sampling/search/oracle baselines
with an evaluation harness.
"""

from ._kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
