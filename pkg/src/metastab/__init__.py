"""Resolvent-based metastability diagnostics for finite Markov chains.

The package computes exact potential-theoretic quantities (resolvents,
capacities, mean jump rates, trace generators) by sparse linear algebra,
checks them against exact-jump Monte Carlo, and applies both to the
critical condensing zero-range process.
"""

__version__ = "0.1.0"

from .chain import MarkovChain, ProbMeasure, build_chain, stationary_distribution  # noqa: E402
from .trace import WellPartition  # noqa: E402

__all__ = ["MarkovChain", "ProbMeasure", "build_chain", "stationary_distribution", "WellPartition",
           "__version__"]
