"""Stochastic geographic gradient fusion for zone-based federated learning.

The package is organised by pipeline stage:

- :mod:`sgfusion.label_stats`  label histograms, Laplace DP, zone distance graph
- :mod:`sgfusion.dendrogram`   dendrogram state and Metropolis optimisation
- :mod:`sgfusion.zone_sampler` per-zone probabilistic dendrograms and sampling
- :mod:`sgfusion.fusion`       attention coefficients and the fused update
- :mod:`sgfusion.sim`          synthetic zones, objectives, training algorithms
- :mod:`sgfusion.analysis`     convergence bound, homophily, zone comparisons
- :mod:`sgfusion.cli`          experiment runner
"""

from sgfusion.errors import (
    ConfigError,
    DependencyError,
    DomainError,
    LabelRangeError,
    NumericError,
    SchemaError,
    SgfusionError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DependencyError",
    "DomainError",
    "LabelRangeError",
    "NumericError",
    "SchemaError",
    "SgfusionError",
    "__version__",
]
