"""Deep ensembles with post-hoc posterior structure on desk-scale tasks.

Subpackages: nn (networks + training), posteriors (point mass / SWAG /
last-layer Laplace / flow-refined Laplace), ensemble (mixtures, sampling,
stacking), metrics, data (synthetic tasks + OOD), store (persistence),
harness + cli (experiment driver).
"""

__version__ = "0.1.0"
