"""Hierarchical split federated learning simulator.

Submodules: ``nn`` (dense network core), ``split`` (client/server halves),
``ldp`` (Laplace weight perturbation), ``data`` (datasets and non-IID
partitions), ``protocols`` (FL, SFL, HFL, HierSFL), ``simnet`` (simulated
time) and ``harness`` (configuration and experiment runner).
"""

__version__ = "0.1.0"
