"""Cluster cumulant expansions on top of belief propagation and its generalizations."""

from .bp import BeliefSet, bethe_log_z, run_ibp
from .cce import (
    CCEResult,
    ClusterPoset,
    RegionCluster,
    build_poset,
    cce_estimate,
    cce_region_estimate,
    close_poset,
    cumulants,
    kappa_numbers,
    partial_log_z,
    region_cluster,
    region_clusters_within,
)
from .clusters import clusters_for_scheme, enumerate_complete_clusters, enumerate_grid_clusters, enumerate_omega_all
from .errors import (
    CapacityError,
    CCEError,
    ConstructionError,
    DomainError,
    NumericalError,
    ParseError,
    PreconditionError,
)
from .exact import brute_force_log_z, exact_log_z, min_fill_order
from .loopseries import enumerate_tls_loops, loop_term, ls_estimate, simple_loops
from .model import Cluster, FactorGraph, build_complete, build_grid, build_random_tree, parse_uai, serialize_uai
from .region import RegionGraph, build_region_graph, gbp_log_z, recipe_region_graph, run_gbp

__version__ = "0.1.0"
