"""Diffusion adaptation over networks with Gramian-based adaptive combination weights."""

from .combiners import (
    GramianCombinerState,
    DiagonalCombinerState,
    adaptive_weights_full,
    diagonal_update_and_weights,
    gramian_update,
    solve_kkt,
    static_policy,
)
from .diffusion import (
    NetworkState,
    PolicySpec,
    adapt_step,
    combine_step,
    network_sd,
    run_replication,
    simulate,
)
from .model import (
    GroundTruth,
    LogisticNodeModel,
    NodeStatistics,
    QuadraticNodeModel,
    calibrate_common_minimizer,
    estimate_node_statistics,
    expected_gradient,
    sample_datum,
    stochastic_gradient,
)
from .network import Topology, generate_topology, is_strongly_connected, restrict
from .theory import a_infinity, msd_low_rank, perron_vector, q_infinity

__version__ = "0.1.0"
