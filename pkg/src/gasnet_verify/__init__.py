"""Topology verification for gas pipeline networks."""

from .asymptotics import (
    ccrb,
    fisher_information,
    marcum_q,
    marcum_q_inverse,
    noncentrality_lambda,
    predict_pd,
    pseudo_true_params,
    required_observations,
    wald_statistic,
)
from .harness import (
    ExperimentConfig,
    calibrate_threshold,
    reproduce_tables,
    run_monte_carlo,
    setup_case,
)
from .likelihood import Theta, constrained_ml, constraint_f, log_likelihood, standard_glrt
from .network import (
    GasNetwork,
    NetworkError,
    SolverError,
    TopologyState,
    build_incidence,
    load_network,
    physical_topology,
    shipped_networks,
    solve_steady_state,
)
from .placement import PlacementCosts, exhaustive_placement, greedy_placement, placement_rank_condition
from .sdr import build_M, exactness_condition, relaxed_ml
from .sensing import NoiseModel, ObservationSet, SensorPlacement, generate_observations, rsd_to_noise
from .verify import (
    VerificationReport,
    efficient_verify,
    enumerate_topologies,
    fitness_test,
    gradient_guided_search,
    relaxed_glrt,
)

__version__ = "0.1.0"

__all__ = [
    "GasNetwork", "TopologyState", "NetworkError", "SolverError", "load_network",
    "shipped_networks", "build_incidence", "solve_steady_state", "physical_topology",
    "SensorPlacement", "NoiseModel", "ObservationSet", "rsd_to_noise", "generate_observations",
    "Theta", "log_likelihood", "constraint_f", "constrained_ml", "standard_glrt",
    "build_M", "relaxed_ml", "exactness_condition",
    "VerificationReport", "enumerate_topologies", "relaxed_glrt", "fitness_test",
    "gradient_guided_search", "efficient_verify",
    "fisher_information", "ccrb", "pseudo_true_params", "noncentrality_lambda", "marcum_q",
    "marcum_q_inverse", "predict_pd", "required_observations", "wald_statistic",
    "PlacementCosts", "placement_rank_condition", "greedy_placement", "exhaustive_placement",
    "ExperimentConfig", "setup_case", "run_monte_carlo", "calibrate_threshold", "reproduce_tables",
]
