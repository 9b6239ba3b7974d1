"""Exit-rate toolkit for noise-perturbed linear multi-channel systems.

Four mutually cross-checking routes to the asymptotic exit rate from a
bounded domain (Monte Carlo exit times, principal Dirichlet eigenvalue,
confined-path action minimization, and the closed-form hovering oracle),
plus invariance kernels of the deterministic closed loop and best-response
solving of the n-player exit-rate game.
"""

from .model import (
    Ball,
    Box,
    ConfigError,
    DomainSpec,
    FeedbackProfile,
    ModelError,
    MultiChannelSystem,
    ProblemConfig,
    SystemReport,
    domain_contains,
    domain_perturb,
    load_config,
    parse_config,
    validate_system,
)
from .dynamics import (
    DynamicsError,
    Trajectory,
    closed_loop_matrix,
    deterministic_exit_time,
    flow,
)
from .mc import (
    ExitRateEstimate,
    ExitSample,
    MeanExitEstimate,
    SimulationError,
    SurvivalEstimate,
    TubeEstimate,
    exit_rate_mc,
    mean_exit_time,
    sample_exit,
    simulate_sde,
    survival_probability,
    tube_probability,
)
from .action import (
    ActionError,
    DiscretePath,
    MinimizeResult,
    OptimOptions,
    RateEstimate,
    action_gradient,
    action_value,
    hovering_rate_oracle,
    minimize_action,
    rate,
    rate_domain_sensitivity,
)
from .generator import (
    AsymptoticsResult,
    DiscreteOperator,
    GeneratorError,
    GridField,
    GridPolicy,
    GridSpec,
    discretize_generator,
    eigenvalue_asymptotics,
    principal_eigenvalue,
)
from .invariant import (
    InvariantError,
    KernelField,
    equilibrium_in_domain,
    invariance_kernel,
    kernel_is_empty,
    kernel_subset,
)
from .game import (
    BestResponseResult,
    GameConfig,
    GameError,
    GameResult,
    best_response,
    ekeland_gap,
    nash_iterate,
    nash_residual,
    player_rate,
)

__version__ = "0.1.0"
