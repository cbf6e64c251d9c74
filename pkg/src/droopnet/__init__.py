"""Synchronization analysis and simulation of droop-controlled inverter microgrids."""

from .analysis import (
    CommGraph,
    DroopParams,
    SharingReport,
    SpectrumVerdict,
    SyncReport,
    check_sync,
    classify_spectrum,
    dapi_equilibrium,
    dapi_spectrum,
    droop_jacobian_spectrum,
    equilibrium_angles,
    is_proportional,
    parallel_condition,
    power_imbalance,
    proportional_params,
    rate_bound,
    robust_condition,
    robust_stress,
    search_equilibrium,
    sharing_check,
    steady_injections,
)
from .dynamics import (
    LoadSchedule,
    SimOptions,
    SimState,
    SyncMeasurement,
    Trajectory,
    measure_sync,
    simulate_dapi,
    simulate_droop,
    simulate_voltage_droop_ext,
)
from .estimators import DAPISimulator, DroopSimulator, SyncAnalyzer
from .exceptions import (
    BalanceError,
    ConvergenceError,
    DomainError,
    DroopNetError,
    InfeasibleError,
    PreconditionError,
    ScenarioError,
    SimulationError,
    StepSizeError,
    StructuralError,
    VoltageCollapseError,
)
from .netgraph import (
    INVERTER,
    LOAD,
    NetworkModel,
    algebraic_connectivity,
    build_incidence,
    laplacian_eigenvalues,
    pinv_laplacian,
    reduced_laplacian,
    solve_tree_flows,
    weighted_laplacian,
)
from .powerflow import LineExtension, active_injections, coupling_weights, injection_jacobian, lossy_injections

__version__ = "0.1.0"
