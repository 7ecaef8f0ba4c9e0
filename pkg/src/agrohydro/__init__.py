"""1D agro-hydrological state estimation toolkit.

Richards-equation soil column simulation, EKF-based recursive EM for
joint estimation of heads and additive model mismatch, and
sensitivity-based sensor placement.
"""

from .soil import (
    LOAM,
    ColumnModel,
    IntegrationInstabilityError,
    SinkConfig,
    SoilHydraulicParams,
    capillary_capacity,
    head_from_moisture,
    hydraulic_conductivity,
    moisture_from_head,
    output_jacobian,
    output_map,
    sink_rate,
    state_jacobian,
    step_state,
)
from .estimation import (
    IllConditionedUpdateError,
    NoiseModel,
    RecursiveQLedger,
    StateBelief,
    StepSizeSchedule,
    UnknownInputVector,
    ekf_predict,
    ekf_update,
    evaluate_recursive_q,
    rem_mstep,
    rem_step,
    step_size,
)
from .placement import (
    SensorRanking,
    SensitivityMatrix,
    UnobservableConfigurationError,
    augmented_jacobians,
    rank_by_orthogonal_projection,
    select_sensors,
    sensitivity_matrix,
)
from .scenarios import (
    RunResult,
    ScenarioConfig,
    build_scenario,
    emit_results,
    run_comparison,
    simulate_truth,
)

__version__ = "0.1.0"
