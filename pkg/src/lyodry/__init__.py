"""Secondary-drying simulation, concentration observers, gain design, and control."""

__version__ = "0.1.0"

from .model import (ControlInput, Grid, InvalidParameterError, InvalidStateError,  # noqa: E402
                    ModelParameters, PhysicalRangeWarning, ProductState, ShelfSchedule,
                    averages, build_grid, desorption_rate_constant, rhs, shelf_temperature)
from .simulate import (BOTTOM, FULL, IntegratorSettings, MeasurementSeries,  # noqa: E402
                       NotReachedError, StepFailureError, Trajectory, integrate, run_until_dry,
                       sample_measurements)
from .observer import (BOTTOM_POINT_GAINS, FULL_FIELD_GAINS, EstimateTrajectory,  # noqa: E402
                       GainSchedule, Observer, ObserverGains, estimation_errors, observer_rhs,
                       run_observer)
from .design import (error_dynamics, jacobian, linearize, modal_contributions,  # noqa: E402
                     reference_state, time_constant, design_space_sweep)
from .control import MicrowaveController, ObserverSetup, microwave_power, run_closed_loop  # noqa: E402
from .calibration import Dataset, FitProblem, fit  # noqa: E402
from .scenarios import Scenario, load_scenario  # noqa: E402
