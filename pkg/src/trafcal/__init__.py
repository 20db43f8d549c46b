"""Count-based calibration of simulated traffic models.

The package bundles a small mesoscopic queue simulator, a square-region
partition of the road network, the local add/remove calibrator and two
baselines (SPSA and a static route sampler), plus goodness-of-fit metrics.
"""
from .baselines import (RoutePool, SpsaConfig, route_sampler_calibrate, spsa_calibrate,
                        spsa_gradient, spsa_minimize)
from .calibration import (CalibrationConfig, CalibrationHistory, RegionError, calibrate,
                          compute_region_errors, init_random_model, objective)
from .counts import CountSeries, Sensor, TimeInterval, make_schedule
from .metrics import geh, geh_pass_fraction, mae, make_folds, normalized_rmse_series, \
    pareto_bins, rmse
from .network import (Edge, Junction, NoPathError, RoadNetwork, Route, free_flow_weight,
                      load_network, observed_weight, shortest_route)
from .regions import RegionGrid, RegionalRoute, adjacent, partition_grid, region_average_real
from .scenario import ScenarioSpec, generate_scenario, load_counts
from .simulator import (SimulationResult, SimulatorParams, TrafficModel, Vehicle,
                        region_average_simulated, simulate)

__version__ = "0.1.0"
