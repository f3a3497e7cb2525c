"""Ambiguity-based observability and controllability measures for nonlinear systems.

The worst-case estimation error consistent with measured data (or the worst miss of a
reachable target) is posed as an optimal control problem, transcribed on Legendre-Gauss-Lobatto
nodes and solved as a nonlinear program with multiple starts.
"""
from .collocation import CollocationGrid, TimeMap, differentiate, interpolate, lgl_grid, quadrature
from .linear_oracles import (
    LtiSystem,
    ambiguity_from_gramian,
    controllability_gramian,
    min_energy_cost,
    observability_gramian,
    weakest_direction,
    worst_energy_on_ball,
)
from .measures import (
    IllConditionedBasisError,
    MeasureReport,
    MeasureSettings,
    control_ambiguity,
    control_ambiguity_region,
    control_cost,
    detectability_ambiguity,
    gramian_gain,
    least_observable_direction,
    lp_gain,
    observability_ambiguity,
)
from .models import CATALOG, FourierControlSpace, SingularityError, catalog_entry
from .nlp_solver import NlpProblem, NlpResult, SolverOptions, multistart_solve, solve
from .transcription import (
    ConstraintSet,
    DynamicsModel,
    Objective,
    OutputTube,
    Trajectory,
    TrajectoryMetric,
    Transcription,
    simulate,
    total_variation,
)

__version__ = "0.1.0"
