"""Commuting OD matrix generation from regional attributes."""

from .graph import (
    AreaSpatialCharacteristics,
    AttributedGraph,
    InvalidInputError,
    ODMatrix,
    RegionFeatures,
    build_area_graph,
    compute_distance_matrix,
    validate_od_matrix,
)
from .gravity import GravityFitError, GravityParams, gravity_fit, gravity_predict
from .metrics import cpc, evaluate_area, jsd, nrmse, rmse

__version__ = "0.1.0"
