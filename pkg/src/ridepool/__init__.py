"""Ride-pool dispatch with neighbour-aware value decomposition.

Pipeline per decision epoch: batch requests, build each vehicle's feasible
request combinations, score them with a learned per-vehicle value function
(optionally blended with cluster neighbours' expected values), pick a joint
assignment with an exact ILP, then advance the fleet.
"""

__version__ = "0.1.0"

from ridepool.road_network import (
    ClusterAssignment,
    RoadNetwork,
    cluster_distance,
    cluster_intersections,
    generate_grid_city,
    largest_scc,
    travel_time,
)
from ridepool.demand import (
    DemandStats,
    EpochBatch,
    Request,
    compute_future_demand,
    epoch_batches,
    ingest_trip_records,
    synthesize_demand,
)
from ridepool.fleet import DelayConstraints, Stop, Vehicle
from ridepool.matching import Assignment, AssignmentInstance, brute_force, solve

__all__ = [
    "Assignment",
    "AssignmentInstance",
    "ClusterAssignment",
    "DelayConstraints",
    "DemandStats",
    "EpochBatch",
    "Request",
    "RoadNetwork",
    "Stop",
    "Vehicle",
    "brute_force",
    "cluster_distance",
    "cluster_intersections",
    "compute_future_demand",
    "epoch_batches",
    "generate_grid_city",
    "ingest_trip_records",
    "largest_scc",
    "solve",
    "synthesize_demand",
    "travel_time",
]
