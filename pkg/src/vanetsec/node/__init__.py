"""Vehicle and RSU runtime."""

from .beacon import C_M_PER_MS, BeaconPayload, Plausibility, neighbor_check, position_plausibility
from .geocast import Disc, GeocastMessage, HopSignature, LruCache, Rect, SlidingWindowLimiter
from .leave import mds_leave_round
from .pool import PseudonymPool
from .runtime import CrlView, Decision, NeighborEntry, NeighborTable, Node, NodeParams, Verdict

__all__ = [
    "C_M_PER_MS", "BeaconPayload", "Plausibility", "neighbor_check", "position_plausibility",
    "Disc", "GeocastMessage", "HopSignature", "LruCache", "Rect", "SlidingWindowLimiter",
    "mds_leave_round", "PseudonymPool", "CrlView", "Decision", "NeighborEntry", "NeighborTable",
    "Node", "NodeParams", "Verdict",
]
