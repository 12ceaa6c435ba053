"""Map matching for low-frequency GNSS tracks with multi-source score fusion."""

from .geometry import PlanarProjector, bearing_inclination
from .history import HistoryStore, MatchRecord, Probe, Trajectory
from .matcher import MatcherConfig, MatchSession
from .network import RoadNetwork, load_network, load_network_csv
from .path_search import (CandidateEdge, CandidatePath, EllipseRegion, SubGraph,
                          build_subgraph, candidate_path_budget, ellipse_region,
                          find_candidate_edges, k_shortest_paths)
from .scoring import FusionWeights, ScoreVector, final_score, select_path
from .traffic import SpectralPredictor, StateVector, TrafficConfig, aggregate_interval, \
    predict_naive, train_spectral

__version__ = "0.1.0"

__all__ = [
    "PlanarProjector", "bearing_inclination",
    "HistoryStore", "MatchRecord", "Probe", "Trajectory",
    "MatcherConfig", "MatchSession",
    "RoadNetwork", "load_network", "load_network_csv",
    "CandidateEdge", "CandidatePath", "EllipseRegion", "SubGraph",
    "build_subgraph", "candidate_path_budget", "ellipse_region",
    "find_candidate_edges", "k_shortest_paths",
    "FusionWeights", "ScoreVector", "final_score", "select_path",
    "SpectralPredictor", "StateVector", "TrafficConfig", "aggregate_interval",
    "predict_naive", "train_spectral",
    "__version__",
]
