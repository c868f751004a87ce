"""Graph contrastive learning with beta-mixture-guided hard negatives."""
from .datasets import generate_sbm
from .estimator import ProGCL
from .graph import Graph, build_graph, load_graph
from .mixture import BetaMixture, GaussianMixture, em_fit_bmm, em_fit_gmm
from .probe import LinearProbe, linear_probe
from .training import TrainConfig, train_inductive, train_transductive

__version__ = "0.1.0"

__all__ = [
    "BetaMixture", "GaussianMixture", "Graph", "LinearProbe", "ProGCL", "TrainConfig",
    "build_graph", "em_fit_bmm", "em_fit_gmm", "generate_sbm", "linear_probe", "load_graph",
    "train_inductive", "train_transductive",
]
