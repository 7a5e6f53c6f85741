"""Ten-class seed-image CNN in plain numpy."""
from .net import Network, build_brassica_net, build_mini_net
from .tensor import Rng

__all__ = ["Network", "Rng", "build_brassica_net", "build_mini_net"]
__version__ = "0.1.0"
