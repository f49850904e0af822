"""Hardware-aware search for streaming 1-D separable convolution networks."""

from . import data, hwcost, nas, pipesim, quantprofiler, topology, trainer
from .errors import StreamNASError

__version__ = "0.1.0"

__all__ = ["data", "hwcost", "nas", "pipesim", "quantprofiler", "topology", "trainer",
           "StreamNASError", "__version__"]
