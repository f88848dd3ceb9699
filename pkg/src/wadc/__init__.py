"""Wide-area damping control of a symmetric two-machine grid:
small-signal modeling, delay-aware sampled gain design, and evaluation."""

__version__ = "0.1.0"

from . import config, dncs, grid_model, sampled, sim_eval, synthesis
from .errors import WadcError

__all__ = ["config", "dncs", "grid_model", "sampled", "sim_eval",
           "synthesis", "WadcError", "__version__"]
