"""Kyle-type insider trading equilibrium with stochastic noise-trading volatility."""
from kylelab.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
