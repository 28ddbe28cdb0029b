"""Safe MPC with GP-learned dynamics for a two-wheeled stunt maneuver of a skid-steered vehicle."""
from ._accel import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
