"""Simulated AR-guided robotic ultrasound spine navigation toolkit."""

from .errors import SpineNavError
from .transforms import Frame, RigidTransform, TransformGraph

__version__ = "0.1.0"

__all__ = ["Frame", "RigidTransform", "TransformGraph", "SpineNavError", "__version__"]
