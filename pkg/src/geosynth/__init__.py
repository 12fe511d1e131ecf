"""Generalizable novel-view synthesis with cascaded cost-volume geometry priors."""

__version__ = "0.1.0"

from .cameras import CameraModel, Ray
from .pipeline import Model
from .scenes import SceneSpec, ViewRecord

__all__ = ["CameraModel", "Ray", "Model", "SceneSpec", "ViewRecord", "__version__"]
