"""Map-free visual localization of posed query sequences against posed reference images."""

__version__ = "0.1.0"

from .geometry import CameraIntrinsics, Pose, Quaternion

__all__ = ["CameraIntrinsics", "Pose", "Quaternion", "__version__"]
