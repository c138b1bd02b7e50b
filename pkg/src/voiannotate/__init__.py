"""Volume-of-interest annotation for eye tracking in interactive 3D scenes."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    Scene,
    SceneParseError,
    VoiError,
    parse_scene,
)
