"""Simulator and diagnostic suite for head-tracked multi-screen stereo displays."""

__version__ = "0.1.0"

from .errors import (AmbiguousBreakError, ConfigurationError, DegenerateFrustumError,
                     NoImageError, UnobservableError)
from .geom import Pose, ScreenPoint, ScreenRect
from .rig import FaultSet, RigConfig, Scene, ScreenFaults, Trajectory, cave, render_frame, simulate
from .calib import DistortionGrid
