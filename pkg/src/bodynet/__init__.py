"""Multi-device inertial pedestrian localization with global/local feature fusion."""

__version__ = "0.1.0"
