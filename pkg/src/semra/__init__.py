"""Spatial-EM reconfigurable antenna (SEMRA) multiuser MIMO-OFDM simulator."""

from .scenario import ArrayGeometry, ConfigError, PathSet, SystemConfig, build_geometry, sample_realization

__all__ = ["ArrayGeometry", "ConfigError", "PathSet", "SystemConfig", "build_geometry",
           "sample_realization"]
__version__ = "0.1.0"
