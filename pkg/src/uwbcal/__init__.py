"""UWB anchor calibration and robot localization with factor-graph optimization."""

__version__ = "0.1.0"
