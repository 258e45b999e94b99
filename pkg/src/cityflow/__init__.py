"""Grid crowd-flow forecasting: trajectories to flows, a residual
convolutional forecaster, baselines, and an operational pipeline."""

__version__ = "0.1.0"
