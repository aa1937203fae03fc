"""Knee-point detection on noisy curves: synthetic data, classical detectors and a 1-D U-Net."""

__version__ = "0.1.0"
