"""Synthetic phantoms, sweeps, calibration sessions and evaluation."""
