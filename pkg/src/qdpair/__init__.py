"""Simulation and analysis of time-resolved polarization entanglement from
quantum-dot photon-pair sources."""

__version__ = "0.1.0"
