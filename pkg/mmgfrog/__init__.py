"""Simulation and retrieval of OPA-FROG spectrograms of multimode squeezed states."""
