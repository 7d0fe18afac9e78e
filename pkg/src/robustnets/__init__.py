"""Certified robust neural networks: recurrent equilibrium networks and Lipschitz-bounded deep networks."""

__version__ = "0.1.0"
