"""Synchronization of synaptically coupled relaxation neurons.

Finite-epsilon ODE simulation, a singular-limit integrate-and-fire engine and
checkers for the contraction and existence conditions of synchronous spiking.
"""

__version__ = "0.1.0"
