"""Platoon car-following toolkit.

Learned sign-constrained car-following parameters, rollout prediction,
closed-loop simulation, and stability/safety analysis for vehicle platoons.
"""

__version__ = "0.1.0"
