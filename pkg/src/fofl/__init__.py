"""Deterministic federated-learning simulator with fractional-order,
roughness-informed local updates and a physics-consistent BEV energy
data layer.
"""

__version__ = "0.1.0"
