"""
Neumann-Laplace eigenvalue branches of degenerating hyperbolic cusped triangles.
"""

__version__ = "0.1.0"
