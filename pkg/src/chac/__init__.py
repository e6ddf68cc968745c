"""Structure-preserving finite elements for a Cahn-Hilliard/Allen-Cahn system with cross-kinetic mobility."""

__version__ = "0.1.0"
