"""Simulation of pre-strained multilayer plates in the von Karman regime."""

from .errors import (
    ConfigError,
    InvalidParameterError,
    LineSearchError,
    MeshFormatError,
    NumericalDegeneracyError,
    PlatesError,
    SolverError,
)

__version__ = "0.1.0"
