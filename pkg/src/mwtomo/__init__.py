"""2-D TM microwave tomography: forward model, CSI-type criteria and their minimizers."""

from .errors import ConfigError, MwtomoError, NumericalError, ParseError, SolverError, UndefinedWeightError
from .inversion import InversionOptions, InversionState, run_inversion
from .model import ImagingSetup, MeasurementSet, build_grid, build_operators, forward_solve, make_phantom

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ImagingSetup",
    "InversionOptions",
    "InversionState",
    "MeasurementSet",
    "MwtomoError",
    "NumericalError",
    "ParseError",
    "SolverError",
    "UndefinedWeightError",
    "build_grid",
    "build_operators",
    "forward_solve",
    "make_phantom",
    "run_inversion",
]
