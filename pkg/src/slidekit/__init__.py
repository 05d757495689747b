"""Sliding-paraboloid estimates and pointwise regularity checks on uniform grids."""

from .grid import EmptyRegionError, Grid, GridError, GridFunction, Mask, StencilError
from .operators import EllipticityParams, OperatorSpec, PreconditionError, make_operator
from .paraboloid import ContactSet, Paraboloid, Quadratic, contact_set, jensen_envelope, slide_contact
from .harnack import DerivedConstants, Report, derive_constants
from .flatness import FlatnessConfig, PointClassification, caffarelli_iterate, classify_singular_set
from .experiments import ExperimentConfig, generate, relax_solve, run

__version__ = "0.1.0"

__all__ = [
    "ContactSet",
    "DerivedConstants",
    "EllipticityParams",
    "EmptyRegionError",
    "ExperimentConfig",
    "FlatnessConfig",
    "Grid",
    "GridError",
    "GridFunction",
    "Mask",
    "OperatorSpec",
    "Paraboloid",
    "PointClassification",
    "PreconditionError",
    "Quadratic",
    "Report",
    "StencilError",
    "caffarelli_iterate",
    "classify_singular_set",
    "contact_set",
    "derive_constants",
    "generate",
    "jensen_envelope",
    "make_operator",
    "relax_solve",
    "run",
    "slide_contact",
]
