"""nhvol: invariant-volume auditing for nonholonomic mechanical systems."""

__version__ = "0.1.0"

from .expr import Domain, Expr, is_zero, parse  # noqa: F401
from .forms import KForm, VectorField  # noqa: F401
from .nonhol import NonholonomicSystem  # noqa: F401
