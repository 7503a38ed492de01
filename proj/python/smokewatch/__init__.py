"""Detection geometry, dataset tooling, evaluation metrics and alarm debouncing."""

from ._smokewatch import *  # noqa: F401,F403
from ._smokewatch import __doc__  # noqa: F401
