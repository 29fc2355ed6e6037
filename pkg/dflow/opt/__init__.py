from .objective import __all__ as __objective_all__
from .objective import *
from .lbfgs import __all__ as __lbfgs_all__
from .lbfgs import *

__all__ = (
    __objective_all__ +
    __lbfgs_all__
)
