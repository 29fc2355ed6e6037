from .base import __all__ as __base_all__
from .base import *
from .scheduler import __all__ as __scheduler_all__
from .scheduler import *
from .prior import __all__ as __prior_all__
from .prior import *
from .solver import __all__ as __solver_all__
from .solver import *
from .sensitivity import __all__ as __sensitivity_all__
from .sensitivity import *

__all__ = (
    __base_all__ +
    __scheduler_all__ +
    __prior_all__ +
    __solver_all__ +
    __sensitivity_all__
)
