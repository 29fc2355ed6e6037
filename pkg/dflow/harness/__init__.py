from .recipes import __all__ as __recipes_all__
from .recipes import *
from .verify import __all__ as __verify_all__
from .verify import *
from .runner import __all__ as __runner_all__
from .runner import *

__all__ = (
    __recipes_all__ +
    __verify_all__ +
    __runner_all__
)
