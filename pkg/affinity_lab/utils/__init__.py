from . import config
from . import exceptions
from . import misc
