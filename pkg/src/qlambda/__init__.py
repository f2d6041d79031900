"""Off-policy corrected Q(lambda): exact operators, online learners and experiments."""
from .mdp import *  # noqa: F401,F403
from .operators import *  # noqa: F401,F403
from .td import *  # noqa: F401,F403

__version__ = "0.1.0"
