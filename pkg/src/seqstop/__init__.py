"""Sequential stopping designs for two simulated trials.

Example 1 is a binary-hypothesis trial with Bernoulli outcomes; Example 2 is
an Emax dose-finding trial whose Stop2 payoff comes from a follow-up pivotal
test.  Both are solved by constrained backward induction over gridded
summaries, parametric boundary search, tabular/deep Q-learning and
REINFORCE, with an exact lattice solution for Example 1 as the reference.
"""

from .core import Action, ConfigError, NumericalError, SeedSpec, UsageError
from .example1 import Ex1Config
from .example2 import Ex2Config

__version__ = "0.1.0"

__all__ = ["Action", "ConfigError", "NumericalError", "SeedSpec", "UsageError",
           "Ex1Config", "Ex2Config", "__version__"]
