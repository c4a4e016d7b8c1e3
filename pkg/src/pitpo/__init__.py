"""pitpo: symbolic regression with token-level policy regularization.

Equation skeletons are sampled from a policy over a closed DSL, their
coefficients fitted to data, and redundant terms detected through a Gram
matrix analysis that turns into token-granular penalties inside a clipped,
KL-regularized policy update.
"""

__version__ = "0.1.0"

PROTOCOL_VERSION = "pitpo/1"
