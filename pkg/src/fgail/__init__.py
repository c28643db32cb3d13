"""f-GAIL: imitation learning with a learned f-divergence.

Modules: ``diffcore`` (reverse-mode autodiff + Adam), ``conjugate`` (the
input-convex conjugate network and zero-gap shift), ``divergence``
(closed-form f-divergences and the variational estimator), ``nets``
(policy / value / reward networks), ``env`` (gridworld, cart-pole),
``trainer`` (Alg. 1, baselines, BC), ``metrics`` (diagnostics) and
``cli``.
"""

from .errors import ConfigurationError, FgailError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "FgailError", "NumericError", "__version__"]
