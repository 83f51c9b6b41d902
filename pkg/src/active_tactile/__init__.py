"""Active tactile perception: a learned differentiable EKF plus an entropy-seeking MPC."""

import jax

# Every computation in this package is float64; gradient checks fail at 32-bit.
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
