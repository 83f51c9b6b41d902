"""Learned world model over the augmented state ``(s_1..s_n, m)``.

The dynamics mean is a GRU taking ``(m_normalised, action)`` as input with ``s``
as its hidden state; the property is carried through unchanged and only
diffuses by the fixed constant ``eps``. Observations depend on ``s`` alone.

Linear stand-ins (:class:`LinearDynamics`, :class:`LinearObservation`,
:class:`ConstantScale`) can replace any network; they exist so the filter can
be checked against closed-form Kalman recursions and are not used in training.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from . import nn_core
from .errors import ConfigurationError, ModelDivergenceError
from .nn_core import GaussianHeadOutput, GruParams, MlpParams

DEFAULT_EPS = 1e-3


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class LinearDynamics:
    """s' = A s + b_m * m_norm + B a + c  (test stub)."""

    A: jax.Array
    b_m: jax.Array
    B: jax.Array
    c: jax.Array


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class LinearObservation:
    """o = C s + c  (test stub)."""

    C: jax.Array
    c: jax.Array


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class ConstantScale:
    """State-independent noise scale (test stub)."""

    sqrt_diag: jax.Array


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class WorldModel:
    f: GruParams | LinearDynamics
    sigma: MlpParams | ConstantScale
    h: MlpParams | LinearObservation
    gamma: MlpParams | ConstantScale
    n: int = field(metadata=dict(static=True))
    a_dim: int = field(metadata=dict(static=True))
    d: int = field(metadata=dict(static=True))
    eps: float = field(default=DEFAULT_EPS, metadata=dict(static=True))
    m_center: float = field(default=0.0, metadata=dict(static=True))
    m_half_range: float = field(default=1.0, metadata=dict(static=True))

    @property
    def dim(self) -> int:
        return self.n + 1


def init_world_model(key, n: int, a_dim: int, d: int, property_range=(-1.0, 1.0),
                     hidden_width: int = 32, depth: int = 5, eps: float = DEFAULT_EPS) -> WorldModel:
    lo, hi = property_range
    if not lo < hi:
        raise ConfigurationError("property range must satisfy low < high")
    kf, ks, kh, kg = jax.random.split(key, 4)
    return WorldModel(
        f=nn_core.init_gru(kf, n, 1 + a_dim),
        sigma=nn_core.init_mlp(ks, n + 1 + a_dim, n, hidden_width, depth),
        h=nn_core.init_mlp(kh, n, d, hidden_width, depth),
        gamma=nn_core.init_mlp(kg, n, d, hidden_width, depth),
        n=n, a_dim=a_dim, d=d, eps=eps,
        m_center=0.5 * (lo + hi), m_half_range=0.5 * (hi - lo),
    )


def linear_stub_model(A, C, Q_sqrt, R_sqrt, B=None, b_m=None, eps: float = DEFAULT_EPS) -> WorldModel:
    """World model with fixed linear maps and constant noise, for oracle tests."""
    A = jnp.asarray(A, jnp.float64)
    C = jnp.asarray(C, jnp.float64)
    n, d = A.shape[0], C.shape[0]
    B = jnp.zeros((n, 2)) if B is None else jnp.asarray(B, jnp.float64)
    b_m = jnp.zeros(n) if b_m is None else jnp.asarray(b_m, jnp.float64)
    return WorldModel(
        f=LinearDynamics(A, b_m, B, jnp.zeros(n)),
        sigma=ConstantScale(jnp.broadcast_to(jnp.asarray(Q_sqrt, jnp.float64), (n,))),
        h=LinearObservation(C, jnp.zeros(d)),
        gamma=ConstantScale(jnp.broadcast_to(jnp.asarray(R_sqrt, jnp.float64), (d,))),
        n=n, a_dim=B.shape[1], d=d, eps=eps,
    )


def with_stubs(model: WorldModel, **parts) -> WorldModel:
    return replace(model, **parts)


# ---------------------------------------------------------------------------
# Augmented state helpers
# ---------------------------------------------------------------------------

def augment(s, m):
    return jnp.concatenate([jnp.asarray(s, jnp.float64), jnp.atleast_1d(jnp.asarray(m, jnp.float64))])


def split_state(aug, n: int):
    return aug[:n], aug[n]


def normalize_property(model: WorldModel, m):
    return (m - model.m_center) / model.m_half_range


def _guard_finite(x, what: str):
    if isinstance(x, jax.core.Tracer):
        return
    if not np.all(np.isfinite(np.asarray(x))):
        raise ModelDivergenceError(f"non-finite {what}")


# ---------------------------------------------------------------------------
# Model components
# ---------------------------------------------------------------------------

def _f(model: WorldModel, s, m_norm, action):
    f = model.f
    if isinstance(f, LinearDynamics):
        return f.A @ s + f.b_m * m_norm + f.B @ action + f.c
    return nn_core.gru_step(f, s, jnp.concatenate([jnp.atleast_1d(m_norm), action]))


def _process_scale(model: WorldModel, s, m_norm, action):
    sig = model.sigma
    if isinstance(sig, ConstantScale):
        return sig.sqrt_diag
    x = jnp.concatenate([s, jnp.atleast_1d(m_norm), action])
    return nn_core.positive_scale(nn_core.mlp_forward(sig, x))


def _h(model: WorldModel, s):
    h = model.h
    if isinstance(h, LinearObservation):
        return h.C @ s + h.c
    return nn_core.mlp_forward(h, s)


def _obs_scale(model: WorldModel, s):
    g = model.gamma
    if isinstance(g, ConstantScale):
        return g.sqrt_diag
    return nn_core.positive_scale(nn_core.mlp_forward(g, s))


def dynamics_mean(model: WorldModel, aug, action):
    s, m = split_state(aug, model.n)
    s_next = _f(model, s, normalize_property(model, m), action)
    return jnp.concatenate([s_next, aug[model.n:]])


def dynamics(model: WorldModel, aug, action):
    """Mean of the next augmented state and its diagonal noise scale (last entry eps)."""
    action = jnp.asarray(action, jnp.float64)
    if action.shape[-1] != model.a_dim:
        raise ConfigurationError(f"action dim {action.shape[-1]} != {model.a_dim}")
    s, m = split_state(aug, model.n)
    m_norm = normalize_property(model, m)
    mean = jnp.concatenate([_f(model, s, m_norm, action), aug[model.n:]])
    sqrt_diag = jnp.concatenate([_process_scale(model, s, m_norm, action), jnp.array([model.eps])])
    _guard_finite(mean, "dynamics mean")
    _guard_finite(sqrt_diag, "process noise")
    return mean, sqrt_diag


def observe_mean(model: WorldModel, aug):
    return _h(model, aug[:model.n])


def observe(model: WorldModel, aug) -> GaussianHeadOutput:
    s = aug[:model.n]
    return GaussianHeadOutput(_h(model, s), _obs_scale(model, s))


def sample_next(model: WorldModel, aug, action, noise):
    mean, sqrt_diag = dynamics(model, aug, action)
    return nn_core.reparam_sample(mean, sqrt_diag, noise)


def sample_observation(model: WorldModel, aug, noise):
    mean, sqrt_diag = observe(model, aug)
    return nn_core.reparam_sample(mean, sqrt_diag, noise)
