"""Differentiable extended Kalman filter over the augmented state.

Linearisations are obtained by automatic differentiation of the learned means,
so every function here can itself be differentiated w.r.t. model parameters.
Index ``n`` (the last entry) of every belief is the object property.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConfigurationError, FilterDivergenceError
from .generative_model import WorldModel, dynamics, dynamics_mean, observe, observe_mean

VAR_FLOOR = 1e-12
SIGMA_FLOOR = 1e-9
INNOVATION_JITTER = 1e-9


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class GaussianBelief:
    """Mean and covariance over (s, m). Fields may carry a leading time axis."""

    mean: jax.Array
    cov: jax.Array

    def __len__(self):
        if self.mean.ndim < 2:
            raise TypeError("a single belief has no length")
        return self.mean.shape[0]

    def __getitem__(self, i):
        return GaussianBelief(self.mean[i], self.cov[i])

    def to_numpy(self):
        return np.asarray(self.mean), np.asarray(self.cov)


def initial_belief(n: int, property_range, state_var: float = 1.0) -> GaussianBelief:
    """Zero latent mean with unit variance; property moment-matched to the uniform prior."""
    lo, hi = property_range
    mean = jnp.zeros(n + 1).at[n].set(0.5 * (lo + hi))
    var = jnp.full(n + 1, float(state_var)).at[n].set(((hi - lo) / 4.0) ** 2)
    return GaussianBelief(mean, jnp.diag(var))


def _tidy(cov):
    cov = 0.5 * (cov + jnp.swapaxes(cov, -1, -2))
    d = jnp.diagonal(cov)
    return cov + jnp.diag(jnp.maximum(d, VAR_FLOOR) - d)


def predict(model: WorldModel, belief: GaussianBelief, action) -> GaussianBelief:
    action = jnp.asarray(action, jnp.float64)
    F = jax.jacfwd(dynamics_mean, argnums=1)(model, belief.mean, action)
    if not isinstance(F, jax.core.Tracer) and not np.all(np.isfinite(np.asarray(F))):
        raise FilterDivergenceError("dynamics Jacobian is not finite")
    mean, sqrt_diag = dynamics(model, belief.mean, action)
    cov = F @ belief.cov @ F.T + jnp.diag(sqrt_diag ** 2)
    return GaussianBelief(mean, _tidy(cov))


def _innovation_factor(S):
    L = jnp.linalg.cholesky(S)
    L_reg = jnp.linalg.cholesky(S + INNOVATION_JITTER * jnp.eye(S.shape[0]))
    return jnp.where(jnp.all(jnp.isfinite(L)), L, L_reg)


def update(model: WorldModel, belief_bar: GaussianBelief, observation) -> GaussianBelief:
    """EKF measurement step with a Joseph-form covariance update.

    The Joseph form is evaluated as M = P - K(HP), M - (MH^T)K^T + K R K^T so the
    cost stays O(n^2 d) rather than forming I - KH.
    """
    observation = jnp.asarray(observation, jnp.float64)
    mu, P = belief_bar.mean, belief_bar.cov
    H = jax.jacrev(observe_mean, argnums=1)(model, mu)
    pred, r_sqrt = observe(model, mu)
    R = r_sqrt ** 2
    PHt = P @ H.T
    S = H @ PHt + jnp.diag(R)
    S = 0.5 * (S + S.T)
    L = _innovation_factor(S)
    if not isinstance(L, jax.core.Tracer) and not np.all(np.isfinite(np.asarray(L))):
        raise FilterDivergenceError("innovation covariance is not invertible")
    K = jax.scipy.linalg.cho_solve((L, True), PHt.T).T
    mean = mu + K @ (observation - pred)
    M = P - K @ PHt.T
    cov = M - (M @ H.T) @ K.T + (K * R) @ K.T
    return GaussianBelief(mean, _tidy(cov))


def property_marginal(belief: GaussianBelief):
    """(mu_m, sigma_m) of the property; works on stacked beliefs too."""
    mu = belief.mean[..., -1]
    var = belief.cov[..., -1, -1]
    return mu, jnp.maximum(jnp.sqrt(jnp.maximum(var, 0.0)), SIGMA_FLOOR)


def _scan_filter(model, initial, actions, observations):
    def step(b, inp):
        a, o = inp
        b_bar = predict(model, b, a)
        b_post = update(model, b_bar, o)
        return b_post, (b_bar, b_post)

    _, (bars, posts) = jax.lax.scan(step, initial, (actions, observations))
    return bars, posts


_scan_filter_jit = jax.jit(_scan_filter)


def filter_rollout(model: WorldModel, initial: GaussianBelief, actions, observations):
    """Alternate predict/update; returns stacked predicted and posterior beliefs."""
    actions = jnp.asarray(actions, jnp.float64).reshape(-1, model.a_dim)
    observations = jnp.asarray(observations, jnp.float64).reshape(-1, model.d)
    if actions.shape[0] != observations.shape[0]:
        raise ConfigurationError(
            f"{actions.shape[0]} actions but {observations.shape[0]} observations")
    bars, posts = _scan_filter_jit(model, initial, actions, observations)
    if not isinstance(posts.mean, jax.core.Tracer):
        check_finite_sequence(posts)
    return bars, posts


def check_finite_sequence(beliefs: GaussianBelief):
    ok = np.isfinite(np.asarray(beliefs.mean)).all(axis=-1) & \
        np.isfinite(np.asarray(beliefs.cov)).all(axis=(-1, -2))
    if not ok.all():
        raise FilterDivergenceError("filter produced non-finite belief", step=int(np.argmin(ok)))


def belief_is_finite(belief: GaussianBelief) -> bool:
    return bool(np.isfinite(np.asarray(belief.mean)).all() and np.isfinite(np.asarray(belief.cov)).all())
