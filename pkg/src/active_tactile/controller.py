"""Random-shooting MPC in belief space.

Each candidate action sequence is scored by simulating the filter itself:
sample a state from the current belief, roll it forward through the learned
dynamics, generate observations from the learned observation model, and run
the EKF on those synthetic observations. The cost is the summed log standard
deviation of the property marginal. The same noise streams are used for every
candidate so that cost differences come from the actions alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from . import ekf
from .ekf import GaussianBelief
from .generative_model import WorldModel, sample_next, sample_observation

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 10
    n_candidates: int = 64
    walk_std: float = 0.10
    n_belief_samples: int = 4
    action_clip: float = 0.02


def sample_candidates(config: MpcConfig, rng: np.random.Generator, clip: bool = True) -> np.ndarray:
    """(K, H, 2) Gaussian random walks: a_0 ~ N(0, s^2 I), a_{t+1} = a_t + N(0, s^2 I)."""
    K, H = config.n_candidates, config.horizon
    steps = rng.normal(0.0, config.walk_std, size=(K, H, 2))
    walks = np.cumsum(steps, axis=1)
    if clip:
        walks = np.clip(walks, -config.action_clip, config.action_clip)
    return walks


def trajectory_cost(beliefs: GaussianBelief):
    """Sum over steps of log sigma_m (entropy of the Gaussian property marginal up to constants)."""
    _, sigma = ekf.property_marginal(beliefs)
    return jnp.sum(jnp.log(sigma), axis=-1)


def _rollout(model: WorldModel, belief: GaussianBelief, actions, init_noise, step_noise):
    """One simulated belief trajectory; returns the stacked posterior beliefs."""
    dim = model.n + 1
    chol = jnp.linalg.cholesky(belief.cov + 1e-12 * jnp.eye(dim))
    x0 = belief.mean + chol @ init_noise

    def step(carry, inp):
        x, b = carry
        a, noise = inp
        x = sample_next(model, x, a, noise[:dim])
        o = sample_observation(model, x, noise[dim:])
        b = ekf.update(model, ekf.predict(model, b, a), o)
        return (x, b), b

    _, beliefs = jax.lax.scan(step, (x0, belief), (actions, step_noise))
    return beliefs


def simulate_belief_rollout(model: WorldModel, belief: GaussianBelief, actions, rng: np.random.Generator
                            ) -> GaussianBelief:
    actions = jnp.asarray(actions, jnp.float64).reshape(-1, model.a_dim)
    H = actions.shape[0]
    init_noise = rng.standard_normal(model.n + 1)
    step_noise = rng.standard_normal((H, model.n + 1 + model.d))
    return _rollout(model, belief, actions, jnp.asarray(init_noise), jnp.asarray(step_noise))


@jax.jit
def _score(model, belief, candidates, init_noise, step_noise):
    """Costs (K,) averaged over S common noise streams, plus mean sigma paths (K, H)."""
    def one(actions, n0, ns):
        beliefs = _rollout(model, belief, actions, n0, ns)
        _, sig = ekf.property_marginal(beliefs)
        return jnp.sum(jnp.log(sig)), sig

    per_sample = jax.vmap(one, in_axes=(None, 0, 0))
    costs, sigmas = jax.vmap(per_sample, in_axes=(0, None, None))(candidates, init_noise, step_noise)
    costs = jnp.where(jnp.isfinite(costs), costs, jnp.inf)
    return costs.mean(axis=1), sigmas.mean(axis=1)


@dataclass
class MpcDiagnostics:
    costs: np.ndarray
    chosen: int
    sigma_path: np.ndarray
    fallback: bool = False

    def to_dict(self):
        return {"costs": self.costs.tolist(), "chosen": self.chosen,
                "sigma_path": self.sigma_path.tolist(), "fallback": self.fallback}


def select(costs: np.ndarray) -> int | None:
    """argmin with ties resolved to the lowest index; None if every cost is infinite."""
    costs = np.asarray(costs, dtype=float)
    if not np.isfinite(costs).any():
        return None
    return int(np.argmin(np.where(np.isfinite(costs), costs, np.inf)))


def mpc_step(model: WorldModel, belief: GaussianBelief, config: MpcConfig, rng: np.random.Generator,
             candidates: np.ndarray | None = None):
    if candidates is None:
        candidates = sample_candidates(config, rng)
    S, H = config.n_belief_samples, candidates.shape[1]
    init_noise = rng.standard_normal((S, model.n + 1))
    step_noise = rng.standard_normal((S, H, model.n + 1 + model.d))
    costs, sigmas = _score(model, belief, jnp.asarray(candidates), jnp.asarray(init_noise),
                           jnp.asarray(step_noise))
    costs = np.asarray(costs)
    idx = select(costs)
    if idx is None:
        log.warning("every MPC candidate diverged; falling back to the zero action")
        return np.zeros(model.a_dim), MpcDiagnostics(costs, -1, np.full(H, np.nan), fallback=True)
    return np.asarray(candidates[idx, 0]), MpcDiagnostics(costs, idx, np.asarray(sigmas[idx]))


@jax.jit
def _filter_step(model, belief, action, obs):
    return ekf.update(model, ekf.predict(model, belief, action), obs)


@dataclass
class FilterTracker:
    """Live filter fed with normalised observations during an episode."""

    model: WorldModel
    prior: GaussianBelief
    normalizer: object
    beliefs: list = field(default_factory=list)
    diverged: bool = False

    def reset(self):
        self.belief = self.prior
        self.beliefs = []
        self.diverged = False

    def advance(self, action, raw_obs):
        if self.diverged:
            return
        b = _filter_step(self.model, self.belief, jnp.asarray(action, jnp.float64),
                         jnp.asarray(self.normalizer.apply(raw_obs)))
        if not ekf.belief_is_finite(b):
            self.diverged = True
            return
        self.belief = b


class MpcPolicy:
    """Executes the first action of the best candidate, then re-plans from the updated posterior."""

    def __init__(self, model: WorldModel, prior: GaussianBelief, normalizer, config: MpcConfig):
        self.config = config
        self.tracker = FilterTracker(model, prior, normalizer)
        self.diagnostics: list[MpcDiagnostics] = []
        self._last_action = None

    def reset(self, spec, obs, rng):
        self.rng = rng
        self.tracker.reset()
        self.diagnostics = []
        self._last_action = None

    def act(self, obs, t):
        if self._last_action is not None:
            self.tracker.advance(self._last_action, obs.as_vector())
        self.tracker.beliefs.append(self.tracker.belief)
        if self.tracker.diverged:
            action = np.zeros(2)
        else:
            action, diag = mpc_step(self.tracker.model, self.tracker.belief, self.config, self.rng)
            self.diagnostics.append(diag)
        self._last_action = action
        return action
