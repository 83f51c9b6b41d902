"""Losses, truncated-BPTT batching, stored-belief replay and the training epoch.

The observation term is a Monte-Carlo Jensen bound on the sequence
log-likelihood: states are sampled from the *predicted* beliefs by
reparameterisation and scored under the learned observation density. The
property term is the negative log-density of the true property under the
posterior property marginal. Both are averaged per timestep (and per sample)
so the weight ``alpha`` does not depend on the window length.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache, partial
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
import optax

from . import ekf, serialization
from .ekf import GaussianBelief
from .errors import ConfigurationError, DatasetError, LossError
from .generative_model import WorldModel, observe

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
EPISODE_FORMAT_VERSION = 1
BELIEFS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    n_samples: int = 4
    seq_len: int = 16
    learning_rate: float = 1e-3
    batch_size: int = 32
    momentum: float = 0.9
    steps_per_epoch: int = 100
    optimizer: str = "sgd"          # "sgd" (with momentum) or "adam"
    grad_clip: float | None = None

    def __post_init__(self):
        if self.n_samples < 1 or self.seq_len < 1 or self.batch_size < 1:
            raise ConfigurationError("n_samples, seq_len and batch_size must be positive")
        if self.alpha < 0 or self.learning_rate < 0:
            raise ConfigurationError("alpha and learning_rate must be nonnegative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Normalizer:
    """Per-dimension z-scoring of raw observations."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "Normalizer":
        return cls(np.zeros(d), np.ones(d))

    @classmethod
    def fit(cls, observations: np.ndarray, floor: float = 1e-3) -> "Normalizer":
        obs = np.asarray(observations, dtype=float).reshape(-1, observations.shape[-1])
        return cls(obs.mean(axis=0), np.maximum(obs.std(axis=0), floor))

    def apply(self, obs):
        return (np.asarray(obs, dtype=float) - self.mean) / self.std


@dataclass
class EpisodeRecord:
    """One episode. ``stored_beliefs[t]`` is the belief held when ``actions[t]`` was chosen."""

    actions: np.ndarray
    observations: np.ndarray
    m_true: float
    stored_beliefs: GaussianBelief | None = None
    epoch_tag: int = 0
    contacts: np.ndarray | None = None
    valid: bool = True
    episode_id: int = 0

    @property
    def T(self) -> int:
        return len(self.actions)


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class Batch:
    init: GaussianBelief
    actions: jax.Array        # (B, L, a)
    observations: jax.Array   # (B, L, d), normalised
    m_true: jax.Array         # (B,)
    t0: jax.Array             # (B,) window starts, bookkeeping only
    episode: jax.Array        # (B,) dataset indices, bookkeeping only


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def gaussian_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return jnp.sum(-0.5 * z * z - jnp.log(sd) - 0.5 * LOG_2PI, axis=-1)


def observation_loglik_per_step(model: WorldModel, beliefs_bar: GaussianBelief, observations, noise):
    """(T,) Monte-Carlo estimate of E_{s ~ predicted belief}[log p(o_t | s)]; noise is (T, N, n)."""
    n = model.n

    def one(mu, cov, o, xi):
        chol = jnp.linalg.cholesky(cov[:n, :n] + 1e-12 * jnp.eye(n))
        s = mu[:n] + xi @ chol.T
        aug = jnp.concatenate([s, jnp.broadcast_to(mu[n:], (s.shape[0], 1))], axis=1)
        mean, sd = jax.vmap(lambda x: observe(model, x))(aug)
        return jnp.mean(gaussian_logpdf(o, mean, sd))

    return jax.vmap(one)(beliefs_bar.mean, beliefs_bar.cov, observations, noise)


def observation_loss(model: WorldModel, beliefs_bar: GaussianBelief, observations, n_samples: int, key):
    """Negated per-step bound; minimising it maximises the log-likelihood lower bound."""
    observations = jnp.asarray(observations, jnp.float64)
    noise = jax.random.normal(key, (observations.shape[0], n_samples, model.n), jnp.float64)
    ll = observation_loglik_per_step(model, beliefs_bar, observations, noise)
    if not isinstance(ll, jax.core.Tracer) and not np.all(np.isfinite(np.asarray(ll))):
        raise LossError("non-finite observation log-density", step=int(np.argmin(np.isfinite(np.asarray(ll)))))
    return -jnp.mean(ll)


def property_loss(beliefs: GaussianBelief, m_true):
    mu, sigma = ekf.property_marginal(beliefs)
    return -jnp.mean(gaussian_logpdf(jnp.atleast_1d(m_true)[..., None], mu[..., None], sigma[..., None]))


def _window_losses(model, init, actions, observations, m_true, key, n_samples):
    bars, posts = ekf._scan_filter(model, init, actions, observations)
    obs_l = observation_loss(model, bars, observations, n_samples, key)
    return obs_l, property_loss(posts, m_true)


def loss_components(model: WorldModel, batch: Batch, config: LossConfig, key):
    keys = jax.random.split(key, batch.m_true.shape[0])
    fn = partial(_window_losses, n_samples=config.n_samples)
    obs_l, prop_l = jax.vmap(fn, in_axes=(None, 0, 0, 0, 0, 0))(
        model, batch.init, batch.actions, batch.observations, batch.m_true, keys)
    return jnp.mean(obs_l), jnp.mean(prop_l)


def total_loss(model: WorldModel, batch: Batch, config: LossConfig, key):
    obs_l, prop_l = loss_components(model, batch, config, key)
    return obs_l + config.alpha * prop_l


# ---------------------------------------------------------------------------
# Batching and replay
# ---------------------------------------------------------------------------

def sample_tbptt_batch(dataset: list[EpisodeRecord], config: LossConfig, rng: np.random.Generator,
                       normalizer: Normalizer | None = None) -> Batch:
    usable = [i for i, r in enumerate(dataset) if r.valid and r.stored_beliefs is not None]
    if not usable:
        raise DatasetError("no episodes with stored beliefs to sample from")
    L = config.seq_len
    eps = rng.choice(np.asarray(usable), size=config.batch_size)
    means, covs, acts, obs, ms, t0s = [], [], [], [], [], []
    for i in eps:
        rec = dataset[i]
        if L > rec.T:
            raise ConfigurationError(f"seq_len {L} exceeds episode length {rec.T}")
        t0 = int(rng.integers(0, rec.T - L + 1))
        means.append(rec.stored_beliefs.mean[t0])
        covs.append(rec.stored_beliefs.cov[t0])
        acts.append(rec.actions[t0:t0 + L])
        o = rec.observations[t0:t0 + L]
        obs.append(normalizer.apply(o) if normalizer is not None else o)
        ms.append(rec.m_true)
        t0s.append(t0)
    return Batch(GaussianBelief(jnp.asarray(np.stack(means)), jnp.asarray(np.stack(covs))),
                 jnp.asarray(np.stack(acts)), jnp.asarray(np.stack(obs)), jnp.asarray(np.array(ms)),
                 jnp.asarray(np.array(t0s)), jnp.asarray(eps))


@jax.jit
def _batched_filter(model, prior, actions, observations):
    run = lambda a, o: ekf._scan_filter(model, prior, a, o)[1]
    return jax.vmap(run)(actions, observations)


def filter_episodes(model: WorldModel, prior: GaussianBelief, records: list[EpisodeRecord],
                    normalizer: Normalizer | None = None) -> list[GaussianBelief | None]:
    """Posterior sequences for each record (None where the filter diverged); no gradients."""
    out: list[GaussianBelief | None] = [None] * len(records)
    by_len: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_len.setdefault(r.T, []).append(i)
    for T, idx in by_len.items():
        acts = np.stack([records[i].actions for i in idx])
        obs = np.stack([records[i].observations for i in idx])
        if normalizer is not None:
            obs = normalizer.apply(obs)
        posts = _batched_filter(model, prior, jnp.asarray(acts), jnp.asarray(obs))
        means, covs = np.asarray(posts.mean), np.asarray(posts.cov)
        ok = np.isfinite(means).all(axis=(1, 2)) & np.isfinite(covs).all(axis=(1, 2, 3))
        for j, i in enumerate(idx):
            out[i] = GaussianBelief(means[j], covs[j]) if ok[j] else None
    return out


def replay_beliefs(dataset: list[EpisodeRecord], model: WorldModel, prior: GaussianBelief,
                   normalizer: Normalizer | None = None) -> list[EpisodeRecord]:
    """Recompute stored beliefs under ``model`` by refiltering every episode from ``prior``.

    Episodes whose filter diverges are flagged invalid until a later replay succeeds.
    """
    posts = filter_episodes(model, prior, dataset, normalizer)
    pm, pc = np.asarray(prior.mean), np.asarray(prior.cov)
    out = []
    for rec, post in zip(dataset, posts):
        if post is None:
            log.warning("filter diverged while replaying episode %d; excluded", rec.episode_id)
            out.append(replace(rec, stored_beliefs=None, valid=False))
            continue
        means = np.concatenate([pm[None], post.mean[:-1]])
        covs = np.concatenate([pc[None], post.cov[:-1]])
        out.append(replace(rec, stored_beliefs=GaussianBelief(means, covs), valid=True))
    return out


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

def make_optimizer(config: LossConfig) -> optax.GradientTransformation:
    """Direction-only transform; the learning rate is applied by the caller so it can change."""
    parts = []
    if config.grad_clip:
        parts.append(optax.clip_by_global_norm(config.grad_clip))
    if config.optimizer == "adam":
        parts.append(optax.scale_by_adam())
    else:
        parts.append(optax.trace(decay=config.momentum))
    return optax.chain(*parts)


@lru_cache(maxsize=None)
def _compiled_step(config: LossConfig):
    opt = make_optimizer(config)

    def loss_fn(model, batch, key):
        obs_l, prop_l = loss_components(model, batch, config, key)
        return obs_l + config.alpha * prop_l, (obs_l, prop_l)

    @jax.jit
    def step(model, opt_state, batch, key, lr):
        (loss, (obs_l, prop_l)), grads = jax.value_and_grad(loss_fn, has_aux=True)(model, batch, key)
        updates, new_state = opt.update(grads, opt_state, model)
        new_model = jax.tree_util.tree_map(lambda p, u: p - lr * u, model, updates)
        return new_model, new_state, loss, obs_l, prop_l, optax.tree.norm(grads)

    return step


def init_optimizer(model: WorldModel, config: LossConfig):
    return make_optimizer(config).init(model)


@dataclass
class EpochMetrics:
    loss: list = field(default_factory=list)
    obs_loss: list = field(default_factory=list)
    prop_loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    final_lr: float = 0.0

    def __len__(self):
        return len(self.loss)

    def mean(self, name: str) -> float:
        vals = [v for v in getattr(self, name) if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")


def train_epoch(dataset: list[EpisodeRecord], model: WorldModel, opt_state, config: LossConfig,
                rng: np.random.Generator, normalizer: Normalizer | None = None, steps: int | None = None):
    """A fixed number of optimiser steps on TBPTT windows.

    A non-finite loss skips that step and halves the learning rate for the rest
    of the epoch. Returns (model, opt_state, metrics).
    """
    if not dataset:
        raise DatasetError("cannot train on an empty dataset")
    steps = config.steps_per_epoch if steps is None else steps
    step_fn = _compiled_step(config)
    lr = config.learning_rate
    metrics = EpochMetrics()
    for i in range(steps):
        batch = sample_tbptt_batch(dataset, config, rng, normalizer)
        key = jax.random.PRNGKey(int(rng.integers(0, 2**31 - 1)))
        new_model, new_state, loss, obs_l, prop_l, gnorm = step_fn(model, opt_state, batch, key, jnp.float64(lr))
        loss, gnorm = float(loss), float(gnorm)
        metrics.loss.append(loss)
        metrics.obs_loss.append(float(obs_l))
        metrics.prop_loss.append(float(prop_l))
        metrics.grad_norm.append(gnorm)
        if not (np.isfinite(loss) and np.isfinite(gnorm)):
            lr *= 0.5
            metrics.skipped.append(i)
            log.warning("non-finite loss at step %d; skipped, learning rate halved to %g", i, lr)
            continue
        model, opt_state = new_model, new_state
    metrics.final_lr = lr
    return model, opt_state, metrics


# ---------------------------------------------------------------------------
# Persistence: one immutable file per episode plus a refreshable beliefs file
# ---------------------------------------------------------------------------

def _episode_path(root: Path, episode_id: int) -> Path:
    return root / f"episode_{episode_id:06d}.bin"


def _beliefs_path(root: Path, episode_id: int) -> Path:
    return root / f"beliefs_{episode_id:06d}.bin"


def save_episode(root, rec: EpisodeRecord) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = _episode_path(root, rec.episode_id)
    if not path.exists():
        arrays = {"actions": rec.actions, "observations": rec.observations}
        if rec.contacts is not None:
            arrays["contacts"] = rec.contacts
        meta = {"m_true": float(rec.m_true), "epoch_tag": int(rec.epoch_tag), "T": rec.T,
                "episode_id": rec.episode_id}
        serialization.write(path, serialization.encode("episode", EPISODE_FORMAT_VERSION, arrays, meta))
    save_beliefs(root, rec)


def save_beliefs(root, rec: EpisodeRecord) -> None:
    path = _beliefs_path(Path(root), rec.episode_id)
    if rec.stored_beliefs is None:
        arrays = {}
    else:
        arrays = {"mean": np.asarray(rec.stored_beliefs.mean), "cov": np.asarray(rec.stored_beliefs.cov)}
    serialization.write(path, serialization.encode("beliefs", BELIEFS_FORMAT_VERSION, arrays,
                                                    {"valid": bool(rec.valid)}))


def load_episode(root, episode_id: int) -> EpisodeRecord:
    root = Path(root)
    header, arrays = serialization.read(_episode_path(root, episode_id), "episode", EPISODE_FORMAT_VERSION)
    meta = header["meta"]
    beliefs, valid = None, True
    bpath = _beliefs_path(root, episode_id)
    if bpath.exists():
        bh, ba = serialization.read(bpath, "beliefs", BELIEFS_FORMAT_VERSION)
        valid = bh["meta"]["valid"]
        if "mean" in ba:
            beliefs = GaussianBelief(ba["mean"], ba["cov"])
    contacts = arrays.get("contacts")
    return EpisodeRecord(arrays["actions"], arrays["observations"], meta["m_true"], beliefs,
                         meta["epoch_tag"], None if contacts is None else contacts.astype(bool),
                         valid, meta["episode_id"])


def save_dataset(root, dataset: list[EpisodeRecord]) -> None:
    for rec in dataset:
        save_episode(root, rec)


def load_dataset(root) -> list[EpisodeRecord]:
    root = Path(root)
    ids = sorted(int(p.stem.split("_")[1]) for p in root.glob("episode_*.bin"))
    return [load_episode(root, i) for i in ids]
