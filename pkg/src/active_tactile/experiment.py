"""The collect / train / replay loop, evaluation, checkpoints and metric export.

Layout of a run directory::

    config.json          echo of the resolved configuration
    dataset/             append-only episode files plus refreshable belief files
    checkpoint.bin       latest good training state
    metrics.csv          one row per evaluation
    epochs.jsonl         per-epoch training summaries
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import jax
import numpy as np

from . import baselines, ekf, envs, nn_core, serialization, training
from .controller import MpcConfig, MpcPolicy
from .ekf import GaussianBelief
from .errors import ConfigurationError, FilterDivergenceError, ModelDivergenceError, SerializationError
from .generative_model import WorldModel, init_world_model
from .training import EpisodeRecord, LossConfig, Normalizer

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
METRIC_COLUMNS = ("env_steps", "eval_mae", "train_loss_obs", "train_loss_prop", "mean_final_sigma_m",
                  "contact_rate")


@dataclass
class ExperimentConfig:
    seed: int
    task: str = "linear"
    task_overrides: dict = field(default_factory=dict)
    latent_dim: int = 32
    hidden_width: int = 32
    depth: int = 5
    loss: LossConfig = field(default_factory=LossConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    epochs: int = 50
    episodes_per_epoch: int = 10
    initial_episodes: int | None = None     # random-policy episodes before the first epoch
    eval_every_env_steps: int = 1000
    eval_episodes: int = 10
    output_dir: str = "runs/default"
    normalizer: str = "epoch"               # "epoch": refit every epoch; "initial": fit once on bootstrap data

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.mpc, dict):
            self.mpc = MpcConfig(**self.mpc)
        if self.epochs < 0 or self.episodes_per_epoch < 1 or self.eval_episodes < 1:
            raise ConfigurationError("epochs must be >= 0; episode counts must be positive")
        if self.normalizer not in ("epoch", "initial"):
            raise ConfigurationError(f"unknown normalizer mode {self.normalizer!r}")
        if self.eval_every_env_steps < 1:
            raise ConfigurationError("eval_every_env_steps must be positive")
        self.task_spec()  # validate early

    def task_spec(self) -> envs.TaskSpec:
        overrides = dict(self.task_overrides)
        for k in ("property_range", "workspace", "home"):
            if k in overrides:
                overrides[k] = tuple(overrides[k])
        return envs.task_spec(self.task, **overrides)

    def mpc_config(self) -> MpcConfig:
        return dataclasses.replace(self.mpc, action_clip=self.task_spec().action_clip)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if "seed" not in data:
            raise ConfigurationError("config must specify a seed")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except ConfigurationError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def apply_overrides(data: dict, pairs: list[str]) -> dict:
    """``key=value`` or ``section.key=value`` overrides; values parsed as JSON when possible."""
    data = json.loads(json.dumps(data))
    for pair in pairs:
        if "=" not in pair:
            raise ConfigurationError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = data
        *path, last = key.split(".")
        for p in path:
            target = target.setdefault(p, {})
        target[last] = value
    return data


# ---------------------------------------------------------------------------
# Run state
# ---------------------------------------------------------------------------

@dataclass
class RunState:
    model: WorldModel
    opt_state: object
    normalizer: Normalizer
    dataset: list[EpisodeRecord]
    rngs: dict[str, np.random.Generator]
    epoch: int = 0
    env_steps: int = 0
    next_eval: int = 0
    metrics: list[dict] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)


def make_prior(config: ExperimentConfig) -> GaussianBelief:
    return ekf.initial_belief(config.latent_dim, config.task_spec().property_range)


def _spawn_rngs(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "collect", "train", "eval")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def _fresh_model(config: ExperimentConfig, rng: np.random.Generator) -> WorldModel:
    spec = config.task_spec()
    key = jax.random.PRNGKey(int(rng.integers(0, 2**31 - 1)))
    return init_world_model(key, config.latent_dim, spec.action_dim, spec.obs_dim, spec.property_range,
                            config.hidden_width, config.depth)


# ---------------------------------------------------------------------------
# Collection and evaluation
# ---------------------------------------------------------------------------

def make_policy(name: str, spec: envs.TaskSpec, model: WorldModel | None = None,
                prior: GaussianBelief | None = None, normalizer: Normalizer | None = None,
                mpc: MpcConfig | None = None):
    if name == "random":
        return baselines.RandomWalkPolicy(walk_std=(mpc or MpcConfig()).walk_std, clip=spec.action_clip)
    if name == "scripted":
        return baselines.ScriptedPolicy.for_spec(spec)
    if name == "mpc":
        if model is None:
            raise ConfigurationError("the MPC policy needs a model")
        mpc = dataclasses.replace(mpc or MpcConfig(), action_clip=spec.action_clip)
        return MpcPolicy(model, prior, normalizer, mpc)
    raise ConfigurationError(f"unknown policy {name!r}; expected scripted, random or mpc")


def collect(spec: envs.TaskSpec, policy, n_episodes: int, rng: np.random.Generator, epoch: int,
            first_id: int) -> list[EpisodeRecord]:
    out = []
    for i in range(n_episodes):
        traj = envs.episode(spec, policy, rng)
        out.append(EpisodeRecord(traj.actions, traj.observations, traj.m_true, None, epoch,
                                 traj.contacts, True, first_id + i))
    return out


@dataclass
class EvalResult:
    mae: float
    errors: np.ndarray
    estimates: np.ndarray
    m_true: np.ndarray
    final_sigma: np.ndarray
    contact_rate: float
    flagged: list[int]
    trajectories: list = field(default_factory=list)
    sigma_paths: list = field(default_factory=list)


def filter_estimator(model: WorldModel, prior: GaussianBelief, normalizer: Normalizer):
    """Returns estimator(traj) -> (mu_T, sigma_T, sigma path) via an offline filter pass, or None on divergence."""
    def estimate(traj):
        obs = normalizer.apply(traj.observations)
        try:
            _, posts = ekf.filter_rollout(model, prior, traj.actions, obs)
        except FilterDivergenceError:
            return None
        mu, sig = ekf.property_marginal(posts)
        return float(mu[-1]), float(sig[-1]), np.asarray(sig)
    return estimate


def evaluate(model: WorldModel | None, policy, spec: envs.TaskSpec, n_episodes: int, rng: np.random.Generator,
             prior: GaussianBelief | None = None, normalizer: Normalizer | None = None,
             estimator: Callable | None = None, keep: bool = False) -> EvalResult:
    """MAE of the final-step property estimate over ``n_episodes`` fresh episodes.

    An episode whose filter diverges is scored with the prior-mean error and flagged.
    """
    if estimator is None:
        if model is None:
            raise ConfigurationError("evaluate needs a model or an estimator")
        estimator = filter_estimator(model, prior, normalizer or Normalizer.identity(spec.obs_dim))
    prior_mean = 0.5 * sum(spec.property_range)
    errors, estimates, truths, sigmas, rates, flagged, trajs, paths = [], [], [], [], [], [], [], []
    for i in range(n_episodes):
        traj = envs.episode(spec, policy, rng, keep_states=keep)
        est = estimator(traj)
        if est is None:
            log.warning("filter diverged in evaluation episode %d; scored with the prior mean", i)
            flagged.append(i)
            est = (prior_mean, float("nan"), None)
        mu, sig, path = est if isinstance(est, tuple) else (float(est), float("nan"), None)
        errors.append(abs(mu - traj.m_true))
        estimates.append(mu)
        truths.append(traj.m_true)
        sigmas.append(sig)
        rates.append(traj.contact_rate)
        if keep:
            trajs.append(traj)
            paths.append(path)
    errors = np.array(errors)
    return EvalResult(float(errors.mean()), errors, np.array(estimates), np.array(truths), np.array(sigmas),
                      float(np.mean(rates)), flagged, trajs, paths)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _rng_state(g: np.random.Generator) -> dict:
    return g.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    g = np.random.default_rng()
    g.bit_generator.state = state
    return g


def encode_checkpoint(state: RunState, config: ExperimentConfig) -> bytes:
    arrays = {f"model/{k}": v for k, v in nn_core.named_leaves(state.model).items()}
    arrays.update({f"opt/{k}": v for k, v in nn_core.named_leaves(state.opt_state).items()})
    arrays["norm/mean"] = state.normalizer.mean
    arrays["norm/std"] = state.normalizer.std
    meta = {"config": config.to_dict(), "epoch": state.epoch, "env_steps": state.env_steps,
            "next_eval": state.next_eval, "metrics": state.metrics, "epoch_log": state.epoch_log,
            "n_episodes": len(state.dataset),
            "rngs": {k: _rng_state(g) for k, g in state.rngs.items()}}
    return serialization.encode("checkpoint", CHECKPOINT_FORMAT_VERSION, arrays, meta)


def save_checkpoint(path, state: RunState, config: ExperimentConfig) -> None:
    serialization.write(path, encode_checkpoint(state, config))


def load_checkpoint(path, config: ExperimentConfig | None = None, dataset_dir=None) -> tuple[RunState, ExperimentConfig]:
    """Everything is decoded and validated before any state object is built."""
    header, arrays = serialization.read(path, "checkpoint", CHECKPOINT_FORMAT_VERSION)
    meta = header["meta"]
    config = config or ExperimentConfig.from_dict(meta["config"])
    template = _fresh_model(config, np.random.default_rng(0))
    model = nn_core.restore_leaves(template, {k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
    opt_template = training.init_optimizer(template, config.loss)
    opt_state = nn_core.restore_leaves(opt_template, {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")})
    normalizer = Normalizer(arrays["norm/mean"], arrays["norm/std"])
    dataset = []
    if dataset_dir is not None and Path(dataset_dir).exists():
        dataset = training.load_dataset(dataset_dir)[:meta["n_episodes"]]
        if len(dataset) != meta["n_episodes"]:
            raise SerializationError(f"checkpoint expects {meta['n_episodes']} episodes, found {len(dataset)}")
    rngs = {k: _restore_rng(v) for k, v in meta["rngs"].items()}
    state = RunState(model, opt_state, normalizer, dataset, rngs, meta["epoch"], meta["env_steps"],
                     meta["next_eval"], meta["metrics"], meta["epoch_log"])
    return state, config


# ---------------------------------------------------------------------------
# Metrics export
# ---------------------------------------------------------------------------

def export_metrics(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([repr(int(r["env_steps"]))] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])
    return path


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{c: (int(r[c]) if c == "env_steps" else float(r[c])) for c in METRIC_COLUMNS} for r in rows]


def export_trajectory(traj: envs.Trajectory, path, sigma_path=None, estimate=None) -> Path:
    data = {"m_true": float(traj.m_true), "actions": traj.actions.tolist(),
            "observations": traj.observations.tolist(), "contacts": traj.contacts.astype(int).tolist(),
            "contact_rate": traj.contact_rate}
    if sigma_path is not None:
        data["sigma_m"] = np.asarray(sigma_path).tolist()
    if estimate is not None:
        data["estimate"] = float(estimate)
    if traj.states:
        data["ee_pos"] = [np.asarray(s.ee_pos).tolist() for s in traj.states]
        data["object_pose"] = [np.asarray(s.object_pose).tolist() for s in traj.states]
    path = Path(path)
    path.write_text(json.dumps(data, indent=1))
    return path


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _model_finite(model) -> bool:
    return all(np.all(np.isfinite(np.asarray(x))) for x in jax.tree_util.tree_leaves(model))


def _prepare_output(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigurationError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _evaluate_state(state: RunState, config: ExperimentConfig, prior) -> EvalResult:
    spec = config.task_spec()
    policy = make_policy("mpc", spec, state.model, prior, state.normalizer, config.mpc_config())
    return evaluate(state.model, policy, spec, config.eval_episodes, state.rngs["eval"], prior, state.normalizer)


def run_epoch(state: RunState, config: ExperimentConfig, prior, out: Path | None = None) -> RunState:
    """Collect (MPC after the first epoch), refit statistics, replay, train, replay, maybe evaluate."""
    spec = config.task_spec()
    epoch = state.epoch + 1
    if epoch > 1:
        policy = make_policy("mpc", spec, state.model, prior, state.normalizer, config.mpc_config())
        new = collect(spec, policy, config.episodes_per_epoch, state.rngs["collect"], epoch - 1,
                      len(state.dataset))
        state.dataset.extend(new)
        state.env_steps += sum(r.T for r in new)
    if config.normalizer == "epoch":
        state.normalizer = Normalizer.fit(np.stack([r.observations for r in state.dataset]))
    state.dataset = training.replay_beliefs(state.dataset, state.model, prior, state.normalizer)
    model, opt_state, m = training.train_epoch(state.dataset, state.model, state.opt_state, config.loss,
                                               state.rngs["train"], state.normalizer)
    if not _model_finite(model):
        raise ModelDivergenceError(f"parameters became non-finite in epoch {epoch}")
    state.model, state.opt_state = model, opt_state
    state.dataset = training.replay_beliefs(state.dataset, state.model, prior, state.normalizer)
    if not any(r.valid for r in state.dataset):
        raise ModelDivergenceError(f"filter diverged on every episode after epoch {epoch}")
    state.epoch = epoch
    summary = {"epoch": epoch, "env_steps": state.env_steps, "loss": m.mean("loss"),
               "obs_loss": m.mean("obs_loss"), "prop_loss": m.mean("prop_loss"),
               "grad_norm": m.mean("grad_norm"), "skipped": len(m.skipped), "final_lr": m.final_lr,
               "invalid_episodes": sum(not r.valid for r in state.dataset)}
    state.epoch_log.append(summary)
    if state.env_steps >= state.next_eval or epoch == config.epochs:
        res = _evaluate_state(state, config, prior)
        finite_sig = res.final_sigma[np.isfinite(res.final_sigma)]
        state.metrics.append({"env_steps": state.env_steps, "eval_mae": res.mae,
                              "train_loss_obs": summary["obs_loss"], "train_loss_prop": summary["prop_loss"],
                              "mean_final_sigma_m": float(finite_sig.mean()) if finite_sig.size else float("nan"),
                              "contact_rate": res.contact_rate})
        while state.next_eval <= state.env_steps:
            state.next_eval += config.eval_every_env_steps
    log.info("epoch %d: %s", epoch, summary)
    return state


def initial_state(config: ExperimentConfig) -> RunState:
    spec = config.task_spec()
    rngs = _spawn_rngs(config.seed)
    model = _fresh_model(config, rngs["init"])
    n0 = config.initial_episodes or config.episodes_per_epoch
    policy = make_policy("random", spec, mpc=config.mpc_config())
    dataset = collect(spec, policy, n0, rngs["collect"], 0, 0)
    normalizer = Normalizer.fit(np.stack([r.observations for r in dataset]))
    env_steps = sum(r.T for r in dataset)
    return RunState(model, training.init_optimizer(model, config.loss), normalizer, dataset, rngs, 0,
                    env_steps, config.eval_every_env_steps)


def _persist(state: RunState, config: ExperimentConfig, out: Path) -> None:
    training.save_dataset(out / "dataset", state.dataset)
    save_checkpoint(out / "checkpoint.bin", state, config)
    export_metrics(state.metrics, out / "metrics.csv")
    with open(out / "epochs.jsonl", "w") as fh:
        for row in state.epoch_log:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def run_training(config: ExperimentConfig, resume: bool = False, persist: bool = True,
                 stop_after: int | None = None) -> RunState:
    """Run (or resume) the experiment; ``stop_after`` ends early after that many epochs in total."""
    out = _prepare_output(config) if persist else None
    prior = make_prior(config)
    ckpt = out / "checkpoint.bin" if out is not None else None
    if resume and ckpt is not None and ckpt.exists():
        state, _ = load_checkpoint(ckpt, config, out / "dataset")
        state.dataset = training.replay_beliefs(state.dataset, state.model, prior, state.normalizer)
        log.info("resumed from epoch %d", state.epoch)
    else:
        state = initial_state(config)
        if out is not None:
            (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
            _persist(state, config, out)
    last = config.epochs if stop_after is None else min(stop_after, config.epochs)
    failures = 0
    while state.epoch < last:
        try:
            state = run_epoch(state, config, prior, out)
            failures = 0
        except (ModelDivergenceError, FilterDivergenceError) as exc:
            failures += 1
            if ckpt is None or not ckpt.exists() or failures > 1:
                raise ModelDivergenceError(f"divergence and rollback failed: {exc}") from exc
            log.warning("%s; rolling back to the last checkpoint", exc)
            state, _ = load_checkpoint(ckpt, config, out / "dataset")
            state.dataset = training.replay_beliefs(state.dataset, state.model, prior, state.normalizer)
            continue
        if out is not None:
            _persist(state, config, out)
    return state
