"""Reference policies: hand-scripted exploratory procedures and a random walk."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import EnvObservation, Task, TaskSpec

CONTACT_THRESHOLD = 0.5   # N
ALIGN_TOL = 3e-3          # m; position readings carry ~1 mm noise


@dataclass
class ScriptedPolicy:
    """Phase machine per task. Depends only on the observation stream."""

    task: Task
    waypoints: dict = field(default_factory=dict)
    phase: int = 0
    counter: int = 0

    @classmethod
    def for_spec(cls, spec: TaskSpec) -> "ScriptedPolicy":
        wp = {"clip": spec.action_clip,
              "probe_x": spec.box_x + 0.5 * spec.box_width,
              "push_steps": 3,
              "max_backoff": 6,
              "raise_step": 0.02}
        return cls(task=spec.task, waypoints=wp)

    def reset(self, spec, obs, rng):
        self.phase = 0
        self.counter = 0

    def act(self, obs: EnvObservation, t: int) -> np.ndarray:
        return scripted_action(self, obs, t)


def _toward(delta: float, clip: float) -> float:
    return float(np.clip(delta, -clip, clip))


def scripted_action(policy: ScriptedPolicy, obs: EnvObservation, t: int) -> np.ndarray:
    clip = policy.waypoints["clip"]
    force = float(np.linalg.norm(obs.contact_force))
    x, z = obs.ee_pos
    if policy.task is Task.HEIGHT:
        # align above the box, descend until touching, hold
        if policy.phase == 0:
            dx = policy.waypoints["probe_x"] - x
            if abs(dx) > ALIGN_TOL:
                return np.array([_toward(dx, clip), 0.0])
            policy.phase = 1
        if policy.phase == 1:
            if force > CONTACT_THRESHOLD:
                policy.phase = 2
            else:
                return np.array([0.0, -clip])
        return np.zeros(2)
    if policy.task is Task.MASS:
        return np.array([clip, 0.0])
    if policy.task is Task.TOPPLE:
        # tap cycles at increasing heights; stage = phase % 3 so the phase only grows
        stage = policy.phase % 3
        if stage == 0:                            # push until a few contact steps
            if force > CONTACT_THRESHOLD:
                policy.counter += 1
            if policy.counter >= policy.waypoints["push_steps"]:
                policy.phase, policy.counter = policy.phase + 1, 0
            return np.array([clip, 0.0])
        if stage == 1:                            # back off until released
            policy.counter += 1
            if force < CONTACT_THRESHOLD or policy.counter >= policy.waypoints["max_backoff"]:
                policy.phase, policy.counter = policy.phase + 1, 0
            return np.array([-clip, 0.0])
        policy.phase += 1                         # raise, then tap again
        return np.array([0.0, policy.waypoints["raise_step"]])
    # linear diagnostic: move into the informative region and stay
    return np.array([clip, 0.0])


@dataclass
class RandomWalkPolicy:
    """Actions follow a Gaussian random walk (the same law as the MPC candidates), clipped."""

    walk_std: float = 0.10
    clip: float = 0.02
    walk_state: np.ndarray = field(default_factory=lambda: np.zeros(2))
    started: bool = False

    def reset(self, spec, obs, rng):
        self.rng = rng
        self.clip = spec.action_clip
        self.walk_state = np.zeros(2)
        self.started = False

    def act(self, obs, t):
        return random_policy(self.rng, self)


def random_policy(rng: np.random.Generator, walk: RandomWalkPolicy) -> np.ndarray:
    increment = rng.normal(0.0, walk.walk_std, 2)
    walk.walk_state = increment if not walk.started else walk.walk_state + increment
    walk.started = True
    return np.clip(walk.walk_state, -walk.clip, walk.clip)
