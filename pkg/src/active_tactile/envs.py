"""Planar quasi-static manipulation tasks with a point end-effector.

Coordinates are (x, z) in metres with the table at z = 0. The end-effector
follows an impedance setpoint that accumulates the delta commands; each
control step is resolved to its quasi-static equilibrium between the
impedance spring and penalty contact springs. The observation is the planar
end-effector position plus the contact force the environment applies to it.

Tasks:

* ``mass``    -- a box slides under Coulomb friction once pushed hard enough;
* ``height``  -- a fixed box of unknown height, probed from above;
* ``topple``  -- a tall box that pivots when pushed above its critical height;
* ``linear``  -- a diagnostic linear system whose hidden scalar is only
  observed once ``x > 0.5``.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from .errors import ConfigurationError

log = logging.getLogger(__name__)

GRAVITY = 9.81
FRICTION = 0.5
CONTACT_STIFFNESS = 500.0
IMPEDANCE_STIFFNESS = 100.0
SLIDE_DAMPING = 0.2          # N s / m, motion-proportional part of the sliding reaction
MAX_LEAD = 0.15              # max setpoint distance from the end-effector (m)
DT = 0.05
POS_NOISE = 1e-3
FORCE_NOISE = 0.1
TOPPLE_ANGLE = 0.35          # rad; beyond this the box falls over
LINEAR_CONTACT_X = 0.5


class Task(str, enum.Enum):
    MASS = "mass"
    HEIGHT = "height"
    TOPPLE = "topple"
    LINEAR = "linear"


@dataclass(frozen=True)
class TaskSpec:
    task: Task
    property_range: tuple[float, float]
    episode_len: int = 100
    action_clip: float = 0.02
    workspace: tuple[float, float, float, float] = (-0.3, 0.7, 0.0, 0.35)   # xmin xmax zmin zmax
    home: tuple[float, float] = (0.0, 0.025)
    box_x: float = 0.10                     # left face at reset
    box_width: float = 0.10
    box_height: float = 0.05
    box_mass: float = 1.0
    sensor_noise: bool = True

    def __post_init__(self):
        lo, hi = self.property_range
        if not lo < hi:
            raise ConfigurationError("property_range must satisfy low < high")
        if self.episode_len <= 0 or self.action_clip <= 0:
            raise ConfigurationError("episode_len and action_clip must be positive")

    @property
    def obs_dim(self) -> int:
        return 4

    @property
    def action_dim(self) -> int:
        return 2


def task_spec(name: str | Task, **overrides) -> TaskSpec:
    task = Task(name)
    defaults = {
        Task.MASS: dict(property_range=(1.0, 2.0), action_clip=0.02, home=(0.0, 0.025),
                        workspace=(-0.3, 0.7, 0.0, 0.35), box_x=0.10, box_width=0.10, box_height=0.05),
        Task.HEIGHT: dict(property_range=(0.01, 0.15), action_clip=0.01, home=(0.05, 0.17),
                          workspace=(-0.1, 0.3, 0.0, 0.25), box_x=0.10, box_width=0.10),
        Task.TOPPLE: dict(property_range=(0.05, 0.20), action_clip=0.02, home=(0.0, 0.03),
                          workspace=(-0.3, 0.5, 0.0, 0.3), box_x=0.10, box_width=0.06, box_height=0.25),
        Task.LINEAR: dict(property_range=(-1.0, 1.0), action_clip=0.25, home=(0.0, 0.0),
                          workspace=(-1.0, 1.0, -1.0, 1.0)),
    }[task]
    defaults.update(overrides)
    return TaskSpec(task=task, **defaults)


@dataclass(frozen=True)
class EnvObservation:
    ee_pos: np.ndarray
    contact_force: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.ee_pos, self.contact_force])


@dataclass(frozen=True)
class EnvState:
    ee_pos: np.ndarray
    object_pose: np.ndarray      # (x of left face at the base, z, theta)
    m_hidden: float
    contact: bool
    t: int
    setpoint: np.ndarray = field(default_factory=lambda: np.zeros(2))
    force: np.ndarray = field(default_factory=lambda: np.zeros(2))


def _observe(spec: TaskSpec, state: EnvState, rng) -> EnvObservation:
    pos = state.ee_pos.copy()
    force = state.force.copy() if state.contact else np.zeros(2)
    if spec.sensor_noise:
        pos = pos + rng.normal(0.0, POS_NOISE, 2)
        force = force + rng.normal(0.0, FORCE_NOISE, 2)
    return EnvObservation(pos, force)


def reset(spec: TaskSpec, rng: np.random.Generator) -> tuple[EnvState, EnvObservation]:
    lo, hi = spec.property_range
    m = float(rng.uniform(lo, hi))
    home = np.array(spec.home, dtype=float)
    state = EnvState(ee_pos=home.copy(), object_pose=np.array([spec.box_x, 0.0, 0.0]),
                     m_hidden=m, contact=False, t=0, setpoint=home.copy(), force=np.zeros(2))
    return state, _observe(spec, state, rng)


# ---------------------------------------------------------------------------
# Contact mechanics
# ---------------------------------------------------------------------------

K_EFF = IMPEDANCE_STIFFNESS * CONTACT_STIFFNESS / (IMPEDANCE_STIFFNESS + CONTACT_STIFFNESS)


def _penalty_axis(target: float, surface: float, sign: float) -> tuple[float, float]:
    """Equilibrium coordinate and reaction along one axis against a half-space.

    ``sign`` = +1 when the free side is ``coord >= surface`` (e.g. a floor).
    Returns (position, reaction force on the end-effector along +axis).
    """
    pen = sign * (surface - target)
    if pen <= 0.0:
        return target, 0.0
    pen_eq = pen * IMPEDANCE_STIFFNESS / (IMPEDANCE_STIFFNESS + CONTACT_STIFFNESS)
    return surface - sign * pen_eq, sign * CONTACT_STIFFNESS * pen_eq


def _box_face(prev, x0, x1, top):
    """Face of the box [x0, x1] x [0, top] the end-effector was on the outside of.

    Penetration is shallow compared with the box size, so the face with the
    largest signed separation is the one in contact (or being approached).
    """
    px, pz = prev
    seps = {"top": pz - top, "left": x0 - px, "right": px - x1}
    return max(seps, key=seps.get)


def _topple_face_x(box_x, width, theta, z):
    """Horizontal position of the left face at height z for a box pivoting about its right base corner."""
    s, c = math.sin(theta), math.cos(theta)
    u = (z - width * s) / c
    return box_x + width - width * c + u * s


def _box_top(spec: TaskSpec, state: EnvState) -> float:
    return state.m_hidden if spec.task is Task.HEIGHT else spec.box_height


def _resolve(spec: TaskSpec, state: EnvState, setpoint: np.ndarray):
    """Quasi-static equilibrium for one control step.

    Returns (ee position, force on ee, new object pose, contact flag).
    """
    pose = state.object_pose.copy()
    tx, tz = setpoint
    ex, fx = tx, 0.0
    ez, fz = _penalty_axis(tz, spec.workspace[2], +1.0)

    if pose[2] < math.pi / 2:
        top = _box_top(spec, state)
        x0 = pose[0]
        if pose[2] > 0.0:
            x0 = _topple_face_x(pose[0], spec.box_width, pose[2], min(tz, top))
        x1 = pose[0] + spec.box_width
        # a tilted box is only ever being pushed on its left face
        face = "left" if pose[2] > 0.0 else _box_face(state.ee_pos, x0, x1, top)
        if face == "top":
            if x0 <= tx <= x1:
                ez, fz = _penalty_axis(tz, top, +1.0)
        elif tz < top:
            sign = -1.0 if face == "left" else +1.0
            surface = x0 if face == "left" else x1
            ex, fx, shift, dtheta = _push_side(spec, state, tx, tz, surface, sign)
            pose[0] += shift
            if dtheta > 0.0:
                pose[2] += dtheta
                if pose[2] >= TOPPLE_ANGLE:
                    pose[2] = math.pi / 2
    if fx == 0.0 and 0.0 < pose[2] < math.pi / 2:
        pose[2] = 0.0   # released below the tipping angle: settles back upright
    contact = fx != 0.0 or fz != 0.0
    return np.array([ex, ez]), np.array([fx, fz]), pose, contact


def _push_side(spec, state, tx, tz, surface, sign):
    """Side contact; ``sign`` = -1 for the left face (free side x < surface).

    Returns (ee x, force x on the ee, object shift along x, tilt increment).
    """
    overlap = -sign * (tx - surface)
    if overlap <= 0.0:
        return tx, 0.0, 0.0, 0.0
    applied = K_EFF * overlap
    tilt = False
    if spec.task is Task.HEIGHT:
        resist = math.inf
    elif spec.task is Task.MASS:
        resist = FRICTION * state.m_hidden * GRAVITY
    else:
        weight = spec.box_mass * GRAVITY
        resist = FRICTION * weight
        if sign < 0 and tz > state.m_hidden:
            # tipping about the far base corner: F z = mu W h_crit
            resist = FRICTION * weight * state.m_hidden / tz
            tilt = True
    shift = 0.0
    force = applied
    if applied > resist:
        shift = (applied - resist) / (K_EFF + SLIDE_DAMPING / DT)
        force = resist + SLIDE_DAMPING * shift / DT
    contact_x = surface - sign * shift
    ee_x = contact_x - sign * force / CONTACT_STIFFNESS
    if tilt:
        return ee_x, sign * force, 0.0, shift / max(tz, 1e-3)
    return ee_x, sign * force, -sign * shift, 0.0


def step(state: EnvState, spec: TaskSpec, action, rng: np.random.Generator | None = None
         ) -> tuple[EnvState, EnvObservation]:
    if state.t >= spec.episode_len:
        raise ConfigurationError("episode already finished")
    a = np.clip(np.asarray(action, dtype=float), -spec.action_clip, spec.action_clip)
    xmin, xmax, zmin, zmax = spec.workspace
    sp = state.setpoint + a
    sp = np.array([np.clip(sp[0], xmin, xmax), np.clip(sp[1], zmin - MAX_LEAD, zmax)])
    if spec.task is Task.LINEAR:
        ee = np.clip(state.ee_pos + a, [xmin, zmin], [xmax, zmax])
        m = state.m_hidden
        contact = bool(ee[0] > LINEAR_CONTACT_X)
        new = replace(state, ee_pos=ee, setpoint=ee.copy(), contact=contact, t=state.t + 1,
                      force=np.array([m, 0.0]) if contact else np.zeros(2))
    else:
        ee, force, pose, contact = _resolve(spec, state, sp)
        lead = np.clip(sp - ee, -MAX_LEAD, MAX_LEAD)
        if np.any(lead != sp - ee):
            sp = ee + lead
            ee, force, pose, contact = _resolve(spec, state, sp)
        new = EnvState(ee_pos=ee, object_pose=pose, m_hidden=state.m_hidden, contact=bool(contact),
                       t=state.t + 1, setpoint=sp, force=force)
    rng = rng if rng is not None else np.random.default_rng(0)
    return new, _observe(spec, new, rng)


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

class Policy(Protocol):
    def reset(self, spec: TaskSpec, obs: EnvObservation, rng: np.random.Generator) -> None: ...

    def act(self, obs: EnvObservation, t: int) -> np.ndarray: ...


@dataclass
class Trajectory:
    actions: np.ndarray          # (T, 2); actions[t] is applied at step t
    observations: np.ndarray     # (T, 4); observations[t] follows actions[t]
    contacts: np.ndarray         # (T,) bool
    m_true: float
    states: list = field(default_factory=list)
    nonfinite_actions: int = 0

    @property
    def contact_rate(self) -> float:
        return float(np.mean(self.contacts)) if len(self.contacts) else 0.0


def episode(spec: TaskSpec, policy: Policy, rng: np.random.Generator, keep_states: bool = False) -> Trajectory:
    state, obs = reset(spec, rng)
    policy.reset(spec, obs, rng)
    T = spec.episode_len
    actions = np.zeros((T, 2))
    observations = np.zeros((T, 4))
    contacts = np.zeros(T, dtype=bool)
    states = [state] if keep_states else []
    bad = 0
    for t in range(T):
        a = np.asarray(policy.act(obs, t), dtype=float)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            log.warning("policy emitted non-finite action at t=%d; using zero action", t)
            a = np.zeros(2)
            bad += 1
        a = np.clip(a, -spec.action_clip, spec.action_clip)
        state, obs = step(state, spec, a, rng)
        actions[t] = a
        observations[t] = obs.as_vector()
        contacts[t] = state.contact
        if keep_states:
            states.append(state)
    return Trajectory(actions, observations, contacts, state.m_hidden, states, bad)


class ConstantPolicy:
    def __init__(self, action=(0.0, 0.0)):
        self.action = np.asarray(action, dtype=float)

    def reset(self, spec, obs, rng):
        pass

    def act(self, obs, t):
        return self.action


class CallablePolicy:
    def __init__(self, fn: Callable[[EnvObservation, int], np.ndarray]):
        self.fn = fn

    def reset(self, spec, obs, rng):
        pass

    def act(self, obs, t):
        return self.fn(obs, t)
