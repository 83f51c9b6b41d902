"""Neural-network primitives and the reverse-mode differentiation contract.

Networks are plain pytrees of float64 arrays so they can be traced, jitted,
vmapped and differentiated by JAX. :class:`Tape` exposes the recorded program
(one node per primitive in the traced jaxpr) with per-node values, a
bit-exact forward replay and an explicit reverse sweep. :func:`grad` is the
fast path used in training and falls back to the tape to name the first
non-finite node when the loss blows up.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.extend.core import Literal

from . import serialization
from .errors import ConfigurationError, GradientError, SerializationError

SQRT_DIAG_FLOOR = 1e-4
PARAMS_FORMAT_VERSION = 1

Array = jax.Array


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class MlpParams:
    """Fully connected tanh network. ``layers`` holds ``(W, b)`` with ``W`` of shape (out, in)."""

    layers: tuple
    residual: bool = field(default=True, metadata=dict(static=True))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def hidden_width(self) -> int:
        return self.layers[0][0].shape[0] if self.depth > 1 else 0

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class GruParams:
    w_update: Array
    w_reset: Array
    w_cand: Array
    b_update: Array
    b_reset: Array
    b_cand: Array

    @property
    def hidden_dim(self) -> int:
        return self.w_update.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_update.shape[1] - self.w_update.shape[0]


class GaussianHeadOutput(NamedTuple):
    mean: Array
    sqrt_diag: Array


def _uniform(key, shape, fan_in, scale):
    bound = scale / np.sqrt(fan_in)
    return jax.random.uniform(key, shape, jnp.float64, -bound, bound)


def init_mlp(key, in_dim: int, out_dim: int, hidden_width: int = 32, depth: int = 5,
             residual: bool = True, scale: float = 1.0) -> MlpParams:
    if min(in_dim, out_dim, hidden_width, depth) <= 0:
        raise ConfigurationError("MLP dimensions and depth must be positive")
    dims = [in_dim] + [hidden_width] * (depth - 1) + [out_dim]
    keys = jax.random.split(key, depth)
    layers = tuple(
        (_uniform(k, (o, i), i, scale), jnp.zeros(o, jnp.float64))
        for k, i, o in zip(keys, dims[:-1], dims[1:])
    )
    return MlpParams(layers=layers, residual=residual)


def init_gru(key, hidden_dim: int, input_dim: int, scale: float = 1.0) -> GruParams:
    if hidden_dim <= 0 or input_dim < 0:
        raise ConfigurationError("GRU dimensions must be positive")
    fan_in = hidden_dim + input_dim
    ku, kr, kc = jax.random.split(key, 3)
    shape = (hidden_dim, fan_in)
    zeros = jnp.zeros(hidden_dim, jnp.float64)
    return GruParams(_uniform(ku, shape, fan_in, scale), _uniform(kr, shape, fan_in, scale),
                     _uniform(kc, shape, fan_in, scale), zeros, zeros, zeros)


# ---------------------------------------------------------------------------
# Forward functions
# ---------------------------------------------------------------------------

def mlp_forward(params: MlpParams, x: Array) -> Array:
    """Hidden layers use tanh; equal-width hidden layers add a skip connection.

    The final layer is linear. Accepts leading batch dimensions.
    """
    if x.shape[-1] != params.in_dim:
        raise ConfigurationError(f"MLP expects input dim {params.in_dim}, got {x.shape[-1]}")
    *hidden, (w_out, b_out) = params.layers
    for w, b in hidden:
        y = jnp.tanh(x @ w.T + b)
        x = x + y if (params.residual and w.shape[0] == w.shape[1]) else y
    return x @ w_out.T + b_out


def gru_step(params: GruParams, hidden: Array, inp: Array) -> Array:
    """h' = z*h + (1-z)*c with c = tanh(W_c [r*h, x] + b_c)."""
    if hidden.shape[-1] != params.hidden_dim:
        raise ConfigurationError(f"GRU expects hidden dim {params.hidden_dim}, got {hidden.shape[-1]}")
    if inp.shape[-1] != params.input_dim:
        raise ConfigurationError(f"GRU expects input dim {params.input_dim}, got {inp.shape[-1]}")
    hx = jnp.concatenate([hidden, inp], axis=-1)
    z = jax.nn.sigmoid(hx @ params.w_update.T + params.b_update)
    r = jax.nn.sigmoid(hx @ params.w_reset.T + params.b_reset)
    cand = jnp.tanh(jnp.concatenate([r * hidden, inp], axis=-1) @ params.w_cand.T + params.b_cand)
    return z * hidden + (1.0 - z) * cand


def positive_scale(raw: Array, floor: float = SQRT_DIAG_FLOOR) -> Array:
    return jax.nn.softplus(raw) + floor


def gaussian_head(mean: Array, raw_scale: Array, floor: float = SQRT_DIAG_FLOOR) -> GaussianHeadOutput:
    return GaussianHeadOutput(mean, positive_scale(raw_scale, floor))


def reparam_sample(mean: Array, sqrt_diag: Array, noise: Array) -> Array:
    """mean + sqrt_diag * noise; the noise is treated as a constant."""
    return mean + sqrt_diag * jax.lax.stop_gradient(noise)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class TapeNode:
    index: int
    primitive: str
    eqn: Any = dataclasses.field(repr=False)


def _is_float(x) -> bool:
    return jnp.issubdtype(jnp.result_type(x), jnp.floating)


class Tape:
    """Recorded primitive program of a function with the values it produced.

    ``nodes[i]`` is the i-th primitive application in execution order and
    ``values[i]`` the tuple of float64 numpy buffers it produced.
    """

    def __init__(self, fn: Callable, args: tuple):
        self._args = args
        flat_args, self._in_tree = jax.tree_util.tree_flatten(args)
        closed, out_shape = jax.make_jaxpr(fn, return_shape=True)(*args)
        self._out_tree = jax.tree_util.tree_structure(out_shape)
        self.jaxpr = closed
        self.nodes = [TapeNode(i, eqn.primitive.name, eqn) for i, eqn in enumerate(closed.jaxpr.eqns)]
        self.values, self._env = self._run(flat_args)
        self.visit_order: list[int] = []

    def _run(self, flat_args):
        jaxpr = self.jaxpr.jaxpr
        env = {}
        for var, val in zip(jaxpr.constvars, self.jaxpr.consts):
            env[var] = val
        for var, val in zip(jaxpr.invars, flat_args):
            env[var] = jnp.asarray(val)
        values = []
        for eqn in jaxpr.eqns:
            outs = self._apply(eqn, [self._read(env, v) for v in eqn.invars])
            for var, val in zip(eqn.outvars, outs):
                env[var] = val
            values.append(tuple(np.asarray(o) for o in outs))
        return values, env

    @staticmethod
    def _read(env, var):
        return var.val if isinstance(var, Literal) else env[var]

    @staticmethod
    def _apply(eqn, invals):
        subfuns, bind_params = eqn.primitive.get_bind_params(eqn.params)
        out = eqn.primitive.bind(*subfuns, *invals, **bind_params)
        return list(out) if eqn.primitive.multiple_results else [out]

    @property
    def output(self):
        outs = [self._read(self._env, v) for v in self.jaxpr.jaxpr.outvars]
        return jax.tree_util.tree_unflatten(self._out_tree, outs)

    def replay(self) -> list[tuple[np.ndarray, ...]]:
        """Re-evaluate every node from the recorded inputs."""
        values, _ = self._run(jax.tree_util.tree_leaves(self._args))
        return values

    def first_nonfinite(self) -> TapeNode | None:
        for node, outs in zip(self.nodes, self.values):
            for o in outs:
                if np.issubdtype(o.dtype, np.floating) and not np.all(np.isfinite(o)):
                    return node
        return None

    def backward(self, cotangent=1.0):
        """Reverse sweep over the nodes; returns cotangents w.r.t. the recorded args."""
        jaxpr = self.jaxpr.jaxpr
        ct = {}

        def add(var, g):
            if isinstance(var, Literal) or not _is_float(g):
                return
            ct[var] = ct[var] + g if var in ct else g

        outvars = jaxpr.outvars
        out_cts = jax.tree_util.tree_leaves(cotangent) if not np.isscalar(cotangent) else [cotangent]
        for var, g in zip(outvars, out_cts):
            add(var, jnp.asarray(g, jnp.float64))
        self.visit_order = []
        for node in reversed(self.nodes):
            eqn = node.eqn
            self.visit_order.append(node.index)
            outs_ct = []
            any_ct = False
            for v in eqn.outvars:
                aval = v.aval
                if v in ct:
                    any_ct = True
                    outs_ct.append(ct[v])
                else:
                    outs_ct.append(jnp.zeros(aval.shape, aval.dtype) if _is_float(jnp.zeros((), aval.dtype))
                                   else np.zeros(aval.shape, jax.dtypes.float0))
            if not any_ct:
                continue
            invals = [self._read(self._env, v) for v in eqn.invars]
            float_idx = [i for i, x in enumerate(invals) if _is_float(x)]
            if not float_idx:
                continue

            def f(*xs, eqn=eqn, invals=invals, float_idx=float_idx):
                full = list(invals)
                for i, x in zip(float_idx, xs):
                    full[i] = x
                out = self._apply(eqn, full)
                return out if eqn.primitive.multiple_results else out[0]

            _, vjp = jax.vjp(f, *[invals[i] for i in float_idx])
            cts_in = vjp(outs_ct if eqn.primitive.multiple_results else outs_ct[0])
            for i, g in zip(float_idx, cts_in):
                add(eqn.invars[i], g)
        grads = [ct.get(v, jnp.zeros(v.aval.shape, v.aval.dtype)) for v in jaxpr.invars]
        return jax.tree_util.tree_unflatten(self._in_tree, grads)


def record(fn: Callable, *args) -> tuple[Any, Tape]:
    tape = Tape(fn, args)
    return tape.output, tape


def grad(loss_fn: Callable, params, *args, has_aux: bool = False):
    """Return ``(loss, grads)`` (or ``((loss, aux), grads)`` with ``has_aux``).

    Parameters that do not influence the loss receive exact zeros. A
    non-finite loss raises :class:`GradientError` naming the first
    non-finite node of the recorded program.
    """
    value, grads = jax.value_and_grad(loss_fn, has_aux=has_aux)(params, *args)
    loss = value[0] if has_aux else value
    if not np.isfinite(np.asarray(loss)):
        _, tape = record(lambda p: loss_fn(p, *args), params)
        node = tape.first_nonfinite()
        where = f"node {node.index} ({node.primitive})" if node is not None else "unknown node"
        raise GradientError(f"loss is not finite; first non-finite value at {where}", node=node)
    return value, grads


# ---------------------------------------------------------------------------
# Parameter serialization
# ---------------------------------------------------------------------------

def named_leaves(tree) -> dict[str, np.ndarray]:
    flat, _ = jax.tree_util.tree_flatten_with_path(tree)
    return {jax.tree_util.keystr(path): np.asarray(leaf) for path, leaf in flat}


def restore_leaves(template, arrays: dict[str, np.ndarray]):
    flat, treedef = jax.tree_util.tree_flatten_with_path(template)
    leaves = []
    for path, leaf in flat:
        name = jax.tree_util.keystr(path)
        if name not in arrays:
            raise SerializationError(f"missing parameter {name}")
        arr = arrays[name]
        if arr.shape != np.shape(leaf):
            raise SerializationError(f"shape mismatch for {name}: expected {np.shape(leaf)}, found {arr.shape}")
        leaves.append(jnp.asarray(arr, dtype=jnp.result_type(leaf)))
    return jax.tree_util.tree_unflatten(treedef, leaves)


def encode_params(params, seed: int, meta: dict | None = None) -> bytes:
    arrays = named_leaves(params)
    header = {"seed": int(seed), "shapes": {k: list(v.shape) for k, v in arrays.items()}}
    header.update(meta or {})
    return serialization.encode("params", PARAMS_FORMAT_VERSION, arrays, header)


def save_params(path, params, seed: int, meta: dict | None = None) -> None:
    serialization.write(path, encode_params(params, seed, meta))


def load_params(path, template):
    """Load parameters into the structure of ``template``; returns (params, header meta)."""
    header, arrays = serialization.read(path, "params", PARAMS_FORMAT_VERSION)
    return restore_leaves(template, arrays), header["meta"]
