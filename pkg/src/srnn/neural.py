"""Feed-forward stacks, the GRU cell and distribution heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, ShapeError, Tensor

LOGVAR_MIN = -8.0
LOGVAR_MAX = 8.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MlpSpec:
    """Affine + leaky-rectify layers; ``hidden_dims=()`` gives a single affine map."""

    name: str
    input_dim: int
    hidden_dims: tuple = ()
    output_dim: int = 1

    def layer_dims(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class GruCellSpec:
    name: str
    input_dim: int
    state_dim: int


@dataclass
class GaussianDiag:
    """Diagonal Gaussian stored as mean and (clamped) log-variance tensors."""

    mean: Tensor
    logvar: Tensor
    _var: Tensor | None = field(default=None, repr=False)

    @property
    def var(self) -> Tensor:
        if self._var is None:
            self._var = dc.exp(self.logvar)
        return self._var

    @property
    def shape(self):
        return self.mean.shape


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_mlp(params: ParamStore, spec: MlpSpec, rng: np.random.Generator) -> None:
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims()):
        params.add(f"{spec.name}.W{i}", glorot(rng, fan_in, fan_out))
        params.add(f"{spec.name}.b{i}", np.zeros(fan_out))


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return dc.add(dc.matmul(x, W), b)


def mlp_apply(spec: MlpSpec, params: ParamStore, x) -> Tensor:
    x = dc.as_tensor(x)
    if x.shape[-1] != spec.input_dim:
        raise ShapeError(f"{spec.name}: input width {x.shape[-1]} != {spec.input_dim}")
    layers = spec.layer_dims()
    h = x
    for i in range(len(layers)):
        h = affine(h, params[f"{spec.name}.W{i}"], params[f"{spec.name}.b{i}"])
        if i < len(layers) - 1:
            h = dc.leaky_rectify(h)
    return h


def init_gru(params: ParamStore, spec: GruCellSpec, rng: np.random.Generator) -> None:
    n, s = spec.input_dim, spec.state_dim
    for gate in "zrh":
        params.add(f"{spec.name}.W_{gate}", glorot(rng, n, s))
        params.add(f"{spec.name}.U_{gate}", glorot(rng, s, s))
        params.add(f"{spec.name}.b_{gate}", np.zeros(s))


def gru_input_projection(spec: GruCellSpec, params: ParamStore, u) -> tuple:
    """Input-to-state pre-activations ``u W + b`` for all three gates.

    Works on any leading shape, so a whole ``[batch, T, input]`` sequence can
    be projected with one matmul per gate before the recurrence runs.
    """
    u = dc.as_tensor(u)
    if u.shape[-1] != spec.input_dim:
        raise ShapeError(f"{spec.name}: input shape {u.shape} vs input_dim {spec.input_dim}")
    return tuple(affine(u, params[f"{spec.name}.W_{g}"], params[f"{spec.name}.b_{g}"])
                 for g in "zrh")


def gru_step_projected(spec: GruCellSpec, params: ParamStore, d_prev: Tensor,
                       xz: Tensor, xr: Tensor, xh: Tensor) -> Tensor:
    name = spec.name
    z = dc.sigmoid(dc.add(xz, dc.matmul(d_prev, params[f"{name}.U_z"])))
    r = dc.sigmoid(dc.add(xr, dc.matmul(d_prev, params[f"{name}.U_r"])))
    cand = dc.tanh(dc.add(xh, dc.matmul(dc.mul(r, d_prev), params[f"{name}.U_h"])))
    # (1 - z) * d_prev + z * cand
    return dc.add(d_prev, dc.mul(z, dc.sub(cand, d_prev)))


def gru_step(spec: GruCellSpec, params: ParamStore, d_prev, u_t) -> Tensor:
    """One GRU update with the reset gate applied inside the candidate."""
    d_prev = dc.as_tensor(d_prev)
    if d_prev.shape[-1] != spec.state_dim:
        raise ShapeError(f"{spec.name}: state shape {d_prev.shape} vs state_dim {spec.state_dim}")
    xz, xr, xh = gru_input_projection(spec, params, u_t)
    if xz.shape != d_prev.shape:
        raise ShapeError(f"{spec.name}: state {d_prev.shape} and input {dc.as_tensor(u_t).shape} "
                         "batch shapes differ")
    return gru_step_projected(spec, params, d_prev, xz, xr, xh)


def gaussian_head(mean_out, logvar_out, bounds=(LOGVAR_MIN, LOGVAR_MAX)) -> GaussianDiag:
    mean_out, logvar_out = dc.as_tensor(mean_out), dc.as_tensor(logvar_out)
    if mean_out.shape != logvar_out.shape:
        raise ShapeError(f"gaussian_head: mean {mean_out.shape} vs logvar {logvar_out.shape}")
    return GaussianDiag(mean_out, dc.clamp(logvar_out, *bounds))


def _check_binary(x: np.ndarray) -> None:
    if not np.all((x == 0.0) | (x == 1.0)):
        raise ValueError("bernoulli_logprob: targets must be binary (0/1)")


def bernoulli_logprob(logits, x) -> Tensor:
    """Sum over the last axis of x*l - log(1 + e^l)."""
    logits, x = dc.as_tensor(logits), dc.as_tensor(x)
    if logits.shape != x.shape:
        raise ShapeError(f"bernoulli_logprob: logits {logits.shape} vs x {x.shape}")
    _check_binary(x.data)
    return dc.sum(dc.sub(dc.mul(x, logits), dc.softplus(logits)), axis=-1)


def gaussian_logprob(dist: GaussianDiag, x) -> Tensor:
    x = dc.as_tensor(x)
    if dist.mean.shape != x.shape:
        raise ShapeError(f"gaussian_logprob: mean {dist.mean.shape} vs x {x.shape}")
    sq = dc.square(dc.sub(x, dist.mean))
    inv_var = dc.exp(dc.neg(dist.logvar))
    per_dim = dc.add(dc.add(dist.logvar, dc.mul(sq, inv_var)), LOG_2PI)
    return dc.mul(dc.sum(per_dim, axis=-1), -0.5)
