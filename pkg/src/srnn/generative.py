"""The SRNN generative model: GRU path, Gaussian transition prior, emission.

The deterministic layer ``d_t = GRU(d_{t-1}, u_t)`` never sees ``z``; the
stochastic layer draws ``z_t ~ N(mu(z_{t-1}, d_t), exp(logvar(z_{t-1}, d_t)))``
and the emission reads both ``z_t`` and ``d_t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, ShapeError, Tensor
from .neural import (GaussianDiag, GruCellSpec, MlpSpec, bernoulli_logprob, gaussian_head,
                     gaussian_logprob, gru_input_projection, gru_step_projected, init_gru,
                     init_mlp, mlp_apply, LOGVAR_MAX, LOGVAR_MIN)

EMISSIONS = ("bernoulli", "gaussian")
MODES = ("smooth", "filt")


@dataclass(frozen=True)
class ModelDims:
    """Sizes and structural switches shared by the generative and inference sides."""

    x_dim: int
    z_dim: int
    d_dim: int
    a_dim: int
    u_dim: int | None = None
    prior_hidden: tuple = ()
    emission_hidden: tuple = ()
    q_hidden: tuple = ()
    filter_hidden: tuple | None = None
    emission: str = "bernoulli"
    mode: str = "smooth"
    resq: bool = True
    resq_samples: int = 1
    logvar_bounds: tuple = (LOGVAR_MIN, LOGVAR_MAX)

    def __post_init__(self):
        if self.u_dim is None:
            object.__setattr__(self, "u_dim", self.x_dim)
        for key in ("x_dim", "z_dim", "d_dim", "a_dim", "u_dim", "resq_samples"):
            if int(getattr(self, key)) < 1:
                raise ValueError(f"{key} must be positive")
        if self.emission not in EMISSIONS:
            raise ValueError(f"emission must be one of {EMISSIONS}, got {self.emission!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for key in ("prior_hidden", "emission_hidden", "q_hidden"):
            object.__setattr__(self, key, tuple(int(h) for h in getattr(self, key)))
        if self.filter_hidden is None:
            object.__setattr__(self, "filter_hidden", (self.a_dim,))
        object.__setattr__(self, "logvar_bounds", tuple(float(b) for b in self.logvar_bounds))


class GenerativeParams:
    """theta = {theta_d (GRU), theta_z (prior nets), theta_x (emission nets)}."""

    def __init__(self, dims: ModelDims, rng: np.random.Generator | None = None):
        self.dims = dims
        zd = dims.z_dim + dims.d_dim
        self.gru = GruCellSpec("gru", dims.u_dim, dims.d_dim)
        self.prior_mean = MlpSpec("prior_mean", zd, dims.prior_hidden, dims.z_dim)
        self.prior_logvar = MlpSpec("prior_logvar", zd, dims.prior_hidden, dims.z_dim)
        if dims.emission_hidden:
            *inner, last = dims.emission_hidden
            self.emission_trunk = MlpSpec("emit_trunk", zd, tuple(inner), last)
            head_in = last
        else:
            self.emission_trunk = None
            head_in = zd
        if dims.emission == "bernoulli":
            self.emission_heads = (MlpSpec("emit_logits", head_in, (), dims.x_dim),)
        else:
            self.emission_heads = (MlpSpec("emit_mean", head_in, (), dims.x_dim),
                                   MlpSpec("emit_logvar", head_in, (), dims.x_dim))
        self.params = ParamStore()
        rng = rng if rng is not None else np.random.default_rng(0)
        init_gru(self.params, self.gru, rng)
        for spec in self.mlp_specs():
            init_mlp(self.params, spec, rng)

    def mlp_specs(self):
        specs = [self.prior_mean, self.prior_logvar]
        if self.emission_trunk is not None:
            specs.append(self.emission_trunk)
        return specs + list(self.emission_heads)


@dataclass
class DeterministicPath:
    d: Tensor  # [batch, T, d_dim]

    def step(self, t: int) -> Tensor:
        return self.d[:, t]


def run_deterministic(gen: GenerativeParams, u, d0=None) -> DeterministicPath:
    u = dc.as_tensor(u)
    if u.ndim != 3 or u.shape[-1] != gen.dims.u_dim:
        raise ShapeError(f"run_deterministic: u shape {u.shape}, expected [batch, T, {gen.dims.u_dim}]")
    batch, T = u.shape[:2]
    d = dc.as_tensor(np.zeros((batch, gen.dims.d_dim)) if d0 is None else d0)
    if d.shape != (batch, gen.dims.d_dim):
        raise ShapeError(f"run_deterministic: d0 shape {d.shape}, expected {(batch, gen.dims.d_dim)}")
    xz, xr, xh = gru_input_projection(gen.gru, gen.params, u)
    states = []
    for t in range(T):
        d = gru_step_projected(gen.gru, gen.params, d, xz[:, t], xr[:, t], xh[:, t])
        states.append(d)
    if not states:
        return DeterministicPath(dc.Tensor(np.zeros((batch, 0, gen.dims.d_dim))))
    return DeterministicPath(dc.stack(states, axis=1))


def _check_width(name, t: Tensor, width: int):
    if t.shape[-1] != width:
        raise ShapeError(f"{name}: last axis {t.shape[-1]} != {width} (shape {t.shape})")


def prior_mean(gen: GenerativeParams, z_prev, d_t) -> Tensor:
    z_prev, d_t = dc.as_tensor(z_prev), dc.as_tensor(d_t)
    _check_width("prior z_prev", z_prev, gen.dims.z_dim)
    _check_width("prior d_t", d_t, gen.dims.d_dim)
    return mlp_apply(gen.prior_mean, gen.params, dc.concat([z_prev, d_t]))


def prior_transition(gen: GenerativeParams, z_prev, d_t, mean: Tensor | None = None) -> GaussianDiag:
    """p(z_t | z_{t-1}, d_t); any leading shape.  ``mean`` reuses an already computed mean."""
    z_prev, d_t = dc.as_tensor(z_prev), dc.as_tensor(d_t)
    _check_width("prior z_prev", z_prev, gen.dims.z_dim)
    _check_width("prior d_t", d_t, gen.dims.d_dim)
    h = dc.concat([z_prev, d_t])
    if mean is None:
        mean = mlp_apply(gen.prior_mean, gen.params, h)
    logvar = mlp_apply(gen.prior_logvar, gen.params, h)
    return gaussian_head(mean, logvar, gen.dims.logvar_bounds)


def emission(gen: GenerativeParams, z_t, d_t):
    """Bernoulli logits or a GaussianDiag over x_t, from [z_t; d_t] (skip connection)."""
    z_t, d_t = dc.as_tensor(z_t), dc.as_tensor(d_t)
    _check_width("emission z_t", z_t, gen.dims.z_dim)
    _check_width("emission d_t", d_t, gen.dims.d_dim)
    h = dc.concat([z_t, d_t])
    if gen.emission_trunk is not None:
        h = dc.leaky_rectify(mlp_apply(gen.emission_trunk, gen.params, h))
    if gen.dims.emission == "bernoulli":
        return mlp_apply(gen.emission_heads[0], gen.params, h)
    mean = mlp_apply(gen.emission_heads[0], gen.params, h)
    logvar = mlp_apply(gen.emission_heads[1], gen.params, h)
    return gaussian_head(mean, logvar, gen.dims.logvar_bounds)


def emission_logprob(gen: GenerativeParams, out, x) -> Tensor:
    if gen.dims.emission == "bernoulli":
        return bernoulli_logprob(out, x)
    return gaussian_logprob(out, x)


def sample_emission(gen: GenerativeParams, out, rng: np.random.Generator) -> np.ndarray:
    if gen.dims.emission == "bernoulli":
        logits = out.data
        p = np.where(logits >= 0, 1.0 / (1.0 + np.exp(-np.abs(logits))),
                     np.exp(-np.abs(logits)) / (1.0 + np.exp(-np.abs(logits))))
        return (rng.random(p.shape) < p).astype(float)
    return out.mean.data + np.sqrt(out.var.data) * rng.standard_normal(out.mean.shape)


@dataclass
class GeneratedSample:
    x: np.ndarray  # [n, T, x_dim]
    z: np.ndarray  # [n, T, z_dim]
    d: np.ndarray  # [n, T, d_dim]
    u: np.ndarray = field(default=None, repr=False)


def generate(gen: GenerativeParams, T: int, n: int = 1, seed: int = 0, u_source=None,
             z0=None, d0=None) -> GeneratedSample:
    """Ancestral sampling d_t -> z_t -> x_t.

    With ``u_source=None`` the model runs free: ``u_t = x_{t-1}`` and
    ``u_1 = 0``.  Otherwise ``u_source`` is a fixed ``[n, T, u_dim]`` input.
    """
    if T < 1:
        raise ValueError("generate: T must be >= 1")
    dims = gen.dims
    free = u_source is None
    if free and dims.u_dim != dims.x_dim:
        raise ValueError("free-running generation needs u_dim == x_dim")
    if not free:
        u_source = np.asarray(u_source, dtype=float)
        if u_source.shape != (n, T, dims.u_dim):
            raise ShapeError(f"generate: u_source shape {u_source.shape}, expected {(n, T, dims.u_dim)}")
    rng = np.random.default_rng(seed)
    xs, zs, ds, us = [], [], [], []
    z = np.zeros((n, dims.z_dim)) if z0 is None else np.asarray(z0, dtype=float)
    d = np.zeros((n, dims.d_dim)) if d0 is None else np.asarray(d0, dtype=float)
    x_prev = np.zeros((n, dims.x_dim))
    with dc.no_grad():
        for t in range(T):
            u_t = x_prev if free else u_source[:, t]
            xz, xr, xh = gru_input_projection(gen.gru, gen.params, u_t)
            d = gru_step_projected(gen.gru, gen.params, dc.Tensor(d), xz, xr, xh).data
            p = prior_transition(gen, z, d)
            z = p.mean.data + np.sqrt(p.var.data) * rng.standard_normal(p.mean.shape)
            x_prev = sample_emission(gen, emission(gen, z, d), rng)
            xs.append(x_prev)
            zs.append(z)
            ds.append(d)
            us.append(u_t)
    return GeneratedSample(np.stack(xs, 1), np.stack(zs, 1), np.stack(ds, 1), np.stack(us, 1))
