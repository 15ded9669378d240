"""Structured inference network q(z_{1:T} | d_{1:T}, x_{1:T}).

``q(z_t | z_{t-1}, a_t)`` is a diagonal Gaussian whose inputs are the previous
sample and a summary ``a_t`` of the present and (in smoothing mode) future
observations, built by a GRU run backwards in time.  With ``resq`` the
variational mean is the prior transition mean, evaluated on the current
``z_{t-1}`` sample, plus a learned residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, ShapeError, Tensor
from .generative import DeterministicPath, GenerativeParams, ModelDims, prior_mean, prior_transition, run_deterministic
from .neural import (GaussianDiag, GruCellSpec, MlpSpec, gaussian_head, gru_input_projection,
                     gru_step_projected, init_gru, init_mlp, mlp_apply)


class InferenceParams:
    """phi = {phi_a (backward GRU or filter net), phi_z (q mean / logvar nets)}."""

    def __init__(self, dims: ModelDims, rng: np.random.Generator | None = None):
        self.dims = dims
        rng = rng if rng is not None else np.random.default_rng(1)
        self.params = ParamStore()
        dx = dims.d_dim + dims.x_dim
        self.backward_gru = None
        self.filter_net = None
        if dims.mode == "smooth":
            self.backward_gru = GruCellSpec("backward_gru", dx, dims.a_dim)
            init_gru(self.params, self.backward_gru, rng)
        else:
            self.filter_net = MlpSpec("filter", dx, dims.filter_hidden, dims.a_dim)
            init_mlp(self.params, self.filter_net, rng)
        za = dims.z_dim + dims.a_dim
        self.q_mean = MlpSpec("q_mean", za, dims.q_hidden, dims.z_dim)
        self.q_logvar = MlpSpec("q_logvar", za, dims.q_hidden, dims.z_dim)
        init_mlp(self.params, self.q_mean, rng)
        init_mlp(self.params, self.q_logvar, rng)

    @property
    def mode(self) -> str:
        return self.dims.mode

    @property
    def resq(self) -> bool:
        return self.dims.resq


@dataclass
class BackwardStates:
    a: Tensor  # [batch, T, a_dim]


def compute_states(inf: InferenceParams, d: DeterministicPath, x, mask=None) -> BackwardStates:
    """a_t from [d_t; x_t]: a backward GRU (smooth) or a per-step net (filt).

    In smoothing mode ``a_{T+1} = 0``; with a prefix ``mask`` the padded
    steps hold ``a = 0`` so every sequence starts its recursion at its own
    last valid step.
    """
    x = dc.as_tensor(x)
    dd = d.d
    if dd.shape[:2] != x.shape[:2]:
        raise ShapeError(f"compute_states: d {dd.shape} and x {x.shape} not aligned")
    if x.shape[-1] != inf.dims.x_dim:
        raise ShapeError(f"compute_states: x width {x.shape[-1]} != {inf.dims.x_dim}")
    inp = dc.concat([dd, x])
    if inf.mode == "filt":
        return BackwardStates(mlp_apply(inf.filter_net, inf.params, inp))
    batch, T = x.shape[:2]
    spec = inf.backward_gru
    xz, xr, xh = gru_input_projection(spec, inf.params, inp)
    m = None if mask is None else np.asarray(mask, dtype=float)
    a = dc.Tensor(np.zeros((batch, inf.dims.a_dim)))
    states = [None] * T
    for t in range(T - 1, -1, -1):
        a = gru_step_projected(spec, inf.params, a, xz[:, t], xr[:, t], xh[:, t])
        if m is not None and not np.all(m[:, t] == 1.0):
            a = dc.mul(a, m[:, t:t + 1])
        states[t] = a
    if T == 0:
        return BackwardStates(dc.Tensor(np.zeros((batch, 0, inf.dims.a_dim))))
    return BackwardStates(dc.stack(states, axis=1))


def q_factor(gen: GenerativeParams, inf: InferenceParams, z_prev, d_t, a_t,
             prior_mu: Tensor | None = None) -> tuple[GaussianDiag, Tensor | None]:
    """q(z_t | z_{t-1}, a_t) and the predictive prior mean used for Res_q.

    ``prior_mu`` lets the caller pass in a prior mean it already computed
    (or a multi-sample average of it).  Returns ``(q, mu_hat)`` where
    ``mu_hat`` is None when ``resq`` is off.
    """
    z_prev, a_t = dc.as_tensor(z_prev), dc.as_tensor(a_t)
    if a_t.shape[-1] != inf.dims.a_dim:
        raise ShapeError(f"q_factor: a_t width {a_t.shape[-1]} != {inf.dims.a_dim}")
    if z_prev.shape[-1] != inf.dims.z_dim:
        raise ShapeError(f"q_factor: z_prev width {z_prev.shape[-1]} != {inf.dims.z_dim}")
    h = dc.concat([z_prev, a_t])
    mean = mlp_apply(inf.q_mean, inf.params, h)
    logvar = mlp_apply(inf.q_logvar, inf.params, h)
    mu_hat = None
    if inf.resq:
        mu_hat = prior_mu if prior_mu is not None else prior_mean(gen, z_prev, d_t)
        mean = dc.add(mu_hat, mean)
    return gaussian_head(mean, logvar, inf.dims.logvar_bounds), mu_hat


def sample_z(dist: GaussianDiag, noise) -> Tensor:
    """Reparameterized draw mu + sqrt(v) * eps."""
    noise = np.asarray(noise, dtype=float)
    if noise.shape != dist.mean.shape:
        raise ShapeError(f"sample_z: noise {noise.shape} vs mean {dist.mean.shape}")
    std = dc.exp(dc.mul(dist.logvar, 0.5))
    return dc.add(dist.mean, dc.mul(std, noise))


def draw_noise(seed: int, ids, T: int, z_dim: int, samples: int = 1) -> np.ndarray:
    """Standard-normal noise ``[batch, T, z_dim]`` keyed by (seed, sequence id).

    Each sequence gets its own stream, so a sequence's draws do not depend
    on which batch it lands in or how much padding that batch carries.
    With ``samples > 1`` the result is ``[samples, batch, T, z_dim]``.
    """
    out = np.empty((samples, len(ids), T, z_dim))
    for i, sid in enumerate(ids):
        rng = np.random.default_rng([int(seed), int(sid)])
        for s in range(samples):
            out[s, i] = rng.standard_normal((T, z_dim))
    return out[0] if samples == 1 else out


@dataclass
class InferencePath:
    z: Tensor             # [batch, T, z_dim] samples from q
    z_prev: Tensor        # [batch, T, z_dim]: z_0 followed by z_1..z_{T-1}
    q: GaussianDiag       # stacked q factors [batch, T, z_dim]
    p: GaussianDiag       # stacked prior factors [batch, T, z_dim]
    d: DeterministicPath
    a: BackwardStates


def infer_path(gen: GenerativeParams, inf: InferenceParams, x, u, noise, z0=None, d0=None,
               mask=None, extra_noise=None) -> InferencePath:
    """Runs the GRU path, the backward states, then the sampling loop.

    ``noise`` is standard normal ``[batch, T, z_dim]``.  With
    ``resq_samples = K > 1`` the predictive prior mean averages the prior
    mean over the shared ``z_{t-1}`` sample and ``K - 1`` extra draws from the
    previous q factor, taken from ``extra_noise`` ``[K-1, batch, T, z_dim]``.
    """
    x = dc.as_tensor(x)
    dims = gen.dims
    batch, T = x.shape[:2]
    noise = np.asarray(noise, dtype=float)
    if noise.shape != (batch, T, dims.z_dim):
        raise ShapeError(f"infer_path: noise shape {noise.shape}, expected {(batch, T, dims.z_dim)}")
    K = inf.dims.resq_samples if inf.resq else 1
    if K > 1:
        extra_noise = np.asarray(extra_noise, dtype=float)
        if extra_noise.shape != (K - 1, batch, T, dims.z_dim):
            raise ShapeError(f"infer_path: extra_noise shape {extra_noise.shape}")
    path = run_deterministic(gen, u, d0)
    states = compute_states(inf, path, x, mask)
    z = dc.as_tensor(np.zeros((batch, dims.z_dim)) if z0 is None else z0)
    if z.shape != (batch, dims.z_dim):
        raise ShapeError(f"infer_path: z0 shape {z.shape}, expected {(batch, dims.z_dim)}")
    zs, zprevs, q_means, q_logvars, p_means = [], [], [], [], []
    prev_q = None
    for t in range(T):
        d_t = path.d[:, t]
        mu_p = prior_mean(gen, z, d_t)
        mu_hat = mu_p
        if K > 1 and prev_q is not None:
            total = mu_p
            for k in range(K - 1):
                alt = sample_z(prev_q, extra_noise[k, :, t - 1])
                total = dc.add(total, prior_mean(gen, alt, d_t))
            mu_hat = dc.mul(total, 1.0 / K)
        q, _ = q_factor(gen, inf, z, d_t, states.a[:, t], prior_mu=mu_hat)
        zprevs.append(z)
        z = sample_z(q, noise[:, t])
        zs.append(z)
        q_means.append(q.mean)
        q_logvars.append(q.logvar)
        p_means.append(mu_p)
        prev_q = q
    z_all = dc.stack(zs, axis=1)
    z_prev = dc.stack(zprevs, axis=1)
    q_all = GaussianDiag(dc.stack(q_means, axis=1), dc.stack(q_logvars, axis=1))
    p_all = prior_transition(gen, z_prev, path.d, mean=dc.stack(p_means, axis=1))
    return InferencePath(z_all, z_prev, q_all, p_all, path, states)
