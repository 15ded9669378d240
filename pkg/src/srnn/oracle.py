"""Exact and Monte Carlo likelihood references.

``kalman_loglik`` gives log p(x_{1:T}) for a linear-Gaussian SSM, which is the
ground truth the ELBO must stay below when an SRNN is configured to realize
that SSM exactly (see :func:`embed_lgssm`).  ``importance_loglik`` is a
small-model cross-check only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import diffcore as dc
from .generative import GenerativeParams, ModelDims, emission, emission_logprob
from .inference import InferenceParams, infer_path
from .neural import LOGVAR_MAX, LOGVAR_MIN, GaussianDiag, gaussian_logprob

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Lgssm:
    """z_1 ~ N(mu0, Sigma0); z_t = A z_{t-1} + w, w ~ N(0, Q); x_t = C z_t + v, v ~ N(0, R).

    Q, R and Sigma0 are diagonal and stored as 1-D variance vectors.
    """

    A: np.ndarray
    Q: np.ndarray
    C: np.ndarray
    R: np.ndarray
    mu0: np.ndarray
    Sigma0: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        for name in ("Q", "R", "mu0", "Sigma0"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        k, m = self.A.shape[0], self.C.shape[0]
        if self.A.shape != (k, k) or self.C.shape != (m, k):
            raise ValueError(f"Lgssm: A {self.A.shape} / C {self.C.shape} inconsistent")
        if self.Q.shape != (k,) or self.Sigma0.shape != (k,) or self.mu0.shape != (k,) or self.R.shape != (m,):
            raise ValueError("Lgssm: Q, Sigma0, mu0 must have length k and R length m")
        for name in ("Q", "R", "Sigma0"):
            if np.any(getattr(self, name) <= 0):
                raise ValueError(f"Lgssm: {name} must be positive definite")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]

    @classmethod
    def random(cls, rng: np.random.Generator, k: int = 2, m: int = 2, radius: float = 0.9):
        """Stable random model with the SRNN start convention mu0 = 0, Sigma0 = Q."""
        M = rng.standard_normal((k, k))
        A = radius * M / max(np.max(np.abs(np.linalg.eigvals(M))), 1e-9)
        Q = rng.uniform(0.2, 1.0, k)
        C = rng.standard_normal((m, k))
        R = rng.uniform(0.2, 1.0, m)
        return cls(A, Q, C, R, np.zeros(k), Q.copy())


def kalman_loglik(model: Lgssm, x) -> float:
    """log p(x_{1:T}) by the predict/update recursion."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.size and x.shape[1] != model.obs_dim:
        raise ValueError(f"kalman_loglik: x width {x.shape[1]} != {model.obs_dim}")
    A, C = model.A, model.C
    Q, R = np.diag(model.Q), np.diag(model.R)
    mean, cov = model.mu0.copy(), np.diag(model.Sigma0)
    total = 0.0
    for t in range(x.shape[0]):
        if t > 0:
            mean = A @ mean
            cov = A @ cov @ A.T + Q
        S = C @ cov @ C.T + R
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise ValueError(f"kalman_loglik: innovation covariance not PD at t={t}") from None
        resid = x[t] - C @ mean
        sol = np.linalg.solve(L, resid)
        total += -0.5 * (len(resid) * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + sol @ sol)
        gain = np.linalg.solve(S, C @ cov).T
        mean = mean + gain @ resid
        cov = cov - gain @ C @ cov
        cov = 0.5 * (cov + cov.T)
    return float(total)


def embed_lgssm(model: Lgssm, d_dim: int = 1, a_dim: int = 4, mode: str = "smooth",
                resq: bool = True, q_hidden=(), rng=None, inf_scale: float = 0.3,
                logvar_bounds=(LOGVAR_MIN, LOGVAR_MAX)) -> tuple[GenerativeParams, InferenceParams]:
    """An SRNN whose generative side realizes ``model`` exactly.

    Prior and emission nets are single affine maps with zero weights on d,
    so the GRU path is irrelevant.  Needs mu0 = 0 and Sigma0 = Q, which is
    what z_0 = 0 implies.  Inference parameters are random, with the usual
    initialization scaled by ``inf_scale``; full-scale random q nets feed
    z back into themselves and the chain can run away.
    """
    if not (np.allclose(model.mu0, 0.0) and np.allclose(model.Sigma0, model.Q)):
        raise ValueError("embed_lgssm: requires mu0 = 0 and Sigma0 = Q")
    lo, hi = logvar_bounds
    for name in ("Q", "R"):
        lv = np.log(getattr(model, name))
        if np.any(lv < lo) or np.any(lv > hi):
            raise ValueError(f"embed_lgssm: log {name} outside the log-variance bounds {logvar_bounds}")
    k, m = model.state_dim, model.obs_dim
    dims = ModelDims(x_dim=m, z_dim=k, d_dim=d_dim, a_dim=a_dim, prior_hidden=(),
                     emission_hidden=(), q_hidden=tuple(q_hidden), emission="gaussian",
                     mode=mode, resq=resq, logvar_bounds=logvar_bounds)
    rng = rng if rng is not None else np.random.default_rng(0)
    gen = GenerativeParams(dims, rng)
    inf = InferenceParams(dims, rng)
    inf.params.load_arrays({n: inf_scale * v for n, v in inf.params.arrays().items()})
    arrays = gen.params.arrays()
    zero_d = np.zeros((d_dim, k))
    arrays["prior_mean.W0"] = np.vstack([model.A.T, zero_d])
    arrays["prior_mean.b0"] = np.zeros(k)
    arrays["prior_logvar.W0"] = np.zeros((k + d_dim, k))
    arrays["prior_logvar.b0"] = np.log(model.Q)
    arrays["emit_mean.W0"] = np.vstack([model.C.T, np.zeros((d_dim, m))])
    arrays["emit_mean.b0"] = np.zeros(m)
    arrays["emit_logvar.W0"] = np.zeros((k + d_dim, m))
    arrays["emit_logvar.b0"] = np.log(model.R)
    gen.params.load_arrays(arrays)
    return gen, inf


def sample_lgssm(model: Lgssm, n: int, T: int, rng: np.random.Generator):
    k, m = model.state_dim, model.obs_dim
    z = np.zeros((n, T, k))
    x = np.zeros((n, T, m))
    for t in range(T):
        if t == 0:
            zt = model.mu0 + np.sqrt(model.Sigma0) * rng.standard_normal((n, k))
        else:
            zt = z[:, t - 1] @ model.A.T + np.sqrt(model.Q) * rng.standard_normal((n, k))
        z[:, t] = zt
        x[:, t] = zt @ model.C.T + np.sqrt(model.R) * rng.standard_normal((n, m))
    return x, z


MAX_IS_ZDIM = 4
MAX_IS_T = 10


def importance_loglik(gen: GenerativeParams, inf: InferenceParams, x, u=None, n_samples: int = 1000,
                      seed: int = 0, chunk: int = 5000) -> tuple[float, float]:
    """log-mean-exp of log p(x, z) - log q(z | x) over draws z ~ q, one sequence.

    Returns ``(estimate, standard_error)``; the error is the delta-method
    standard error of the log of the mean weight.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("importance_loglik: x must be [T, x_dim] for a single sequence")
    T = x.shape[0]
    if gen.dims.z_dim > MAX_IS_ZDIM or T > MAX_IS_T:
        raise ValueError(f"importance_loglik: limited to z_dim <= {MAX_IS_ZDIM} and T <= {MAX_IS_T} "
                         f"(got z_dim={gen.dims.z_dim}, T={T}); sequential importance weights "
                         "degenerate beyond this and the estimate becomes meaningless")
    if u is None:
        u = np.vstack([np.zeros((1, x.shape[1])), x[:-1]])
    u = np.asarray(u, dtype=float)
    rng = np.random.default_rng(seed)
    logw = []
    with dc.no_grad():
        done = 0
        while done < n_samples:
            n = min(chunk, n_samples - done)
            noise = rng.standard_normal((n, T, gen.dims.z_dim))
            logw.append(_log_weights(gen, inf, np.broadcast_to(x, (n,) + x.shape),
                                     np.broadcast_to(u, (n,) + u.shape), noise))
            done += n
    logw = np.concatenate(logw)
    est = float(logsumexp(logw) - math.log(len(logw)))
    w = np.exp(logw - logw.max())
    se = float(np.std(w, ddof=1) / (math.sqrt(len(w)) * np.mean(w))) if len(w) > 1 else float("inf")
    return est, se


def _gauss_logpdf(z, dist: GaussianDiag) -> np.ndarray:
    mean, logvar = dist.mean.data, dist.logvar.data
    return -0.5 * np.sum(LOG_2PI + logvar + (z - mean) ** 2 * np.exp(-logvar), axis=-1)


def _log_weights(gen, inf, x, u, noise) -> np.ndarray:
    path = infer_path(gen, inf, x, u, noise)
    z = path.z.data
    log_q = _gauss_logpdf(z, path.q).sum(axis=1)
    log_p = _gauss_logpdf(z, path.p).sum(axis=1)
    log_lik = emission_logprob(gen, emission(gen, path.z, path.d.d), x).data.sum(axis=1)
    return log_lik + log_p - log_q
