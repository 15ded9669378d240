"""ELBO, analytic KL, KL annealing, training and evaluation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import RunConfig
from .datapipe import SequenceBatch, make_batches, pad_batch
from .diffcore import Tensor
from .generative import GenerativeParams, ModelDims, emission, emission_logprob
from .inference import InferenceParams, draw_noise, infer_path
from .neural import GaussianDiag

log = logging.getLogger(__name__)

METRICS_VERSION = 1
METRICS_COLUMNS = ("kind", "update", "epoch", "beta", "train_elbo_per_step", "recon", "kl",
                   "wallclock_s")


class TrainingDiverged(RuntimeError):
    pass


def kl_diag_gaussian(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """KL(q || p) summed over the last axis."""
    if q.mean.shape != p.mean.shape:
        raise dc.ShapeError(f"kl_diag_gaussian: q {q.mean.shape} vs p {p.mean.shape}")
    if not (np.all(q.var.data > 0) and np.all(p.var.data > 0)):
        raise ValueError("kl_diag_gaussian: variances must be positive")
    diff2 = dc.square(dc.sub(q.mean, p.mean))
    ratio = dc.mul(dc.add(q.var, diff2), dc.exp(dc.neg(p.logvar)))
    per_dim = dc.sub(dc.add(dc.sub(p.logvar, q.logvar), ratio), 1.0)
    return dc.mul(dc.sum(per_dim, axis=-1), 0.5)


@dataclass
class AnnealSchedule:
    beta_start: float = 0.2
    increment_per_update: float = 0.0003
    cap: float = 1.0


def anneal_beta(schedule: AnnealSchedule, update_index: int) -> float:
    if update_index < 0:
        raise ValueError("update_index must be >= 0")
    return min(schedule.cap, schedule.beta_start + schedule.increment_per_update * update_index)


@dataclass
class ElboBreakdown:
    """Per-step terms (already masked) for one batch."""

    recon: np.ndarray        # [batch, T]
    kl: np.ndarray           # [batch, T]
    mask: np.ndarray         # [batch, T]
    beta: float
    objective: Tensor | None = None   # sum of mask * (recon - beta * kl), on the tape
    final_z: np.ndarray | None = field(default=None, repr=False)
    final_d: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_steps(self) -> float:
        return float(self.mask.sum())

    @property
    def elbo_per_sequence(self) -> np.ndarray:
        return (self.recon - self.kl).sum(axis=1)

    @property
    def total(self) -> float:
        return float(self.elbo_per_sequence.sum())

    @property
    def per_step(self) -> float:
        return self.total / max(self.n_steps, 1.0)

    @property
    def recon_per_step(self) -> float:
        return float(self.recon.sum()) / max(self.n_steps, 1.0)

    @property
    def kl_per_step(self) -> float:
        return float(self.kl.sum()) / max(self.n_steps, 1.0)


def elbo_sequence(gen: GenerativeParams, inf: InferenceParams, batch: SequenceBatch, beta: float = 1.0,
                  seed: int = 0, noise=None, z0=None, d0=None, stream: int = 0) -> ElboBreakdown:
    """Single-sample ELBO of each sequence in ``batch``.

    Noise is drawn per sequence from (seed, id, stream) unless given, so a
    sequence's estimate does not depend on batch composition or padding.
    Padded steps contribute exactly zero.
    """
    mask = np.asarray(batch.mask, dtype=float)
    keep = mask[..., None] > 0
    x = np.where(keep, batch.x, 0.0)
    u = np.where(keep, batch.u, 0.0)
    B, T = mask.shape
    dims = gen.dims
    if noise is None:
        noise = draw_noise(seed * 1_000_003 + stream, batch.ids, T, dims.z_dim)
    extra = None
    if inf.resq and inf.dims.resq_samples > 1:
        extra = np.random.default_rng([seed, stream, 7]).standard_normal(
            (inf.dims.resq_samples - 1, B, T, dims.z_dim))
    path = infer_path(gen, inf, x, u, noise, z0=z0, d0=d0, mask=mask, extra_noise=extra)
    recon = emission_logprob(gen, emission(gen, path.z, path.d.d), x)
    kl = kl_diag_gaussian(path.q, path.p)
    recon_m = dc.mul(recon, mask)
    kl_m = dc.mul(kl, mask)
    objective = dc.sum(dc.sub(recon_m, dc.mul(kl_m, float(beta))))
    return ElboBreakdown(recon_m.data, kl_m.data, mask, float(beta), objective,
                         final_z=path.z.data[:, -1].copy() if T else None,
                         final_d=path.d.d.data[:, -1].copy() if T else None)


# ----------------------------------------------------------------- training

def build_model(config: RunConfig, x_dim: int, seed: int | None = None):
    seed = config.seed if seed is None else seed
    dims = config.model_dims(x_dim)
    gen = GenerativeParams(dims, np.random.default_rng([seed, 0]))
    inf = InferenceParams(dims, np.random.default_rng([seed, 1]))
    return gen, inf


def model_arrays(gen: GenerativeParams, inf: InferenceParams) -> dict:
    arrays = {f"gen/{k}": v for k, v in gen.params.arrays().items()}
    arrays.update({f"inf/{k}": v for k, v in inf.params.arrays().items()})
    return arrays


def load_model_arrays(gen: GenerativeParams, inf: InferenceParams, arrays: dict) -> None:
    gen.params.load_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("gen/")})
    inf.params.load_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("inf/")})


def save_model(path, gen: GenerativeParams, inf: InferenceParams, config: RunConfig, extra=None) -> None:
    meta = {"config": config.echo(), "x_dim": gen.dims.x_dim, **(extra or {})}
    dc.save_checkpoint(path, model_arrays(gen, inf), meta)


def load_model(path):
    """Returns ``(gen, inf, config, meta)`` rebuilt from a checkpoint."""
    from .config import build_config, parse_text

    arrays, meta = dc.load_checkpoint(path)
    config = build_config(parse_text(meta["config"]))
    dc.set_dtype(config.precision)
    gen, inf = build_model(config, int(meta["x_dim"]))
    load_model_arrays(gen, inf, arrays)
    return gen, inf, config, meta


@dataclass
class TrainResult:
    gen: GenerativeParams
    inf: InferenceParams
    rows: list
    best_valid: float | None
    updates: int


class MetricsLog:
    """Append-only CSV with a version comment and a header row."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows = []
        if self.path:
            with open(self.path, "w", newline="") as fh:
                fh.write(f"# srnn-metrics v{METRICS_VERSION}\n")
                csv.writer(fh).writerow(METRICS_COLUMNS)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[c]) for c in METRICS_COLUMNS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def train(config: RunConfig, train_seqs, valid_seqs=None, out_dir=None, gen=None, inf=None,
          train_generative: bool = True, progress=None) -> TrainResult:
    """Adam on -(recon - beta * KL) per valid time step, with BPTT chunks.

    Within a batch, chunk k+1 starts from the detached final d and z of
    chunk k; the first chunk starts from zeros.  ``train_generative=False``
    freezes theta and only updates the inference parameters.
    """
    dc.set_dtype(config.precision)
    x_dim = train_seqs[0].shape[1]
    if gen is None or inf is None:
        gen, inf = build_model(config, x_dim)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.echo())
    metrics = MetricsLog(out / "metrics.csv" if out else None)
    schedule = AnnealSchedule(config.beta_start, config.beta_increment)
    stores = [inf.params] + ([gen.params] if train_generative else [])
    t0 = time.perf_counter()
    update = 0
    best, best_arrays = None, None
    stop = False
    for epoch in range(config.epochs):
        for batch in make_batches(train_seqs, config.batch_size, seed=config.seed * 100_003 + epoch):
            z_carry = d_carry = None
            for chunk in batch.chunks(config.bptt_chunk):
                if chunk.mask.sum() == 0:
                    break
                beta = anneal_beta(schedule, update)
                with dc.checked(config.checked):
                    br = elbo_sequence(gen, inf, chunk, beta=beta, seed=config.seed, stream=update + 1,
                                       z0=z_carry, d0=d_carry)
                    loss = dc.mul(br.objective, -1.0 / br.n_steps)
                    if not math.isfinite(loss.item()):
                        raise TrainingDiverged(
                            f"non-finite loss at update {update} (beta={beta:.4f}, "
                            f"recon/step={br.recon_per_step!r}, kl/step={br.kl_per_step!r})")
                    dc.backward(loss)
                for store in stores:
                    if config.grad_clip > 0:
                        store.clip_grad_norm(config.grad_clip)
                    store.adam_step(config.learning_rate)
                if not train_generative:
                    gen.params.zero_grad()
                z_carry, d_carry = br.final_z, br.final_d
                metrics.append(dict(kind="train", update=update, epoch=epoch, beta=beta,
                                    train_elbo_per_step=br.per_step, recon=br.recon_per_step,
                                    kl=br.kl_per_step, wallclock_s=time.perf_counter() - t0))
                if progress:
                    progress(metrics.rows[-1])
                update += 1
                if config.max_updates and update >= config.max_updates:
                    stop = True
                    break
                if config.max_minutes and time.perf_counter() - t0 > 60.0 * config.max_minutes:
                    stop = True
                    break
            if stop:
                break
        last_epoch = stop or epoch == config.epochs - 1
        if valid_seqs is not None and ((epoch + 1) % config.valid_every == 0 or last_epoch):
            res = evaluate(gen, inf, valid_seqs, config.eval_batch_size, seed=config.seed)
            row = dict(kind="valid", update=update, epoch=epoch, beta=1.0,
                       train_elbo_per_step=res.per_step, recon=res.recon_per_step,
                       kl=res.kl_per_step, wallclock_s=time.perf_counter() - t0)
            metrics.append(row)
            if progress:
                progress(row)
            if best is None or res.per_step > best:
                best = res.per_step
                best_arrays = model_arrays(gen, inf)
                if out:
                    save_model(out / "best.ckpt", gen, inf, config,
                               {"valid_elbo_per_step": best, "update": update})
        if stop:
            break
    if out:
        save_model(out / "last.ckpt", gen, inf, config, {"update": update})
    if best_arrays is not None:
        load_model_arrays(gen, inf, best_arrays)
    return TrainResult(gen, inf, metrics.rows, best, update)


# --------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    per_step: float
    per_sequence: float
    recon_per_step: float
    kl_per_step: float
    sequence_elbos: np.ndarray
    n_steps: int


def _iter_eval(gen, inf, sequences, batch_size, seed):
    ids = np.arange(len(sequences))
    with dc.no_grad():
        for batch in make_batches(sequences, batch_size, seed=None, ids=ids):
            yield batch, elbo_sequence(gen, inf, batch, beta=1.0, seed=seed, stream=0)


def evaluate(gen, inf, sequences, batch_size: int = 64, seed: int = 0) -> EvalResult:
    """Single-sample ELBO at beta = 1 over a split, reduced in sequence order."""
    if len(sequences) == 0:
        raise ValueError("evaluate: empty split")
    elbos, recon, kl, steps = [], 0.0, 0.0, 0
    for batch, br in _iter_eval(gen, inf, sequences, batch_size, seed):
        elbos.append(br.elbo_per_sequence)
        recon += float(br.recon.sum())
        kl += float(br.kl.sum())
        steps += int(br.mask.sum())
    elbos = np.concatenate(elbos)
    total = float(np.sum(elbos))
    return EvalResult(total / steps, total / len(elbos), recon / steps, kl / steps, elbos, steps)


def diagnose(gen, inf, sequences, batch_size: int = 64, seed: int = 0) -> np.ndarray:
    """Per-timestep mean KL and reconstruction over the sequences alive at t.

    Returns rows ``(t, mean_kl, mean_recon, n_sequences)`` for t = 1..T_max.
    """
    T_max = max(len(s) for s in sequences)
    kl_sum = np.zeros(T_max)
    rec_sum = np.zeros(T_max)
    count = np.zeros(T_max)
    for batch, br in _iter_eval(gen, inf, sequences, batch_size, seed):
        T = batch.T
        kl_sum[:T] += br.kl.sum(axis=0)
        rec_sum[:T] += br.recon.sum(axis=0)
        count[:T] += br.mask.sum(axis=0)
    t = np.arange(1, T_max + 1)
    return np.column_stack([t, kl_sum / count, rec_sum / count, count])
