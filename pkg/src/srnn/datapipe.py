"""Piano-roll datasets, batching with masks, waveform framing, synthetic SSM data."""

from __future__ import annotations

import json
import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .oracle import Lgssm, sample_lgssm

log = logging.getLogger(__name__)

PITCH_MIN = 21   # A0
PITCH_MAX = 108  # C8
N_NOTES = PITCH_MAX - PITCH_MIN + 1
PIANOROLL_FORMAT = "srnn-pianoroll"
PIANOROLL_VERSION = 1
SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    pass


@dataclass
class PianoRollDataset:
    """Splits of sequences; each step is a list of active MIDI pitches."""

    splits: dict
    source: str = ""

    def __post_init__(self):
        for name, seqs in self.splits.items():
            for i, seq in enumerate(seqs):
                for t, step in enumerate(seq):
                    for p in step:
                        if not isinstance(p, (int, np.integer)) or not PITCH_MIN <= p <= PITCH_MAX:
                            raise DataError(f"{name}[{i}] step {t}: pitch {p!r} outside "
                                            f"[{PITCH_MIN}, {PITCH_MAX}]")

    def arrays(self, split: str) -> list[np.ndarray]:
        if split not in self.splits:
            raise KeyError(f"split {split!r} not in dataset (have {sorted(self.splits)})")
        return [binarize_sequence(seq) for seq in self.splits[split]]

    def counts(self) -> dict:
        return {name: (len(seqs), int(sum(len(s) for s in seqs))) for name, seqs in self.splits.items()}


def binarize_step(pitches) -> np.ndarray:
    v = np.zeros(N_NOTES)
    for p in pitches:
        if not PITCH_MIN <= int(p) <= PITCH_MAX:
            raise DataError(f"pitch {p} outside [{PITCH_MIN}, {PITCH_MAX}]")
        v[int(p) - PITCH_MIN] = 1.0
    return v


def binarize_sequence(seq) -> np.ndarray:
    if len(seq) == 0:
        return np.zeros((0, N_NOTES))
    return np.stack([binarize_step(step) for step in seq])


def debinarize_step(v) -> list[int]:
    return [int(i) + PITCH_MIN for i in np.flatnonzero(np.asarray(v) > 0.5)]


def load_pianoroll(path) -> PianoRollDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != PIANOROLL_FORMAT:
        raise DataError(f"{path}: missing format tag {PIANOROLL_FORMAT!r}")
    if doc.get("version") != PIANOROLL_VERSION:
        raise DataError(f"{path}: unsupported version {doc.get('version')!r}")
    splits = doc.get("splits")
    if not isinstance(splits, dict):
        raise DataError(f"{path}: 'splits' must be an object")
    for name, seqs in splits.items():
        if not isinstance(seqs, list) or not all(isinstance(s, list) and all(isinstance(st, list) for st in s)
                                                 for s in seqs):
            raise DataError(f"{path}: split {name!r} must be a list of sequences of pitch lists")
    ds = PianoRollDataset(splits, doc.get("source", ""))
    for name, (n, steps) in ds.counts().items():
        log.info("split %s: %d sequences, %d steps", name, n, steps)
    return ds


def save_pianoroll(dataset: PianoRollDataset, path) -> None:
    doc = {"format": PIANOROLL_FORMAT, "version": PIANOROLL_VERSION, "source": dataset.source,
           "splits": {k: [[sorted(int(p) for p in step) for step in seq] for seq in v]
                      for k, v in dataset.splits.items()}}
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def convert_pickle(pickle_path, out_path) -> PianoRollDataset:
    """Convert the widely distributed piano-roll pickles.

    Those files hold ``{'train': [...], 'valid': [...], 'test': [...]}`` where
    each sequence is a list of time steps and each step a tuple of MIDI
    pitch numbers (21..108), which maps one-to-one onto this format.
    """
    with open(pickle_path, "rb") as fh:
        raw = pickle.load(fh, encoding="latin1")
    splits = {k: [[[int(p) for p in step] for step in seq] for seq in raw[k]] for k in SPLITS if k in raw}
    ds = PianoRollDataset(splits, source=f"converted from {Path(pickle_path).name}")
    save_pianoroll(ds, out_path)
    return ds


def convert_music21_chorales(out_path, seed: int = 0, fractions=(0.6, 0.2, 0.2)) -> PianoRollDataset:
    """Rebuild a Bach-chorale piano roll from the music21 corpus.

    Each chorale is sampled once per quarter note (the pitches sounding at
    that onset), duplicates are dropped and the set is split by a seeded
    shuffle.  Needs the optional ``music21`` package.
    """
    from music21 import corpus  # optional dependency

    seen, seqs = set(), []
    for score in corpus.chorales.Iterator(returnType="stream"):
        if score is None or len(score.parts) != 4:
            continue
        seq = quarter_note_roll(score)
        key = tuple(tuple(s) for s in seq)
        if len(seq) >= 8 and key not in seen:
            seen.add(key)
            seqs.append(seq)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(seqs))
    n_train = int(round(fractions[0] * len(seqs)))
    n_valid = int(round(fractions[1] * len(seqs)))
    picks = {"train": order[:n_train], "valid": order[n_train:n_train + n_valid],
             "test": order[n_train + n_valid:]}
    ds = PianoRollDataset({k: [seqs[i] for i in sorted(v)] for k, v in picks.items()},
                          source="music21 Bach chorale corpus, quarter-note grid")
    save_pianoroll(ds, out_path)
    return ds


def quarter_note_roll(score) -> list[list[int]]:
    events = []
    for n in score.flatten().notes:
        start = float(n.offset)
        end = start + float(n.quarterLength)
        for p in n.pitches:
            events.append((start, end, int(p.midi)))
    if not events:
        return []
    horizon = max(e for _, e, _ in events)
    steps = []
    for k in range(int(np.floor(horizon))):
        active = sorted({p for s, e, p in events if s <= k < e and PITCH_MIN <= p <= PITCH_MAX})
        steps.append(active)
    return steps


SEQUENCES_FORMAT = "srnn-sequences-v1"


def save_sequences_npz(splits: dict, path) -> None:
    """Real-valued splits (lists of ``[T, width]`` arrays) as one ``.npz`` archive."""
    arrays = {"format": np.array(SEQUENCES_FORMAT)}
    for name, seqs in splits.items():
        for i, s in enumerate(seqs):
            arrays[f"{name}_{i:06d}"] = np.asarray(s, dtype=float)
    np.savez(path, **arrays)


def load_sequences(path, split: str) -> list[np.ndarray]:
    """One split as arrays, from a piano-roll ``.json`` or a ``.npz`` archive."""
    path = Path(path)
    if path.suffix != ".npz":
        return load_pianoroll(path).arrays(split)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    with np.load(path) as z:
        if "format" not in z.files or str(z["format"]) != SEQUENCES_FORMAT:
            raise DataError(f"{path}: missing format tag {SEQUENCES_FORMAT!r}")
        keys = sorted(k for k in z.files if k.rsplit("_", 1)[0] == split)
        if not keys:
            raise KeyError(f"split {split!r} not in {path}")
        return [z[k] for k in keys]


@dataclass
class SequenceBatch:
    """Padded batch: x and u are [batch, T_max, width], mask is [batch, T_max]."""

    x: np.ndarray
    u: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.lengths))

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]

    @property
    def T(self) -> int:
        return self.x.shape[1]

    def window(self, start: int, stop: int) -> "SequenceBatch":
        lengths = np.clip(self.lengths - start, 0, stop - start)
        return SequenceBatch(self.x[:, start:stop], self.u[:, start:stop], self.mask[:, start:stop],
                             lengths, self.ids)

    def chunks(self, length: int):
        """Consecutive time windows of ``length`` steps (the last may be shorter)."""
        if length <= 0 or length >= self.T:
            yield self
            return
        for start in range(0, self.T, length):
            yield self.window(start, min(start + length, self.T))


def shift_inputs(x: np.ndarray) -> np.ndarray:
    """u_t = x_{t-1}, u_1 = 0, along axis -2."""
    u = np.zeros_like(x)
    u[..., 1:, :] = x[..., :-1, :]
    return u


def pad_batch(seqs, ids=None, T_max: int | None = None) -> SequenceBatch:
    lengths = np.array([len(s) for s in seqs], dtype=int)
    width = seqs[0].shape[1]
    T = int(lengths.max()) if T_max is None else int(T_max)
    if T < lengths.max():
        raise ValueError("pad_batch: T_max shorter than a sequence")
    x = np.zeros((len(seqs), T, width))
    mask = np.zeros((len(seqs), T))
    for i, s in enumerate(seqs):
        x[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    ids = np.arange(len(seqs)) if ids is None else np.asarray(ids)
    return SequenceBatch(x, shift_inputs(x), mask, lengths, ids)


def make_batches(sequences, batch_size: int, seed: int | None = None, ids=None):
    """Yield padded batches; shuffled by ``seed`` unless it is None."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(sequences)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        pick = order[start:start + batch_size]
        yield pad_batch([sequences[i] for i in pick], ids[pick])


def frame_waveform(samples, frame: int = 200, mean: float | None = None,
                   std: float | None = None) -> np.ndarray:
    """Normalize by global statistics and cut into non-overlapping frames.

    ``mean``/``std`` default to the statistics of ``samples`` itself; pass
    the training-set values when framing validation or test audio.  A
    trailing partial frame is dropped.
    """
    if frame < 1:
        raise ValueError("frame must be >= 1")
    s = np.asarray(samples, dtype=float).ravel()
    mean = float(np.mean(s)) if mean is None else float(mean)
    std = float(np.std(s)) if std is None else float(std)
    if std == 0.0:
        raise DataError("frame_waveform: zero standard deviation")
    s = (s - mean) / std
    n = len(s) // frame
    return s[:n * frame].reshape(n, frame)


@dataclass
class NonlinearSsm:
    """z_t = tanh(A z_{t-1}) + w, x_t = C z_t + v with diagonal Q and R; z_0 = 0."""

    A: np.ndarray
    Q: np.ndarray
    C: np.ndarray
    R: np.ndarray

    def sample(self, n: int, T: int, rng: np.random.Generator):
        A, C = np.asarray(self.A), np.asarray(self.C)
        k, m = A.shape[0], C.shape[0]
        z = np.zeros((n, T, k))
        x = np.zeros((n, T, m))
        prev = np.zeros((n, k))
        for t in range(T):
            prev = np.tanh(prev @ A.T) + np.sqrt(self.Q) * rng.standard_normal((n, k))
            z[:, t] = prev
            x[:, t] = prev @ C.T + np.sqrt(self.R) * rng.standard_normal((n, m))
        return x, z


@dataclass
class SynthDataset:
    x: np.ndarray
    z: np.ndarray
    model: object

    def sequences(self) -> list[np.ndarray]:
        return list(self.x)


def synth_ssm_data(model, n_sequences: int, T: int, seed: int = 0) -> SynthDataset:
    """Ancestral samples from an Lgssm or NonlinearSsm, kept with the generating model."""
    rng = np.random.default_rng(seed)
    if isinstance(model, Lgssm):
        x, z = sample_lgssm(model, n_sequences, T, rng)
    elif isinstance(model, NonlinearSsm):
        x, z = model.sample(n_sequences, T, rng)
    else:
        raise TypeError(f"synth_ssm_data: unsupported model {type(model).__name__}")
    return SynthDataset(x, z, model)
