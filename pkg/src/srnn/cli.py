"""Command-line entry point: train, eval, sample, diagnose, oracle-check.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 failed acceptance check.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import ConfigError, load_config
from .datapipe import DataError, debinarize_step, load_sequences
from .generative import generate
from .objective import TrainingDiverged, diagnose, evaluate, load_model, train

log = logging.getLogger("srnn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
DIAGNOSE_VERSION = 1
SAMPLES_VERSION = 1


class UsageError(Exception):
    pass


def _dataset_path(args, config) -> str:
    path = getattr(args, "dataset", None) or config.dataset
    if not path:
        raise UsageError("no dataset given (set dataset=PATH in the config or pass --dataset)")
    if not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    return path


def cmd_train(args) -> int:
    config = load_config(args.config, args.overrides)
    path = _dataset_path(args, config)
    train_seqs = load_sequences(path, "train")
    try:
        valid_seqs = load_sequences(path, "valid")
    except KeyError:
        valid_seqs = None
    out = Path(config.out_dir)
    log.info("training %d sequences -> %s", len(train_seqs), out)

    def progress(row):
        if row["kind"] == "valid":
            log.info("update %d valid ELBO/step %.4f", row["update"], row["train_elbo_per_step"])

    res = train(config, train_seqs, valid_seqs, out_dir=out, progress=progress)
    if not args.no_plot:
        from .plotting import plot_training_curve
        plot_training_curve(res.rows, out / "training_curve.png")
    best = "nan" if res.best_valid is None else repr(res.best_valid)
    print(f"TRAIN updates={res.updates} best_valid_elbo_per_step={best} out_dir={out}")
    return EXIT_OK


def _load(args):
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    return load_model(args.checkpoint)


def cmd_eval(args) -> int:
    gen, inf, config, _ = _load(args)
    seqs = load_sequences(_dataset_path(args, config), args.split)
    res = evaluate(gen, inf, seqs, args.batch_size, seed=args.seed)
    print(f"split {args.split}: {len(seqs)} sequences, {res.n_steps} steps")
    print(f"ELBO per step      {res.per_step:.6f}")
    print(f"ELBO per sequence  {res.per_sequence:.6f}")
    print(f"  recon per step   {res.recon_per_step:.6f}")
    print(f"  KL per step      {res.kl_per_step:.6f}")
    print(f"RESULT split={args.split} elbo_per_step={res.per_step!r} "
          f"elbo_per_sequence={res.per_sequence!r} recon_per_step={res.recon_per_step!r} "
          f"kl_per_step={res.kl_per_step!r} n_sequences={len(seqs)} n_steps={res.n_steps}")
    return EXIT_OK


def cmd_sample(args) -> int:
    gen, _, _, _ = _load(args)
    if args.steps < 1 or args.n < 1:
        raise UsageError("--steps and --n must be >= 1")
    s = generate(gen, args.steps, args.n, seed=args.seed)
    with open(args.out, "w", newline="") as fh:
        if gen.dims.emission == "bernoulli":
            fh.write(f"# srnn-samples v{SAMPLES_VERSION} pianoroll: one line per step, "
                     "active MIDI pitches, '-' for silence\n")
            for i in range(args.n):
                fh.write(f"sequence {i}\n")
                for step in s.x[i]:
                    pitches = debinarize_step(step)
                    fh.write((" ".join(map(str, pitches)) if pitches else "-") + "\n")
        else:
            fh.write(f"# srnn-samples v{SAMPLES_VERSION} frames\n")
            w = csv.writer(fh)
            w.writerow(["sample", "t"] + [f"x{j}" for j in range(gen.dims.x_dim)])
            for i in range(args.n):
                for t, row in enumerate(s.x[i], start=1):
                    w.writerow([i, t] + [repr(float(v)) for v in row])
    print(f"SAMPLE n={args.n} steps={args.steps} out={args.out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    gen, inf, config, _ = _load(args)
    seqs = load_sequences(_dataset_path(args, config), args.split)
    rows = diagnose(gen, inf, seqs, args.batch_size, seed=args.seed)
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        fh.write(f"# srnn-diagnose v{DIAGNOSE_VERSION} split={args.split}\n")
        w = csv.writer(fh)
        w.writerow(["t", "mean_kl", "mean_recon", "n_sequences"])
        for t, kl, rec, n in rows:
            w.writerow([int(t), repr(float(kl)), repr(float(rec)), int(n)])
    msg = f"DIAGNOSE rows={len(rows)} csv={out}"
    if not args.no_plot:
        from .plotting import plot_kl_trace
        png = out.with_suffix(".png")
        plot_kl_trace(rows, png, title=f"average KL per time step ({args.split})")
        msg += f" png={png}"
    print(msg)
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    from .checks import run_oracle_suite

    results = run_oracle_suite(seed=args.seed, quick=args.quick)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"ORACLE {'PASS' if ok else 'FAIL'} {sum(r.passed for r in results)}/{len(results)}")
    return EXIT_OK if ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoints and metrics")
    t.add_argument("--config", help="key = value file")
    t.add_argument("--dataset", help="overrides the config's dataset path")
    t.add_argument("--no-plot", action="store_true", help="skip the training-curve PNG")
    t.add_argument("overrides", nargs="*", metavar="key=value")
    t.set_defaults(func=cmd_train)

    def model_cmd(name, func, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("checkpoint")
        c.add_argument("--seed", type=int, default=0)
        c.set_defaults(func=func)
        return c

    e = model_cmd("eval", cmd_eval, "ELBO of a split")
    d = model_cmd("diagnose", cmd_diagnose, "per-time-step KL and reconstruction CSV")
    for c in (e, d):
        c.add_argument("--split", default="test")
        c.add_argument("--dataset")
        c.add_argument("--batch-size", type=int, default=64)
    d.add_argument("--out", required=True, help="CSV path; the PNG goes next to it")
    d.add_argument("--no-plot", action="store_true")

    s = model_cmd("sample", cmd_sample, "ancestral samples")
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--out", required=True)

    o = sub.add_parser("oracle-check", help="linear-Gaussian oracle suite")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--quick", action="store_true", help="smaller budgets")
    o.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, dc.NonFiniteError, ValueError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
