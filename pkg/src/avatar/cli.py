"""Command-line interface: ``avatar {train,generate,evaluate,ablate,project}``.

Every command is a pure function of its config, input files and seed.
Failures exit nonzero and print ``error[<category>]: <message>`` to stderr:

    2 config      invalid or inconsistent configuration
    3 data        unreadable or incompatible data files
    4 diverged    non-finite loss during training
    5 checkpoint  corrupt, truncated or version-mismatched checkpoint
    6 busy        another process holds the output directory lock
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import fcntl
import json
import os
import sys

from .autodiff import SeededRng
from .checkpoint import CheckpointError, load_model, restore_trainer, save_checkpoint
from .config import ConfigError, EvalSpec, ExperimentConfig, load_dataset
from .data import (
    DataError,
    apply_normalizer,
    denormalize,
    is_samples_csv,
    load_csv,
    minmax_normalize,
    read_samples_csv,
    slice_windows,
    write_samples_csv,
)
from .evaluation import projection_rows, run_full_evaluation, write_projections
from .nets import init_model
from .synthesis import generate
from .training import Trainer, TrainingDiverged

EXIT = {"config": 2, "data": 3, "diverged": 4, "checkpoint": 5, "busy": 6}

VARIANTS = {
    "full": {},
    "wo_al": {"disable_al": True},
    "wo_dl": {"disable_dl": True},
    "wo_jt": {"disable_jt": True},
    "wo_rg": {"disable_rg": True},
}


class CliError(Exception):
    def __init__(self, category, message):
        super().__init__(message)
        self.category = category


class LockBusy(CliError):
    def __init__(self, path):
        super().__init__("busy", f"{path} is locked by another run")


@contextlib.contextmanager
def output_lock(directory):
    """Hold an exclusive advisory lock on ``directory/.lock``."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, ".lock")
    fh = open(path, "a+")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise LockBusy(directory) from None
        yield
    finally:
        fh.close()


def _experiment(args):
    if args.config is None:
        return ExperimentConfig.from_dict({}, ".", args.seed, args.out)
    return ExperimentConfig.load(args.config, seed=args.seed, output_dir=args.out)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- train --------------------------------------------------------------------


def train_experiment(exp: ExperimentConfig, resume=False, max_steps=None, log=print):
    """Run (or resume) training into ``exp.output_dir``; returns the trainer."""
    out = exp.output_dir
    ckpt = os.path.join(out, "model.ckpt")
    data, norm = load_dataset(exp.dataset, exp.seed)
    with output_lock(out):
        _write_json(os.path.join(out, "resolved.json"), exp.to_dict())
        marker = ckpt + ".diverged"
        if resume:
            if not os.path.exists(ckpt):
                raise CliError("checkpoint", f"{ckpt}: nothing to resume")
            trainer = restore_trainer(ckpt, data)
            if trainer.config != exp.train:
                raise CliError("config", "train settings differ from the checkpoint being resumed")
            if os.path.exists(marker):
                os.remove(marker)
        else:
            rng = SeededRng(exp.seed)
            model = init_model(exp.train, data.shape[2], rng)
            model.normalizer = norm
            trainer = Trainer(model, data, exp.train, rng=rng)
            save_checkpoint(ckpt, model, trainer)
        every = exp.checkpoint_every or None
        budget = max_steps
        try:
            while not trainer.done and (budget is None or budget > 0):
                chunk = every if budget is None else min(every or budget, budget)
                new = trainer.run(max_steps=chunk)
                if budget is not None:
                    budget -= len(new)
                save_checkpoint(ckpt, trainer.model, trainer)
                trainer.log.to_csv(os.path.join(out, "trainlog.csv"))
                if not trainer.done:
                    log(f"checkpoint at stage {trainer.stage}, iteration {trainer.iteration}")
        except TrainingDiverged as exc:
            trainer.log.to_csv(os.path.join(out, "trainlog.csv"))
            with open(marker, "w", encoding="utf-8") as fh:
                fh.write(f"{exc}\n")
            raise
        trainer.log.to_csv(os.path.join(out, "trainlog.csv"))
    return trainer


def cmd_train(args):
    exp = _experiment(args)
    trainer = train_experiment(exp, resume=args.resume, max_steps=args.max_steps)
    state = "complete" if trainer.done else f"paused at stage {trainer.stage}, iteration {trainer.iteration}"
    print(f"training {state}; outputs in {exp.output_dir}")


# -- generate -----------------------------------------------------------------


def cmd_generate(args):
    if args.checkpoint:
        ckpt = args.checkpoint
        seed = 0 if args.seed is None else args.seed
    else:
        exp = _experiment(args)
        ckpt = os.path.join(exp.output_dir, "model.ckpt")
        seed = exp.seed
    if not os.path.exists(ckpt):
        raise CliError("checkpoint", f"{ckpt}: checkpoint not found")
    model = load_model(ckpt)
    x = generate(model, args.n, SeededRng(seed), refine=args.refine)
    if not args.normalized:
        if model.normalizer is None:
            raise CliError("checkpoint", f"{ckpt}: no normalizer stored; use --normalized")
        x = denormalize(x, model.normalizer)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(ckpt)), "synthetic.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_samples_csv(out, x)
    print(f"wrote {len(x)} samples to {out}")


# -- evaluate / project -------------------------------------------------------


def _read_batch(path):
    """``(batch, None)`` for a sample CSV, ``(None, values)`` for a raw series."""
    if not os.path.exists(path):
        raise DataError(f"{path}: file not found")
    if is_samples_csv(path):
        return read_samples_csv(path), None
    return None, load_csv(path).values


def load_pair(real_path, synth_path, seed=0):
    """Real and synthetic batches, both scaled by the real data's normalizer.

    When both paths name the same file the data are split into two random
    halves, which gives the real-versus-real reference comparison.
    """
    same = os.path.abspath(real_path) == os.path.abspath(synth_path)
    synth, synth_raw = _read_batch(synth_path)
    if synth_raw is not None:
        raise DataError(f"{synth_path}: expected a sample CSV with sample_id,t columns")
    real, real_raw = _read_batch(real_path)
    if real_raw is not None:
        norm, state = minmax_normalize(real_raw)
        real = slice_windows(norm, synth.shape[1])
    else:
        _, state = minmax_normalize(real.reshape(-1, real.shape[2]))
        real = apply_normalizer(real, state)
    if real.shape[2] != synth.shape[2]:
        raise DataError(f"feature count mismatch: real {real.shape[2]} vs synthetic {synth.shape[2]}")
    if same:
        perm = SeededRng(seed).permutation(len(real))
        half = len(real) // 2
        return real[perm[:half]], real[perm[half : 2 * half]]
    return real, apply_normalizer(synth, state)


def _eval_options(args):
    if args.config is not None:
        exp = _experiment(args)
        return exp.eval, exp.seed, args.out or exp.output_dir
    return EvalSpec(), args.seed or 0, args.out or "."


def cmd_evaluate(args):
    spec, seed, out = _eval_options(args)
    repeats = args.repeats if args.repeats is not None else spec.repeats
    real, synth = load_pair(args.real, args.synth, seed)
    rep = run_full_evaluation(real, synth, repeats=repeats, seed=seed, settings=spec.settings(),
                              perplexity=spec.perplexity, tsne_iters=spec.tsne_iters)
    with output_lock(out):
        rep.write_scores(os.path.join(out, "scores.csv"))
        rep.write_projections(os.path.join(out, "projections.csv"))
    print(f"resemblance {rep.resemblance_mean:.4f} +/- {rep.resemblance_std:.4f}")
    print(f"fidelity    {rep.fidelity_mean:.4f} +/- {rep.fidelity_std:.4f}")


def cmd_project(args):
    spec, seed, out = _eval_options(args)
    real, synth = load_pair(args.real, args.synth, seed)
    rows = projection_rows(real, synth, seed, perplexity=spec.perplexity, tsne_iters=spec.tsne_iters,
                           methods=tuple(args.methods.split(",")))
    with output_lock(out):
        write_projections(rows, os.path.join(out, "projections.csv"))
    print(f"wrote {len(rows)} projected points to {os.path.join(out, 'projections.csv')}")


# -- ablate -------------------------------------------------------------------


def run_ablation(exp: ExperimentConfig, variants, log=print):
    """Train and evaluate each variant with the same seed; returns table rows."""
    data, norm = load_dataset(exp.dataset, exp.seed)
    n = exp.eval.n_generate or len(data)
    rows = []
    for name in variants:
        cfg = dataclasses.replace(exp.train, **VARIANTS[name])
        sub = dataclasses.replace(exp, train=cfg, output_dir=os.path.join(exp.output_dir, name),
                                  checkpoint_every=0)
        trainer = train_experiment(sub, log=lambda *_: None)
        synth = generate(trainer.model, n, SeededRng(exp.seed))
        rep = run_full_evaluation(data, synth, repeats=exp.eval.repeats, seed=exp.seed,
                                  settings=exp.eval.settings(), projections=False)
        rows.append((name, rep.resemblance_mean, rep.resemblance_std, rep.fidelity_mean, rep.fidelity_std))
        log(f"{name}: resemblance {rep.resemblance_mean:.4f}, fidelity {rep.fidelity_mean:.4f}")
    return rows


def write_ablation(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "resemblance_mean", "resemblance_std", "fidelity_mean", "fidelity_std"])
        for name, *vals in rows:
            w.writerow([name] + [repr(float(v)) for v in vals])


def cmd_ablate(args):
    exp = _experiment(args)
    variants = args.variants.split(",")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"--variants: unknown {', '.join(unknown)}; choose from {', '.join(VARIANTS)}")
    rows = run_ablation(exp, variants)
    os.makedirs(exp.output_dir, exist_ok=True)
    with output_lock(exp.output_dir):
        write_ablation(rows, os.path.join(exp.output_dir, "ablation.csv"))


# -- entry point ----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="avatar", description="AVATAR time-series generation")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="experiment JSON file")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", help=out_help)

    t = sub.add_parser("train", help="run the three training stages")
    common(t, "output directory (overrides output_dir)")
    t.add_argument("--resume", action="store_true", help="continue from OUT/model.ckpt")
    t.add_argument("--max-steps", type=int, help="stop after this many steps (resumable)")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample synthetic sequences")
    common(g, "output CSV path (default: next to the checkpoint)")
    g.add_argument("--checkpoint", help="checkpoint file (default: OUTPUT_DIR/model.ckpt from --config)")
    g.add_argument("-n", type=int, default=1000, help="number of sequences")
    g.add_argument("--refine", action="store_true", help="pass decoded sequences through the supervisor")
    g.add_argument("--normalized", action="store_true", help="write values in [0, 1]")
    g.set_defaults(func=cmd_generate)

    for name, func, helptext in (("evaluate", cmd_evaluate, "score synthetic data against real data"),
                                 ("project", cmd_project, "PCA and t-SNE coordinates only")):
        e = sub.add_parser(name, help=helptext)
        common(e, "output directory")
        e.add_argument("--real", required=True, help="real data: sample CSV or raw series CSV")
        e.add_argument("--synth", required=True, help="synthetic sample CSV")
        if name == "evaluate":
            e.add_argument("--repeats", type=int, help="score repetitions (default 10)")
        else:
            e.add_argument("--methods", default="pca,tsne", help="comma-separated: pca,tsne")
        e.set_defaults(func=func)

    a = sub.add_parser("ablate", help="train and score ablation variants")
    common(a, "output directory")
    a.add_argument("--variants", default=",".join(VARIANTS), help="comma-separated variant names")
    a.set_defaults(func=cmd_ablate)
    return p


def _category(exc):
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, TrainingDiverged):
        return "diverged"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, (DataError, OSError, ValueError)):
        return "data"
    return None


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "max_steps", None) is not None and args.max_steps < 1:
        print("error[config]: --max-steps must be positive", file=sys.stderr)
        return EXIT["config"]
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit categories below
        cat = _category(exc)
        if cat is None:
            raise
        print(f"error[{cat}]: {exc}", file=sys.stderr)
        return EXIT[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
