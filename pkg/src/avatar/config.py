"""Experiment configuration: one JSON document, validated before any work starts.

Schema (every key optional except where noted)::

    {
      "seed": 0,
      "output_dir": "runs/sines",
      "dataset": {"kind": "sines", "n": 1000, "seq_len": 24, "dims": 4}
               | {"kind": "csv", "path": "stocks.csv", "source": "stocks",
                  "window": 24, "stride": 1},
      "train": {<TrainConfig fields except seed>},
      "eval": {"repeats": 10, "perplexity": 30, "tsne_iters": 1000,
               "iters": 1500, "batch_size": 128, "n_generate": null},
      "checkpoint_every": 500
    }

Unknown keys at any level are errors.  The top-level ``seed`` drives model
initialization and batch sampling; sine data use ``dataset.seed`` when
given and ``seed`` otherwise.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .autodiff import SeededRng
from .data import RawSeries, generate_sines, load_csv, minmax_normalize, slice_windows
from .evaluation import EvalSettings
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _reject_unknown(section, given, allowed):
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")


def _as_int(section, key, value, minimum):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{section}.{key}: must be >= {minimum}, got {value}")
    return value


@dataclass
class DatasetSpec:
    kind: str = "sines"
    n: int = 1000
    seq_len: int = 24
    dims: int = 4
    seed: int | None = None
    path: str | None = None
    source: str = "custom"
    window: int = 24
    stride: int = 1

    KINDS = ("sines", "csv")

    @classmethod
    def from_dict(cls, d, base_dir="."):
        if not isinstance(d, dict):
            raise ConfigError("dataset: expected an object")
        kind = d.get("kind", "sines")
        if kind == "sines":
            allowed = {"kind", "n", "seq_len", "dims", "seed"}
        elif kind == "csv":
            allowed = {"kind", "path", "source", "window", "stride"}
        else:
            raise ConfigError(f"dataset.kind: expected one of {cls.KINDS}, got {kind!r}")
        _reject_unknown("dataset", d, allowed)
        spec = cls(**d)
        if kind == "sines":
            _as_int("dataset", "n", spec.n, 2)
            _as_int("dataset", "seq_len", spec.seq_len, 3)
            _as_int("dataset", "dims", spec.dims, 1)
            if spec.seed is not None:
                _as_int("dataset", "seed", spec.seed, 0)
        else:
            if not spec.path:
                raise ConfigError("dataset.path: required for kind 'csv'")
            if not os.path.isabs(spec.path):
                spec.path = os.path.normpath(os.path.join(base_dir, spec.path))
            if spec.source not in ("stocks", "energy", "custom"):
                raise ConfigError(f"dataset.source: expected stocks, energy or custom, got {spec.source!r}")
            _as_int("dataset", "window", spec.window, 3)
            _as_int("dataset", "stride", spec.stride, 1)
        return spec

    def to_dict(self):
        keys = ("kind", "n", "seq_len", "dims", "seed") if self.kind == "sines" else (
            "kind", "path", "source", "window", "stride")
        return {k: getattr(self, k) for k in keys}


@dataclass
class EvalSpec:
    repeats: int = 10
    perplexity: float = 30.0
    tsne_iters: int = 1000
    iters: int = 1500
    batch_size: int = 128
    n_generate: int | None = None

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("eval: expected an object")
        _reject_unknown("eval", d, {f.name for f in fields(cls)})
        spec = cls(**d)
        _as_int("eval", "repeats", spec.repeats, 1)
        _as_int("eval", "tsne_iters", spec.tsne_iters, 1)
        _as_int("eval", "iters", spec.iters, 0)
        _as_int("eval", "batch_size", spec.batch_size, 1)
        if spec.n_generate is not None:
            _as_int("eval", "n_generate", spec.n_generate, 2)
        if not isinstance(spec.perplexity, (int, float)) or spec.perplexity < 3:
            raise ConfigError(f"eval.perplexity: must be a number >= 3, got {spec.perplexity!r}")
        spec.perplexity = float(spec.perplexity)
        return spec

    def settings(self):
        return EvalSettings(iters=self.iters, batch_size=self.batch_size)


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    checkpoint_every: int = 500

    TOP_KEYS = ("seed", "output_dir", "dataset", "train", "eval", "checkpoint_every")

    @classmethod
    def from_dict(cls, d, base_dir=".", seed=None, output_dir=None):
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be an object")
        _reject_unknown("config", d, cls.TOP_KEYS)
        master = d.get("seed", 0) if seed is None else seed
        _as_int("config", "seed", master, 0)
        if master >= 2**64:
            raise ConfigError("config.seed: must fit in 64 bits")

        train_d = dict(d.get("train", {}))
        if not isinstance(train_d, dict):
            raise ConfigError("train: expected an object")
        allowed = {f.name for f in fields(TrainConfig)} - {"seed"}
        _reject_unknown("train", train_d, allowed)
        for k, v in train_d.items():
            if k.startswith("disable_"):
                if not isinstance(v, bool):
                    raise ConfigError(f"train.{k}: expected true/false, got {v!r}")
            elif k == "learning_rate":
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"train.learning_rate: expected a number, got {v!r}")
            else:
                _as_int("train", k, v, 0)
        try:
            train = TrainConfig(seed=master, **train_d)
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None

        out = output_dir or d.get("output_dir", "runs/default")
        if not isinstance(out, str) or not out:
            raise ConfigError("config.output_dir: expected a non-empty string")
        if output_dir is None and not os.path.isabs(out):
            out = os.path.normpath(os.path.join(base_dir, out))
        every = _as_int("config", "checkpoint_every", d.get("checkpoint_every", 500), 0)
        return cls(
            seed=master,
            output_dir=out,
            dataset=DatasetSpec.from_dict(d.get("dataset", {}), base_dir),
            train=train,
            eval=EvalSpec.from_dict(d.get("eval", {})),
            checkpoint_every=every,
        )

    @classmethod
    def load(cls, path, seed=None, output_dir=None):
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(raw, os.path.dirname(os.path.abspath(path)), seed, output_dir)

    def to_dict(self):
        """Fully resolved configuration, defaults included."""
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": self.dataset.to_dict(),
            "train": train,
            "eval": asdict(self.eval),
            "checkpoint_every": self.checkpoint_every,
        }


def load_dataset(spec: DatasetSpec, master_seed=0):
    """Materialize the training windows; returns ``(normalized batch, NormalizerState)``.

    Normalization statistics are taken from the whole raw series before
    windowing.  Sine data are min-max scaled like any other source.
    """
    if spec.kind == "sines":
        seed = master_seed if spec.seed is None else spec.seed
        raw = generate_sines(spec.n, spec.seq_len, spec.dims, SeededRng(seed))
        return minmax_normalize(raw)
    series: RawSeries = load_csv(spec.path, spec.source)
    norm, state = minmax_normalize(series)
    return slice_windows(norm, spec.window, spec.stride), state


def sines_config(**train_kw):
    """Programmatic helper: a sines experiment with the given training overrides."""
    return ExperimentConfig.from_dict({"train": train_kw})


__all__ = ["ConfigError", "DatasetSpec", "EvalSpec", "ExperimentConfig", "load_dataset", "sines_config"]
