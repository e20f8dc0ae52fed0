"""Three-stage AVATAR training with ablation switches.

Stage 1 fits the autoencoder on reconstruction alone, stage 2 fits the
supervisor on the frozen autoencoder's reconstructions, and stage 3
alternates ``ratio`` joint autoencoder/supervisor updates (phase A) with one
discriminator update (phase B).

Progress is tracked at the granularity of one stage-1/2 iteration or one
stage-3 scheduling unit, so a :class:`Trainer` can be stopped after any
number of steps, checkpointed and resumed with identical results.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, SeededRng, Tensor
from .data import sample_batch
from .losses import (
    LossBreakdown,
    combined_ae_loss,
    discriminator_loss,
    distribution_loss,
    generator_loss,
    mean_loss,
    recon_loss,
    shifted_supervision_loss,
    std_loss,
)
from .nets import AvatarModel, init_model

log = logging.getLogger(__name__)

NETWORKS = ("encoder", "decoder", "supervisor", "discriminator")


class TrainingDiverged(RuntimeError):
    def __init__(self, stage, iteration, name, value, detail=None):
        msg = detail or f"non-finite {name}={value}"
        super().__init__(f"{msg} at stage {stage}, iteration {iteration}")
        self.stage = stage
        self.iteration = iteration


@dataclass
class TrainConfig:
    stage1_iters: int = 2000
    stage2_iters: int = 2000
    stage3_iters: int = 5000
    batch_size: int = 128
    hidden_size: int = 24
    num_layers: int = 3
    latent_dim: int = 24
    learning_rate: float = 1e-3
    seed: int = 0
    ratio: int = 2
    disable_al: bool = False
    disable_dl: bool = False
    disable_jt: bool = False
    disable_rg: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("stage1_iters", "stage2_iters", "stage3_iters"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("batch_size", "hidden_size", "num_layers", "latent_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.ratio < 1:
            raise ValueError("ratio must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TrainingPlan:
    run_stage2: bool
    use_supervisor: bool
    use_distribution_loss: bool
    joint: bool
    batchnorm: bool

    @property
    def refine(self):
        return self.use_supervisor


def apply_ablation(config: TrainConfig) -> TrainingPlan:
    return TrainingPlan(
        run_stage2=not config.disable_al,
        use_supervisor=not config.disable_al,
        use_distribution_loss=not config.disable_dl,
        joint=not config.disable_jt,
        batchnorm=not config.disable_rg,
    )


@dataclass
class LogRecord:
    stage: int
    iter: int
    losses: LossBreakdown


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    COLUMNS = ["stage", "iter"] + LossBreakdown.columns()

    def append(self, stage, iteration, losses):
        self.records.append(LogRecord(stage, iteration, losses))

    def extend(self, other):
        self.records.extend(other.records)

    def __len__(self):
        return len(self.records)

    def stage(self, s):
        return [r for r in self.records if r.stage == s]

    def column(self, name, stage=None):
        recs = self.records if stage is None else self.stage(stage)
        return np.array([getattr(r.losses, name) for r in recs])

    def rows(self):
        for r in self.records:
            yield [r.stage, r.iter] + [getattr(r.losses, c) for c in LossBreakdown.columns()]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows():
                w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])

    @classmethod
    def from_csv(cls, path):
        out = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != cls.COLUMNS:
                raise ValueError(f"{path}: unexpected trainlog header {header}")
            for row in reader:
                out.append(int(row[0]), int(row[1]), LossBreakdown(*map(float, row[2:])))
        return out


@contextlib.contextmanager
def trainable(model: AvatarModel, *names):
    """Only the named networks' parameters require grad inside the block."""
    saved = {}
    for name, net in model.networks().items():
        for p in net.parameters():
            saved[id(p)] = (p, p.requires_grad)
            p.requires_grad = name in names
    try:
        yield
    finally:
        for p, flag in saved.values():
            p.requires_grad = flag


def _finite(stage, iteration, **values):
    for name, v in values.items():
        v = float(v.data) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(v):
            raise TrainingDiverged(stage, iteration, name, v)


def _val(x):
    return float(x.data) if isinstance(x, Tensor) else float(x)


class Trainer:
    """Owns the optimizers, RNG and progress counters of one training run."""

    def __init__(self, model: AvatarModel, data, config: TrainConfig, rng: SeededRng | None = None):
        self.model = model
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != model.n_features:
            raise ValueError(f"training data shape {self.data.shape} does not match model features")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("training data contains non-finite values")
        if config.batch_size > len(self.data):
            raise ValueError(f"batch size {config.batch_size} exceeds {len(self.data)} training samples")
        self.config = config
        self.plan = apply_ablation(config)
        if self.plan.batchnorm != bool(model.encoder.batchnorm_layers()):
            raise ValueError("model batch-norm layout does not match disable_rg")
        self.rng = rng if rng is not None else SeededRng(config.seed)
        model.seq_len = self.data.shape[1]
        lr = config.learning_rate
        self.optimizers = {
            name: Adam(net.parameters(), lr=lr) for name, net in model.networks().items()
        }
        self.stage = 1
        self.iteration = 0
        self.phase_a_steps = 0
        self.phase_b_steps = 0
        self.log = TrainLog()

    # -- schedule ---------------------------------------------------------

    def stage_length(self, stage):
        c = self.config
        if stage == 1:
            return c.stage1_iters
        if stage == 2:
            return c.stage2_iters if self.plan.run_stage2 else 0
        if stage == 3:
            return c.stage3_iters
        return 0

    @property
    def done(self):
        return self.stage > 3

    def _advance(self):
        while not self.done and self.iteration >= self.stage_length(self.stage):
            self.stage += 1
            self.iteration = 0

    def run(self, max_steps=None, until_stage=None) -> TrainLog:
        """Run remaining steps (all, or at most ``max_steps``); returns the records produced."""
        new = TrainLog()
        steps = 0
        self._advance()
        while not self.done:
            if until_stage is not None and self.stage > until_stage:
                break
            if max_steps is not None and steps >= max_steps:
                break
            self.iteration += 1
            try:
                if self.stage == 1:
                    losses = self.stage1_step()
                elif self.stage == 2:
                    losses = self.stage2_step()
                else:
                    losses = self.stage3_unit()
            except ad.DomainError as exc:
                # NaN/Inf activations surface as domain errors inside the graph
                raise TrainingDiverged(self.stage, self.iteration, "activation", None, str(exc)) from exc
            self.log.append(self.stage, self.iteration, losses)
            new.append(self.stage, self.iteration, losses)
            steps += 1
            self._advance()
        if self.done:
            self.model.trained = True
        return new

    # -- steps ------------------------------------------------------------

    def _batch(self):
        return Tensor(sample_batch(self.data, self.config.batch_size, self.rng))

    def _prior(self, like_shape):
        n, t = like_shape[0], like_shape[1]
        return Tensor(self.rng.normal((n, t, self.model.latent_dim)))

    def _update(self, loss, *names):
        for n in names:
            self.optimizers[n].zero_grad()
        ad.backward(loss)
        for n in names:
            self.optimizers[n].step()

    def stage1_step(self):
        m = self.model
        x = self._batch()
        with trainable(m, "encoder", "decoder"):
            x_ae = m.decode(m.encode(x))
            l_r = recon_loss(x, x_ae)
            _finite(1, self.iteration, l_r=l_r)
            self._update(l_r, "encoder", "decoder")
        return LossBreakdown(l_r=_val(l_r))

    def stage2_step(self):
        m = self.model
        x = self._batch()
        if x.shape[1] < 3:
            raise ValueError("supervisor training needs sequences with T >= 3")
        with ad.no_grad():
            x_ae = m.decode(m.encode(x, update_stats=False), update_stats=False)
        x_ae = Tensor(x_ae.data)
        with trainable(m, "supervisor"):
            l_s = shifted_supervision_loss(m.supervise(x_ae), x_ae)
            _finite(2, self.iteration, l_s=l_s)
            self._update(l_s, "supervisor")
        v = _val(l_s)
        return LossBreakdown(l_s=v, l_ae=v)

    def stage3_unit(self):
        for _ in range(self.config.ratio):
            parts = self.phase_a_step()
        parts.l_ad_disc = self.phase_b_step()
        return parts

    def phase_a_step(self):
        m, plan = self.model, self.plan
        it = self.iteration
        x = self._batch()
        z_hat = self._prior(x.shape)
        zero = Tensor(0.0)
        updated = ["encoder", "decoder"] + (["supervisor"] if plan.use_supervisor else [])
        with trainable(m, *updated):
            z = m.encode(x)
            x_ae = m.decode(z)
            l_r = recon_loss(x, x_ae)
            l_gen = generator_loss(m.discriminate(z))
            if plan.use_distribution_loss:
                l_mean, l_std = mean_loss(z, z_hat), std_loss(z, z_hat)
                l_d = l_mean + l_std
            else:
                l_mean = l_std = l_d = zero

            if not plan.use_supervisor:
                l_s = zero
                l_r_joint = l_r
                total = combined_ae_loss(LossBreakdown(l_r_joint=l_r_joint, l_ad_gen=l_gen, l_s=l_s, l_d=l_d))
                _finite(3, it, l_ae=total)
                self._update(total, "encoder", "decoder")
            elif plan.joint:
                x_sup = m.supervise(x_ae)
                # L_S reaches the autoencoder through the supervisor's input
                # only; letting it also move the targets rewards flattening
                # x_ae into an easily predicted sequence
                l_s = shifted_supervision_loss(x_sup, Tensor(x_ae.data))
                l_r_joint = l_r + recon_loss(x, x_sup)
                total = combined_ae_loss(LossBreakdown(l_r_joint=l_r_joint, l_ad_gen=l_gen, l_s=l_s, l_d=l_d))
                _finite(3, it, l_ae=total)
                self._update(total, "encoder", "decoder", "supervisor")
            else:
                ae_loss = l_r + l_gen + l_d
                _finite(3, it, ae_loss=ae_loss)
                self._update(ae_loss, "encoder", "decoder")
                x_ae_fixed = Tensor(x_ae.data)
                x_sup = m.supervise(x_ae_fixed)
                l_s = shifted_supervision_loss(x_sup, x_ae_fixed)
                _finite(3, it, l_s=l_s)
                self._update(l_s, "supervisor")
                with ad.no_grad():
                    l_r_joint = l_r.data + recon_loss(x, x_sup).data
        self.phase_a_steps += 1
        parts = LossBreakdown(
            l_r=_val(l_r),
            l_r_joint=_val(l_r_joint),
            l_s=_val(l_s),
            l_mean=_val(l_mean),
            l_std=_val(l_std),
            l_d=_val(l_d),
            l_ad_gen=_val(l_gen),
        )
        parts.l_ae = combined_ae_loss(parts)
        return parts

    def phase_b_step(self):
        m = self.model
        x = self._batch()
        z_hat = self._prior(x.shape)
        with ad.no_grad():
            z = m.encode(x, update_stats=False)
        n = len(z_hat.data)
        with trainable(m, "discriminator"):
            # one pass over [prior; codes]; the discriminator has no batch coupling
            d = m.discriminate(Tensor(np.concatenate([z_hat.data, z.data])))
            l_disc = discriminator_loss(d[:n], d[n:])
            _finite(3, self.iteration, l_ad_disc=l_disc)
            self._update(l_disc, "discriminator")
        self.phase_b_steps += 1
        return _val(l_disc)

    # -- persistence ------------------------------------------------------

    def state_dict(self):
        return {
            "stage": self.stage,
            "iteration": self.iteration,
            "phase_a_steps": self.phase_a_steps,
            "phase_b_steps": self.phase_b_steps,
            "rng": self.rng.get_state(),
        }

    def load_state_dict(self, state):
        self.stage = int(state["stage"])
        self.iteration = int(state["iteration"])
        self.phase_a_steps = int(state["phase_a_steps"])
        self.phase_b_steps = int(state["phase_b_steps"])
        self.rng.set_state(state["rng"])


def _single_stage(stage, model, data, config, trainer):
    trainer = trainer or Trainer(model, data, config)
    if trainer.stage > stage:
        return TrainLog()
    trainer.stage, trainer.iteration = stage, 0
    return trainer.run(until_stage=stage)


def stage1_pretrain_autoencoder(model, data, config, trainer=None) -> TrainLog:
    return _single_stage(1, model, data, config, trainer)


def stage2_pretrain_supervisor(model, data, config, trainer=None) -> TrainLog:
    if np.asarray(data).shape[1] < 3:
        raise ValueError("supervisor training needs sequences with T >= 3")
    return _single_stage(2, model, data, config, trainer)


def stage3_joint_adversarial(model, data, config, trainer=None) -> TrainLog:
    return _single_stage(3, model, data, config, trainer)


def train(data, config: TrainConfig, normalizer=None):
    """Build a model from ``config`` and run all stages; returns ``(model, trainer)``."""
    rng = SeededRng(config.seed)
    model = init_model(config, data.shape[2], rng)
    model.normalizer = normalizer
    trainer = Trainer(model, data, config, rng=rng)
    trainer.run()
    return model, trainer
