"""AVATAR loss terms as differentiable scalars.

Reductions: sequence losses take the Euclidean norm over features at each
step, sum over time and average over the batch.  The distribution losses
compare batch statistics per (step, latent dim), average over latent dims
and sum over time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError

PROB_EPS = 1e-7


@dataclass
class LossBreakdown:
    l_r: float = 0.0
    l_r_joint: float = 0.0
    l_s: float = 0.0
    l_mean: float = 0.0
    l_std: float = 0.0
    l_d: float = 0.0
    l_ad_gen: float = 0.0
    l_ad_disc: float = 0.0
    l_ae: float = 0.0

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def as_dict(self):
        return asdict(self)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _sequence_distance(a, b):
    return ad.mean(ad.tsum(ad.l2norm(a - b, axis=-1), axis=1))


def recon_loss(x, x_ae):
    x, x_ae = ad.as_tensor(x), ad.as_tensor(x_ae)
    _same_shape("recon_loss", x, x_ae)
    return _sequence_distance(x, x_ae)


def joint_recon_loss(x, x_ae, x_sup):
    return recon_loss(x, x_ae) + recon_loss(x, x_sup)


def shifted_supervision_loss(pred, target):
    """One- and two-step-ahead error of supervisor outputs ``pred`` on ``target``.

    ``pred[:, t]`` is compared with ``target[:, t + 1]`` and ``target[:, t + 2]``.
    """
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    _same_shape("supervised_loss", pred, target)
    if pred.ndim != 3 or pred.shape[1] < 3:
        raise ValueError(f"supervised_loss needs T >= 3, got shape {pred.shape}")
    one = _sequence_distance(pred[:, :-1], target[:, 1:])
    two = _sequence_distance(pred[:, :-2], target[:, 2:])
    return one + two


def supervised_loss(x_ae, supervisor, **run_kwargs):
    """Run ``supervisor`` (a stack or any callable) on ``x_ae`` and score its shifted predictions."""
    from .nets import RegularizedGruStack, run_network

    x_ae = ad.as_tensor(x_ae)
    if x_ae.ndim != 3 or x_ae.shape[1] < 3:
        raise ValueError(f"supervised_loss needs T >= 3, got shape {x_ae.shape}")
    if isinstance(supervisor, RegularizedGruStack):
        pred = run_network(supervisor, x_ae, **run_kwargs)
    else:
        pred = supervisor(x_ae)
    return shifted_supervision_loss(pred, x_ae)


def mean_loss(z, z_hat):
    z, z_hat = ad.as_tensor(z), ad.as_tensor(z_hat)
    _same_shape("mean_loss", z, z_hat)
    gap = ad.absolute(ad.mean(z, axis=0) - ad.mean(z_hat, axis=0))
    return ad.tsum(ad.mean(gap, axis=-1))


def _batch_var(z):
    return ad.mean(ad.square(z - ad.mean(z, axis=0, keepdims=True)), axis=0)


def std_loss(z, z_hat):
    """Absolute gap between biased batch variances (no square root is taken)."""
    z, z_hat = ad.as_tensor(z), ad.as_tensor(z_hat)
    _same_shape("std_loss", z, z_hat)
    if z.shape[0] < 2:
        raise ValueError("std_loss needs a batch of at least 2")
    gap = ad.absolute(_batch_var(z) - _batch_var(z_hat))
    return ad.tsum(ad.mean(gap, axis=-1))


def distribution_loss(z, z_hat):
    return mean_loss(z, z_hat) + std_loss(z, z_hat)


def _check_probs(name, p):
    d = p.data
    if np.any(np.isnan(d)) or np.any(d < 0.0) or np.any(d > 1.0):
        raise ValueError(f"adversarial_losses: {name} contains values outside [0, 1]")


def adversarial_losses(d_real, d_fake):
    """Binary cross-entropy pair ``(generator, discriminator)``.

    The discriminator labels prior samples 1 and encoder codes 0; the
    generator (encoder) uses the non-saturating ``-log D(code)`` form.
    """
    d_real, d_fake = ad.as_tensor(d_real), ad.as_tensor(d_fake)
    _check_probs("d_real", d_real)
    _check_probs("d_fake", d_fake)
    pr = ad.clip(d_real, PROB_EPS, 1.0 - PROB_EPS)
    pf = ad.clip(d_fake, PROB_EPS, 1.0 - PROB_EPS)
    gen = -ad.mean(ad.log(pf))
    disc = -ad.mean(ad.log(pr)) - ad.mean(ad.log(1.0 - pf))
    return gen, disc


def generator_loss(d_fake):
    d_fake = ad.as_tensor(d_fake)
    _check_probs("d_fake", d_fake)
    return -ad.mean(ad.log(ad.clip(d_fake, PROB_EPS, 1.0 - PROB_EPS)))


def discriminator_loss(d_real, d_fake):
    return adversarial_losses(d_real, d_fake)[1]


def combined_ae_loss(parts):
    """Unit-weighted sum ``l_r_joint + l_ad_gen + l_s + l_d``.

    ``parts`` may hold floats (a :class:`LossBreakdown`) or tensors.
    """
    return parts.l_r_joint + parts.l_ad_gen + parts.l_s + parts.l_d
