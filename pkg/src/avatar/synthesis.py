"""Sampling synthetic sequences from a trained model."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .data import denormalize  # noqa: F401  (re-exported for callers)


def sample_prior(shape, rng):
    """I.i.d. standard normal latent sequences of shape ``(N, T, H)``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"prior shape must be three positive extents, got {shape}")
    return rng.normal(shape)


def generate(model, n, rng, refine=False, seq_len=None, allow_untrained=False, batch_size=512):
    """Decode prior samples; the decoder itself is the generative model.

    ``refine=True`` additionally passes the decoded sequences through the
    supervisor.  Its output blends the current step with one- and two-step
    forecasts, so it is smoother than the data; it is kept as an option.
    Returns normalized sequences in (0, 1).  Batch norm runs in inference
    mode, so generation never touches parameters or running statistics.
    Refinement is forced off for models trained without the supervisor.
    """
    if not model.trained and not allow_untrained:
        raise ValueError("generate: model has not been trained")
    T = seq_len or model.seq_len
    if not T:
        raise ValueError("generate: sequence length unknown; pass seq_len")
    if n < 1:
        raise ValueError("generate: n must be positive")
    if model.config is not None and model.config.disable_al:
        refine = False
    z = sample_prior((n, T, model.latent_dim), rng)
    return decode_latents(model, z, refine=refine, batch_size=batch_size)


def decode_latents(model, z, refine=False, batch_size=512):
    out = []
    with ad.no_grad():
        for start in range(0, len(z), batch_size):
            x = model.decode(z[start : start + batch_size], training=False)
            if refine:
                x = model.supervise(x, training=False)
            out.append(x.data)
    return np.concatenate(out, axis=0)
