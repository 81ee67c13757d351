"""Hinge adversarial, feature-matching, perceptual and KL losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    feature_match: float = 10.0
    perceptual: float = 10.0
    kl: float = 0.05


def _logits(outputs):
    return [logits for logits, _ in outputs]


def d_hinge_loss(real_outputs, fake_outputs):
    """mean(relu(1 - D(real))) + mean(relu(1 + D(fake))), averaged over scales."""
    losses = [
        F.relu(1 - r).mean() + F.relu(1 + f).mean()
        for r, f in zip(_logits(real_outputs), _logits(fake_outputs))
    ]
    return torch.stack(losses).mean()


def g_hinge_loss(fake_outputs):
    return torch.stack([-f.mean() for f in _logits(fake_outputs)]).mean()


def feature_matching_loss(real_outputs, fake_outputs):
    """Mean over scales and layers of L1 between real (detached) and fake features."""
    terms = []
    for (_, real_feats), (_, fake_feats) in zip(real_outputs, fake_outputs):
        for rf, ff in zip(real_feats, fake_feats):
            terms.append(F.l1_loss(ff, rf.detach()))
    return torch.stack(terms).mean()


def kl_divergence(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims, averaged over the batch."""
    kl = -0.5 * torch.sum(1 + logvar - mu.pow(2) - logvar.exp(), dim=-1)
    return kl.mean()


def perceptual_loss(extractor, real, fake):
    """L1 between feature lists from a user-supplied extractor (e.g. a pretrained CNN)."""
    real_feats = extractor(real)
    fake_feats = extractor(fake)
    terms = [F.l1_loss(f, r.detach()) for r, f in zip(real_feats, fake_feats)]
    return torch.stack(terms).mean()


def loss_suite(real_outputs, fake_outputs, latent=None, weights=LossWeights(),
               real=None, fake=None, extractor=None):
    """All losses for one step as a dict of scalar tensors.

    ``real_outputs``/``fake_outputs`` are discriminator outputs; for the
    generator terms ``fake_outputs`` must keep its graph to the generator.
    ``latent`` is ``(mu, logvar)`` in VAE mode.
    """
    zero = fake_outputs[0][0].new_zeros(())
    out = {
        "d_loss": d_hinge_loss(real_outputs, fake_outputs),
        "g_adv": g_hinge_loss(fake_outputs),
        "feature_match": feature_matching_loss(real_outputs, fake_outputs),
        "perceptual": perceptual_loss(extractor, real, fake) if extractor is not None else zero,
        "kl": kl_divergence(*latent) if latent is not None else zero,
    }
    out["g_total"] = (
        out["g_adv"]
        + weights.feature_match * out["feature_match"]
        + weights.perceptual * out["perceptual"]
        + weights.kl * out["kl"]
    )
    return out
