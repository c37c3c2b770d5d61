"""Adversarial losses for plain GANs and creative (style-ambiguous) GANs.

Every loss is written so that its owner *descends* it. The discriminator
loss is therefore the negated value function, and the generator's realness
term comes in a saturating form (literal ``log(1 - D(G(z)))``) and the
default non-saturating form (``-log D(G(z))``).

Expectations are minibatch means. Probabilities are clamped to
``[PROB_EPS, 1 - PROB_EPS]`` before every logarithm.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch

from .errors import DegenerateK, EmptyBatch, LabelOutOfRange
from .models import DiscriminatorOutput

PROB_EPS = 1e-7


class Side(enum.Enum):
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"


class GeneratorMode(enum.Enum):
    SATURATING = "saturating"
    NON_SATURATING = "non_saturating"


@dataclass
class LossBreakdown:
    """``total == realness_term + class_term + ambiguity_term``."""

    total: torch.Tensor
    realness_term: torch.Tensor
    class_term: torch.Tensor
    ambiguity_term: torch.Tensor
    side: Side

    def as_floats(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "realness_term": float(self.realness_term.detach()),
            "class_term": float(self.class_term.detach()),
            "ambiguity_term": float(self.ambiguity_term.detach()),
        }


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def _realness(out) -> torch.Tensor:
    p = out.realness if isinstance(out, DiscriminatorOutput) else torch.as_tensor(out)
    if p.numel() == 0:
        raise EmptyBatch("loss needs at least one sample")
    return _clamp(p)


def _zero(like: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=like.dtype)


def _breakdown(side: Side, realness, class_term=None, ambiguity=None) -> LossBreakdown:
    class_term = _zero(realness) if class_term is None else class_term
    ambiguity = _zero(realness) if ambiguity is None else ambiguity
    return LossBreakdown(realness + class_term + ambiguity, realness, class_term, ambiguity, side)


def gan_value(real_out, fake_out) -> torch.Tensor:
    """The two-player value ``E[log D(x)] + E[log(1 - D(G(z)))]``."""
    return torch.log(_realness(real_out)).mean() + torch.log(1 - _realness(fake_out)).mean()


def gan_discriminator_loss(real_out, fake_out) -> LossBreakdown:
    realness = -gan_value(real_out, fake_out)
    return _breakdown(Side.DISCRIMINATOR, realness)


def _generator_realness(fake_out, mode: GeneratorMode) -> torch.Tensor:
    p = _realness(fake_out)
    if GeneratorMode(mode) is GeneratorMode.SATURATING:
        return torch.log(1 - p).mean()
    return -torch.log(p).mean()


def gan_generator_loss(fake_out, mode: GeneratorMode = GeneratorMode.NON_SATURATING) -> LossBreakdown:
    return _breakdown(Side.GENERATOR, _generator_realness(fake_out, mode))


def ambiguity_loss(class_posterior: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of each class probability against the uniform target 1/K.

    Per sample: ``-sum_k [ (1/K) log p_k + (1 - 1/K) log(1 - p_k) ]``,
    averaged over the batch. Its unique minimum on the simplex is the uniform
    posterior, where it equals ``ln K + (K - 1) ln(K / (K - 1))``.
    """
    p = torch.as_tensor(class_posterior)
    if p.dim() != 2:
        raise ValueError("class_posterior must be (batch, K)")
    if p.shape[0] == 0:
        raise EmptyBatch("loss needs at least one sample")
    K = p.shape[1]
    if K < 2:
        raise DegenerateK(f"ambiguity needs K >= 2, got {K}")
    p = _clamp(p)
    a = 1.0 / K
    per_sample = -(a * torch.log(p) + (1 - a) * torch.log(1 - p)).sum(dim=1)
    return per_sample.mean()


def ambiguity_minimum(K: int) -> float:
    if K < 2:
        raise DegenerateK(f"ambiguity needs K >= 2, got {K}")
    return math.log(K) + (K - 1) * math.log(K / (K - 1))


def can_discriminator_loss(real_out: DiscriminatorOutput, labels, fake_out: DiscriminatorOutput) -> LossBreakdown:
    """Realness loss on both batches plus style classification of the real batch.

    The ambiguity term is deliberately absent: only the generator is pushed
    toward class ambiguity.
    """
    if real_out.class_posterior is None:
        raise DegenerateK("CAN discriminator loss needs a class head (K >= 2)")
    labels = torch.as_tensor(labels, dtype=torch.long)
    K = real_out.class_posterior.shape[1]
    if labels.numel() == 0:
        raise EmptyBatch("loss needs at least one sample")
    if labels.min() < 0 or labels.max() >= K:
        raise LabelOutOfRange(f"labels must lie in [0, {K})")
    realness = -gan_value(real_out, fake_out)
    picked = real_out.class_posterior.gather(1, labels.reshape(-1, 1)).squeeze(1)
    class_term = -torch.log(_clamp(picked)).mean()
    return _breakdown(Side.DISCRIMINATOR, realness, class_term=class_term)


def can_generator_loss(fake_out: DiscriminatorOutput, K: int | None = None,
                       mode: GeneratorMode = GeneratorMode.NON_SATURATING) -> LossBreakdown:
    if fake_out.class_posterior is None:
        raise DegenerateK("CAN generator loss needs a class head (K >= 2)")
    if K is not None and fake_out.class_posterior.shape[1] != K:
        raise ValueError(f"posterior has {fake_out.class_posterior.shape[1]} classes, expected {K}")
    return _breakdown(
        Side.GENERATOR,
        _generator_realness(fake_out, mode),
        ambiguity=ambiguity_loss(fake_out.class_posterior),
    )
