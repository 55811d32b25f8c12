"""Adversarial, matching and total generator objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ContractError, NumericError
from .text import ca_kl_loss, length_mask

EPS = 1e-7


def _check_scores(name, x):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite {name} scores")
    if (x < 0).any() or (x > 1).any():
        raise ContractError(f"{name} scores must lie in (0, 1)")


def _log(x):
    # Forward value uses the [EPS, 1 - EPS] clamp; the gradient is that of log(x)
    # evaluated at the clamped point, so saturated scores still pass gradient.
    xc = x.clamp(EPS, 1 - EPS)
    return torch.log(xc).detach() + (x - x.detach()) / xc.detach()


def _log1m(x):
    return _log(1 - x)


def generator_adv_loss(scores_g, part_scores=None):
    """Non-saturating adversarial loss of one generator stage.

    With part scores (B x 4): -(1/3)[log Dg(I) + log Dg(I, s) + (1/4) sum_k log Dk(I, W)].
    Without them (part branch ablated): -(1/2)[log Dg(I) + log Dg(I, s)].
    """
    _check_scores("global unconditional", scores_g.uncond)
    _check_scores("global conditional", scores_g.cond)
    terms = _log(scores_g.uncond).mean() + _log(scores_g.cond).mean()
    if part_scores is None:
        return -terms / 2
    _check_scores("part", part_scores)
    local = _log(part_scores).mean(0).sum() / part_scores.size(1)
    return -(terms + local) / 3


def global_disc_loss(real, fake):
    for name, s in (("real uncond", real.uncond), ("real cond", real.cond),
                    ("fake uncond", fake.uncond), ("fake cond", fake.cond)):
        _check_scores(name, s)
    return -0.5 * (_log(real.uncond).mean() + _log1m(fake.uncond).mean()
                   + _log(real.cond).mean() + _log1m(fake.cond).mean())


def part_disc_loss(real_parts, fake_parts):
    """Per-part conditional loss averaged over the four parts. Inputs B x 4."""
    _check_scores("real part", real_parts)
    _check_scores("fake part", fake_parts)
    per_part = -_log(real_parts).mean(0) - _log1m(fake_parts).mean(0)
    return per_part.mean()


def _cosine(a, b, dim):
    return F.cosine_similarity(a, b, dim=dim, eps=1e-8)


def word_region_similarity(regions, words, lengths, gamma1=4.0, gamma2=5.0):
    """B_img x B_txt matrix of attention-pooled word-region relevance.

    For caption j and image i each word attends over the image regions
    (softmax of gamma1 * cosine); the caption score aggregates the cosine
    between each word and its region context with a gamma2 log-sum-exp.
    """
    B, D, N = regions.shape
    T = words.size(2)
    wn = F.normalize(words, dim=1, eps=1e-8)                     # B_t x D x T
    rn = F.normalize(regions, dim=1, eps=1e-8)                   # B_i x D x N
    cos = torch.einsum("jdt,idn->ijtn", wn, rn)                  # B_i x B_t x T x N
    attn = torch.softmax(gamma1 * cos, dim=-1)
    context = torch.einsum("ijtn,idn->ijdt", attn, regions)      # B_i x B_t x D x T
    rel = _cosine(context, words[None], dim=2)                   # B_i x B_t x T
    mask = length_mask(lengths, T)[None]                         # 1 x B_t x T
    rel = (gamma2 * rel).masked_fill(~mask, float("-inf"))
    return torch.logsumexp(rel, dim=-1) / gamma2


def damsm_terms(img_regions, img_global, words, sentence, lengths,
                gamma1=4.0, gamma2=5.0, gamma3=10.0):
    """Four cross-entropy terms of the symmetric image-text matching loss.

    ``img_regions`` B x D x N, ``img_global`` B x D, ``words`` B x D x T,
    ``sentence`` B x D. Pair (i, i) is the matched pair.
    """
    B = img_global.size(0)
    if B < 2:
        raise ContractError("matching loss needs a batch of at least 2")
    labels = torch.arange(B, device=img_global.device)
    sent_sim = gamma3 * _cosine(img_global[:, None, :], sentence[None, :, :], dim=-1)
    word_sim = gamma3 * word_region_similarity(img_regions, words, lengths, gamma1, gamma2)
    return {
        "sent_i2t": F.cross_entropy(sent_sim, labels),
        "sent_t2i": F.cross_entropy(sent_sim.t(), labels),
        "word_i2t": F.cross_entropy(word_sim, labels),
        "word_t2i": F.cross_entropy(word_sim.t(), labels),
    }


def damsm_loss(img_regions, img_global, words, sentence, lengths, **gammas):
    return sum(damsm_terms(img_regions, img_global, words, sentence, lengths, **gammas).values())


@dataclass
class LossBreakdown:
    total: torch.Tensor
    adv: list
    cond: float
    damsm: float
    stage_terms: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "adv": list(self.adv),
            "stages": self.stage_terms,
            "cond": self.cond,
            "damsm": self.damsm,
            "total": float(self.total.detach()),
        }


def _finite(name, value):
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not math.isfinite(v):
        raise NumericError(f"non-finite loss term {name!r}")
    return v


def total_generator_loss(adv, cond, damsm, lambda_cond=1.0, lambda_damsm=5.0, stage_terms=None):
    """Sum of per-stage adversarial losses plus the weighted regularizers."""
    adv_values = [_finite(f"adv[{i}]", a) for i, a in enumerate(adv)]
    cond_value = _finite("cond", cond)
    damsm_value = _finite("damsm", damsm)
    total = sum(adv)
    if lambda_cond:
        total = total + lambda_cond * cond
    if lambda_damsm:
        total = total + lambda_damsm * damsm
    if not torch.is_tensor(total):
        total = torch.tensor(float(total))
    return LossBreakdown(total, adv_values, cond_value, damsm_value, stage_terms or [])


__all__ = [
    "EPS", "generator_adv_loss", "global_disc_loss", "part_disc_loss", "damsm_terms",
    "damsm_loss", "word_region_similarity", "LossBreakdown", "total_generator_loss", "ca_kl_loss",
]
