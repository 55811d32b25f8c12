"""Part-based local discriminator and sentence-aware global discriminator."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import SelfCrossAttention, VisaAttention
from .config import AblationFlags, ModelConfig
from .errors import InputError

PART_NAMES = ("head", "torso", "legs", "feet")


def feature_encoder(df, region_dim, n_down):
    """Strided conv stack: R x R image -> (R / 2**n_down) grid of region_dim features."""
    layers = [nn.Conv2d(3, df, 3, 1, 1), nn.LeakyReLU(0.2)]
    ch = df
    for _ in range(n_down):
        nxt = min(ch * 2, region_dim)
        layers += [nn.Conv2d(ch, nxt, 4, 2, 1), nn.LeakyReLU(0.2)]
        ch = nxt
    layers += [nn.Conv2d(ch, region_dim, 3, 1, 1), nn.LeakyReLU(0.2)]
    return nn.Sequential(*layers)


def split_parts(rho):
    """Split a region grid into four equal horizontal bands, top to bottom.

    Returns a tuple (head, torso, legs, feet) of B x N_r x H/4 x W views.
    """
    if rho.dim() != 4:
        raise InputError(f"region grid must be B x N_r x H x W, got {tuple(rho.shape)}")
    H = rho.size(2)
    if H % 4:
        raise InputError(f"grid height {H} is not divisible by 4")
    return tuple(torch.split(rho, H // 4, dim=2))


def merge_parts(parts):
    return torch.cat(parts, dim=2)


@dataclass
class GlobalScores:
    uncond: torch.Tensor    # B
    cond: torch.Tensor      # B


class PartDiscriminator(nn.Module):
    def __init__(self, word_dim, region_dim):
        super().__init__()
        self.attn = VisaAttention(word_dim, region_dim)
        self.head = nn.Sequential(
            nn.Linear(region_dim, region_dim), nn.LeakyReLU(0.2), nn.Linear(region_dim, 1),
        )

    def forward(self, part, words, mask=None, uniform=False):
        r, alpha = self.attn(part, words, mask, uniform=uniform)
        pooled = r.flatten(2).mean(-1)
        return torch.sigmoid(self.head(pooled)).squeeze(1), alpha


def part_score(part, words, module: PartDiscriminator, mask=None):
    return module(part, words, mask)[0]


class GlobalDiscriminator(nn.Module):
    def __init__(self, cfg: ModelConfig, n_down, use_sca=True):
        super().__init__()
        r = cfg.region_dim
        self.use_sca = use_sca
        self.encoder = feature_encoder(cfg.df, r, n_down)
        self.sca = SelfCrossAttention(r, cfg.sent_dim)
        self.uncond_head = nn.Linear(r, 1)
        self.cond_head = nn.Sequential(
            nn.Linear(r + cfg.sent_dim, r), nn.LeakyReLU(0.2), nn.Linear(r, 1),
        )

    def forward(self, image, sentence) -> GlobalScores:
        rho = self.encoder(image)
        if self.use_sca:
            rho, _ = self.sca(rho, sentence)
        pooled = rho.flatten(2).mean(-1)
        uncond = torch.sigmoid(self.uncond_head(pooled)).squeeze(1)
        cond = torch.sigmoid(self.cond_head(torch.cat([pooled, sentence], 1))).squeeze(1)
        return GlobalScores(uncond, cond)


class StageDiscriminators(nn.Module):
    """The global discriminator and the four part discriminators of one stage."""

    def __init__(self, cfg: ModelConfig, stage: int, flags: AblationFlags | None = None):
        super().__init__()
        flags = flags or AblationFlags()
        self.stage = stage
        self.resolution = cfg.base_res * 2 ** stage
        n_down = int(math.log2(cfg.base_res // 4))
        self.use_visa = flags.use_visa
        self.fine_encoder = feature_encoder(cfg.df, cfg.region_dim, n_down)
        self.parts = nn.ModuleList(PartDiscriminator(cfg.word_dim, cfg.region_dim) for _ in PART_NAMES)
        self.global_d = GlobalDiscriminator(cfg, n_down, use_sca=flags.use_sca)

    def _check(self, image):
        if image.dim() != 4 or image.size(1) != 3 or image.shape[-2:] != (self.resolution, self.resolution):
            raise InputError(
                f"stage {self.stage} discriminator expects B x 3 x {self.resolution} x {self.resolution}, "
                f"got {tuple(image.shape)}")

    def encode_fine(self, image):
        self._check(image)
        return self.fine_encoder(image)

    def part_scores(self, image, words, mask=None, return_attention=False):
        """B x 4 scores ordered head, torso, legs, feet."""
        parts = split_parts(self.encode_fine(image))
        scores, maps = [], []
        for part, disc in zip(parts, self.parts):
            y, alpha = disc(part, words, mask, uniform=not self.use_visa)
            scores.append(y)
            maps.append(alpha)
        scores = torch.stack(scores, 1)
        return (scores, maps) if return_attention else scores

    def global_scores(self, image, sentence) -> GlobalScores:
        self._check(image)
        return self.global_d(image, sentence)

    def hpd_parameters(self):
        """Parameters of the part-based branch (shared fine encoder + part heads)."""
        yield from self.fine_encoder.parameters()
        yield from self.parts.parameters()

    def visa_parameters(self):
        for disc in self.parts:
            yield from disc.attn.parameters()

    def sca_parameters(self):
        return self.global_d.sca.parameters()


def global_score(image, sentence, disc: StageDiscriminators) -> GlobalScores:
    return disc.global_scores(image, sentence)


def encode_fine(image, disc: StageDiscriminators):
    return disc.encode_fine(image)
