"""Multi-stage generator: a coarse first stage and word-attentive refinement stages."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import VisaAttention
from .config import ModelConfig
from .errors import ContractError, InputError, NumericError
from .text import condition_augment, encode_text, length_mask


def conv3x3(in_ch, out_ch):
    return nn.Conv2d(in_ch, out_ch, 3, 1, 1, bias=False)


def up_block(in_ch, out_ch):
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        conv3x3(in_ch, out_ch * 2),
        nn.BatchNorm2d(out_ch * 2),
        nn.GLU(dim=1),
    )


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            conv3x3(ch, ch * 2), nn.BatchNorm2d(ch * 2), nn.GLU(dim=1),
            conv3x3(ch, ch), nn.BatchNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


@dataclass
class StageBundle:
    hidden: torch.Tensor    # B x gf x R x R
    image: torch.Tensor     # B x 3 x R x R in [-1, 1]
    stage: int

    @property
    def resolution(self) -> int:
        return self.image.size(-1)


class InitStage(nn.Module):
    def __init__(self, z_dim, cond_dim, gf, base_res):
        super().__init__()
        self.n_up = int(math.log2(base_res // 4))
        ch = gf * 2 ** self.n_up
        self.ch = ch
        self.fc = nn.Sequential(
            nn.Linear(z_dim + cond_dim, ch * 4 * 4 * 2, bias=False),
            nn.BatchNorm1d(ch * 4 * 4 * 2),
            nn.GLU(dim=1),
        )
        blocks = []
        for _ in range(self.n_up):
            blocks.append(up_block(ch, ch // 2))
            ch //= 2
        self.upsample = nn.Sequential(*blocks)

    def forward(self, z, c):
        h = self.fc(torch.cat([z, c], 1)).view(z.size(0), self.ch, 4, 4)
        return self.upsample(h)


class RefineStage(nn.Module):
    def __init__(self, gf, word_dim, n_res=2):
        super().__init__()
        self.attn = VisaAttention(word_dim, gf)
        self.residual = nn.Sequential(*[ResBlock(gf) for _ in range(n_res)])
        self.upsample = up_block(gf, gf)

    def forward(self, h, words, mask=None):
        r, alpha = self.attn(h, words, mask)
        return self.upsample(self.residual(r)), alpha


class ImageHead(nn.Module):
    def __init__(self, gf):
        super().__init__()
        self.conv = conv3x3(gf, 3)

    def forward(self, h):
        return torch.tanh(self.conv(h))


def _check_finite(x, stage):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activations in generator stage {stage}")


class StagedGenerator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.init_stage = InitStage(cfg.z_dim, cfg.cond_dim, cfg.gf, cfg.base_res)
        self.refine = nn.ModuleList(RefineStage(cfg.gf, cfg.word_dim) for _ in range(cfg.stages - 1))
        self.heads = nn.ModuleList(ImageHead(cfg.gf) for _ in range(cfg.stages))

    @property
    def stages(self):
        return self.cfg.stages

    def g0_forward(self, z, c) -> StageBundle:
        if z.size(-1) != self.cfg.z_dim or c.size(-1) != self.cfg.cond_dim:
            raise InputError(f"expected z dim {self.cfg.z_dim} and condition dim {self.cfg.cond_dim}")
        if not (torch.isfinite(z).all() and torch.isfinite(c).all()):
            raise NumericError("non-finite noise or condition fed to generator stage 0")
        h = self.init_stage(z, c)
        _check_finite(h, 0)
        return StageBundle(h, self.heads[0](h), 0)

    def refine_forward(self, prev: StageBundle, words, mask=None):
        """Advance one stage. Returns (next bundle, attention map B x N x T)."""
        if prev.stage >= self.stages - 1:
            raise ContractError(f"stage {prev.stage} is the final stage; nothing to refine")
        i = prev.stage + 1
        h, alpha = self.refine[prev.stage](prev.hidden, words, mask)
        _check_finite(h, i)
        return StageBundle(h, self.heads[i](h), i), alpha

    def forward(self, z, c, words, mask=None):
        bundles = [self.g0_forward(z, c)]
        maps = []
        while bundles[-1].stage < self.stages - 1:
            nxt, alpha = self.refine_forward(bundles[-1], words, mask)
            bundles.append(nxt)
            maps.append(alpha)
        return bundles, maps


def generate(ids, lengths, z, text_encoder, ca, generator: StagedGenerator, ca_noise=None,
             rng=None, return_attention=False):
    """Full text -> images pipeline. Returns the list of StageBundles (length m)."""
    with torch.no_grad():
        words, sentence = encode_text(text_encoder, ids, lengths)
    mask = length_mask(lengths, ids.size(1))
    cond = condition_augment(sentence, ca, noise=ca_noise, generator=rng)
    bundles, maps = generator(z, cond.sample, words, mask)
    if return_attention:
        return bundles, maps
    return bundles
