"""Image encoder for the image-text matching loss, and joint encoder pre-training."""
from __future__ import annotations

import logging
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .losses import damsm_loss

log = logging.getLogger(__name__)


class ImageEncoder(nn.Module):
    """Maps images to a grid of word-dimension region features and a global vector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.res = cfg.match_res
        self.grid = cfg.match_grid
        d = cfg.word_dim
        layers = [nn.Conv2d(3, max(d // 4, 8), 3, 1, 1), nn.LeakyReLU(0.2)]
        ch = max(d // 4, 8)
        for _ in range(int(math.log2(cfg.match_res // cfg.match_grid))):
            nxt = min(ch * 2, d)
            layers += [nn.Conv2d(ch, nxt, 4, 2, 1), nn.LeakyReLU(0.2)]
            ch = nxt
        layers.append(nn.Conv2d(ch, d, 1))
        self.features = nn.Sequential(*layers)
        self.global_fc = nn.Linear(d, d)

    def forward(self, images):
        if images.size(-1) != self.res:
            images = F.interpolate(images, size=(self.res, self.res), mode="bilinear",
                                   align_corners=False, antialias=images.size(-1) > self.res)
        regions = self.features(images)
        glob = self.global_fc(regions.flatten(2).mean(-1))
        return regions.flatten(2), glob


def pretrain_matching(text_encoder, image_encoder, images, ids, lengths, image_index,
                      steps, batch_size, lr=1e-3, rng=None):
    """Train both encoders on the matching loss for a fixed budget, then freeze them.

    ``image_index[k]`` is the row of ``images`` described by caption k.
    Returns the list of per-step losses.
    """
    params = list(text_encoder.parameters()) + list(image_encoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    losses = []
    text_encoder.train()
    image_encoder.train()
    for step in range(steps):
        # distinct images per batch so every off-diagonal pair is a true negative
        perm = torch.randperm(images.size(0), generator=rng)[:batch_size]
        caps = []
        for img in perm.tolist():
            choices = (image_index == img).nonzero().flatten()
            caps.append(choices[torch.randint(len(choices), (1,), generator=rng)].item())
        caps = torch.tensor(caps)
        words, sent = text_encoder(ids[caps], lengths[caps])
        regions, glob = image_encoder(images[perm])
        loss = damsm_loss(regions, glob, words, sent, lengths[caps])
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(params, 5.0)
        opt.step()
        losses.append(loss.item())
        if step % 50 == 0:
            log.debug("matching pre-train step %d loss %.4f", step, losses[-1])
    freeze(text_encoder)
    freeze(image_encoder)
    return losses


def freeze(module):
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module
