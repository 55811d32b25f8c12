"""Words-regions attention and sentence-aware self attention over region grids.

Region grids are B x N_r x H x W tensors; flattened, region u is column u of
the N_r x N matrix with N = H * W (row-major over the spatial grid).
"""
from __future__ import annotations

import struct

import numpy as np
import torch
import torch.nn as nn

from .errors import InputError, NumericError


class VisaAttention(nn.Module):
    """Attend each region over the caption words and add the attended words back.

    One projection P: N_w -> N_r serves both the bilinear score
    f(rho_u, w_t) = rho_u . (P w_t) and the weighted word sum, so the
    residual r_u = rho_u + sum_t alpha_ut P w_t is well typed.
    """

    def __init__(self, word_dim, region_dim):
        super().__init__()
        self.word_dim = word_dim
        self.region_dim = region_dim
        self.proj = nn.Linear(word_dim, region_dim, bias=False)

    def forward(self, regions, words, mask=None, uniform=False):
        """Returns (attended regions, alpha B x N x T).

        ``mask`` (B x T, True on real words) excludes padding from the softmax.
        ``uniform`` replaces the learned scores with equal weights over the
        unmasked words.
        """
        if regions.dim() != 4 or regions.size(1) != self.region_dim:
            raise InputError(f"regions must be B x {self.region_dim} x H x W, got {tuple(regions.shape)}")
        if words.dim() != 3 or words.size(1) != self.word_dim or words.size(0) != regions.size(0):
            raise InputError(f"words must be B x {self.word_dim} x T, got {tuple(words.shape)}")
        B, C, H, W = regions.shape
        T = words.size(2)
        rho = regions.reshape(B, C, H * W)
        pw = torch.matmul(self.proj.weight, words)                  # B x N_r x T
        if uniform:
            scores = torch.zeros(B, H * W, T, dtype=rho.dtype, device=rho.device)
        else:
            scores = torch.bmm(rho.transpose(1, 2), pw)              # B x N x T
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        alpha = torch.softmax(scores, dim=-1)
        context = torch.bmm(pw, alpha.transpose(1, 2))              # B x N_r x N
        return (rho + context).view(B, C, H, W), alpha


def visa_attend(regions, words, module: VisaAttention, mask=None):
    return module(regions, words, mask=mask)


class SelfCrossAttention(nn.Module):
    """Region-to-region attention whose key/query/value maps also see the sentence.

    c_uv = K(rho_u, s) . Q(rho_v, s); beta[v, u] = softmax over source u of c_uv;
    o_v = W_z(sum_u beta[v, u] V(rho_u, s)); output rho + gamma * o.
    """

    def __init__(self, region_dim, sent_dim, key_dim=None, value_dim=None):
        super().__init__()
        key_dim = key_dim or max(region_dim // 8, 1)
        value_dim = value_dim or max(region_dim // 2, 1)
        self.region_dim = region_dim
        self.sent_dim = sent_dim
        joint = region_dim + sent_dim
        self.key = nn.Conv2d(joint, key_dim, 1)
        self.query = nn.Conv2d(joint, key_dim, 1)
        self.value = nn.Conv2d(joint, value_dim, 1)
        self.out = nn.Conv2d(value_dim, region_dim, 1)
        self.gamma = nn.Parameter(torch.zeros(()))

    def forward(self, regions, sentence):
        """Returns (regions + gamma * o, beta B x N x N indexed [v, u])."""
        if regions.dim() != 4 or regions.size(1) != self.region_dim:
            raise InputError(f"regions must be B x {self.region_dim} x H x W, got {tuple(regions.shape)}")
        if sentence.shape != (regions.size(0), self.sent_dim):
            raise InputError(f"sentence must be B x {self.sent_dim}, got {tuple(sentence.shape)}")
        B, C, H, W = regions.shape
        x = torch.cat([regions, sentence[:, :, None, None].expand(-1, -1, H, W)], 1)
        k = self.key(x).flatten(2)
        q = self.query(x).flatten(2)
        v = self.value(x).flatten(2)
        c = torch.bmm(k.transpose(1, 2), q)                          # c[b, u, v]
        if not torch.isfinite(c).all():
            raise NumericError("non-finite self-cross attention scores")
        beta = torch.softmax(c, dim=1).transpose(1, 2)               # normalize over sources u
        agg = torch.bmm(v, beta.transpose(1, 2)).view(B, -1, H, W)
        o = self.out(agg)
        return regions + self.gamma * o, beta


def sca_attend(regions, sentence, module: SelfCrossAttention):
    return module(regions, sentence)


def write_attention_blob(path, attn):
    """Row-major float32 matrix preceded by two little-endian uint32 (rows, cols)."""
    a = np.ascontiguousarray(np.asarray(attn, dtype="<f4"))
    if a.ndim != 2:
        raise InputError("attention blob must be 2-D")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *a.shape))
        fh.write(a.tobytes())


def read_attention_blob(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise InputError(f"{path}: truncated attention blob")
    rows, cols = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 4 * rows * cols:
        raise InputError(f"{path}: size does not match header ({rows} x {cols})")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(rows, cols).copy()
