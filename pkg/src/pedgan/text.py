"""Caption tokenization, the reference text encoder and conditioning augmentation."""
from __future__ import annotations

import re
from dataclasses import dataclass

import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import InputError, NumericError

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(caption: str) -> list[str]:
    return _TOKEN_RE.findall(caption.lower())


class Vocabulary:
    """Bijective token <-> id map with pad fixed at id 0 and unknown at id 1."""

    def __init__(self, tokens=()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: PAD_ID, UNK: UNK_ID}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @classmethod
    def build(cls, captions) -> "Vocabulary":
        vocab = cls()
        for cap in captions:
            for tok in tokenize(cap):
                vocab.add(tok)
        return vocab

    def encode(self, caption: str, max_len: int) -> "TokenSequence":
        ids = [self.stoi.get(t, UNK_ID) for t in tokenize(caption)][:max_len]
        if not ids:
            ids = [UNK_ID]
        n = len(ids)
        return TokenSequence(ids + [PAD_ID] * (max_len - n), n)

    def count_unknown(self, caption: str) -> int:
        return sum(t not in self.stoi for t in tokenize(caption))

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if lines[:2] != [PAD, UNK]:
            raise InputError(f"{path}: vocabulary must start with {PAD} and {UNK}")
        if len(set(lines)) != len(lines):
            raise InputError(f"{path}: duplicate tokens in vocabulary")
        vocab = cls()
        for tok in lines[2:]:
            vocab.add(tok)
        return vocab


@dataclass(frozen=True)
class TokenSequence:
    ids: list
    true_length: int

    def __post_init__(self):
        T = len(self.ids)
        if not 1 <= self.true_length <= T:
            raise InputError(f"true_length {self.true_length} outside [1, {T}]")
        if any(i != PAD_ID for i in self.ids[self.true_length:]):
            raise InputError("non-pad ids after true_length")


def stack_tokens(seqs) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.tensor([list(s.ids) for s in seqs], dtype=torch.long)
    lengths = torch.tensor([s.true_length for s in seqs], dtype=torch.long)
    return ids, lengths


def length_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """Boolean (B, T) mask, True on real word positions."""
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class TextEncoder(nn.Module):
    """Embedding lookup followed by a bidirectional GRU.

    Word features are the per-position GRU outputs; positions past the caption
    length carry the pad column (zeros). The sentence vector is the masked mean
    of the word features, so padding never influences it.
    """

    def __init__(self, vocab_size, word_dim=256, emb_dim=300):
        super().__init__()
        self.vocab_size = vocab_size
        self.word_dim = word_dim
        self.embed = nn.Embedding(vocab_size, emb_dim, padding_idx=PAD_ID)
        self.rnn = nn.GRU(emb_dim, word_dim // 2, batch_first=True, bidirectional=True)

    def forward(self, ids, lengths):
        T = ids.size(1)
        emb = self.embed(ids)
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=T)
        words = out.transpose(1, 2).contiguous()                     # B x N_w x T
        mask = length_mask(lengths, T).to(out.dtype)
        sentence = (out * mask[..., None]).sum(1) / lengths[:, None].to(out.dtype)
        return words, sentence


def encode_text(encoder: TextEncoder, ids, lengths):
    """Validate token ids and run the encoder. Returns (words B x N_w x T, sentence B x N_w)."""
    if ids.dim() != 2 or lengths.shape != ids.shape[:1]:
        raise InputError(f"ids must be B x T with matching lengths, got {tuple(ids.shape)}")
    if (ids < 0).any() or (ids >= encoder.vocab_size).any():
        raise InputError(f"token id outside vocabulary range [0, {encoder.vocab_size})")
    if (lengths < 1).any() or (lengths > ids.size(1)).any():
        raise InputError("lengths must lie in [1, T]")
    return encoder(ids, lengths)


@dataclass
class AugmentedCondition:
    mu: torch.Tensor
    logvar: torch.Tensor
    sample: torch.Tensor
    noise: torch.Tensor

    def resample(self) -> torch.Tensor:
        return self.mu + torch.exp(0.5 * self.logvar) * self.noise


class ConditioningAugmentation(nn.Module):
    """Fully connected estimate of mean and diagonal log-variance of the condition."""

    def __init__(self, sent_dim, cond_dim=100):
        super().__init__()
        self.cond_dim = cond_dim
        self.fc = nn.Linear(sent_dim, cond_dim * 2)

    def forward(self, sentence, noise=None, generator=None):
        return condition_augment(sentence, self, noise=noise, generator=generator)


def condition_augment(sentence, ca: ConditioningAugmentation, noise=None, generator=None):
    if not torch.isfinite(sentence).all():
        raise NumericError("non-finite sentence vector fed to conditioning augmentation")
    stats = ca.fc(sentence)
    mu, logvar = stats[:, :ca.cond_dim], stats[:, ca.cond_dim:]
    if noise is None:
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    elif noise.shape != mu.shape:
        raise InputError(f"noise shape {tuple(noise.shape)} != {tuple(mu.shape)}")
    sample = mu + torch.exp(0.5 * logvar) * noise
    return AugmentedCondition(mu, logvar, sample, noise)


def ca_kl_loss(mu, logvar):
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over dims, averaged over the batch."""
    if mu.shape != logvar.shape:
        raise InputError(f"mu {tuple(mu.shape)} and logvar {tuple(logvar.shape)} differ")
    kl = 0.5 * (mu.pow(2) + logvar.exp() - logvar - 1)
    if kl.dim() == 1:
        return kl.sum()
    return kl.sum(-1).mean()
