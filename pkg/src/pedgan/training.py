"""Alternating discriminator/generator optimization, checkpointing and diagnostics."""
from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import TrainConfig
from .data import TrainData, resize_batch
from .discriminators import PART_NAMES, StageDiscriminators
from .errors import CheckpointError, NumericError, TrainingAborted
from .generator import StagedGenerator
from .losses import (_log, ca_kl_loss, damsm_loss, generator_adv_loss, global_disc_loss,
                     part_disc_loss, total_generator_loss)
from .matching import ImageEncoder, freeze, pretrain_matching
from .text import ConditioningAugmentation, TextEncoder, Vocabulary, condition_augment, length_mask

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pedgan-checkpoint"
CHECKPOINT_VERSION = 1


def build_models(config: TrainConfig, vocab_size: int) -> nn.ModuleDict:
    cfg = config.model
    torch.manual_seed(config.seed)
    return nn.ModuleDict({
        "text_encoder": TextEncoder(vocab_size, cfg.word_dim, cfg.emb_dim),
        "image_encoder": ImageEncoder(cfg),
        "ca": ConditioningAugmentation(cfg.sent_dim, cfg.cond_dim),
        "generator": StagedGenerator(cfg),
        "discriminators": nn.ModuleList(
            StageDiscriminators(cfg, i, config.ablation) for i in range(cfg.stages)),
    })


def generator_parameters(models):
    return list(models.ca.parameters()) + list(models.generator.parameters())


def discriminator_parameters(models, flags):
    """Parameters the discriminator optimizer owns under the given ablation flags."""
    params = []
    for d in models.discriminators:
        g = d.global_d
        params += list(g.encoder.parameters()) + list(g.uncond_head.parameters()) + list(g.cond_head.parameters())
        if flags.use_sca:
            params += list(g.sca.parameters())
        if flags.use_hpd:
            params += list(d.fine_encoder.parameters())
            for part in d.parts:
                params += list(part.head.parameters())
                if flags.use_visa:
                    params += list(part.attn.parameters())
    return params


@dataclass
class Batch:
    images: torch.Tensor    # B x 3 x R_final x R_final
    ids: torch.Tensor
    lengths: torch.Tensor


class TrainState:
    def __init__(self, config: TrainConfig, vocab: Vocabulary, models: nn.ModuleDict,
                 rng: torch.Generator, step: int = 0):
        self.config = config
        self.vocab = vocab
        self.models = models
        self.rng = rng
        self.step = step
        freeze(models.text_encoder)
        freeze(models.image_encoder)
        self.g_params = generator_parameters(models)
        self.d_params = discriminator_parameters(models, config.ablation)
        owned = {id(p) for p in self.d_params}
        for d in models.discriminators:
            for p in d.parameters():
                p.requires_grad_(id(p) in owned)
        self.opt_g = torch.optim.Adam(self.g_params, lr=config.lr_g, betas=config.betas)
        self.opt_d = torch.optim.Adam(self.d_params, lr=config.lr_d, betas=config.betas)
        models.generator.train()
        models.discriminators.train()

    @property
    def model_cfg(self):
        return self.config.model


def init_state(config: TrainConfig, data: TrainData) -> TrainState:
    """Fresh models; the text/image encoders are pre-trained on the matching loss and frozen."""
    models = build_models(config, len(data.vocabulary))
    match_rng = torch.Generator().manual_seed(config.seed + 1)
    if config.matching_steps:
        losses = pretrain_matching(
            models.text_encoder, models.image_encoder, data.images, data.ids, data.lengths,
            data.image_index, config.matching_steps, min(config.batch_size, data.images.size(0)),
            config.matching_lr, match_rng)
        log.info("matching pre-training: loss %.4f -> %.4f", losses[0], losses[-1])
    rng = torch.Generator().manual_seed(config.seed + 2)
    return TrainState(config, data.vocabulary, models, rng)


def sample_batch(state: TrainState, data: TrainData) -> Batch:
    idx = torch.randperm(len(data), generator=state.rng)[:state.config.batch_size]
    return Batch(data.images[data.image_index[idx]], data.ids[idx], data.lengths[idx])


def _require_finite(name, value, step):
    if torch.is_tensor(value):
        value = value.detach()
    if not math.isfinite(float(value)):
        raise TrainingAborted(name, step)


@dataclass
class _Forward:
    words: torch.Tensor
    sentence: torch.Tensor
    mask: torch.Tensor
    lengths: torch.Tensor
    cond: object
    fakes: list
    reals: list


def _forward(state: TrainState, batch: Batch) -> _Forward:
    m = state.models
    cfg = state.model_cfg
    B = batch.ids.size(0)
    with torch.no_grad():
        words, sentence = m.text_encoder(batch.ids, batch.lengths)
    mask = length_mask(batch.lengths, batch.ids.size(1))
    z = torch.randn(B, cfg.z_dim, generator=state.rng)
    noise = torch.randn(B, cfg.cond_dim, generator=state.rng)
    cond = condition_augment(sentence, m.ca, noise=noise)
    bundles, _ = m.generator(z, cond.sample, words, mask)
    reals = [resize_batch(batch.images, r) for r in cfg.resolutions]
    return _Forward(words, sentence, mask, batch.lengths, cond, [b.image for b in bundles], reals)


def discriminator_phase(state: TrainState, fw: _Forward) -> dict:
    """One update of every stage discriminator on detached fakes."""
    flags = state.config.ablation
    state.opt_d.zero_grad(set_to_none=True)
    total = 0.0
    out = {"global": [], "part": []}
    for i, d in enumerate(state.models.discriminators):
        fake = fw.fakes[i].detach()
        lg = global_disc_loss(d.global_scores(fw.reals[i], fw.sentence),
                              d.global_scores(fake, fw.sentence))
        _require_finite(f"d_global[{i}]", lg, state.step)
        total = total + lg
        out["global"].append(lg.item())
        if flags.use_hpd:
            lp = part_disc_loss(d.part_scores(fw.reals[i], fw.words, fw.mask),
                                d.part_scores(fake, fw.words, fw.mask))
            _require_finite(f"d_part[{i}]", lp, state.step)
            total = total + lp
            out["part"].append(lp.item())
    total.backward()
    state.opt_d.step()
    return out


def generator_phase(state: TrainState, fw: _Forward):
    """One update of the generator and conditioning network with discriminators held fixed."""
    cfg = state.config
    m = state.models
    for p in state.d_params:
        p.requires_grad_(False)
    try:
        state.opt_g.zero_grad(set_to_none=True)
        adv, stage_terms = [], []
        for i, d in enumerate(m.discriminators):
            g = d.global_scores(fw.fakes[i], fw.sentence)
            parts = d.part_scores(fw.fakes[i], fw.words, fw.mask) if cfg.ablation.use_hpd else None
            a = generator_adv_loss(g, parts)
            _require_finite(f"adv[{i}]", a, state.step)
            adv.append(a)
            terms = {"uncond": -_log(g.uncond).mean().item(), "global_cond": -_log(g.cond).mean().item()}
            if parts is not None:
                terms["local_cond"] = dict(zip(PART_NAMES, (-_log(parts).mean(0)).tolist()))
            stage_terms.append(terms)
        cond = ca_kl_loss(fw.cond.mu, fw.cond.logvar)
        _require_finite("cond", cond, state.step)
        if cfg.lambda_damsm:
            regions, glob = m.image_encoder(fw.fakes[-1])
            damsm = damsm_loss(regions, glob, fw.words, fw.sentence, fw.lengths)
        else:
            damsm = torch.zeros(())
        _require_finite("damsm", damsm, state.step)
        breakdown = total_generator_loss(adv, cond, damsm, cfg.lambda_cond, cfg.lambda_damsm, stage_terms)
        _require_finite("total", breakdown.total, state.step)
        breakdown.total.backward()
        state.opt_g.step()
    finally:
        for p in state.d_params:
            p.requires_grad_(True)
    return breakdown


def train_step(state: TrainState, batch: Batch):
    """Discriminator update then generator update. Returns (state, LossBreakdown, d_losses)."""
    try:
        fw = _forward(state, batch)
        d_losses = discriminator_phase(state, fw)
        breakdown = generator_phase(state, fw)
    except TrainingAborted:
        raise
    except NumericError as exc:
        raise TrainingAborted(str(exc), state.step) from exc
    state.step += 1
    return state, breakdown, d_losses


def step_record(step, breakdown, d_losses) -> dict:
    rec = {"step": step}
    rec.update(breakdown.to_dict())
    rec["d_global"] = d_losses["global"]
    rec["d_part"] = d_losses["part"]
    return rec


def run_training(state: TrainState, data: TrainData, steps: int, metrics_path=None,
                 checkpoint_path=None, checkpoint_every=0, log_every=1):
    """Run ``steps`` train steps, appending one JSON line per logged step."""
    records = []
    fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        for _ in range(steps):
            batch = sample_batch(state, data)
            _, breakdown, d_losses = train_step(state, batch)
            rec = step_record(state.step, breakdown, d_losses)
            records.append(rec)
            if fh and log_every and state.step % log_every == 0:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path)
    finally:
        if fh:
            fh.close()
    return records


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(state: TrainState, path):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "config_hash": state.config.config_hash(),
        "vocab": list(state.vocab.itos),
        "models": state.models.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "rng": state.rng.get_state(),
        "step": state.step,
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    """Restore a TrainState; ``config`` (if given) must hash to the stored config hash."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint of this package")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload.get('version')} != {CHECKPOINT_VERSION}")
    stored = TrainConfig.from_dict(payload["config"])
    if stored.config_hash() != payload["config_hash"]:
        raise CheckpointError("stored config does not match its hash")
    if config is not None and config.config_hash() != payload["config_hash"]:
        raise CheckpointError(
            f"config hash {config.config_hash()} does not match checkpoint {payload['config_hash']}")
    vocab = Vocabulary(payload["vocab"][2:])
    try:
        models = build_models(stored, len(vocab))
        models.load_state_dict(payload["models"])
        state = TrainState(stored, vocab, models, torch.Generator(), payload["step"])
        state.opt_g.load_state_dict(payload["opt_g"])
        state.opt_d.load_state_dict(payload["opt_d"])
        state.rng.set_state(payload["rng"])
    except (RuntimeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is inconsistent: {exc}") from exc
    return state


# -- diagnostics -----------------------------------------------------------------

def auc(pos, neg) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    pos = np.asarray(pos, dtype=np.float64)[:, None]
    neg = np.asarray(neg, dtype=np.float64)[None, :]
    return float(((pos > neg) + 0.5 * (pos == neg)).mean())


@torch.no_grad()
def discriminator_auc(state: TrainState, data: TrainData, stage=0, n=64, seed=1234) -> float:
    """Real-vs-fake AUC of a stage's unconditional global score on fresh samples.

    Runs on a copy of the generator so batch-norm statistics of the live
    state are untouched.
    """
    m = state.models
    cfg = state.model_cfg
    g = torch.Generator().manual_seed(seed)
    idx = torch.randperm(len(data), generator=g)[:n]
    ids, lengths = data.ids[idx], data.lengths[idx]
    words, sent = m.text_encoder(ids, lengths)
    cond = condition_augment(sent, m.ca, generator=g)
    z = torch.randn(len(idx), cfg.z_dim, generator=g)
    gen = copy.deepcopy(m.generator).train()
    bundles, _ = gen(z, cond.sample, words, length_mask(lengths, ids.size(1)))
    d = m.discriminators[stage]
    real = resize_batch(data.images[data.image_index[idx]], cfg.resolutions[stage])
    s_real = d.global_scores(real, sent).uncond
    s_fake = d.global_scores(bundles[stage].image, sent).uncond
    return auc(s_real.numpy(), s_fake.numpy())


def parameter_snapshot(params) -> list:
    return [p.detach().clone() for p in params]


def unchanged(params, snapshot) -> bool:
    return all(torch.equal(p.detach(), s) for p, s in zip(params, snapshot))


__all__ = [
    "Batch", "TrainState", "build_models", "init_state", "sample_batch", "train_step",
    "discriminator_phase", "generator_phase", "run_training", "save_checkpoint",
    "load_checkpoint", "discriminator_auc", "auc", "NumericError",
]
