"""Command line entry points.

Exit codes: 0 success, 1 unexpected failure, 2 bad input (config, paths,
datasets, checkpoints), 3 training aborted on a non-finite loss.
"""
from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import os
import re
import sys

import numpy as np
import torch
from PIL import Image

from .config import AblationFlags, TrainConfig, load_config
from .data import SyntheticSpec, TrainData, ingest_dataset, make_synthetic_dataset, to_uint8
from .errors import CheckpointError, DetectorError, InputError, TrainingAborted
from .generator import generate
from .metrics import detect_keypoints, get_detector, pose_report, read_detections, write_detections
from .text import stack_tokens
from .training import init_state, load_checkpoint, run_training, save_checkpoint

log = logging.getLogger("pedgan")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_ABORT = 0, 1, 2, 3
OUT_ENV = "PEDGAN_OUT"
ABLATIONS = ("no-hpd", "no-visa", "no-sca")


def _default_out(name):
    return os.path.join(os.environ.get(OUT_ENV, "runs"), name)


def _add_common(p):
    p.add_argument("--config", help="JSON or YAML file with TrainConfig fields")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=("tiny", "paper"))
    p.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])


def build_parser():
    parser = argparse.ArgumentParser(prog="pedgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a dataset manifest")
    _add_common(p)
    p.add_argument("--data", help="dataset manifest (overrides config 'dataset')")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("ablate", help="train the BL, +HPD, +HPD+VISA and full configurations")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("generate", help="render images for captions")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--captions", required=True, help="text file, one caption per line")
    p.add_argument("--count", type=int, default=1, help="samples per caption")

    p = sub.add_parser("evaluate", help="pose score / pose variance report")
    _add_common(p)
    p.add_argument("--images", help="directory of images")
    p.add_argument("--pattern", default="*.png")
    p.add_argument("--detections", help="precomputed detections (JSON lines)")
    p.add_argument("--detector", default="synthetic")
    p.add_argument("--report", help="report path (default <out>/report.json)")
    p.add_argument("--class-probs", help=".npy matrix of classifier probabilities for the inception score")
    p.add_argument("--splits", type=int, default=1)

    p = sub.add_parser("inspect-attention", help="dump generator word attention for one caption")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--top", type=int, default=5)

    p = sub.add_parser("make-synthetic", help="write a procedural color-band pedestrian dataset")
    _add_common(p)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--val-fraction", type=float, default=0.0)
    return parser


def resolve_config(args) -> TrainConfig:
    """Config file values overridden by command line flags."""
    base = load_config(args.config).to_dict() if args.config else TrainConfig().to_dict()
    overrides = {
        "seed": args.seed,
        "profile": args.profile,
        "steps": getattr(args, "steps", None),
        "batch_size": getattr(args, "batch_size", None),
        "dataset": getattr(args, "data", None),
        "checkpoint_every": getattr(args, "checkpoint_every", None),
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.ablate:
        flags = AblationFlags.from_names(args.ablate)
        base["ablation"] = dataclasses.asdict(flags)
    return TrainConfig.from_dict(base)


def _out_dir(args, name):
    out = args.out or _default_out(name)
    os.makedirs(out, exist_ok=True)
    return out


def _train_one(config: TrainConfig, out, resume=None):
    if not config.dataset:
        raise InputError("no dataset given (use --data or the config 'dataset' field)")
    manifest = ingest_dataset(config.dataset)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(dict(config.to_dict(), config_hash=config.config_hash()), fh, indent=1)
    if resume:
        state = load_checkpoint(resume, config)
        manifest.vocabulary = state.vocab
    data = TrainData.from_manifest(manifest, config.model.final_res, config.model.max_len)
    if not resume:
        state = init_state(config, data)
    manifest.vocabulary.save(os.path.join(out, "vocab.txt"))
    ckpt = os.path.join(out, "checkpoint.pt")
    run_training(state, data, config.steps, os.path.join(out, "metrics.jsonl"),
                 ckpt, config.checkpoint_every, config.log_every)
    save_checkpoint(state, ckpt)
    log.info("trained %d steps -> %s", state.step, ckpt)
    return state


def cmd_train(args):
    config = resolve_config(args)
    _train_one(config, _out_dir(args, "train"), args.resume)
    return EXIT_OK


def cmd_ablate(args):
    base = resolve_config(args)
    out = _out_dir(args, "ablate")
    table = [("BL", ["no-hpd", "no-visa", "no-sca"]), ("HPD", ["no-visa", "no-sca"]),
             ("HPD+VISA", ["no-sca"]), ("HPD+VISA+SCA", [])]
    for label, names in table:
        cfg = dataclasses.replace(base, ablation=AblationFlags.from_names(names))
        sub = os.path.join(out, label)
        os.makedirs(sub, exist_ok=True)
        _train_one(cfg, sub)
    return EXIT_OK


def _read_captions(path):
    if not os.path.exists(path):
        raise InputError(f"captions file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        caps = [line.strip() for line in fh if line.strip()]
    if not caps:
        raise InputError(f"no captions in {path}")
    return caps


def _load_for_inference(path):
    state = load_checkpoint(path)
    state.models.eval()
    return state


def render(state, captions, count, seed):
    """Yield (caption id, z seed, bundles, attention maps, true length) per caption and sample.

    Sample k of every caption draws its noise and augmentation noise from seed + k.
    """
    m = state.models
    cfg = state.model_cfg
    for cid, cap in enumerate(captions):
        ids, lengths = stack_tokens([state.vocab.encode(cap, cfg.max_len)])
        for k in range(count):
            zseed = seed + k
            g = torch.Generator().manual_seed(zseed)
            z = torch.randn(1, cfg.z_dim, generator=g)
            noise = torch.randn(1, cfg.cond_dim, generator=g)
            with torch.no_grad():
                bundles, maps = generate(ids, lengths, z, m.text_encoder, m.ca, m.generator,
                                         ca_noise=noise, return_attention=True)
            yield cid, zseed, bundles, maps, lengths.item()


def cmd_generate(args):
    state = _load_for_inference(args.checkpoint)
    captions = _read_captions(args.captions)
    out = _out_dir(args, "generate")
    seed = args.seed if args.seed is not None else 0
    unknown = {i: state.vocab.count_unknown(c) for i, c in enumerate(captions)}
    if any(unknown.values()):
        log.warning("%d caption token(s) not in vocabulary mapped to <unk>", sum(unknown.values()))
    index = []
    for cid, zseed, bundles, _, _ in render(state, captions, args.count, seed):
        for b in bundles:
            name = f"c{cid:03d}_z{zseed}_stage{b.stage}.png"
            Image.fromarray(to_uint8(b.image[0])).save(os.path.join(out, name))
            index.append({"file": name, "caption_id": cid, "caption": captions[cid],
                          "z_seed": zseed, "stage": b.stage, "resolution": b.resolution,
                          "unknown_tokens": unknown[cid]})
    with open(os.path.join(out, "index.json"), "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1)
    return EXIT_OK


def cmd_evaluate(args):
    out = _out_dir(args, "evaluate")
    report_path = args.report or os.path.join(out, "report.json")
    if args.detections:
        if not os.path.exists(args.detections):
            raise InputError(f"detections file not found: {args.detections}")
        detections = read_detections(args.detections)
    elif args.images:
        files = sorted(glob.glob(os.path.join(args.images, args.pattern)))
        detector = get_detector(args.detector)
        detections = []
        for f in files:
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB"))
            detections.append(detect_keypoints(arr, detector, os.path.basename(f)))
        write_detections(os.path.join(out, "detections.jsonl"), detections)
    else:
        raise InputError("pass --images or --detections")
    if not detections:
        raise InputError("empty image set")
    probs = np.load(args.class_probs) if args.class_probs else None
    report = pose_report(detections, class_probs=probs, splits=args.splits)
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    print(report.table())
    return EXIT_OK


def attention_summary(alpha, words, top=5):
    """Per-region and overall top words from an N x T attention map over real words."""
    k = min(top, len(words))
    order = np.argsort(-alpha, axis=1, kind="stable")[:, :k]
    per_region = [[words[t] for t in row] for row in order]
    summed = alpha.sum(0)
    overall = [words[t] for t in np.argsort(-summed, kind="stable")[:k]]
    return per_region, overall, summed


def cmd_inspect_attention(args):
    from .attention import write_attention_blob

    state = _load_for_inference(args.checkpoint)
    out = _out_dir(args, "inspect")
    seed = args.seed if args.seed is not None else 0
    seq = state.vocab.encode(args.caption, state.model_cfg.max_len)
    words = state.vocab.decode(seq.ids[:seq.true_length])
    _, _, bundles, maps, n = next(render(state, [args.caption], 1, seed))
    dump = {"caption": args.caption, "words": words, "stages": []}
    for b in bundles:
        Image.fromarray(to_uint8(b.image[0])).save(os.path.join(out, f"stage{b.stage}.png"))
    for i, alpha in enumerate(maps):
        a = alpha[0, :, :n].numpy().astype(np.float64)
        grid = bundles[i].resolution
        per_region, overall, summed = attention_summary(a, words, args.top)
        blob = f"attention_stage{i}.bin"
        write_attention_blob(os.path.join(out, blob), a)
        heatmaps = []
        res = bundles[-1].resolution
        for word in overall:
            t = words.index(word)
            heat = a[:, t].reshape(grid, grid)
            heat = heat / max(heat.max(), 1e-12)
            img = np.kron((heat * 255).round().astype(np.uint8), np.ones((res // grid, res // grid), np.uint8))
            name = f"heat_stage{i}_{t:02d}_{re.sub(r'[^a-z0-9]', '_', word)}.png"
            Image.fromarray(img).save(os.path.join(out, name))
            heatmaps.append(name)
        dump["stages"].append({
            "stage": i + 1, "regions": int(a.shape[0]), "grid": grid,
            "attention": a.tolist(), "row_sums": a.sum(1).tolist(),
            "top_words_per_region": per_region, "top_words": overall,
            "word_mass": dict(zip(words, summed.tolist())) if len(set(words)) == len(words) else summed.tolist(),
            "blob": blob, "heatmaps": heatmaps,
        })
    with open(os.path.join(out, "attention.json"), "w", encoding="utf-8") as fh:
        json.dump(dump, fh, indent=1)
    return EXIT_OK


def cmd_make_synthetic(args):
    out = _out_dir(args, "synthetic")
    spec = SyntheticSpec(count=args.count, resolution=args.resolution, val_fraction=args.val_fraction)
    manifest = make_synthetic_dataset(out, spec, seed=args.seed if args.seed is not None else 0)
    print(os.path.join(out, "manifest.json"), len(manifest.records))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "inspect-attention": cmd_inspect_attention,
    "make-synthetic": cmd_make_synthetic,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (InputError, CheckpointError, DetectorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
