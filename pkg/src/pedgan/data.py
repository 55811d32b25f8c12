"""Dataset manifests, ingestion and the procedural color-band pedestrian set."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import IngestionError
from .text import Vocabulary, stack_tokens

SPLITS = ("train", "val", "test")

COLORS = {
    "red": (210, 35, 35),
    "green": (35, 165, 55),
    "blue": (35, 65, 215),
    "yellow": (235, 210, 40),
    "black": (20, 20, 20),
    "white": (240, 240, 240),
}
BACKGROUND = (128, 128, 128)
BANDS = ("head", "torso", "legs", "feet")

TEMPLATES = (
    "a person with a {head} head , a {torso} torso , {legs} legs and {feet} feet",
    "the pedestrian wears a {torso} shirt , {legs} pants and {feet} shoes and has {head} hair",
)


@dataclass
class Record:
    image: str              # absolute path after ingestion
    captions: list
    id: int
    split: str = "train"


@dataclass
class DatasetManifest:
    records: list
    root: str = "."
    vocabulary: Vocabulary = field(default_factory=Vocabulary)

    def pairs(self, split="train"):
        """(record, caption) pairs; one per caption."""
        return [(r, c) for r in self.records if r.split == split for c in r.captions]

    def to_json(self) -> dict:
        recs = []
        for r in self.records:
            path = os.path.relpath(r.image, self.root) if os.path.isabs(r.image) else r.image
            recs.append({"image": path, "captions": list(r.captions), "id": r.id, "split": r.split})
        return {"version": 1, "records": recs}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)


def ingest_dataset(path) -> DatasetManifest:
    """Load and validate a JSON manifest; build the vocabulary from train captions.

    Image paths are resolved relative to the manifest's directory. Every
    problem found is reported in a single IngestionError.
    """
    if not os.path.exists(path):
        raise IngestionError(f"manifest not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise IngestionError(f"manifest {path} is not valid JSON ({exc})") from exc
    raw = data.get("records") if isinstance(data, dict) else data
    if not isinstance(raw, list) or not raw:
        raise IngestionError(f"manifest {path} has no records")
    root = os.path.dirname(os.path.abspath(path))
    records, bad = [], []
    for n, rec in enumerate(raw):
        if not isinstance(rec, dict) or "image" not in rec or "captions" not in rec:
            bad.append(f"record {n}: missing 'image' or 'captions'")
            continue
        img = rec["image"] if os.path.isabs(rec["image"]) else os.path.join(root, rec["image"])
        caps = rec["captions"]
        if not os.path.isfile(img):
            bad.append(f"record {n}: image not found {rec['image']}")
        if not isinstance(caps, list) or not caps or any(not isinstance(c, str) or not c.strip() for c in caps):
            bad.append(f"record {n}: captions must be a non-empty list of non-empty strings")
        split = rec.get("split", "train")
        if split not in SPLITS:
            bad.append(f"record {n}: unknown split {split!r}")
        records.append(Record(img, list(caps) if isinstance(caps, list) else [], int(rec.get("id", n)), split))
    if bad:
        raise IngestionError(f"manifest {path} has {len(bad)} invalid record(s)", bad)
    vocab = Vocabulary.build(c for r in records if r.split == "train" for c in r.captions)
    return DatasetManifest(records, root, vocab)


# -- synthetic pedestrians --------------------------------------------------------

@dataclass
class SyntheticSpec:
    count: int = 64
    resolution: int = 32
    templates: tuple = TEMPLATES
    colors: tuple = tuple(COLORS)
    val_fraction: float = 0.0


def caption_for(colors: dict, template: str) -> str:
    return template.format(**colors)


def render_pedestrian(colors: dict, resolution: int, center=None, widths=None) -> np.ndarray:
    """H x W x 3 uint8 image: one colored rectangle per vertical quarter on a gray background."""
    img = np.empty((resolution, resolution, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    center = resolution / 2 if center is None else center
    widths = widths or (0.25, 0.45, 0.35, 0.4)
    band = resolution // 4
    for b, name in enumerate(BANDS):
        half = max(widths[b] * resolution / 2, 1)
        x0 = int(round(max(center - half, 0)))
        x1 = int(round(min(center + half, resolution)))
        img[b * band:(b + 1) * band, x0:x1] = COLORS[colors[name]]
    return img


def synthetic_samples(spec: SyntheticSpec, seed: int):
    """Yield (image array, color dict, captions) deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    R = spec.resolution
    for _ in range(spec.count):
        colors = {b: spec.colors[rng.integers(len(spec.colors))] for b in BANDS}
        center = R / 2 + rng.uniform(-R / 8, R / 8)
        widths = tuple(base * rng.uniform(0.85, 1.15) for base in (0.25, 0.45, 0.35, 0.4))
        img = render_pedestrian(colors, R, center, widths)
        captions = [caption_for(colors, t) for t in spec.templates]
        yield img, colors, captions


def make_synthetic_dataset(out_dir, spec: SyntheticSpec | None = None, seed: int = 0) -> DatasetManifest:
    """Write PNG images and ``manifest.json`` into ``out_dir``; returns the ingested manifest."""
    spec = spec or SyntheticSpec()
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    n_val = int(round(spec.count * spec.val_fraction))
    recs = []
    for i, (img, colors, caps) in enumerate(synthetic_samples(spec, seed)):
        rel = os.path.join("images", f"{i:05d}.png")
        Image.fromarray(img).save(os.path.join(out_dir, rel), optimize=False)
        split = "val" if i >= spec.count - n_val else "train"
        recs.append({"image": rel, "captions": caps, "id": i, "split": split, "colors": colors})
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"version": 1, "records": recs}, fh, indent=1)
    return ingest_dataset(path)


# -- tensors -------------------------------------------------------------------------

def load_image(path, resolution) -> torch.Tensor:
    """3 x R x R float tensor in [-1, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BICUBIC)
        arr = np.asarray(im, dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """3 x R x R tensor in [-1, 1] -> R x R x 3 uint8."""
    arr = ((image.detach().float().clamp(-1, 1) + 1) * 127.5).round().byte()
    return arr.permute(1, 2, 0).cpu().numpy()


def resize_batch(images, resolution):
    if images.size(-1) == resolution:
        return images
    return F.interpolate(images, size=(resolution, resolution), mode="area")


@dataclass
class TrainData:
    """In-memory training pairs: images at the final resolution and tokenized captions."""

    images: torch.Tensor        # n_img x 3 x R x R
    ids: torch.Tensor           # n_pair x T
    lengths: torch.Tensor       # n_pair
    image_index: torch.Tensor   # n_pair -> image row
    vocabulary: Vocabulary

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, resolution, max_len, split="train"):
        recs = [r for r in manifest.records if r.split == split]
        if not recs:
            raise IngestionError(f"no {split!r} records in manifest")
        images = torch.stack([load_image(r.image, resolution) for r in recs])
        seqs, index = [], []
        for i, r in enumerate(recs):
            for c in r.captions:
                seqs.append(manifest.vocabulary.encode(c, max_len))
                index.append(i)
        ids, lengths = stack_tokens(seqs)
        return cls(images, ids, lengths, torch.tensor(index), manifest.vocabulary)

    def __len__(self):
        return self.ids.size(0)
