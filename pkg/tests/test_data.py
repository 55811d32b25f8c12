import json
import os

import numpy as np
import pytest
from PIL import Image

from pedgan.data import (BACKGROUND, BANDS, COLORS, SyntheticSpec, TrainData, ingest_dataset,
                         load_image, make_synthetic_dataset, render_pedestrian)
from pedgan.discriminators import split_parts
from pedgan.errors import IngestionError, InputError


def write_manifest(tmp_path, records):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"records": records}), encoding="utf-8")
    return str(path)


@pytest.fixture
def one_image(tmp_path):
    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(tmp_path / "a.png")
    return "a.png"


def test_empty_manifest_rejected(tmp_path):
    with pytest.raises(IngestionError):
        ingest_dataset(write_manifest(tmp_path, []))
    with pytest.raises(InputError):
        ingest_dataset(str(tmp_path / "missing.json"))


def test_two_captions_give_two_pairs(tmp_path, one_image):
    m = ingest_dataset(write_manifest(tmp_path, [
        {"image": one_image, "captions": ["a red torso", "blue legs"], "id": 0, "split": "train"}]))
    assert len(m.pairs()) == 2
    assert "red" in m.vocabulary.stoi and "legs" in m.vocabulary.stoi


def test_duplicate_image_paths_permitted(tmp_path, one_image):
    m = ingest_dataset(write_manifest(tmp_path, [
        {"image": one_image, "captions": ["a red torso"], "id": 0},
        {"image": one_image, "captions": ["a green torso"], "id": 1}]))
    assert len(m.records) == 2 and len(m.pairs()) == 2


def test_all_offending_records_listed(tmp_path, one_image):
    with pytest.raises(IngestionError) as info:
        ingest_dataset(write_manifest(tmp_path, [
            {"image": one_image, "captions": ["fine"]},
            {"image": "nope.png", "captions": ["a red torso"]},
            {"image": one_image, "captions": [""]},
            {"captions": ["x"]}]))
    offending = info.value.offending
    assert len(offending) == 3
    assert any("nope.png" in o for o in offending)


def test_vocabulary_from_train_split_only(tmp_path, one_image):
    m = ingest_dataset(write_manifest(tmp_path, [
        {"image": one_image, "captions": ["red"], "split": "train"},
        {"image": one_image, "captions": ["purple"], "split": "test"}]))
    assert "red" in m.vocabulary.stoi and "purple" not in m.vocabulary.stoi


def test_synthetic_dataset_is_deterministic(tmp_path):
    spec = SyntheticSpec(count=8, resolution=32)
    a = make_synthetic_dataset(str(tmp_path / "a"), spec, seed=7)
    b = make_synthetic_dataset(str(tmp_path / "b"), spec, seed=7)
    for ra, rb in zip(a.records, b.records):
        with open(ra.image, "rb") as fa, open(rb.image, "rb") as fb:
            assert fa.read() == fb.read()
        assert ra.captions == rb.captions
    c = make_synthetic_dataset(str(tmp_path / "c"), spec, seed=8)
    assert [r.captions for r in c.records] != [r.captions for r in a.records]


def test_captions_name_the_painted_colors(synthetic_dir):
    data = json.loads((synthetic_dir / "manifest.json").read_text())
    for rec in data["records"][:16]:
        img = np.asarray(Image.open(synthetic_dir / rec["image"]).convert("RGB"))
        R = img.shape[0]
        for b, band in enumerate(BANDS):
            color = rec["colors"][band]
            rows = img[b * R // 4:(b + 1) * R // 4]
            painted = (rows == COLORS[color]).all(-1)
            assert painted.any()
            assert not ((rows != BACKGROUND).any(-1) & ~painted).any()
        for cap in rec["captions"]:
            words = cap.split()
            for band in BANDS:
                assert rec["colors"][band] in words


def test_bands_occupy_equal_quarters_aligned_with_part_split():
    import torch
    colors = {"head": "red", "torso": "green", "legs": "blue", "feet": "yellow"}
    img = render_pedestrian(colors, 32)
    t = torch.from_numpy(img).permute(2, 0, 1)[None].float()
    for band, part in zip(BANDS, split_parts(t)):
        pixels = part[0].permute(1, 2, 0).reshape(-1, 3)
        seen = {tuple(int(v) for v in p) for p in pixels} - {BACKGROUND}
        assert seen == {COLORS[colors[band]]}


def test_train_data_pairs_and_image_range(manifest_path):
    m = ingest_dataset(manifest_path)
    td = TrainData.from_manifest(m, 16, 20)
    assert td.images.shape == (64, 3, 16, 16)
    assert len(td) == 128
    assert td.image_index.tolist()[:4] == [0, 0, 1, 1]
    assert td.images.min() >= -1 and td.images.max() <= 1
    img = load_image(m.records[0].image, 32)
    assert img.shape == (3, 32, 32)
    assert os.path.isabs(m.records[0].image)
