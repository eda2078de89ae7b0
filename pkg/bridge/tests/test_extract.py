import numpy as np
import pytest
from PIL import Image

from featurebridge.extract import (
    ExtractionJob,
    collect_images,
    extract,
    load_backbone,
    normalize_positions,
    pool_truncated,
    preprocess,
    write_cfmp,
)


def make_images(tmp_path, n=4, size=64, labeled=True, seed=0):
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        label = f"class{i % 2}" if labeled else None
        directory = tmp_path / label if label else tmp_path
        directory.mkdir(exist_ok=True)
        arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        path = directory / f"img{i:02d}.png"
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths


class TestNormalization:
    def test_unit_norms_and_inactive_rule(self):
        rng = np.random.default_rng(1)
        raw = rng.standard_normal((4, 4, 8)).astype(np.float32)
        raw[0, 0] = 0.0
        data, active = normalize_positions(raw)
        assert not active[0, 0] and np.array_equal(data[0, 0], np.zeros(8, np.float32))
        norms = np.linalg.norm(data[active].astype(np.float64), axis=1)
        assert np.abs(norms - 1.0).max() <= 1e-6

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        raw = rng.standard_normal((3, 3, 6)).astype(np.float32)
        once, active_once = normalize_positions(raw)
        twice, active_twice = normalize_positions(once)
        assert np.array_equal(once, twice)
        assert np.array_equal(active_once, active_twice)


class TestBackbone:
    def test_pool4_lattice_shape(self):
        model = pool_truncated(load_backbone(seed=0), "pool4")
        import torch

        with torch.no_grad():
            out = model(torch.zeros(1, 3, 224, 224))
        assert tuple(out.shape) == (1, 512, 14, 14)

    def test_preprocess_shape_and_range(self, tmp_path):
        path = make_images(tmp_path, n=1, labeled=False)[0]
        with Image.open(path) as image:
            tensor = preprocess(image, 224)
        assert tuple(tensor.shape) == (1, 3, 224, 224)
        assert float(tensor.abs().max()) < 10.0


class TestCollectImages:
    def test_directory_labels_from_subdirs(self, tmp_path):
        make_images(tmp_path, n=4)
        pairs = collect_images(tmp_path)
        assert len(pairs) == 4
        assert {label for _, label in pairs} == {"class0", "class1"}

    def test_flat_directory_unlabeled(self, tmp_path):
        make_images(tmp_path, n=2, labeled=False)
        pairs = collect_images(tmp_path)
        assert all(label == "unlabeled" for _, label in pairs)

    def test_listing_file(self, tmp_path):
        paths = make_images(tmp_path, n=2, labeled=False)
        listing = tmp_path / "list.txt"
        listing.write_text(f"{paths[0]}\tcar\n{paths[1]}\n")
        pairs = collect_images(listing)
        assert pairs[0][1] == "car" and pairs[1][1] == "unlabeled"


class TestExtract:
    def test_emits_manifest_and_features(self, tmp_path):
        paths = make_images(tmp_path / "imgs", n=3, labeled=False)
        out = tmp_path / "out"
        job = ExtractionJob(
            images=[(p, "x") for p in paths], out_dir=out, image_size=64
        )
        manifest = extract(job)
        import json

        doc = json.loads(manifest.read_text())
        assert len(doc["entries"]) == 3
        assert doc["metadata"]["layer"] == "pool4"
        for entry in doc["entries"]:
            blob = (out / entry["feature_path"]).read_bytes()
            assert blob[:4] == b"CFMP"

    def test_undecodable_image_skipped(self, tmp_path, caplog):
        paths = make_images(tmp_path / "imgs", n=2, labeled=False)
        broken = tmp_path / "imgs" / "broken.png"
        broken.write_bytes(b"not an image at all")
        out = tmp_path / "out"
        job = ExtractionJob(
            images=[(paths[0], "a"), (broken, "a"), (paths[1], "a")],
            out_dir=out,
            image_size=64,
        )
        import json
        import logging

        with caplog.at_level(logging.WARNING):
            manifest = extract(job)
        doc = json.loads(manifest.read_text())
        assert len(doc["entries"]) == 2
        assert any("broken" in r.message for r in caplog.records)

    def test_rejects_unknown_layer(self, tmp_path):
        with pytest.raises(ValueError):
            ExtractionJob(images=[], out_dir=tmp_path, layer="pool9")

    def test_constant_black_image_loads(self, tmp_path):
        # spatially constant input gives a spatially uniform activity pattern
        # away from the padding border; flags must equal the norm rule exactly
        path = tmp_path / "black.png"
        Image.fromarray(np.zeros((64, 64, 3), np.uint8)).save(path)
        out = tmp_path / "out"
        extract(ExtractionJob(images=[(path, "x")], out_dir=out, image_size=64))
        import json

        doc = json.loads((out / "manifest.json").read_text())
        blob = (out / doc["entries"][0]["feature_path"]).read_bytes()
        import struct

        _, h, w, c = struct.unpack_from("<IIII", blob, 4)
        data = np.frombuffer(blob, "<f4", h * w * c, 20).reshape(h, w, c)
        flags = np.frombuffer(blob, np.uint8, h * w, 20 + h * w * c * 4).reshape(h, w)
        norms = np.linalg.norm(data.astype(np.float64), axis=-1)
        assert np.array_equal(flags.astype(bool), norms > 0.5)
        if flags.any():
            assert np.abs(norms[flags.astype(bool)] - 1.0).max() <= 1e-6
        interior = flags[1:-1, 1:-1]
        assert interior.min() == interior.max()
