"""Bridge acceptance: emitted files satisfy the consumer's format contract."""

import json

import numpy as np
import pytest
from PIL import Image

from featurebridge.cli import main

compocc = pytest.importorskip("compocc")


def test_a9_bridge_contract(tmp_path):
    rng = np.random.default_rng(2024)
    images = tmp_path / "images"
    for label in ("a", "b"):
        (images / label).mkdir(parents=True)
    for i in range(10):
        arr = rng.integers(0, 256, size=(48, 48, 3), dtype=np.uint8)
        Image.fromarray(arr).save(images / ("a" if i % 2 else "b") / f"img{i:02d}.png")

    outs = []
    for run in ("one", "two"):
        out = tmp_path / run
        assert main([
            "extract", "--images", str(images), "--layer", "pool4",
            "--out", str(out), "--image-size", "64", "--seed", "3",
        ]) == 0
        outs.append(out)

    manifest = compocc.load_manifest(outs[0] / "manifest.json")
    assert len(manifest.entries) == 10
    assert manifest.labels() == ["a", "b"]
    for entry in manifest.entries:
        fmap = manifest.load_features(entry)
        norms = np.linalg.norm(fmap.data[fmap.active].astype(np.float64), axis=1)
        if norms.size:
            assert np.abs(norms - 1.0).max() <= 1e-6
        assert not fmap.data[~fmap.active].any()
        # the primary's validator also accepts it as a re-serialization source
        round_trip = tmp_path / "rt.cfmp"
        compocc.write_feature_map(fmap, round_trip)
        again = compocc.read_feature_map(round_trip)
        assert np.array_equal(again.data, fmap.data)

    files1 = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    files2 = sorted(p.relative_to(outs[1]) for p in outs[1].rglob("*") if p.is_file())
    assert files1 == files2
    for name in files1:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name

    doc = json.loads((outs[0] / "manifest.json").read_text())
    assert doc["metadata"]["layer"] == "pool4"
    print("PASS A9 - 10 bridge files validate against the consumer and repeat byte-identically")
