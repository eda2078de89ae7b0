"""Image to feature-lattice extraction.

Runs images through a VGG16 backbone, grabs one pooling layer's activations,
L2-normalizes each lattice position, and writes CFMP files plus a JSON
manifest. The bridge is a pure format adapter: all modeling happens in the
consumer, and the emitted files follow the CFMP/manifest contract exactly.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torchvision
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"CFMP"
FORMAT_VERSION = 1
# Positions whose raw activation norm falls below this carry no direction.
INACTIVE_NORM_THRESHOLD = 1e-6

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

POOL_LAYERS = ("pool1", "pool2", "pool3", "pool4", "pool5")


@dataclass
class ExtractionJob:
    """One batch of images to convert into feature maps."""

    images: list  # (path, label) pairs
    out_dir: Path
    layer: str = "pool4"
    image_size: int = 224
    weights: str | None = None  # state-dict path; random init with fixed seed otherwise
    seed: int = 0

    def __post_init__(self):
        if self.layer not in POOL_LAYERS:
            raise ValueError(f"layer must be one of {POOL_LAYERS}, got {self.layer!r}")
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        self.out_dir = Path(self.out_dir)


def load_backbone(weights=None, seed=0) -> torch.nn.Module:
    """VGG16 feature stack; random but seed-deterministic init without weights."""
    torch.manual_seed(seed)
    model = torchvision.models.vgg16(weights=None)
    if weights is not None:
        state = torch.load(weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    return model.features


def pool_truncated(features: torch.nn.Module, layer: str) -> torch.nn.Module:
    """The backbone truncated just after the requested pooling layer."""
    index = POOL_LAYERS.index(layer)
    pools = [i for i, m in enumerate(features) if isinstance(m, torch.nn.MaxPool2d)]
    return features[: pools[index] + 1]


def preprocess(image: Image.Image, size: int) -> torch.Tensor:
    """Resize, RGB-convert and standardize with the ImageNet statistics."""
    rgb = image.convert("RGB").resize((size, size), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.array(IMAGENET_MEAN, dtype=np.float32)) / np.array(
        IMAGENET_STD, dtype=np.float32
    )
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def normalize_positions(raw: np.ndarray):
    """Unit-normalize each (H, W) position; near-zero positions go inactive.

    Mirrors the consumer's rule: pre-normalization norm below the threshold
    zeroes the vector and clears the active flag; vectors already unit within
    1e-6 pass through untouched.
    """
    data = raw.astype(np.float32)
    norms = np.linalg.norm(data.astype(np.float64), axis=-1)
    active = norms >= INACTIVE_NORM_THRESHOLD
    rescale = active & (np.abs(norms - 1.0) > 1e-6)
    out = np.zeros_like(data)
    out[active] = data[active]
    if rescale.any():
        out[rescale] = (data[rescale].astype(np.float64) / norms[rescale, None]).astype(
            np.float32
        )
    return out, active


def write_cfmp(path, data: np.ndarray, active: np.ndarray) -> None:
    h, w, c = data.shape
    header = FEATURE_MAGIC + struct.pack("<IIII", FORMAT_VERSION, h, w, c)
    payload = data.astype("<f4").tobytes() + active.astype(np.uint8).tobytes()
    Path(path).write_bytes(header + payload)


def extract_feature_map(model: torch.nn.Module, image: Image.Image, size: int):
    with torch.no_grad():
        activations = model(preprocess(image, size))[0]
    return normalize_positions(activations.numpy().transpose(1, 2, 0))


def extract(job: ExtractionJob) -> Path:
    """Run the job; returns the manifest path.

    Undecodable images are skipped with a warning and left out of the
    manifest. Output is deterministic for a fixed job.
    """
    features = pool_truncated(load_backbone(job.weights, job.seed), job.layer)
    out = Path(job.out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for index, (path, label) in enumerate(job.images):
        path = Path(path)
        try:
            with Image.open(path) as image:
                data, active = extract_feature_map(features, image, job.image_size)
        except (OSError, UnidentifiedImageError) as exc:
            logger.warning("skipping undecodable image %s: %s", path, exc)
            continue
        name = f"features/{index:05d}_{path.stem}.cfmp"
        write_cfmp(out / name, data, active)
        entries.append(
            {
                "feature_path": name,
                "label": str(label),
                "mask_path": None,
                "occlusion_level": "none",
                "occluder_type": "none",
            }
        )
    manifest = {
        "metadata": {
            "backbone": "vgg16",
            "weights": job.weights or f"random-init(seed={job.seed})",
            "layer": job.layer,
            "preprocessing": (
                f"RGB, bilinear resize to {job.image_size}x{job.image_size}, "
                "scaled to [0,1], standardized with ImageNet mean/std"
            ),
            "normalization": "per-position L2, inactive below 1e-6",
        },
        "entries": entries,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path


def collect_images(source) -> list:
    """Build (path, label) pairs from a directory or a listing file.

    Directory mode labels images by their immediate subdirectory (files at
    the top level get "unlabeled"); a text file holds one "path<TAB>label"
    or bare path per line.
    """
    source = Path(source)
    suffixes = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tiff", ".webp"}
    if source.is_dir():
        pairs = []
        for path in sorted(source.rglob("*")):
            if path.suffix.lower() in suffixes and path.is_file():
                relative = path.relative_to(source)
                label = relative.parts[0] if len(relative.parts) > 1 else "unlabeled"
                pairs.append((path, label))
        return pairs
    pairs = []
    for line in source.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        part = line.split("\t")
        pairs.append((Path(part[0]), part[1] if len(part) > 1 else "unlabeled"))
    return pairs
