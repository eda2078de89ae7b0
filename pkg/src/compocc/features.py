"""Feature lattices, occlusion masks and their on-disk formats.

A FeatureMap is an H x W grid of C-dimensional direction vectors taken from
some convolutional layer. Positions whose raw activation is (near) zero carry
no direction: they stay zero, are flagged inactive, and are excluded from
every statistic downstream. The binary formats defined here (CFMP for feature
maps, CMSK for masks) plus the JSON manifest are the interchange contract
with external feature producers.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadHeader,
    BadMagic,
    BadVersion,
    DimensionMismatch,
    InvalidFeature,
    InvalidManifest,
    TrailingData,
    Truncated,
)

FEATURE_MAGIC = b"CFMP"
MASK_MAGIC = b"CMSK"
FORMAT_VERSION = 1

# Raw vectors shorter than this carry no usable direction.
INACTIVE_NORM_THRESHOLD = 1e-6
# Active vectors must be unit within this; normalize_features leaves vectors
# already inside the band untouched so that it is exactly idempotent.
UNIT_NORM_TOL = 1e-6

OCCLUSION_LEVELS = ("none", "L1", "L2", "L3")
OCCLUDER_TYPES = ("none", "white", "noise", "texture", "object")
LEVEL_BOUNDS = {"L1": (0.2, 0.4), "L2": (0.4, 0.6), "L3": (0.6, 0.8)}


def _frozen(arr):
    arr.setflags(write=False)
    return arr


@dataclass
class FeatureMap:
    """Unit-norm feature vectors on an H x W lattice.

    data is float32 (H, W, C); active marks positions with a valid direction.
    Inactive positions hold the zero vector. Instances are immutable.
    """

    data: np.ndarray
    active: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidFeature(f"feature data must be (H, W, C), got {data.shape}")
        active = np.ascontiguousarray(self.active, dtype=bool)
        if active.shape != data.shape[:2]:
            raise DimensionMismatch(
                f"active mask {active.shape} does not match lattice {data.shape[:2]}"
            )
        if not np.isfinite(data).all():
            raise InvalidFeature("feature data contains non-finite values")
        norms = np.linalg.norm(data.astype(np.float64), axis=-1)
        if active.any() and np.abs(norms[active] - 1.0).max() > UNIT_NORM_TOL:
            raise InvalidFeature("active positions must hold unit-norm vectors")
        if (~active).any() and norms[~active].max(initial=0.0) != 0.0:
            raise InvalidFeature("inactive positions must hold the zero vector")
        self.data = _frozen(data)
        self.active = _frozen(active)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    @property
    def active_count(self):
        return int(self.active.sum())


@dataclass
class OcclusionMask:
    """Per-position visible/occluded labels paired with a feature lattice."""

    occluded: np.ndarray

    def __post_init__(self):
        occ = np.ascontiguousarray(self.occluded, dtype=bool)
        if occ.ndim != 2 or min(occ.shape) < 1:
            raise InvalidFeature(f"mask must be (H, W), got {occ.shape}")
        self.occluded = _frozen(occ)

    @property
    def height(self):
        return self.occluded.shape[0]

    @property
    def width(self):
        return self.occluded.shape[1]

    @property
    def occluded_fraction(self):
        return float(self.occluded.mean())


@dataclass
class OcclusionScoreMap:
    """Per-position log-likelihood ratio of background over foreground.

    Positive scores indicate the position is better explained as occluder.
    Inactive positions carry score 0 and are flagged; they never enter
    metrics. Ties (score exactly 0) count as visible.
    """

    scores: np.ndarray
    active: np.ndarray

    def __post_init__(self):
        scores = np.ascontiguousarray(self.scores, dtype=np.float64)
        active = np.ascontiguousarray(self.active, dtype=bool)
        if scores.ndim != 2 or active.shape != scores.shape:
            raise DimensionMismatch("scores and active mask must share an (H, W) shape")
        self.scores = _frozen(scores)
        self.active = _frozen(active)

    def visibility(self):
        """Boolean map, True where the foreground model wins (or no data)."""
        return ~(self.active & (self.scores > 0.0))

    def predicted_occluded(self, threshold=0.0):
        """Active positions whose score exceeds the threshold."""
        return self.active & (self.scores > threshold)


def normalize_features(raw) -> FeatureMap:
    """Scale each lattice vector to unit norm, flagging degenerate positions.

    Positions with pre-normalization norm below 1e-6 become the zero vector
    and are marked inactive. Vectors already unit within 1e-6 are left
    untouched, which makes the operation exactly idempotent on its output.
    """
    arr = np.asarray(raw)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise InvalidFeature(f"expected an (H, W, C) tensor, got shape {arr.shape}")
    data = arr.astype(np.float32)
    bad = ~np.isfinite(data)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0][:2])
        raise InvalidFeature(f"non-finite feature value at position {pos}")
    norms = np.linalg.norm(data.astype(np.float64), axis=-1)
    active = norms >= INACTIVE_NORM_THRESHOLD
    rescale = active & (np.abs(norms - 1.0) > UNIT_NORM_TOL)
    out = np.zeros_like(data)
    out[active] = data[active]
    if rescale.any():
        out[rescale] = (data[rescale].astype(np.float64) / norms[rescale, None]).astype(
            np.float32
        )
    return FeatureMap(out, active)


def _read_file(path):
    return Path(path).read_bytes()


def _check_header(blob, magic, fixed_u32):
    """Parse and validate magic, version and fixed_u32 little-endian fields."""
    head = 4 + 4 * (1 + fixed_u32)
    if len(blob) < 4:
        raise Truncated("file shorter than magic")
    if blob[:4] != magic:
        raise BadMagic(f"expected magic {magic!r}, found {blob[:4]!r}")
    if len(blob) < head:
        raise Truncated("file shorter than header")
    fields = struct.unpack_from(f"<{1 + fixed_u32}I", blob, 4)
    if fields[0] != FORMAT_VERSION:
        raise BadVersion(f"unsupported format version {fields[0]}")
    return fields[1:], head


def write_feature_map(fmap: FeatureMap, path) -> None:
    """Serialize a FeatureMap; the float payload is preserved bit-exactly."""
    header = FEATURE_MAGIC + struct.pack(
        "<IIII", FORMAT_VERSION, fmap.height, fmap.width, fmap.channels
    )
    payload = fmap.data.astype("<f4").tobytes() + fmap.active.astype(np.uint8).tobytes()
    Path(path).write_bytes(header + payload)


def read_feature_map(path) -> FeatureMap:
    blob = _read_file(path)
    (h, w, c), head = _check_header(blob, FEATURE_MAGIC, 3)
    if min(h, w, c) < 1:
        raise BadHeader(f"invalid lattice dimensions {(h, w, c)}")
    expected = head + h * w * c * 4 + h * w
    if len(blob) < expected:
        raise Truncated(f"expected {expected} bytes, file has {len(blob)}")
    if len(blob) > expected:
        raise TrailingData(f"{len(blob) - expected} bytes past declared payload")
    data = np.frombuffer(blob, dtype="<f4", count=h * w * c, offset=head)
    flags = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=head + h * w * c * 4)
    if flags.max(initial=0) > 1:
        raise BadHeader("active flags must be 0 or 1")
    return FeatureMap(data.reshape(h, w, c), flags.reshape(h, w).astype(bool))


def write_mask(mask: OcclusionMask, path) -> None:
    header = MASK_MAGIC + struct.pack("<III", FORMAT_VERSION, mask.height, mask.width)
    Path(path).write_bytes(header + mask.occluded.astype(np.uint8).tobytes())


def read_mask(path) -> OcclusionMask:
    blob = _read_file(path)
    (h, w), head = _check_header(blob, MASK_MAGIC, 2)
    if min(h, w) < 1:
        raise BadHeader(f"invalid mask dimensions {(h, w)}")
    expected = head + h * w
    if len(blob) < expected:
        raise Truncated(f"expected {expected} bytes, file has {len(blob)}")
    if len(blob) > expected:
        raise TrailingData(f"{len(blob) - expected} bytes past declared payload")
    values = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=head)
    if values.max(initial=0) > 1:
        raise BadHeader("mask values must be 0 (visible) or 1 (occluded)")
    return OcclusionMask(values.reshape(h, w).astype(bool))


@dataclass
class ManifestEntry:
    feature_path: str
    label: str
    mask_path: str | None = None
    occlusion_level: str = "none"
    occluder_type: str = "none"


@dataclass
class DatasetManifest:
    """Listing of feature files with labels and occlusion annotations.

    Paths are stored relative to the manifest location; root is filled in by
    load_manifest so entries can be resolved after loading.
    """

    entries: list
    root: Path | None = field(default=None, compare=False)

    def feature_file(self, entry: ManifestEntry) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / entry.feature_path

    def mask_file(self, entry: ManifestEntry) -> Path | None:
        if entry.mask_path is None:
            return None
        base = self.root if self.root is not None else Path(".")
        return base / entry.mask_path

    def load_features(self, entry: ManifestEntry) -> FeatureMap:
        return read_feature_map(self.feature_file(entry))

    def load_pair(self, entry: ManifestEntry):
        """Load (FeatureMap, OcclusionMask | None), checking dimensions agree."""
        fmap = self.load_features(entry)
        mask_file = self.mask_file(entry)
        if mask_file is None:
            return fmap, None
        mask = read_mask(mask_file)
        if (mask.height, mask.width) != (fmap.height, fmap.width):
            raise DimensionMismatch(
                f"mask {mask.height}x{mask.width} does not match feature lattice "
                f"{fmap.height}x{fmap.width} for {entry.feature_path}"
            )
        return fmap, mask

    def labels(self):
        return sorted({e.label for e in self.entries})


def _validate_entry(raw, index):
    if not isinstance(raw, dict):
        raise InvalidManifest(f"entry {index} is not an object")
    known = {"feature_path", "label", "mask_path", "occlusion_level", "occluder_type"}
    data = {k: raw[k] for k in known if k in raw}
    if "feature_path" not in data or "label" not in data:
        raise InvalidManifest(f"entry {index} lacks feature_path or label")
    entry = ManifestEntry(
        feature_path=str(data["feature_path"]),
        label=str(data["label"]),
        mask_path=None if data.get("mask_path") is None else str(data["mask_path"]),
        occlusion_level=str(data.get("occlusion_level", "none")),
        occluder_type=str(data.get("occluder_type", "none")),
    )
    if entry.occlusion_level not in OCCLUSION_LEVELS:
        raise InvalidManifest(f"entry {index}: bad occlusion_level {entry.occlusion_level!r}")
    if entry.occluder_type not in OCCLUDER_TYPES:
        raise InvalidManifest(f"entry {index}: bad occluder_type {entry.occluder_type!r}")
    occluded = entry.occlusion_level != "none"
    if occluded and entry.mask_path is None:
        raise InvalidManifest(f"entry {index}: occluded entries need a mask_path")
    if occluded != (entry.occluder_type != "none"):
        raise InvalidManifest(f"entry {index}: occlusion_level and occluder_type disagree")
    return entry


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "entries": [
            {
                "feature_path": e.feature_path,
                "label": e.label,
                "mask_path": e.mask_path,
                "occlusion_level": e.occlusion_level,
                "occluder_type": e.occluder_type,
            }
            for e in manifest.entries
        ]
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest; unknown keys are ignored."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidManifest(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise InvalidManifest("manifest must be an object with an 'entries' list")
    entries = [_validate_entry(raw, i) for i, raw in enumerate(doc["entries"])]
    manifest = DatasetManifest(entries=entries, root=path.parent)
    for entry in entries:
        if not manifest.feature_file(entry).is_file():
            raise InvalidManifest(f"missing feature file {entry.feature_path}")
        mask_file = manifest.mask_file(entry)
        if mask_file is not None and not mask_file.is_file():
            raise InvalidManifest(f"missing mask file {entry.mask_path}")
    return manifest
