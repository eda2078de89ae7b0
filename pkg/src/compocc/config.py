"""Run configuration and seeded random substreams.

Every tunable lives in RunConfig with its documented default; values come
from (highest precedence first) command-line flags, a JSON config file, then
the defaults. All randomness anywhere in a run derives from the single
top-level seed through named substreams, which is what makes whole pipelines
byte-reproducible.
"""

import json
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import InvalidConfig

DEFAULT_LEVEL_BOUNDS = {"L1": (0.2, 0.4), "L2": (0.4, 0.6), "L3": (0.6, 0.8)}


def substream(seed, *names) -> np.random.Generator:
    """Independent generator for (seed, names...); stable across runs."""
    keys = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, (int, np.integer)):
            keys.append(int(name) & 0xFFFFFFFF)
        else:
            keys.append(zlib.crc32(str(name).encode()))
    return np.random.default_rng(keys)


def subseed(seed, *names) -> int:
    """Plain integer seed derived from a named substream."""
    return int(substream(seed, *names).integers(2**63))


@dataclass
class RunConfig:
    seed: int = 0
    family: str = "vmf"  # {"dict", "vmf"}

    # world shape
    num_classes: int = 3
    mixtures_per_class: int = 4
    components: int = 16  # dictionary size K
    channels: int = 16
    height: int = 14
    width: int = 14
    concentration: float = 20.0

    # modeling knobs
    binarize_threshold: float = 0.5
    visibility_prior: float = 0.5
    localize_threshold: float = 0.0
    bernoulli_clamp: float = 1e-3
    simplex_floor: float = 1e-4
    background_samples: int = 5000
    assign_metric: str = "occlusion"

    # iteration caps and tolerances
    em_max_iters: int = 100
    em_tol: float = 1e-6
    dict_max_iters: int = 100
    dict_tol: float = 1e-6
    training_rounds: int = 10

    # synthetic dataset sizes
    train_per_class: int = 20
    test_per_class: int = 10
    background_images: int = 10
    occlusion_levels: tuple = ("L1", "L2", "L3")
    occluder_types: tuple = ("white", "noise", "texture", "object")
    level_bounds: dict = field(default_factory=lambda: dict(DEFAULT_LEVEL_BOUNDS))
    dirichlet_concentration: float = 0.15
    shared_position_fraction: float = 0.85
    max_pairwise_cosine: float = 0.8
    texture_palette_size: int = 3
    texture_spread_factor: float = 0.25


_FIELDS = {f.name: f for f in fields(RunConfig)}


def validate_config(config: RunConfig) -> RunConfig:
    c = config
    if c.family not in ("dict", "vmf"):
        raise InvalidConfig(f"family must be 'dict' or 'vmf', got {c.family!r}")
    if not 0.0 < c.visibility_prior < 1.0:
        raise InvalidConfig(f"visibility_prior must be in (0, 1), got {c.visibility_prior}")
    if not -1.0 < c.binarize_threshold < 1.0:
        raise InvalidConfig(f"binarize_threshold must be in (-1, 1), got {c.binarize_threshold}")
    if c.concentration <= 0.0:
        raise InvalidConfig(f"concentration must be > 0, got {c.concentration}")
    if c.components < 2:
        raise InvalidConfig(f"components must be >= 2, got {c.components}")
    if c.channels < 3:
        raise InvalidConfig(f"channels must be >= 3, got {c.channels}")
    if min(c.height, c.width, c.num_classes, c.mixtures_per_class) < 1:
        raise InvalidConfig("height, width, num_classes, mixtures_per_class must be >= 1")
    if c.assign_metric not in ("occlusion", "plain"):
        raise InvalidConfig(f"assign_metric must be occlusion or plain, got {c.assign_metric!r}")
    if min(c.em_max_iters, c.dict_max_iters, c.training_rounds) < 1:
        raise InvalidConfig("iteration caps must be >= 1")
    if min(c.em_tol, c.dict_tol) < 0.0:
        raise InvalidConfig("tolerances must be >= 0")
    if min(c.train_per_class, c.test_per_class, c.background_images) < 1:
        raise InvalidConfig("dataset sizes must be >= 1")
    if c.train_per_class < c.mixtures_per_class:
        raise InvalidConfig("train_per_class must be >= mixtures_per_class")
    if not 0.0 < c.bernoulli_clamp < 0.5 or not 0.0 < c.simplex_floor * c.components < 1.0:
        raise InvalidConfig("clamp/floor values out of range")
    if c.dirichlet_concentration <= 0.0:
        raise InvalidConfig("dirichlet_concentration must be > 0")
    if not 0.0 <= c.shared_position_fraction < 1.0:
        raise InvalidConfig("shared_position_fraction must be in [0, 1)")
    if c.background_samples < 1:
        raise InvalidConfig("background_samples must be >= 1")
    for level in c.occlusion_levels:
        bounds = c.level_bounds.get(level)
        if bounds is None:
            raise InvalidConfig(f"no bounds configured for level {level!r}")
        lo, hi = float(bounds[0]), float(bounds[1])
        if not 0.0 < lo < hi <= 1.0:
            raise InvalidConfig(f"invalid bounds for {level}: need 0 < lo < hi <= 1, got {bounds}")
    for kind in c.occluder_types:
        if kind not in ("white", "noise", "texture", "object"):
            raise InvalidConfig(f"unknown occluder type {kind!r}")
    return c


def _coerce(name, value):
    kind = _FIELDS[name].type
    try:
        if name == "level_bounds":
            return {str(k): (float(v[0]), float(v[1])) for k, v in dict(value).items()}
        if name in ("occlusion_levels", "occluder_types"):
            return tuple(str(v) for v in value)
        if kind == "int":
            out = int(value)
            if out != float(value):
                raise ValueError("not an integer")
            return out
        if kind == "float":
            return float(value)
        if kind == "str":
            return str(value)
    except (TypeError, ValueError, KeyError, IndexError) as exc:
        raise InvalidConfig(f"bad value for {name!r}: {value!r} ({exc})") from exc
    return value


def build_config(file_path=None, overrides=None) -> RunConfig:
    """Merge defaults, a JSON config file and explicit overrides, then validate."""
    values = {}
    if file_path is not None:
        path = Path(file_path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise InvalidConfig("config file must hold a JSON object")
        for key, value in doc.items():
            if key not in _FIELDS:
                raise InvalidConfig(f"unknown config key {key!r}")
            values[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise InvalidConfig(f"unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return validate_config(RunConfig(**values))
