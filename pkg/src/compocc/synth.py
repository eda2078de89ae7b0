"""Synthetic benchmark with known generating parameters.

Builds a small world (shared dictionary, per-class pose templates, a global
background), samples feature maps from it, injects rectangular occluders of
four appearance types at three coverage levels with exact ground-truth masks,
and provides plain-loop extended-precision likelihood oracles that the fast
vectorized implementations are tested against.
"""

from dataclasses import dataclass

import numpy as np

from .bernoulli import BernoulliBackground, BernoulliForeground, BinaryEncoding
from .errors import (
    DimensionMismatch,
    InvalidParameter,
    NumericalError,
    OccluderInfeasible,
)
from .features import LEVEL_BOUNDS, FeatureMap, OcclusionMask
from .generative import VmfBackground, VmfForeground, floored_simplex_projection
from .vmf import Dictionary, as_generator, sample_uniform_sphere, sample_vmf


@dataclass
class SyntheticWorld:
    """Fully known generating model; a pure function of (config, seed)."""

    dictionary: Dictionary
    class_models: list  # per class: list of M generating VmfForeground
    background: VmfBackground
    white_direction: np.ndarray
    texture_palette: np.ndarray
    texture_spread: float
    seed: int

    @property
    def num_classes(self):
        return len(self.class_models)

    @property
    def mixtures_per_class(self):
        return len(self.class_models[0])

    @property
    def height(self):
        return self.class_models[0][0].height

    @property
    def width(self):
        return self.class_models[0][0].width


def make_world(
    num_classes: int,
    mixtures_per_class: int,
    k: int,
    height: int,
    width: int,
    channels: int,
    concentration: float,
    seed: int,
    dirichlet_concentration: float = 0.15,
    shared_position_fraction: float = 0.85,
    max_pairwise_cosine: float = 0.8,
    texture_palette_size: int = 3,
    texture_spread_factor: float = 0.25,
) -> SyntheticWorld:
    """Sample a generating world.

    Dictionary directions are uniform sphere draws re-sampled until every
    pairwise cosine stays below the cap; per-position template weights come
    from a sparse symmetric Dirichlet projected onto the floored simplex; the
    background mixes all components uniformly. A seeded fraction of lattice
    positions holds one row common to every class and pose template (objects
    share generic parts), which concentrates class evidence in the remaining
    positions and keeps heavy-occlusion classification off the ceiling.
    """
    if channels < 3:
        raise InvalidParameter(f"channels must be >= 3, got {channels}")
    if k < 2:
        raise InvalidParameter(f"k must be >= 2, got {k}")
    if min(num_classes, mixtures_per_class, height, width) < 1:
        raise InvalidParameter("num_classes, mixtures, height, width must be >= 1")
    if not 0.0 < max_pairwise_cosine < 1.0:
        raise InvalidParameter("max_pairwise_cosine must be in (0, 1)")
    if dirichlet_concentration <= 0.0:
        raise InvalidParameter("dirichlet_concentration must be > 0")
    if not 0.0 <= shared_position_fraction < 1.0:
        raise InvalidParameter("shared_position_fraction must be in [0, 1)")

    rng = as_generator([int(seed), 0xD1C7])
    means = np.empty((k, channels))
    for i in range(k):
        for _ in range(10_000):
            cand = sample_uniform_sphere(channels, rng)
            if i == 0 or (means[:i] @ cand).max() <= max_pairwise_cosine:
                means[i] = cand
                break
        else:
            raise NumericalError(
                f"could not place {k} directions under cosine cap {max_pairwise_cosine}"
            )
    dictionary = Dictionary(means, concentration)

    positions = height * width
    rng_common = as_generator([int(seed), 0xC033])
    n_shared = int(round(shared_position_fraction * positions))
    shared_idx = rng_common.permutation(positions)[:n_shared]
    shared_rows = floored_simplex_projection(
        rng_common.dirichlet(np.full(k, dirichlet_concentration), size=positions)
    )

    rng_classes = as_generator([int(seed), 0xC1A5])
    class_models = []
    for _ in range(num_classes):
        components = []
        for _ in range(mixtures_per_class):
            raw = rng_classes.dirichlet(np.full(k, dirichlet_concentration), size=positions)
            rows = floored_simplex_projection(raw)
            rows[shared_idx] = shared_rows[shared_idx]
            components.append(VmfForeground(rows.reshape(height, width, k), dictionary))
        class_models.append(components)

    background = VmfBackground(np.full(k, 1.0 / k), dictionary)

    rng_palette = as_generator([int(seed), 0x9A1E])
    white = sample_uniform_sphere(channels, rng_palette)
    palette = sample_uniform_sphere(channels, rng_palette, size=texture_palette_size)
    return SyntheticWorld(
        dictionary=dictionary,
        class_models=class_models,
        background=background,
        white_direction=white,
        texture_palette=palette,
        texture_spread=float(concentration) * texture_spread_factor,
        seed=int(seed),
    )


def _sample_rows(weight_rows, dictionary, rng):
    """Draw one component per row from its weights, then a vMF sample from it."""
    p, k = weight_rows.shape
    cum = np.cumsum(weight_rows, axis=1)
    cum[:, -1] = 1.0
    draws = rng.random((p, 1))
    comp = (draws > cum).sum(axis=1)
    out = np.empty((p, dictionary.dim))
    for j in range(k):
        idx = np.flatnonzero(comp == j)
        if idx.size:
            out[idx] = sample_vmf(dictionary.means[j], dictionary.concentration, rng, size=idx.size)
    return out, comp


def sample_image(world: SyntheticWorld, class_index: int, mixture_index: int, rng) -> FeatureMap:
    """Sample one all-active feature map from a class pose template."""
    fg = world.class_models[class_index][mixture_index]
    rng = as_generator(rng)
    rows = fg.weights.reshape(-1, fg.k)
    data, _ = _sample_rows(rows, world.dictionary, rng)
    h, w = fg.height, fg.width
    return FeatureMap(
        data.reshape(h, w, world.dictionary.dim).astype(np.float32),
        np.ones((h, w), dtype=bool),
    )


def sample_background_image(world: SyntheticWorld, rng) -> FeatureMap:
    """Sample an all-active map from the position-independent background."""
    rng = as_generator(rng)
    h, w = world.height, world.width
    rows = np.tile(world.background.weights, (h * w, 1))
    data, _ = _sample_rows(rows, world.dictionary, rng)
    return FeatureMap(
        data.reshape(h, w, world.dictionary.dim).astype(np.float32),
        np.ones((h, w), dtype=bool),
    )


def _feasible_rectangles(height, width, lo, hi, inclusive_hi):
    total = height * width
    pairs = []
    for rh in range(1, height + 1):
        for rw in range(1, width + 1):
            frac = rh * rw / total
            if frac >= lo and (frac <= hi if inclusive_hi else frac < hi):
                pairs.append((rh, rw))
    return pairs


def apply_occluder(
    fmap: FeatureMap,
    world: SyntheticWorld,
    occluder_type: str,
    level: str,
    rng,
    exclude_class: int | None = None,
    bounds: tuple | None = None,
):
    """Replace a uniformly placed rectangle of positions with occluder content.

    Types: white (one fixed direction everywhere), noise (uniform sphere),
    texture (vMF draws around a small fixed palette), object (draws from
    another class's generator at the same positions, avoiding
    ``exclude_class``). The rectangle is chosen uniformly among all side
    pairs whose area fraction lies inside the level bounds; positions outside
    the returned mask are untouched bit for bit.
    """
    if occluder_type not in ("white", "noise", "texture", "object"):
        raise InvalidParameter(f"unknown occluder type {occluder_type!r}")
    if level not in LEVEL_BOUNDS:
        raise InvalidParameter(f"unknown occlusion level {level!r}")
    if (fmap.height, fmap.width) != (world.height, world.width):
        raise DimensionMismatch("feature map does not match the world lattice")
    lo, hi = LEVEL_BOUNDS[level] if bounds is None else (float(bounds[0]), float(bounds[1]))
    pairs = _feasible_rectangles(fmap.height, fmap.width, lo, hi, inclusive_hi=(level == "L3"))
    if not pairs:
        raise OccluderInfeasible(
            f"no rectangle on a {fmap.height}x{fmap.width} lattice covers "
            f"a fraction inside {level} bounds [{lo}, {hi})"
        )
    rng = as_generator(rng)
    rh, rw = pairs[int(rng.integers(len(pairs)))]
    top = int(rng.integers(fmap.height - rh + 1))
    left = int(rng.integers(fmap.width - rw + 1))
    occluded = np.zeros((fmap.height, fmap.width), dtype=bool)
    occluded[top : top + rh, left : left + rw] = True
    occluded &= fmap.active
    n = int(occluded.sum())

    c = world.dictionary.dim
    if occluder_type == "white":
        replacement = np.tile(world.white_direction, (n, 1))
    elif occluder_type == "noise":
        replacement = sample_uniform_sphere(c, rng, size=n)
    elif occluder_type == "texture":
        palette_idx = rng.integers(world.texture_palette.shape[0], size=n)
        replacement = np.empty((n, c))
        for j in range(world.texture_palette.shape[0]):
            idx = np.flatnonzero(palette_idx == j)
            if idx.size:
                replacement[idx] = sample_vmf(
                    world.texture_palette[j], world.texture_spread, rng, size=idx.size
                )
    else:
        candidates = [y for y in range(world.num_classes) if y != exclude_class]
        if not candidates:
            candidates = list(range(world.num_classes))
        other = candidates[int(rng.integers(len(candidates)))]
        other_m = int(rng.integers(world.mixtures_per_class))
        # The occluder is a crop of the other object placed arbitrarily, so its
        # content comes from a uniformly placed source window of the same
        # shape, not from the covered positions themselves.
        src_top = int(rng.integers(fmap.height - rh + 1))
        src_left = int(rng.integers(fmap.width - rw + 1))
        src = world.class_models[other][other_m].weights[
            src_top : src_top + rh, src_left : src_left + rw
        ]
        rows = src[occluded[top : top + rh, left : left + rw]]
        replacement, _ = _sample_rows(rows, world.dictionary, rng)

    data = fmap.data.copy()
    data[occluded] = replacement.astype(np.float32)
    return FeatureMap(data, fmap.active), OcclusionMask(occluded)


def oracle_mixture_log_likelihood(f, weights, dictionary: Dictionary) -> float:
    """Plain-loop extended-precision mixture log likelihood at one vector."""
    total = np.longdouble(0.0)
    f = np.asarray(f, dtype=np.float64)
    for k in range(dictionary.k):
        dot = np.longdouble(0.0)
        for c in range(dictionary.dim):
            dot += np.longdouble(dictionary.means[k, c]) * np.longdouble(f[c])
        total += np.longdouble(weights[k]) * np.exp(np.longdouble(dictionary.concentration) * dot)
    return float(np.log(total))


def oracle_log_likelihood(subject, model, dictionary: Dictionary | None = None) -> float:
    """Reference log likelihood by naive summation in extended precision.

    Dispatches on types: a FeatureMap with vMF foreground/background weights,
    or a BinaryEncoding with Bernoulli foreground/background probabilities.
    No log-sum-exp shortcuts and no vectorized reductions are used, which
    keeps this path independent of the implementations it checks. Intended
    for small instances only.
    """
    if isinstance(subject, FeatureMap):
        if isinstance(model, VmfForeground):
            dictionary = dictionary or model.dictionary
            weights_at = lambda i, j: model.weights[i, j]
        elif isinstance(model, VmfBackground):
            dictionary = dictionary or model.dictionary
            weights_at = lambda i, j: model.weights
        else:
            raise InvalidParameter(f"unsupported model type {type(model).__name__}")
        total = np.longdouble(0.0)
        for i in range(subject.height):
            for j in range(subject.width):
                if not subject.active[i, j]:
                    continue
                total += np.longdouble(
                    oracle_mixture_log_likelihood(
                        subject.data[i, j].astype(np.float64), weights_at(i, j), dictionary
                    )
                )
        return float(total)

    if isinstance(subject, BinaryEncoding):
        if isinstance(model, BernoulliForeground):
            prob_at = lambda i, j, k: model.probs[i, j, k]
        elif isinstance(model, BernoulliBackground):
            prob_at = lambda i, j, k: model.probs[k]
        else:
            raise InvalidParameter(f"unsupported model type {type(model).__name__}")
        total = np.longdouble(0.0)
        for i in range(subject.height):
            for j in range(subject.width):
                if not subject.active[i, j]:
                    continue
                for k in range(subject.k):
                    p = np.longdouble(prob_at(i, j, k))
                    total += np.log(p) if subject.bits[i, j, k] else np.log(1 - p)
        return float(total)

    raise InvalidParameter(f"unsupported subject type {type(subject).__name__}")
