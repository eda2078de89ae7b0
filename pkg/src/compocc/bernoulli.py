"""Binary part encodings and per-position Bernoulli models over them.

This is the coarse baseline: each feature vector is reduced to the set of
dictionary parts whose cosine similarity clears a threshold, and a product of
Bernoullis models those bits per position. The occlusion-aware variant lets a
position-independent background bit model take over wherever it explains the
bits better.
"""

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    BadHeader,
    DimensionMismatch,
    InsufficientData,
    InvalidParameter,
    InvalidPrior,
    TrailingData,
    Truncated,
)
from .features import FORMAT_VERSION, FeatureMap, OcclusionScoreMap, _check_header, _frozen
from .vmf import Dictionary, as_generator

BERNOULLI_MAGIC = b"CBRN"

# Hard 0/1 frequencies make the log likelihood degenerate, so estimates are
# clamped into [CLAMP_EPS, 1 - CLAMP_EPS].
CLAMP_EPS = 1e-3


@dataclass
class BinaryEncoding:
    """Per-position part detection bits plus the source activity mask.

    Inactive positions carry all-false rows and are skipped by every
    likelihood sum, mirroring the feature-map exclusion rule.
    """

    bits: np.ndarray
    active: np.ndarray

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=bool)
        active = np.ascontiguousarray(self.active, dtype=bool)
        if bits.ndim != 3 or active.shape != bits.shape[:2]:
            raise DimensionMismatch(
                f"bits must be (H, W, K) with matching active mask, got {bits.shape}"
            )
        if bits[~active].any():
            raise InvalidParameter("inactive positions must have all-false bit rows")
        self.bits = _frozen(bits)
        self.active = _frozen(active)

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def k(self):
        return self.bits.shape[2]


def _clamp(values, eps=CLAMP_EPS):
    return np.clip(values, eps, 1.0 - eps)


@dataclass
class BernoulliForeground:
    """Per-position part activation probabilities for one class/component."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.ascontiguousarray(self.probs, dtype=np.float64)
        if probs.ndim != 3:
            raise DimensionMismatch(f"probs must be (H, W, K), got {probs.shape}")
        if not np.isfinite(probs).all():
            raise InvalidParameter("probabilities must be finite")
        if probs.min() < CLAMP_EPS - 1e-9 or probs.max() > 1.0 - CLAMP_EPS + 1e-9:
            raise InvalidParameter(
                f"probabilities must lie in [{CLAMP_EPS}, {1.0 - CLAMP_EPS}]"
            )
        self.probs = _frozen(probs)

    @property
    def height(self):
        return self.probs.shape[0]

    @property
    def width(self):
        return self.probs.shape[1]

    @property
    def k(self):
        return self.probs.shape[2]

    @cached_property
    def log_on(self):
        return _frozen(np.log(self.probs))

    @cached_property
    def log_off(self):
        return _frozen(np.log1p(-self.probs))


@dataclass
class BernoulliBackground:
    """Position-independent part activation probabilities."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.ascontiguousarray(self.probs, dtype=np.float64)
        if probs.ndim != 1:
            raise DimensionMismatch(f"probs must be (K,), got {probs.shape}")
        if not np.isfinite(probs).all():
            raise InvalidParameter("probabilities must be finite")
        if probs.min() < CLAMP_EPS - 1e-9 or probs.max() > 1.0 - CLAMP_EPS + 1e-9:
            raise InvalidParameter(
                f"probabilities must lie in [{CLAMP_EPS}, {1.0 - CLAMP_EPS}]"
            )
        self.probs = _frozen(probs)

    @property
    def k(self):
        return self.probs.shape[0]

    @cached_property
    def log_on(self):
        return _frozen(np.log(self.probs))

    @cached_property
    def log_off(self):
        return _frozen(np.log1p(-self.probs))


def binarize(fmap: FeatureMap, dictionary: Dictionary, threshold: float) -> BinaryEncoding:
    """Set bit (p, k) where the cosine to part k strictly exceeds the threshold."""
    t = float(threshold)
    if not -1.0 < t < 1.0:
        raise InvalidParameter(f"binarization threshold must be in (-1, 1), got {t}")
    if fmap.channels != dictionary.dim:
        raise DimensionMismatch(
            f"feature dim {fmap.channels} != dictionary dim {dictionary.dim}"
        )
    sims = fmap.data.astype(np.float64) @ dictionary.means.T
    bits = (sims > t) & fmap.active[..., None]
    return BinaryEncoding(bits, fmap.active)


def _check_same_dims(encodings):
    if not encodings:
        raise InsufficientData("need at least one encoding")
    shape = encodings[0].bits.shape
    for enc in encodings:
        if enc.bits.shape != shape:
            raise DimensionMismatch(f"encoding shapes differ: {enc.bits.shape} vs {shape}")
    return shape


def estimate_bernoulli_foreground(encodings, clamp_eps=CLAMP_EPS) -> BernoulliForeground:
    """Clamped per-position mean of the bits across images."""
    _check_same_dims(encodings)
    stack = np.stack([enc.bits for enc in encodings])
    return BernoulliForeground(_clamp(stack.mean(axis=0), clamp_eps))


def estimate_bernoulli_background(
    encodings, sample_count: int, seed, clamp_eps=CLAMP_EPS
) -> BernoulliBackground:
    """Clamped mean over bit rows sampled from background encodings.

    Rows are pooled from active positions in encoding order, row-major per
    lattice, and sampled uniformly without replacement, so sample_count equal
    to the pool size reproduces the global mean exactly.
    """
    _check_same_dims(encodings)
    rows = np.concatenate([enc.bits[enc.active] for enc in encodings], axis=0)
    j = int(sample_count)
    if j < 1:
        raise InvalidParameter(f"sample_count must be >= 1, got {j}")
    if rows.shape[0] < j:
        raise InsufficientData(
            f"need at least {j} background rows, have {rows.shape[0]}"
        )
    idx = as_generator(seed).choice(rows.shape[0], size=j, replace=False)
    return BernoulliBackground(_clamp(rows[idx].mean(axis=0), clamp_eps))


def _check_enc_fg(enc: BinaryEncoding, fg: BernoulliForeground):
    if enc.bits.shape != fg.probs.shape:
        raise DimensionMismatch(
            f"encoding {enc.bits.shape} does not match model {fg.probs.shape}"
        )


def bernoulli_log_likelihood(enc: BinaryEncoding, fg: BernoulliForeground) -> float:
    """Sum of per-bit Bernoulli log probabilities over active positions."""
    _check_enc_fg(enc, fg)
    logp = np.where(enc.bits, fg.log_on, fg.log_off)
    return float(logp[enc.active].sum())


def _position_scores(enc, fg: BernoulliForeground, bg: BernoulliBackground, prior):
    """Per-position foreground/background log scores including the prior."""
    if bg.k != enc.k:
        raise DimensionMismatch(f"background has {bg.k} parts, encoding {enc.k}")
    fg_pos = np.where(enc.bits, fg.log_on, fg.log_off).sum(axis=-1) + np.log(prior)
    bg_pos = np.where(enc.bits, bg.log_on, bg.log_off).sum(axis=-1) + np.log1p(-prior)
    return fg_pos, bg_pos


def check_prior(prior) -> float:
    p = float(prior)
    if not 0.0 < p < 1.0:
        raise InvalidPrior(f"visibility prior must be in (0, 1), got {p}")
    return p


def dict_occlusion_likelihood(
    enc: BinaryEncoding, fg: BernoulliForeground, bg: BernoulliBackground, prior
):
    """Occlusion-aware log likelihood and the per-position visibility map.

    Each active position takes the better of foreground-plus-prior and
    background-plus-complement; ties count as visible. Inactive positions
    contribute nothing and read as visible.
    """
    p = check_prior(prior)
    _check_enc_fg(enc, fg)
    fg_pos, bg_pos = _position_scores(enc, fg, bg, p)
    visibility = ~enc.active | (fg_pos >= bg_pos)
    total = float(np.maximum(fg_pos, bg_pos)[enc.active].sum())
    return total, visibility


def bernoulli_score_map(
    enc: BinaryEncoding, fg: BernoulliForeground, bg: BernoulliBackground, prior
) -> OcclusionScoreMap:
    """Background-over-foreground log-likelihood ratio per position."""
    p = check_prior(prior)
    _check_enc_fg(enc, fg)
    fg_pos, bg_pos = _position_scores(enc, fg, bg, p)
    scores = np.where(enc.active, bg_pos - fg_pos, 0.0)
    return OcclusionScoreMap(scores, enc.active)


def write_bernoulli_model(path, fg: BernoulliForeground, bg: BernoulliBackground) -> None:
    if fg.k != bg.k:
        raise DimensionMismatch(f"foreground has {fg.k} parts, background {bg.k}")
    header = BERNOULLI_MAGIC + struct.pack(
        "<IIII", FORMAT_VERSION, fg.height, fg.width, fg.k
    )
    payload = fg.probs.astype("<f4").tobytes() + bg.probs.astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_bernoulli_model(path):
    blob = Path(path).read_bytes()
    (h, w, k), head = _check_header(blob, BERNOULLI_MAGIC, 3)
    if min(h, w, k) < 1:
        raise BadHeader(f"invalid model dimensions {(h, w, k)}")
    expected = head + (h * w * k + k) * 4
    if len(blob) < expected:
        raise Truncated(f"expected {expected} bytes, file has {len(blob)}")
    if len(blob) > expected:
        raise TrailingData(f"{len(blob) - expected} bytes past declared payload")
    fg = np.frombuffer(blob, dtype="<f4", count=h * w * k, offset=head)
    bg = np.frombuffer(blob, dtype="<f4", count=k, offset=head + h * w * k * 4)
    return (
        BernoulliForeground(_clamp(fg.astype(np.float64)).reshape(h, w, k)),
        BernoulliBackground(_clamp(bg.astype(np.float64))),
    )
