"""Per-position von Mises-Fisher mixture models over real-valued features.

The foreground holds one mixture-weight row per lattice position over the
shared dictionary kernels; the background is a single position-independent
weight vector. Likelihoods stay unnormalized (the shared kernel constant
cancels everywhere), occlusion is handled by a per-position max against the
background, and the whole objective is differentiable, so the weights and the
dictionary directions can also be improved by plain gradient ascent.
"""

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import (
    BadHeader,
    DictionaryMismatch,
    DimensionMismatch,
    InsufficientData,
    InvalidParameter,
    TrailingData,
    Truncated,
)
from .bernoulli import check_prior
from .features import FORMAT_VERSION, FeatureMap, OcclusionScoreMap, _check_header, _frozen
from .vmf import Dictionary, dictionary_sha256, kernel_logits

VMF_MAGIC = b"CVMF"

# Mixture rows never drop below this floor, so unseen components keep a
# finite log weight.
SIMPLEX_FLOOR = 1e-4

SIMPLEX_TOL = 1e-9


def floored_simplex_projection(weights, floor=SIMPLEX_FLOOR) -> np.ndarray:
    """Best floored simplex rows for given nonnegative weight rows.

    For each row c this returns the maximizer of sum_k c_k*log(w_k) over the
    simplex restricted to w_k >= floor: entries below a common cut are pinned
    at the floor and the rest are rescaled proportionally. Rows summing to
    zero (no data) come back uniform. Using the exact constrained maximizer
    here is what keeps EM monotone after flooring.
    """
    w = np.asarray(weights, dtype=np.float64)
    k = w.shape[-1]
    if k < 1 or not np.isfinite(w).all() or (w < 0).any():
        raise InvalidParameter("weights must be finite and nonnegative")
    if k * floor >= 1.0:
        raise InvalidParameter(f"floor {floor} infeasible for {k} components")
    rows = w.reshape(-1, k).copy()
    sums = rows.sum(axis=1)
    rows[sums <= 0.0] = 1.0
    order = -np.sort(-rows, axis=1)
    prefix = np.cumsum(order, axis=1)
    j = np.arange(1, k + 1)
    scale = prefix / (1.0 - (k - j) * floor)
    below_next = np.concatenate(
        [order[:, 1:] < scale[:, :-1] * floor, np.ones((rows.shape[0], 1), dtype=bool)],
        axis=1,
    )
    valid = (order >= scale * floor) & below_next
    # Largest valid cut floors the fewest entries; one always exists.
    pick = k - 1 - np.argmax(valid[:, ::-1], axis=1)
    chosen = scale[np.arange(rows.shape[0]), pick]
    out = np.maximum(rows / chosen[:, None], floor)
    return out.reshape(w.shape)


@dataclass
class VmfForeground:
    """Per-position mixture weights over the shared dictionary kernels."""

    weights: np.ndarray
    dictionary: Dictionary

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 3:
            raise DimensionMismatch(f"weights must be (H, W, K), got {w.shape}")
        if w.shape[2] != self.dictionary.k:
            raise DimensionMismatch(
                f"weights have {w.shape[2]} components, dictionary {self.dictionary.k}"
            )
        if not np.isfinite(w).all() or w.min() < SIMPLEX_FLOOR - 1e-12:
            raise InvalidParameter(f"weights must be >= {SIMPLEX_FLOOR}")
        if np.abs(w.sum(axis=-1) - 1.0).max() > SIMPLEX_TOL:
            raise InvalidParameter("every weight row must sum to 1 within 1e-9")
        self.weights = _frozen(w)

    @property
    def height(self):
        return self.weights.shape[0]

    @property
    def width(self):
        return self.weights.shape[1]

    @property
    def k(self):
        return self.weights.shape[2]

    @cached_property
    def log_weights(self):
        return _frozen(np.log(self.weights))


@dataclass
class VmfBackground:
    """Position-independent mixture weights over the same kernels."""

    weights: np.ndarray
    dictionary: Dictionary

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 1:
            raise DimensionMismatch(f"weights must be (K,), got {w.shape}")
        if w.shape[0] != self.dictionary.k:
            raise DimensionMismatch(
                f"weights have {w.shape[0]} components, dictionary {self.dictionary.k}"
            )
        if not np.isfinite(w).all() or w.min() < SIMPLEX_FLOOR - 1e-12:
            raise InvalidParameter(f"weights must be >= {SIMPLEX_FLOOR}")
        if abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise InvalidParameter("weights must sum to 1 within 1e-9")
        self.weights = _frozen(w)

    @property
    def k(self):
        return self.weights.shape[0]

    @cached_property
    def log_weights(self):
        return _frozen(np.log(self.weights))


def _stack_group(maps, dictionary):
    if not maps:
        raise InsufficientData("need at least one feature map")
    h, w = maps[0].height, maps[0].width
    for m in maps:
        if (m.height, m.width) != (h, w):
            raise DimensionMismatch("feature maps in a group must share lattice dims")
        if m.channels != dictionary.dim:
            raise DimensionMismatch(
                f"feature dim {m.channels} != dictionary dim {dictionary.dim}"
            )
    data = np.stack([m.data for m in maps]).astype(np.float64)
    active = np.stack([m.active for m in maps])
    kernels = np.einsum("nhwc,kc->nhwk", data, dictionary.means) * dictionary.concentration
    return data, active, kernels


def estimate_alpha(
    maps,
    dictionary: Dictionary,
    max_iters: int = 100,
    tol: float = 1e-6,
    init=None,
    floor=SIMPLEX_FLOOR,
    history: list | None = None,
) -> VmfForeground:
    """Fit per-position mixture weights to a group of maps by EM.

    Weights start uniform (or from ``init``), responsibilities are computed
    in log space, and the M-step projects mean responsibilities onto the
    floored simplex. Positions active in no map stay uniform. The group log
    likelihood is appended per iteration to ``history`` if given and is
    non-decreasing. Deterministic: no randomness is involved.
    """
    _, active, kernels = _stack_group(maps, dictionary)
    n, h, w, k = kernels.shape
    if init is None:
        alpha = np.full((h, w, k), 1.0 / k)
    else:
        start = init.weights if isinstance(init, VmfForeground) else np.asarray(init)
        if start.shape != (h, w, k):
            raise DimensionMismatch(f"init shape {start.shape} != {(h, w, k)}")
        alpha = start.astype(np.float64).copy()

    prev = None
    for _ in range(max_iters):
        logits = np.log(alpha)[None] + kernels
        norm = logsumexp(logits, axis=-1)
        obj = float(norm[active].sum())
        if history is not None:
            history.append(obj)
        gamma = np.exp(logits - norm[..., None])
        gamma *= active[..., None]
        if prev is not None and abs(obj - prev) <= tol * max(1.0, abs(prev)):
            break
        prev = obj
        alpha = floored_simplex_projection(gamma.sum(axis=0), floor)
    return VmfForeground(alpha, dictionary)


def estimate_vmf_background(
    maps,
    dictionary: Dictionary,
    max_iters: int = 100,
    tol: float = 1e-6,
    floor=SIMPLEX_FLOOR,
    history: list | None = None,
) -> VmfBackground:
    """Fit one global mixture-weight vector over all active positions."""
    if not maps:
        raise InsufficientData("need at least one feature map")
    rows = []
    for m in maps:
        if m.channels != dictionary.dim:
            raise DimensionMismatch(
                f"feature dim {m.channels} != dictionary dim {dictionary.dim}"
            )
        rows.append(m.data[m.active])
    x = np.concatenate(rows, axis=0).astype(np.float64)
    if x.shape[0] < 1:
        raise InsufficientData("background maps contain no active positions")
    kernels = kernel_logits(x, dictionary)
    k = dictionary.k
    beta = np.full(k, 1.0 / k)
    prev = None
    for _ in range(max_iters):
        logits = np.log(beta)[None, :] + kernels
        norm = logsumexp(logits, axis=-1)
        obj = float(norm.sum())
        if history is not None:
            history.append(obj)
        if prev is not None and abs(obj - prev) <= tol * max(1.0, abs(prev)):
            break
        prev = obj
        gamma = np.exp(logits - norm[:, None])
        beta = floored_simplex_projection(gamma.sum(axis=0), floor)
    return VmfBackground(beta, dictionary)


def _check_map_fg(fmap: FeatureMap, fg: VmfForeground):
    if (fmap.height, fmap.width) != (fg.height, fg.width):
        raise DimensionMismatch(
            f"lattice {(fmap.height, fmap.width)} != model {(fg.height, fg.width)}"
        )
    if fmap.channels != fg.dictionary.dim:
        raise DimensionMismatch(
            f"feature dim {fmap.channels} != dictionary dim {fg.dictionary.dim}"
        )


def generative_log_likelihood(fmap: FeatureMap, fg: VmfForeground, offset=0.0) -> float:
    """Sum over active positions of the per-position mixture log likelihood.

    ``offset`` is the shared per-component log constant, added once per
    active position.
    """
    _check_map_fg(fmap, fg)
    kernels = kernel_logits(fmap, fg.dictionary)
    mix = logsumexp(fg.log_weights + kernels, axis=-1)
    return float(mix[fmap.active].sum()) + offset * fmap.active_count


def foreground_background_scores(
    fmap: FeatureMap, fg: VmfForeground, bg: VmfBackground, prior
):
    """Per-position foreground/background log scores including the prior.

    Both sides omit the same kernel constant, so their difference and every
    comparison between them are independent of it.
    """
    p = check_prior(prior)
    _check_map_fg(fmap, fg)
    if bg.k != fg.k:
        raise DimensionMismatch(f"background has {bg.k} components, foreground {fg.k}")
    kernels = kernel_logits(fmap, fg.dictionary)
    fg_pos = logsumexp(fg.log_weights + kernels, axis=-1) + np.log(p)
    bg_pos = logsumexp(bg.log_weights[None, None] + kernels, axis=-1) + np.log1p(-p)
    return fg_pos, bg_pos


def occlusion_aware_log_likelihood(
    fmap: FeatureMap, fg: VmfForeground, bg: VmfBackground, prior, offset=0.0
):
    """Per-position max of foreground and background scores, plus visibility.

    Ties count as visible; inactive positions contribute nothing and read as
    visible. The comparison never sees ``offset`` (it shifts both sides
    equally), which is why decisions are independent of it by construction.
    """
    fg_pos, bg_pos = foreground_background_scores(fmap, fg, bg, prior)
    visibility = ~fmap.active | (fg_pos >= bg_pos)
    total = float(np.maximum(fg_pos, bg_pos)[fmap.active].sum())
    return total + offset * fmap.active_count, visibility


def occlusion_score_map(
    fmap: FeatureMap, fg: VmfForeground, bg: VmfBackground, prior, log_kernel_offset=0.0
) -> OcclusionScoreMap:
    """Background-minus-foreground score per position; positive = occluded.

    ``log_kernel_offset`` is accepted so callers can assert offset
    independence: a constant added to every component log kernel shifts both
    terms of the ratio identically and cancels exactly, so it never enters
    the computation.
    """
    fg_pos, bg_pos = foreground_background_scores(fmap, fg, bg, prior)
    scores = np.where(fmap.active, bg_pos - fg_pos, 0.0)
    return OcclusionScoreMap(scores, fmap.active)


def loglik_gradient(maps, fg: VmfForeground, dictionary: Dictionary):
    """Gradient of the group log likelihood in (weight logits, means).

    Weights are reparameterized through a per-position softmax evaluated at
    logits = log(weights); direction gradients are projected onto the tangent
    plane of the unit sphere at each mean.
    """
    if dictionary is not fg.dictionary and not (
        dictionary.concentration == fg.dictionary.concentration
        and np.array_equal(dictionary.means, fg.dictionary.means)
    ):
        raise DictionaryMismatch("foreground was built against a different dictionary")
    data, active, kernels = _stack_group(maps, dictionary)
    if kernels.shape[1:] != fg.weights.shape:
        raise DimensionMismatch(
            f"maps lattice {kernels.shape[1:]} != model {fg.weights.shape}"
        )
    logits = fg.log_weights[None] + kernels
    norm = logsumexp(logits, axis=-1)
    gamma = np.exp(logits - norm[..., None])
    gamma *= active[..., None]
    counts = gamma.sum(axis=0)
    n_pos = active.sum(axis=0)
    grad_logits = counts - n_pos[..., None] * fg.weights
    grad_means = dictionary.concentration * np.einsum("nhwk,nhwc->kc", gamma, data)
    radial = np.einsum("kc,kc->k", grad_means, dictionary.means)
    grad_means = grad_means - radial[:, None] * dictionary.means
    return grad_logits, grad_means


def finetune(
    maps,
    fg: VmfForeground,
    dictionary: Dictionary,
    steps: int,
    learning_rate: float,
    floor=SIMPLEX_FLOOR,
):
    """Joint gradient ascent on weight logits and dictionary directions.

    Directions are renormalized to the sphere after every step and weight
    rows are re-projected onto the floored simplex, so both invariants hold
    at every step. steps=0 or learning_rate=0 return the inputs unchanged.
    """
    if steps < 0:
        raise InvalidParameter(f"steps must be >= 0, got {steps}")
    lr = float(learning_rate)
    if not np.isfinite(lr) or lr < 0.0:
        raise InvalidParameter(f"learning rate must be finite and >= 0, got {lr}")
    if steps == 0 or lr == 0.0:
        return fg, dictionary

    current_fg = fg
    current_dict = dictionary
    for _ in range(steps):
        grad_logits, grad_means = loglik_gradient(maps, current_fg, current_dict)
        logits = current_fg.log_weights + lr * grad_logits
        shifted = logits - logits.max(axis=-1, keepdims=True)
        alpha = np.exp(shifted)
        alpha /= alpha.sum(axis=-1, keepdims=True)
        alpha = floored_simplex_projection(alpha, floor)
        means = current_dict.means + lr * grad_means
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        current_dict = Dictionary(means, current_dict.concentration)
        current_fg = VmfForeground(alpha, current_dict)
    return current_fg, current_dict


def write_vmf_model(path, fg: VmfForeground, bg: VmfBackground) -> None:
    """Serialize (foreground, background) with the dictionary content hash."""
    if bg.k != fg.k:
        raise DimensionMismatch(f"background has {bg.k} components, foreground {fg.k}")
    header = VMF_MAGIC + struct.pack("<IIII", FORMAT_VERSION, fg.height, fg.width, fg.k)
    payload = (
        fg.weights.astype("<f4").tobytes()
        + bg.weights.astype("<f4").tobytes()
        + dictionary_sha256(fg.dictionary)
    )
    Path(path).write_bytes(header + payload)


def read_vmf_model(path, dictionary: Dictionary):
    """Load (foreground, background), verifying the dictionary hash.

    Stored float32 rows are re-projected onto the floored simplex so the type
    invariants hold exactly after rounding.
    """
    blob = Path(path).read_bytes()
    (h, w, k), head = _check_header(blob, VMF_MAGIC, 3)
    if min(h, w, k) < 1:
        raise BadHeader(f"invalid model dimensions {(h, w, k)}")
    expected = head + (h * w * k + k) * 4 + 32
    if len(blob) < expected:
        raise Truncated(f"expected {expected} bytes, file has {len(blob)}")
    if len(blob) > expected:
        raise TrailingData(f"{len(blob) - expected} bytes past declared payload")
    fg_raw = np.frombuffer(blob, dtype="<f4", count=h * w * k, offset=head)
    bg_raw = np.frombuffer(blob, dtype="<f4", count=k, offset=head + h * w * k * 4)
    stored_hash = blob[expected - 32 :]
    if stored_hash != dictionary_sha256(dictionary):
        raise DictionaryMismatch("model references a different dictionary (hash mismatch)")
    fg = floored_simplex_projection(fg_raw.astype(np.float64).reshape(h, w, k))
    bg = floored_simplex_projection(bg_raw.astype(np.float64))
    return VmfForeground(fg, dictionary), VmfBackground(bg, dictionary)
