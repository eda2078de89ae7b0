"""von Mises-Fisher primitives with one shared concentration.

Densities are handled in log form and left unnormalized: with a single
concentration the normalizer is one constant shared by every component, so it
cancels in every foreground/background and between-class comparison made
downstream. Callers that need absolute values can add the constant through
the ``offset`` arguments of the likelihood functions.
"""

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import (
    BadHeader,
    DimensionMismatch,
    InsufficientData,
    InvalidFeature,
    InvalidParameter,
    InvalidWeights,
    TrailingData,
    Truncated,
)
from .features import FORMAT_VERSION, FeatureMap, _check_header, _frozen

DICTIONARY_MAGIC = b"CDIC"

WEIGHT_SUM_TOL = 1e-9
_UNIT_TOL = 1e-5


def as_generator(rng) -> np.random.Generator:
    """Accept a seed or a Generator and return a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _check_unit(vec, name):
    v = np.asarray(vec, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidFeature(f"{name} must be a vector, got shape {v.shape}")
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or abs(norm - 1.0) > _UNIT_TOL:
        raise InvalidFeature(f"{name} must be unit-norm, got norm {norm}")
    return v


@dataclass
class Dictionary:
    """K shared mean directions plus one concentration for all of them.

    concentration 0 is the uniform limit and is accepted; learning requires a
    strictly positive value.
    """

    means: np.ndarray
    concentration: float

    def __post_init__(self):
        means = np.ascontiguousarray(self.means, dtype=np.float64)
        if means.ndim != 2 or min(means.shape) < 1:
            raise InvalidParameter(f"means must be (K, C), got shape {means.shape}")
        if not np.isfinite(means).all():
            raise InvalidParameter("dictionary means must be finite")
        norms = np.linalg.norm(means, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise InvalidParameter("dictionary means must be unit-norm within 1e-6")
        s = float(self.concentration)
        if not np.isfinite(s) or s < 0.0:
            raise InvalidParameter(f"concentration must be finite and >= 0, got {s}")
        self.means = _frozen(means)
        self.concentration = s

    @property
    def k(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]


def kernel_logits(features, dictionary: Dictionary) -> np.ndarray:
    """Unnormalized log kernels concentration * <f, mu_k> for every position.

    Accepts a FeatureMap (returns (H, W, K)) or an (N, C) matrix of unit rows
    (returns (N, K)). Inactive positions yield the zero row.
    """
    if isinstance(features, FeatureMap):
        if features.channels != dictionary.dim:
            raise DimensionMismatch(
                f"feature dim {features.channels} != dictionary dim {dictionary.dim}"
            )
        x = features.data.astype(np.float64)
    else:
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != dictionary.dim:
            raise DimensionMismatch(
                f"feature dim {x.shape[-1]} != dictionary dim {dictionary.dim}"
            )
    return dictionary.concentration * (x @ dictionary.means.T)


def vmf_log_kernel(f, component: int, dictionary: Dictionary) -> float:
    """Log kernel of one component at a unit vector, in [-S, S].

    The normalization constant is intentionally omitted: it is identical for
    every component and cancels in all ratios used by the models here.
    """
    v = _check_unit(f, "feature vector")
    if not 0 <= component < dictionary.k:
        raise InvalidParameter(f"component {component} out of range 0..{dictionary.k - 1}")
    if v.size != dictionary.dim:
        raise DimensionMismatch(f"feature dim {v.size} != dictionary dim {dictionary.dim}")
    return float(dictionary.concentration * np.dot(dictionary.means[component], v))


def cosine_similarity(f, d) -> float:
    """Dot product of two unit vectors; value in [-1, 1]."""
    a = _check_unit(f, "first vector")
    b = _check_unit(d, "second vector")
    if a.size != b.size:
        raise DimensionMismatch(f"vector dims differ: {a.size} vs {b.size}")
    return float(np.dot(a, b))


def check_simplex(weights, k, tol=WEIGHT_SUM_TOL) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise DimensionMismatch(f"weights must have shape ({k},), got {w.shape}")
    if not np.isfinite(w).all() or (w < 0).any():
        raise InvalidWeights("weights must be finite and nonnegative")
    if abs(w.sum() - 1.0) > tol:
        raise InvalidWeights(f"weights sum to {w.sum()!r}, expected 1 within {tol}")
    return w


def mixture_log_likelihood(f, weights, dictionary: Dictionary, offset=0.0) -> float:
    """Stable log of the weighted kernel mixture at one unit vector.

    Zero-weight components are dropped before the log-sum-exp so a one-hot
    weight vector reproduces the bare component kernel exactly. ``offset`` is
    a shared per-component log constant added once to the result.
    """
    w = check_simplex(weights, dictionary.k)
    v = _check_unit(f, "feature vector")
    if v.size != dictionary.dim:
        raise DimensionMismatch(f"feature dim {v.size} != dictionary dim {dictionary.dim}")
    live = w > 0
    logits = np.log(w[live]) + dictionary.concentration * (dictionary.means[live] @ v)
    return float(logsumexp(logits)) + offset


def learn_dictionary(
    vectors,
    k: int,
    concentration: float,
    max_iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    history: list | None = None,
) -> Dictionary:
    """Cluster unit vectors into K mean directions by hard spherical EM.

    Assignment maximizes the shared-concentration kernel (equivalently the
    cosine); the update renormalizes cluster sums. Initialization is
    farthest-point on cosine distance from a seeded random start, clusters
    emptied during a sweep are re-seeded from the currently worst-covered
    vector, and ties always break toward the lowest index, so the result is a
    pure function of (inputs, seed). The clustering objective (sum of winning
    kernels) is appended per iteration to ``history`` if given and is
    non-decreasing.
    """
    x = np.ascontiguousarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InsufficientData(f"need an (N, C) matrix of vectors, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise InvalidFeature("input vectors must be finite")
    norms = np.linalg.norm(x, axis=1)
    if np.abs(norms - 1.0).max() > _UNIT_TOL:
        raise InvalidFeature("input vectors must be unit-norm")
    if k < 1:
        raise InvalidParameter(f"k must be >= 1, got {k}")
    s = float(concentration)
    if not np.isfinite(s) or s <= 0.0:
        raise InvalidParameter(f"learning requires concentration > 0, got {s}")
    n = x.shape[0]
    if n < k or np.unique(x, axis=0).shape[0] < k:
        raise InsufficientData(f"need at least {k} distinct vectors, have {n}")

    rng = as_generator(seed)
    first = int(rng.integers(n))
    chosen = [first]
    best_sim = x @ x[first]
    for _ in range(k - 1):
        nxt = int(np.argmin(best_sim))
        chosen.append(nxt)
        np.maximum(best_sim, x @ x[nxt], out=best_sim)
    means = x[chosen].copy()

    prev_obj = None
    for _ in range(max_iters):
        scores = x @ means.T
        assign = np.argmax(scores, axis=1)
        winning = scores[np.arange(n), assign]
        obj = float(s * winning.sum())
        if history is not None:
            history.append(obj)
        if prev_obj is not None and abs(obj - prev_obj) <= tol * max(1.0, abs(prev_obj)):
            break
        prev_obj = obj

        reseeded = set()
        worst_order = np.argsort(winning, kind="stable")
        for j in range(k):
            members = x[assign == j]
            resultant = members.sum(axis=0) if members.size else np.zeros(x.shape[1])
            length = np.linalg.norm(resultant)
            if length > 1e-12:
                means[j] = resultant / length
            else:
                for idx in worst_order:
                    if int(idx) not in reseeded:
                        reseeded.add(int(idx))
                        means[j] = x[idx]
                        break
    return Dictionary(means, s)


def sample_vmf(mean_direction, concentration, rng, size=None):
    """Draw exact unit-sphere samples concentrated around a direction.

    Uses rejection sampling for the cosine against the mean combined with a
    uniform tangent direction; concentration 0 gives the uniform sphere.
    ``rng`` is a seed or Generator; with size=None one vector is returned,
    otherwise a (size, C) array.
    """
    mu = _check_unit(mean_direction, "mean direction")
    d = mu.size
    if d < 2:
        raise InvalidParameter("sphere sampling needs dimension >= 2")
    s = float(concentration)
    if not np.isfinite(s) or s < 0.0:
        raise InvalidParameter(f"concentration must be finite and >= 0, got {s}")
    rng = as_generator(rng)
    n = 1 if size is None else int(size)

    b = (d - 1) / (np.sqrt(4.0 * s * s + (d - 1) ** 2) + 2.0 * s)
    x0 = (1.0 - b) / (1.0 + b)
    c = s * x0 + (d - 1) * np.log1p(-x0 * x0)

    cosines = np.empty(n)
    filled = 0
    while filled < n:
        m = n - filled
        z = rng.beta(0.5 * (d - 1), 0.5 * (d - 1), size=m)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(m)
        with np.errstate(divide="ignore"):
            keep = s * w + (d - 1) * np.log1p(-x0 * w) - c >= np.log(u)
        accepted = w[keep]
        cosines[filled : filled + accepted.size] = accepted
        filled += accepted.size

    tangent = rng.standard_normal((n, d))
    tangent -= np.outer(tangent @ mu, mu)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    sines = np.sqrt(np.clip(1.0 - cosines * cosines, 0.0, None))
    out = sines[:, None] * tangent + cosines[:, None] * mu
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out[0] if size is None else out


def sample_uniform_sphere(dim, rng, size=None):
    """Uniform unit vectors; convenience wrapper over the Gaussian trick."""
    rng = as_generator(rng)
    n = 1 if size is None else int(size)
    v = rng.standard_normal((n, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v[0] if size is None else v


def dictionary_bytes(dictionary: Dictionary) -> bytes:
    """Canonical serialized form, shared by the file writer and the hash."""
    header = DICTIONARY_MAGIC + struct.pack(
        "<III", FORMAT_VERSION, dictionary.k, dictionary.dim
    )
    header += struct.pack("<d", dictionary.concentration)
    return header + dictionary.means.astype("<f4").tobytes()


def dictionary_sha256(dictionary: Dictionary) -> bytes:
    return hashlib.sha256(dictionary_bytes(dictionary)).digest()


def write_dictionary(dictionary: Dictionary, path) -> None:
    Path(path).write_bytes(dictionary_bytes(dictionary))


def read_dictionary(path) -> Dictionary:
    blob = Path(path).read_bytes()
    (k, c), head = _check_header(blob, DICTIONARY_MAGIC, 2)
    if min(k, c) < 1:
        raise BadHeader(f"invalid dictionary dimensions {(k, c)}")
    expected = head + 8 + k * c * 4
    if len(blob) < expected:
        raise Truncated(f"expected {expected} bytes, file has {len(blob)}")
    if len(blob) > expected:
        raise TrailingData(f"{len(blob) - expected} bytes past declared payload")
    (s,) = struct.unpack_from("<d", blob, head)
    means = np.frombuffer(blob, dtype="<f4", count=k * c, offset=head + 8)
    return Dictionary(means.reshape(k, c), s)
