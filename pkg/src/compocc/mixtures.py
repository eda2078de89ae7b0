"""Hard-EM mixtures of per-class models.

Each class owns M components, one per recurring spatial layout (viewpoint /
3D structure). Training alternates between fitting every component on its
assigned images and re-assigning each image to the component that explains it
best; exactly one component owns each image at all times.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import bernoulli as bern
from . import generative as gen
from .errors import (
    DictionaryMismatch,
    DimensionMismatch,
    InsufficientData,
    InvalidManifest,
    InvalidParameter,
)
from .features import FeatureMap
from .vmf import Dictionary, as_generator, dictionary_sha256, kernel_logits

FAMILIES = ("bernoulli", "vmf")


@dataclass
class ClassModel:
    """M fitted foreground components plus the context needed to score maps."""

    label: str
    family: str
    components: list
    dictionary: Dictionary
    delta: float | None = None  # binarization threshold, bernoulli family only

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidParameter(f"family must be one of {FAMILIES}, got {self.family!r}")
        if not self.components:
            raise InvalidParameter("a class model needs at least one component")
        want = bern.BernoulliForeground if self.family == "bernoulli" else gen.VmfForeground
        dims = {(c.height, c.width, c.k) for c in self.components}
        if any(not isinstance(c, want) for c in self.components) or len(dims) != 1:
            raise InvalidParameter("components must share family and dimensions")
        if self.family == "bernoulli" and self.delta is None:
            raise InvalidParameter("bernoulli models must record their binarization threshold")

    @property
    def m(self):
        return len(self.components)


@dataclass
class MixtureAssignment:
    """Component index per training image; exactly one component per image."""

    indices: np.ndarray
    m: int

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size < 1:
            raise InvalidParameter("assignment must be a nonempty index vector")
        if idx.min() < 0 or idx.max() >= self.m:
            raise InvalidParameter(f"assignment indices must lie in [0, {self.m})")
        self.indices = idx

    def one_hot(self):
        out = np.zeros((self.indices.size, self.m), dtype=bool)
        out[np.arange(self.indices.size), self.indices] = True
        return out


def _image_summaries(maps, dictionary):
    """Mean per-component responsibility profile per image, uniform weights."""
    out = np.empty((len(maps), dictionary.k))
    for i, fmap in enumerate(maps):
        kernels = kernel_logits(fmap, dictionary)
        resp = np.exp(kernels - logsumexp(kernels, axis=-1, keepdims=True))
        if fmap.active.any():
            out[i] = resp[fmap.active].mean(axis=0)
        else:
            out[i] = 1.0 / dictionary.k
    return out


def init_assignments(maps, m: int, dictionary: Dictionary, seed) -> MixtureAssignment:
    """Seeded farthest-point grouping of per-image activation summaries.

    Each seed image is pinned to its own group, so every component starts
    non-empty; ties break toward the lowest index throughout.
    """
    if m < 1:
        raise InvalidParameter(f"m must be >= 1, got {m}")
    n = len(maps)
    if n < m:
        raise InsufficientData(f"need at least {m} images, have {n}")
    summaries = _image_summaries(maps, dictionary)
    rng = as_generator(seed)
    seeds = [int(rng.integers(n))]
    dist = np.linalg.norm(summaries - summaries[seeds[0]], axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(dist))
        seeds.append(nxt)
        np.minimum(dist, np.linalg.norm(summaries - summaries[nxt], axis=1), out=dist)
    centers = summaries[seeds]
    d2 = ((summaries[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(d2, axis=1)
    for j, s in enumerate(seeds):
        assign[s] = j
    return MixtureAssignment(assign, m)


def _fit_component(maps, family, dictionary, delta, warm, em_max_iters, em_tol):
    if family == "bernoulli":
        encodings = [bern.binarize(fmap, dictionary, delta) for fmap in maps]
        return bern.estimate_bernoulli_foreground(encodings)
    return gen.estimate_alpha(
        maps, dictionary, max_iters=em_max_iters, tol=em_tol, init=warm
    )


def _component_score(fmap, component, family, dictionary, delta, background, prior, metric):
    if family == "bernoulli":
        enc = bern.binarize(fmap, dictionary, delta)
        if metric == "plain":
            return bern.bernoulli_log_likelihood(enc, component)
        total, _ = bern.dict_occlusion_likelihood(enc, component, background, prior)
        return total
    if metric == "plain":
        return gen.generative_log_likelihood(fmap, component)
    total, _ = gen.occlusion_aware_log_likelihood(fmap, component, background, prior)
    return total


def train_class_model(
    maps,
    m: int,
    family: str,
    dictionary: Dictionary,
    background,
    prior: float,
    rounds: int = 10,
    seed=0,
    delta: float = 0.5,
    assign_metric: str = "occlusion",
    em_max_iters: int = 100,
    em_tol: float = 1e-6,
    label: str = "",
    history: list | None = None,
):
    """Alternate component fits and hard re-assignment for one class.

    Components refit on their assigned images each round (vMF fits warm-start
    from the previous round), images then move to the component with the
    highest score under ``assign_metric`` ("occlusion" scores through the
    background switch like inference does, "plain" uses the bare foreground
    likelihood). A component left empty is re-seeded with the worst-fit image.
    The summed assigned score is appended to ``history`` per round and the
    loop stops early once assignments stop changing.
    """
    if family not in FAMILIES:
        raise InvalidParameter(f"family must be one of {FAMILIES}, got {family!r}")
    if assign_metric not in ("occlusion", "plain"):
        raise InvalidParameter(f"assign_metric must be occlusion or plain, got {assign_metric!r}")
    if rounds < 1:
        raise InvalidParameter(f"rounds must be >= 1, got {rounds}")
    n = len(maps)
    assign = init_assignments(maps, m, dictionary, seed).indices.copy()
    components = [None] * m

    for _ in range(rounds):
        for j in range(m):
            group = [maps[i] for i in np.flatnonzero(assign == j)]
            components[j] = _fit_component(
                group, family, dictionary, delta, components[j], em_max_iters, em_tol
            )
        scores = np.empty((n, m))
        for i, fmap in enumerate(maps):
            for j in range(m):
                scores[i, j] = _component_score(
                    fmap, components[j], family, dictionary, delta,
                    background, prior, assign_metric,
                )
        new_assign = np.argmax(scores, axis=1)
        best = scores[np.arange(n), new_assign]
        # Re-seed any emptied component with the worst-fit image that can be
        # spared from a multi-image group.
        moved = set()
        for j in range(m):
            if (new_assign == j).any():
                continue
            counts = np.bincount(new_assign, minlength=m)
            order = np.argsort(best, kind="stable")
            for i in order:
                i = int(i)
                if i not in moved and counts[new_assign[i]] >= 2:
                    new_assign[i] = j
                    moved.add(i)
                    break
        objective = float(scores[np.arange(n), new_assign].sum())
        if history is not None:
            history.append(objective)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    model = ClassModel(
        label=label,
        family=family,
        components=components,
        dictionary=dictionary,
        delta=delta if family == "bernoulli" else None,
    )
    return model, MixtureAssignment(assign, m)


def assign_mixture(fmap: FeatureMap, model: ClassModel, background, prior, offset=0.0):
    """Best component index and its occlusion-aware score for one map.

    Ties break to the lowest index. The comparison ignores ``offset`` (every
    component shifts identically); it is added to the reported score only.
    """
    if model.family == "bernoulli":
        enc = bern.binarize(fmap, model.dictionary, model.delta)
        totals = [
            bern.dict_occlusion_likelihood(enc, comp, background, prior)[0]
            for comp in model.components
        ]
    else:
        totals = [
            gen.occlusion_aware_log_likelihood(fmap, comp, background, prior)[0]
            for comp in model.components
        ]
    best = int(np.argmax(totals))
    return best, float(totals[best]) + offset * fmap.active_count


def save_class_model(model: ClassModel, background, directory, stem=None) -> Path:
    """Write a JSON wrapper plus one payload file per component.

    The background travels inside every component payload; the wrapper
    records family, label, threshold and the dictionary content hash.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem if stem is not None else f"class_{model.label}"
    suffix = ".cbrn" if model.family == "bernoulli" else ".cvmf"
    files = []
    for j, comp in enumerate(model.components):
        name = f"{stem}.m{j}{suffix}"
        if model.family == "bernoulli":
            bern.write_bernoulli_model(directory / name, comp, background)
        else:
            gen.write_vmf_model(directory / name, comp, background)
        files.append(name)
    doc = {
        "family": model.family,
        "label": model.label,
        "m": model.m,
        "delta": model.delta,
        "dictionary_sha256": dictionary_sha256(model.dictionary).hex(),
        "components": files,
    }
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_class_model(path, dictionary: Dictionary):
    """Load a ClassModel wrapper and its payloads; returns (model, background)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidManifest(f"cannot read model wrapper {path}: {exc}") from exc
    family = doc.get("family")
    if family not in FAMILIES:
        raise InvalidManifest(f"bad family {family!r} in {path}")
    if doc.get("dictionary_sha256") != dictionary_sha256(dictionary).hex():
        raise DictionaryMismatch(f"{path} references a different dictionary")
    components, backgrounds = [], []
    for name in doc.get("components", []):
        if family == "bernoulli":
            fg, bg = bern.read_bernoulli_model(path.parent / name)
        else:
            fg, bg = gen.read_vmf_model(path.parent / name, dictionary)
        components.append(fg)
        backgrounds.append(bg)
    if not components:
        raise InvalidManifest(f"model wrapper {path} lists no components")
    for bg in backgrounds[1:]:
        if not np.allclose(bg.probs if family == "bernoulli" else bg.weights,
                           backgrounds[0].probs if family == "bernoulli" else backgrounds[0].weights):
            raise DimensionMismatch(f"component payloads in {path} carry differing backgrounds")
    model = ClassModel(
        label=str(doc.get("label", path.stem)),
        family=family,
        components=components,
        dictionary=dictionary,
        delta=doc.get("delta"),
    )
    return model, backgrounds[0]
