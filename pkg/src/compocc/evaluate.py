"""End-task inference and the evaluation protocol.

Classification scores every class model through its best mixture component
under the occlusion-aware likelihood; localization thresholds the
background/foreground log-likelihood ratio; metrics are per-cell accuracy
tables over occlusion level x occluder type and pooled per-pixel ROC curves.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bernoulli as bern
from . import generative as gen
from .errors import DimensionMismatch, InsufficientData, InvalidParameter
from .features import FeatureMap, OcclusionMask, OcclusionScoreMap
from .mixtures import ClassModel

TABLE_COLUMNS = [("none", "none")] + [
    (level, kind)
    for level in ("L1", "L2", "L3")
    for kind in ("white", "noise", "texture", "object")
]
_SHORT = {"white": "w", "noise": "n", "texture": "t", "object": "o"}


@dataclass
class ClassificationResult:
    label: str
    mixture: int
    scores: dict
    visibility: np.ndarray


@dataclass
class RocCurve:
    """Operating points swept over all distinct score values, plus the AUC."""

    points: np.ndarray  # (T, 2) of (false positive rate, true positive rate)
    auc: float

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvalidParameter(f"points must be (T, 2), got {pts.shape}")
        if (np.diff(pts, axis=0) < 0).any():
            raise InvalidParameter("ROC points must be monotone in both coordinates")
        if not (np.allclose(pts[0], 0.0) and np.allclose(pts[-1], 1.0)):
            raise InvalidParameter("ROC must run from (0, 0) to (1, 1)")
        self.points = pts
        self.auc = float(self.auc)


def _check_models(models):
    if not models:
        raise InsufficientData("need at least one class model")
    first = models[0]
    for model in models:
        if model.family != first.family:
            raise InvalidParameter("all class models must share one family")
        if model.dictionary is not first.dictionary and not (
            model.dictionary.concentration == first.dictionary.concentration
            and np.array_equal(model.dictionary.means, first.dictionary.means)
        ):
            raise InvalidParameter("all class models must share one dictionary")
        if model.family == "bernoulli" and model.delta != first.delta:
            raise InvalidParameter("bernoulli models must share one binarization threshold")
    return sorted(models, key=lambda m: m.label)


def _component_scores(fmap, model, background, prior):
    """Offset-free occlusion-aware totals for every component of one model."""
    if model.family == "bernoulli":
        enc = bern.binarize(fmap, model.dictionary, model.delta)
        return [
            bern.dict_occlusion_likelihood(enc, comp, background, prior)[0]
            for comp in model.components
        ]
    return [
        gen.occlusion_aware_log_likelihood(fmap, comp, background, prior)[0]
        for comp in model.components
    ]


def classify(fmap: FeatureMap, models, background, prior, offset=0.0) -> ClassificationResult:
    """Predict the label whose best mixture component scores highest.

    Ties go to the lexicographically smallest label, then the lowest mixture
    index. ``offset`` shifts every reported score by the same amount per
    active position and never enters the comparison.
    """
    ordered = _check_models(models)
    best_label, best_m, best_total = None, 0, -np.inf
    totals = {}
    for model in ordered:
        comp_scores = _component_scores(fmap, model, background, prior)
        m = int(np.argmax(comp_scores))
        totals[model.label] = float(comp_scores[m])
        if comp_scores[m] > best_total:
            best_label, best_m, best_total = model.label, m, comp_scores[m]
    winner = next(m for m in ordered if m.label == best_label)
    if winner.family == "bernoulli":
        enc = bern.binarize(fmap, winner.dictionary, winner.delta)
        _, visibility = bern.dict_occlusion_likelihood(
            enc, winner.components[best_m], background, prior
        )
    else:
        _, visibility = gen.occlusion_aware_log_likelihood(
            fmap, winner.components[best_m], background, prior
        )
    shift = offset * fmap.active_count
    return ClassificationResult(
        label=best_label,
        mixture=best_m,
        scores={label: score + shift for label, score in totals.items()},
        visibility=visibility,
    )


def score_map_for(fmap: FeatureMap, model: ClassModel, mixture: int, background, prior):
    """Occlusion score map under one mixture component of one class model."""
    comp = model.components[mixture]
    if model.family == "bernoulli":
        enc = bern.binarize(fmap, model.dictionary, model.delta)
        return bern.bernoulli_score_map(enc, comp, background, prior)
    return gen.occlusion_score_map(fmap, comp, background, prior)


def localize(
    fmap: FeatureMap, model: ClassModel, mixture: int, background, prior, threshold=0.0
):
    """Score map plus the thresholded occluder prediction.

    Active positions scoring strictly above the threshold are predicted
    occluded; the score map itself is returned untruncated.
    """
    smap = score_map_for(fmap, model, mixture, background, prior)
    return smap, OcclusionMask(smap.predicted_occluded(float(threshold)))


def roc_curve(scores, labels) -> RocCurve:
    """Pooled per-pixel ROC for "higher score means positive" classifiers.

    The threshold sweeps over every distinct score value; equal scores move
    together. The AUC is the exact trapezoidal integral of the points.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if s.shape != y.shape:
        raise DimensionMismatch(f"scores {s.shape} and labels {y.shape} differ")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InsufficientData("ROC needs at least one pixel of each label")
    order = np.argsort(-s, kind="stable")
    sorted_scores = s[order]
    sorted_pos = y[order]
    boundary = np.flatnonzero(np.diff(sorted_scores)) if s.size > 1 else np.array([], int)
    ends = np.concatenate([boundary, [s.size - 1]])
    tp = np.cumsum(sorted_pos)[ends]
    fp = ends + 1 - tp
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))
    return RocCurve(np.column_stack([fpr, tpr]), auc)


@dataclass
class AccuracyTable:
    """Correct/total tallies per (occlusion level, occluder type) cell."""

    cells: dict

    def accuracy(self, level, kind):
        pair = self.cells.get((level, kind))
        if not pair or pair[1] == 0:
            return None
        return pair[0] / pair[1]

    def level_accuracy(self, level):
        correct = total = 0
        for (lvl, _), (c, t) in self.cells.items():
            if lvl == level:
                correct += c
                total += t
        return correct / total if total else None

    def mean(self):
        values = [self.accuracy(*col) for col in TABLE_COLUMNS]
        values = [v for v in values if v is not None]
        if not values:
            return None
        return sum(values) / len(values)

    def row(self):
        """Cell accuracies in fixed column order, then the mean; None if absent."""
        return [self.accuracy(*col) for col in TABLE_COLUMNS] + [self.mean()]


def accuracy_table(manifest, models, background, prior) -> AccuracyTable:
    """Classify every manifest entry and tally accuracy per stratum."""
    cells = {}
    for entry in manifest.entries:
        fmap = manifest.load_features(entry)
        result = classify(fmap, models, background, prior)
        key = (entry.occlusion_level, entry.occluder_type)
        correct, total = cells.get(key, (0, 0))
        cells[key] = (correct + (result.label == entry.label), total + 1)
    return AccuracyTable(cells)


def table_header():
    names = ["occ-0"] + [f"{lvl}-{_SHORT[kind]}" for lvl, kind in TABLE_COLUMNS[1:]]
    return names + ["mean"]


def write_accuracy_csv(tables: dict, path) -> None:
    """One row per named table, columns in the fixed stratification order."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["model"] + table_header())
        for name in sorted(tables):
            row = tables[name].row()
            writer.writerow([name] + ["" if v is None else f"{v:.6f}" for v in row])


def write_roc_json(curves: dict, path) -> None:
    """Nested {group: {name: {auc, points}}} document."""
    doc = {
        group: {
            name: {"auc": curve.auc, "points": curve.points.tolist()}
            for name, curve in named.items()
        }
        for group, named in curves.items()
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_score_pgm(smap: OcclusionScoreMap, path) -> None:
    """8-bit binary PGM of the score raster, min-max scaled.

    Only positive scores are rendered (negatives clamp to black); that
    highlighting convention lives purely here, never in any metric.
    """
    scores = np.clip(smap.scores, 0.0, None)
    lo, hi = float(scores.min()), float(scores.max())
    if hi > lo:
        scaled = np.rint((scores - lo) * (255.0 / (hi - lo)))
    else:
        scaled = np.zeros_like(scores)
    header = f"P5\n{smap.scores.shape[1]} {smap.scores.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + scaled.astype(np.uint8).tobytes())
