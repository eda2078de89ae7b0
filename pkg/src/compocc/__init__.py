"""Occlusion-robust classification over convolutional feature lattices.

Two model families share one part dictionary: a Bernoulli model over
thresholded part detections and a fully generative per-position von
Mises-Fisher mixture over the raw unit-norm features. Both carry an explicit
per-position occlusion switch against a spatially uniform background model,
which yields a log-likelihood-ratio occlusion score usable for localizing
occluders.
"""

from .bernoulli import (
    BernoulliBackground,
    BernoulliForeground,
    BinaryEncoding,
    bernoulli_log_likelihood,
    bernoulli_score_map,
    binarize,
    dict_occlusion_likelihood,
    estimate_bernoulli_background,
    estimate_bernoulli_foreground,
)
from .evaluate import (
    ClassificationResult,
    RocCurve,
    accuracy_table,
    classify,
    localize,
    roc_curve,
)
from .features import (
    DatasetManifest,
    FeatureMap,
    ManifestEntry,
    OcclusionMask,
    OcclusionScoreMap,
    load_manifest,
    normalize_features,
    read_feature_map,
    read_mask,
    save_manifest,
    write_feature_map,
    write_mask,
)
from .generative import (
    VmfBackground,
    VmfForeground,
    estimate_alpha,
    estimate_vmf_background,
    finetune,
    generative_log_likelihood,
    loglik_gradient,
    occlusion_aware_log_likelihood,
    occlusion_score_map,
)
from .mixtures import (
    ClassModel,
    MixtureAssignment,
    assign_mixture,
    init_assignments,
    train_class_model,
)
from .synth import (
    SyntheticWorld,
    apply_occluder,
    make_world,
    oracle_log_likelihood,
    sample_image,
)
from .vmf import (
    Dictionary,
    cosine_similarity,
    learn_dictionary,
    mixture_log_likelihood,
    read_dictionary,
    sample_vmf,
    vmf_log_kernel,
    write_dictionary,
)

__version__ = "0.1.0"
