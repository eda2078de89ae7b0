"""Command-line pipeline: synth, learn-dict, train, classify, localize, eval.

Every command is a pure function of (config, inputs, seed): re-running with
the same arguments produces byte-identical outputs. Exit codes: 0 success,
2 configuration/validation error, 3 data error, 4 numerical failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bernoulli as bern
from . import generative as gen
from .config import RunConfig, build_config, subseed, substream
from .errors import DataError, InvalidConfig, NumericalError, ValidationError
from .evaluate import (
    classify,
    localize,
    roc_curve,
    write_accuracy_csv,
    write_roc_json,
    write_score_pgm,
)
from .features import (
    DatasetManifest,
    ManifestEntry,
    load_manifest,
    save_manifest,
    write_feature_map,
    write_mask,
)
from .mixtures import assign_mixture, load_class_model, save_class_model, train_class_model
from .synth import apply_occluder, make_world, sample_background_image, sample_image
from .vmf import learn_dictionary, read_dictionary, write_dictionary

MODEL_INDEX = "model_index.json"


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _model_family(config: RunConfig) -> str:
    return "bernoulli" if config.family == "dict" else "vmf"


def cmd_synth(config: RunConfig, out_dir) -> None:
    """Generate a full dataset tree plus the world descriptor."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    world = make_world(
        num_classes=config.num_classes,
        mixtures_per_class=config.mixtures_per_class,
        k=config.components,
        height=config.height,
        width=config.width,
        channels=config.channels,
        concentration=config.concentration,
        seed=config.seed,
        dirichlet_concentration=config.dirichlet_concentration,
        shared_position_fraction=config.shared_position_fraction,
        max_pairwise_cosine=config.max_pairwise_cosine,
        texture_palette_size=config.texture_palette_size,
        texture_spread_factor=config.texture_spread_factor,
    )

    train_entries, test_entries, bg_entries = [], [], []
    mixtures = {"train": {}, "test": {}}
    for y in range(config.num_classes):
        label = str(y)
        mixtures["train"][label] = []
        mixtures["test"][label] = []
        for i in range(config.train_per_class):
            rng = substream(config.seed, "train", y, i)
            m = int(rng.integers(config.mixtures_per_class))
            mixtures["train"][label].append(m)
            name = f"features/train_{label}_{i:04d}.cfmp"
            write_feature_map(sample_image(world, y, m, rng), out / name)
            train_entries.append(ManifestEntry(feature_path=name, label=label))
        for i in range(config.test_per_class):
            rng = substream(config.seed, "test", y, i)
            m = int(rng.integers(config.mixtures_per_class))
            mixtures["test"][label].append(m)
            base = sample_image(world, y, m, rng)
            name = f"features/test_{label}_{i:04d}.cfmp"
            write_feature_map(base, out / name)
            test_entries.append(ManifestEntry(feature_path=name, label=label))
            for level in config.occlusion_levels:
                for kind in config.occluder_types:
                    occ_rng = substream(config.seed, "occ", y, i, level, kind)
                    occluded, mask = apply_occluder(
                        base, world, kind, level, occ_rng,
                        exclude_class=y, bounds=config.level_bounds[level],
                    )
                    stem = f"test_{label}_{i:04d}_{level}_{kind}"
                    write_feature_map(occluded, out / "features" / f"{stem}.cfmp")
                    write_mask(mask, out / "masks" / f"{stem}.cmsk")
                    test_entries.append(
                        ManifestEntry(
                            feature_path=f"features/{stem}.cfmp",
                            label=label,
                            mask_path=f"masks/{stem}.cmsk",
                            occlusion_level=level,
                            occluder_type=kind,
                        )
                    )
    for i in range(config.background_images):
        rng = substream(config.seed, "background", i)
        name = f"features/background_{i:04d}.cfmp"
        write_feature_map(sample_background_image(world, rng), out / name)
        bg_entries.append(ManifestEntry(feature_path=name, label="background"))

    save_manifest(DatasetManifest(train_entries), out / "train_manifest.json")
    save_manifest(DatasetManifest(test_entries), out / "test_manifest.json")
    save_manifest(DatasetManifest(bg_entries), out / "background_manifest.json")
    _write_json(
        out / "world.json",
        {
            "seed": config.seed,
            "lattice": [config.height, config.width],
            "channels": config.channels,
            "concentration": config.concentration,
            "dictionary_means": world.dictionary.means.tolist(),
            "background_weights": world.background.weights.tolist(),
            "white_direction": world.white_direction.tolist(),
            "texture_palette": world.texture_palette.tolist(),
            "texture_spread": world.texture_spread,
            "class_weights": {
                str(y): [c.weights.tolist() for c in comps]
                for y, comps in enumerate(world.class_models)
            },
            "mixture_draws": mixtures,
        },
    )


def _pool_active_vectors(manifest):
    rows = []
    for entry in manifest.entries:
        fmap = manifest.load_features(entry)
        rows.append(fmap.data[fmap.active])
    return np.concatenate(rows, axis=0).astype(np.float64)


def cmd_learn_dict(config: RunConfig, data_path, out_dir) -> None:
    """Cluster all active training vectors into the shared dictionary."""
    manifest = load_manifest(data_path)
    vectors = _pool_active_vectors(manifest)
    history = []
    dictionary = learn_dictionary(
        vectors,
        k=config.components,
        concentration=config.concentration,
        max_iters=config.dict_max_iters,
        tol=config.dict_tol,
        seed=subseed(config.seed, "dict"),
        history=history,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_dictionary(dictionary, out / "dictionary.cdic")
    _write_json(out / "dictionary_log.json", {"objective": history})
    for i, value in enumerate(history):
        print(f"learn-dict iter {i} objective {value!r}")


def _load_maps(manifest, entries):
    return [manifest.load_features(e) for e in entries]


def cmd_train(config: RunConfig, data_path, background_path, dict_path, out_dir) -> None:
    """Fit the background model and one mixture model per class."""
    manifest = load_manifest(data_path)
    bg_manifest = load_manifest(background_path)
    dictionary = read_dictionary(dict_path)
    family = _model_family(config)
    log = {"classes": {}}

    bg_maps = _load_maps(bg_manifest, bg_manifest.entries)
    if family == "bernoulli":
        encodings = [bern.binarize(m, dictionary, config.binarize_threshold) for m in bg_maps]
        background = bern.estimate_bernoulli_background(
            encodings,
            sample_count=config.background_samples,
            seed=subseed(config.seed, "bgsample"),
            clamp_eps=config.bernoulli_clamp,
        )
    else:
        bg_history = []
        background = gen.estimate_vmf_background(
            bg_maps,
            dictionary,
            max_iters=config.em_max_iters,
            tol=config.em_tol,
            floor=config.simplex_floor,
            history=bg_history,
        )
        log["background_objective"] = bg_history

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    wrappers = {}
    for label in manifest.labels():
        maps = _load_maps(manifest, [e for e in manifest.entries if e.label == label])
        history = []
        model, _ = train_class_model(
            maps,
            m=config.mixtures_per_class,
            family=family,
            dictionary=dictionary,
            background=background,
            prior=config.visibility_prior,
            rounds=config.training_rounds,
            seed=subseed(config.seed, "class", label),
            delta=config.binarize_threshold,
            assign_metric=config.assign_metric,
            em_max_iters=config.em_max_iters,
            em_tol=config.em_tol,
            label=label,
            history=history,
        )
        wrapper = save_class_model(model, background, out, stem=f"class_{label}")
        wrappers[label] = wrapper.name
        log["classes"][label] = history
        for i, value in enumerate(history):
            print(f"train class {label} round {i} objective {value!r}")

    write_dictionary(dictionary, out / "dictionary.cdic")
    _write_json(out / MODEL_INDEX, {
        "family": config.family,
        "model_family": family,
        "dictionary": "dictionary.cdic",
        "delta": config.binarize_threshold if family == "bernoulli" else None,
        "wrappers": wrappers,
    })
    _write_json(out / "train_log.json", log)


def load_models(model_dir):
    """Load every class model plus the shared background and dictionary."""
    model_dir = Path(model_dir)
    index = json.loads((model_dir / MODEL_INDEX).read_text())
    dictionary = read_dictionary(model_dir / index["dictionary"])
    models, background = [], None
    for label in sorted(index["wrappers"]):
        model, background = load_class_model(model_dir / index["wrappers"][label], dictionary)
        models.append(model)
    return models, background, dictionary


def cmd_classify(config: RunConfig, model_dir, features_path, out_path=None) -> dict:
    from .features import read_feature_map

    models, background, _ = load_models(model_dir)
    fmap = read_feature_map(features_path)
    result = classify(fmap, models, background, config.visibility_prior)
    doc = {
        "predicted": result.label,
        "mixture": result.mixture,
        "scores": result.scores,
        "visible_fraction": float(result.visibility[fmap.active].mean())
        if fmap.active.any()
        else 1.0,
    }
    if out_path is not None:
        _write_json(out_path, doc)
    print(json.dumps(doc, sort_keys=True))
    return doc


def cmd_localize(config: RunConfig, model_dir, features_path, out_dir) -> dict:
    from .features import read_feature_map

    models, background, _ = load_models(model_dir)
    fmap = read_feature_map(features_path)
    result = classify(fmap, models, background, config.visibility_prior)
    winner = next(m for m in models if m.label == result.label)
    smap, predicted = localize(
        fmap, winner, result.mixture, background,
        config.visibility_prior, config.localize_threshold,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_score_pgm(smap, out / "score.pgm")
    write_mask(predicted, out / "predicted.cmsk")
    doc = {
        "predicted": result.label,
        "mixture": result.mixture,
        "occluded_fraction": predicted.occluded_fraction,
        "threshold": config.localize_threshold,
    }
    _write_json(out / "summary.json", doc)
    print(json.dumps(doc, sort_keys=True))
    return doc


def cmd_eval(config: RunConfig, data_path, model_dir, out_dir) -> None:
    """Classify the whole manifest, tally accuracy, pool localization ROC."""
    manifest = load_manifest(data_path)
    models, background, _ = load_models(model_dir)
    by_label = {m.label: m for m in models}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    cells = {}
    predictions = []
    pooled_scores, pooled_labels = [], []
    by_type, by_level = {}, {}
    pgm_written = set()
    for entry in manifest.entries:
        fmap, mask = manifest.load_pair(entry)
        result = classify(fmap, models, background, config.visibility_prior)
        key = (entry.occlusion_level, entry.occluder_type)
        correct, total = cells.get(key, (0, 0))
        cells[key] = (correct + (result.label == entry.label), total + 1)
        predictions.append(
            {
                "feature_path": entry.feature_path,
                "label": entry.label,
                "occlusion_level": entry.occlusion_level,
                "occluder_type": entry.occluder_type,
                "predicted": result.label,
                "mixture": result.mixture,
                "score": result.scores[result.label],
            }
        )
        if mask is None:
            continue
        # Localization is scored under the true class's model so the per-pixel
        # metric measures occlusion reasoning, not classification mistakes.
        true_model = by_label[entry.label]
        true_m, _ = assign_mixture(fmap, true_model, background, config.visibility_prior)
        smap, _ = localize(
            fmap, true_model, true_m, background,
            config.visibility_prior, config.localize_threshold,
        )
        scores = smap.scores[fmap.active]
        truth = mask.occluded[fmap.active]
        pooled_scores.append(scores)
        pooled_labels.append(truth)
        by_type.setdefault(entry.occluder_type, ([], []))
        by_type[entry.occluder_type][0].append(scores)
        by_type[entry.occluder_type][1].append(truth)
        by_level.setdefault(entry.occlusion_level, ([], []))
        by_level[entry.occlusion_level][0].append(scores)
        by_level[entry.occlusion_level][1].append(truth)
        if key not in pgm_written:
            pgm_written.add(key)
            write_score_pgm(smap, out / f"score_{entry.occlusion_level}_{entry.occluder_type}.pgm")

    from .evaluate import AccuracyTable

    write_accuracy_csv({config.family: AccuracyTable(cells)}, out / "accuracy.csv")
    _write_json(out / "predictions.json", {"entries": predictions})
    if pooled_scores:
        curves = {
            "pooled": {
                "all": roc_curve(np.concatenate(pooled_scores), np.concatenate(pooled_labels))
            },
            "by_type": {
                kind: roc_curve(np.concatenate(s), np.concatenate(t))
                for kind, (s, t) in sorted(by_type.items())
            },
            "by_level": {
                level: roc_curve(np.concatenate(s), np.concatenate(t))
                for level, (s, t) in sorted(by_level.items())
            },
        }
        write_roc_json(curves, out / "roc.json")


_FLAG_FIELDS = {
    "seed": "seed",
    "family": "family",
    "k": "components",
    "s": "concentration",
    "delta": "binarize_threshold",
    "pi": "visibility_prior",
    "m_mixtures": "mixtures_per_class",
    "threshold": "localize_threshold",
}


def _add_common(parser):
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--family", choices=["dict", "vmf"], default=None)
    parser.add_argument("--k", type=int, default=None, help="dictionary size")
    parser.add_argument("--s", type=float, default=None, help="shared concentration")
    parser.add_argument("--delta", type=float, default=None, help="binarization threshold")
    parser.add_argument("--pi", type=float, default=None, help="visibility prior")
    parser.add_argument("--m-mixtures", type=int, default=None, help="components per class")
    parser.add_argument("--threshold", type=float, default=None, help="localization threshold")


def _config_from(args) -> RunConfig:
    overrides = {
        field: getattr(args, flag) for flag, field in _FLAG_FIELDS.items()
        if getattr(args, flag, None) is not None
    }
    return build_config(args.config, overrides)


def build_parser():
    parser = argparse.ArgumentParser(prog="compocc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("learn-dict", help="learn the shared part dictionary")
    _add_common(p)
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train per-class mixture models")
    _add_common(p)
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--background", required=True, help="background manifest")
    p.add_argument("--dict", required=True, help="dictionary file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("classify", help="classify one feature map")
    _add_common(p)
    p.add_argument("--models", required=True, help="trained model directory")
    p.add_argument("--features", required=True, help="CFMP file")
    p.add_argument("--out", default=None)

    p = sub.add_parser("localize", help="score occlusion for one feature map")
    _add_common(p)
    p.add_argument("--models", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="run the full evaluation protocol")
    _add_common(p)
    p.add_argument("--data", required=True, help="test manifest")
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _config_from(args)
        if args.command == "synth":
            cmd_synth(config, args.out)
        elif args.command == "learn-dict":
            cmd_learn_dict(config, args.data, args.out)
        elif args.command == "train":
            cmd_train(config, args.data, args.background, args.dict, args.out)
        elif args.command == "classify":
            cmd_classify(config, args.models, args.features, args.out)
        elif args.command == "localize":
            cmd_localize(config, args.models, args.features, args.out)
        elif args.command == "eval":
            cmd_eval(config, args.data, args.models, args.out)
    except (InvalidConfig, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
