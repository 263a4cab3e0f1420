"""Command-line front end: extract, train, prune, detect, segment, eval, synth.

Dataset layout (written by `synth`, read by `train` and `eval`):

    <root>/<class>/<id>.feat            pre-extracted features, or
    <root>/<class>/<id>.img             8-bit intensity image
    <root>/<class>/<id>.depth           16-bit millimeter depth map (optional)
    <root>/<class>/<id>.mask            binary segmentation mask
    <root>/_scenes/<id>.feat|.img|...   held-out test scenes
    <root>/_scenes/truths.json          their ground truth

Every command writes a manifest (config + input hashes + version) next to its
outputs. Exit status: 0 success, 1 runtime failure, 2 usage error. Values
from --config files override flags.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .codebook import cluster_rnn, prune_small_clusters
from .detector import ConfigurationError, DetectorConfig, classify_features, detect_features
from .evaluation import (
    codebook_sweep,
    confusion,
    pr_curve,
    write_confusion_csv,
    write_pr_csv,
    write_sweep_csv,
)
from .features import (
    ExtractionParams,
    FeatureSet,
    ImageRGBD,
    attach_depth,
    extract_features,
    read_depth,
    read_features,
    read_image,
    read_mask,
    write_depth,
    write_features,
    write_image,
    write_mask,
)
from .model import Model, TrainingParams, TrainingSample, load_model, prune_model, save_model, train
from .synthgen import (
    GroundTruth,
    Placement,
    SceneSpec,
    make_templates,
    render_scene,
    save_templates,
)
from .voting import Bandwidths, VotingSpace, cast_votes, mean_shift, voting_confidence
from .codebook import match_all


class UsageError(Exception):
    pass


VARIANTS = [v.value for v in VotingSpace]


# ---------------------------------------------------------------------------
# dataset helpers


def load_training_samples(root: Path) -> tuple[list[TrainingSample], list[str]]:
    """Read all <root>/<class>/ samples; directories starting with '_' are
    reserved for test scenes and metadata."""
    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir()
                        if d.is_dir() and not d.name.startswith("_"))
    if not class_dirs:
        raise UsageError(f"no class directories under {root}")
    class_names = [d.name for d in class_dirs]
    samples = []
    for class_id, d in enumerate(class_dirs):
        ids = sorted({p.stem for p in d.iterdir()
                      if p.suffix in (".feat", ".img")})
        for sid in ids:
            mask_path = d / f"{sid}.mask"
            if not mask_path.exists():
                raise UsageError(f"missing mask for sample {d.name}/{sid}")
            mask = read_mask(mask_path)
            feat_path = d / f"{sid}.feat"
            if feat_path.exists():
                samples.append(TrainingSample(
                    class_id=class_id, mask=mask,
                    features=read_features(feat_path)))
            else:
                intensity = read_image(d / f"{sid}.img")
                depth_path = d / f"{sid}.depth"
                depth = read_depth(depth_path) if depth_path.exists() else None
                samples.append(TrainingSample(
                    class_id=class_id, mask=mask,
                    image=ImageRGBD(intensity, depth)))
    if not samples:
        raise UsageError(f"no training samples under {root}")
    return samples, class_names


def load_test_scenes(root: Path, extraction: ExtractionParams,
                     ) -> list[tuple[str, FeatureSet, tuple[int, int], list[GroundTruth]]]:
    scenes_dir = Path(root) / "_scenes"
    truth_path = scenes_dir / "truths.json"
    if not truth_path.exists():
        raise UsageError(f"missing {truth_path}")
    with open(truth_path, encoding="utf-8") as fh:
        index = json.load(fh)
    out = []
    for entry in index["scenes"]:
        sid = entry["id"]
        shape = (int(entry["height"]), int(entry["width"]))
        feat_path = scenes_dir / f"{sid}.feat"
        if feat_path.exists():
            features = read_features(feat_path)
        else:
            intensity = read_image(scenes_dir / f"{sid}.img")
            depth_path = scenes_dir / f"{sid}.depth"
            image = ImageRGBD(
                intensity,
                read_depth(depth_path) if depth_path.exists() else None)
            features = extract_features(image, extraction)
            if image.depth is not None:
                features = attach_depth(features, image.depth)
            shape = image.intensity.shape
        truths = [
            GroundTruth(class_id=int(t["class"]),
                        center=tuple(t["center"]),
                        box=tuple(t["box"]),
                        depth=float(t.get("depth", 0.0)),
                        scale=float(t.get("scale", 1.0)))
            for t in entry["truths"]
        ]
        out.append((sid, features, shape, truths))
    return out


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_inputs(paths) -> dict[str, str]:
    hashes = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            tree = hashlib.sha256()
            for f in sorted(q for q in p.rglob("*") if q.is_file()):
                tree.update(str(f.relative_to(p)).encode())
                tree.update(bytes.fromhex(_sha256(f)))
            hashes[str(p)] = tree.hexdigest()
        elif p.exists():
            hashes[str(p)] = _sha256(p)
    return hashes


def write_manifest(out_dir: Path, command: str, config: dict, inputs) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "inputs": _hash_inputs(inputs),
        "version": __version__,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _public_config(args: argparse.Namespace) -> dict:
    skip = {"func", "config"}
    return {k: v for k, v in sorted(vars(args).items())
            if k not in skip and not callable(v)}


def _apply_config_file(args: argparse.Namespace) -> None:
    if not getattr(args, "config", None):
        return
    with open(args.config, encoding="utf-8") as fh:
        overrides = json.load(fh)
    known = set(vars(args))
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"unknown config key {key!r}")
        setattr(args, dest, value)


def _detector_config(args: argparse.Namespace) -> DetectorConfig:
    return DetectorConfig(
        variant=VotingSpace(args.variant),
        bandwidths=Bandwidths(xy=args.b_xy, scale=args.b_s,
                              depth=args.b_d, scaled_depth=args.b_sd),
        t_match=args.t_match,
        score_ratio=args.t_ratio,
    )


def _add_common_detect_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=VARIANTS, default="jism")
    p.add_argument("--t-match", type=float, default=0.8)
    p.add_argument("--t-ratio", type=float, default=0.55)
    p.add_argument("--b-xy", type=float, default=10.0)
    p.add_argument("--b-s", type=float, default=0.01)
    p.add_argument("--b-d", type=float, default=0.15)
    p.add_argument("--b-sd", type=float, default=0.15)


# ---------------------------------------------------------------------------
# commands


def cmd_extract(args) -> int:
    intensity = read_image(args.image)
    depth = read_depth(args.depth) if args.depth else None
    image = ImageRGBD(intensity, depth)
    params = ExtractionParams()
    features = extract_features(image, params)
    if depth is not None:
        features = attach_depth(features, depth, params.depth_window)
    write_features(features, args.out)
    out_dir = Path(args.out).parent
    write_manifest(out_dir, "extract", _public_config(args),
                   [args.image] + ([args.depth] if args.depth else []))
    print(f"extracted {len(features)} features -> {args.out}")
    return 0


def cmd_train(args) -> int:
    samples, class_names = load_training_samples(Path(args.data))
    train_params = TrainingParams(t_match=args.t_match)
    descriptors = []
    for s in samples:
        fs = s.features if s.features is not None else extract_features(
            s.image, train_params.extraction)
        descriptors.append(fs.descriptors)
    stacked = np.vstack([d for d in descriptors if len(d)])
    codebook = cluster_rnn(stacked, args.t_cluster, class_names)
    if args.tq > 0:
        codebook = prune_small_clusters(codebook, args.tq)
    model = train(samples, codebook, train_params)
    if args.tig > 0:
        model = prune_model(model, t_ig=args.tig)
    save_model(model, args.out)
    write_manifest(Path(args.out).parent, "train", _public_config(args),
                   [args.data])
    print(f"trained model: {len(model.codebook)} words,"
          f" {len(model.occurrences)} occurrences -> {args.out}")
    return 0


def cmd_prune(args) -> int:
    model = load_model(args.model)
    pruned = prune_model(model, t_q=args.tq, t_ig=args.tig)
    save_model(pruned, args.out)
    write_manifest(Path(args.out).parent, "prune", _public_config(args),
                   [args.model])
    print(f"pruned codebook {len(model.codebook)} -> {len(pruned.codebook)} words")
    return 0


def _load_query(args, model: Model):
    """Features + image shape for detect/segment, from either input path."""
    extraction = ExtractionParams()
    if args.features:
        features = read_features(args.features)
        if args.width is None or args.height is None:
            raise UsageError("--features input needs --width and --height")
        shape = (args.height, args.width)
    else:
        if not args.image:
            raise UsageError("either --image or --features is required")
        intensity = read_image(args.image)
        depth = read_depth(args.depth) if args.depth else None
        image = ImageRGBD(intensity, depth)
        features = extract_features(image, extraction)
        if depth is not None:
            features = attach_depth(features, depth, extraction.depth_window)
        shape = image.intensity.shape
    variant = VotingSpace(args.variant)
    if variant in (VotingSpace.JI3SM1, VotingSpace.JI3SM2, VotingSpace.JI3SM3):
        if not np.any(np.isfinite(features.depths)):
            raise UsageError(
                f"variant {variant.value} needs depth (provide --depth or"
                " depth-bearing features)")
    return features, shape


def cmd_detect(args) -> int:
    model = load_model(args.model)
    features, shape = _load_query(args, model)
    config = _detector_config(args)
    detections = detect_features(features, shape, model, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_id = Path(args.features or args.image).stem
    with open(out_dir / "detections.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "class", "score", "x", "y", "coord3", "mask"])
        for i, det in enumerate(detections):
            mask_path = out_dir / f"{image_id}_det{i}.mask"
            write_mask(det.segmentation.mask, mask_path)
            coord3 = det.scale if det.scale is not None else det.depth
            writer.writerow([image_id, det.class_name, repr(det.score),
                             repr(det.x), repr(det.y),
                             "" if coord3 is None else repr(coord3),
                             mask_path.name])
    write_manifest(out_dir, "detect", _public_config(args),
                   [args.model, args.features or args.image])
    print(f"{len(detections)} detections -> {out_dir / 'detections.csv'}")
    return 0


def cmd_segment(args) -> int:
    model = load_model(args.model)
    features, shape = _load_query(args, model)
    config = _detector_config(args)
    detections = detect_features(features, shape, model, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_id = Path(args.features or args.image).stem
    for i, det in enumerate(detections):
        seg = det.segmentation
        write_image(seg.figure.values, out_dir / f"{image_id}_det{i}_figure.img")
        write_image(seg.ground.values, out_dir / f"{image_id}_det{i}_ground.img")
        write_mask(seg.mask, out_dir / f"{image_id}_det{i}.mask")
    write_manifest(out_dir, "segment", _public_config(args),
                   [args.model, args.features or args.image])
    print(f"segmented {len(detections)} detections -> {out_dir}")
    return 0


def _detect_scene(scene, model, config, permissive=False):
    sid, features, shape, truths = scene
    cfg = config
    if permissive:
        cfg = DetectorConfig(
            variant=config.variant, bandwidths=config.bandwidths,
            t_match=config.t_match, score_ratio=1e-9,
            support_factor=config.support_factor)
    dets = detect_features(features, shape, model, cfg, with_segmentation=False)
    return sid, dets, truths


def _map_scenes(scenes, fn, workers: int):
    """Worker count never changes results: outputs are reordered by id."""
    if workers <= 1:
        results = [fn(s) for s in scenes]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, scenes))
    return sorted(results, key=lambda r: r[0])


def cmd_eval(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    extraction = ExtractionParams()

    if args.metric == "sweep":
        samples, class_names = load_training_samples(Path(args.data))
        scenes = load_test_scenes(Path(args.data), extraction)
        test_samples = []
        for sid, features, shape, truths in scenes:
            if len(truths) != 1:
                raise UsageError("sweep needs single-object test scenes")
            t = truths[0]
            mask = np.zeros(shape, dtype=np.uint8)
            x0, y0, x1, y1 = (int(v) for v in t.box)
            mask[y0:y1, x0:x1] = 1
            test_samples.append(TrainingSample(class_id=t.class_id, mask=mask,
                                               features=features))
        train_params = TrainingParams(t_match=args.t_match)
        descriptors = np.vstack([s.features.descriptors for s in samples])
        codebook = cluster_rnn(descriptors, args.t_cluster, class_names)
        grid = [float(v) for v in args.grid.split(",")]
        points = codebook_sweep(samples, test_samples, codebook, grid,
                                train_params, _detector_config(args))
        write_sweep_csv(points, out_dir / "sweep.csv")
        write_manifest(out_dir, "eval sweep", _public_config(args), [args.data])
        print(f"sweep over {len(points)} thresholds -> {out_dir / 'sweep.csv'}")
        return 0

    model = load_model(args.model)
    scenes = load_test_scenes(Path(args.data), extraction)
    config = _detector_config(args)

    if args.metric == "confusion":
        results = _map_scenes(
            scenes,
            lambda s: (s[0], classify_features(s[1], s[2], model, config),
                       model.class_names[s[3][0].class_id]),
            args.workers)
        preds = [r[1] if r[1] is not None else "<abstain>" for r in results]
        truths = [r[2] for r in results]
        names = list(model.class_names)
        if "<abstain>" in preds:
            names.append("<abstain>")
        matrix = confusion(preds, truths, names)
        write_confusion_csv(matrix, out_dir / "confusion.csv")
        write_manifest(out_dir, "eval confusion", _public_config(args),
                       [args.model, args.data])
        print(f"accuracy {matrix.accuracy:.4f} -> {out_dir / 'confusion.csv'}")
        return 0

    if args.metric == "pr":
        results = _map_scenes(
            scenes, lambda s: _detect_scene(s, model, config, permissive=True),
            args.workers)
        grid = [float(v) for v in args.grid.split(",")]
        curve = pr_curve([r[1] for r in results], [r[2] for r in results], grid)
        write_pr_csv(curve, out_dir / "pr_curve.csv")
        write_manifest(out_dir, "eval pr", _public_config(args),
                       [args.model, args.data])
        print(f"pr curve with {len(curve.points)} points"
              f" -> {out_dir / 'pr_curve.csv'}")
        return 0

    if args.metric == "confidence":
        variants = [VotingSpace(v) for v in args.variants.split(",")]
        rows = []
        for variant in variants:
            cfg = DetectorConfig(variant=variant, bandwidths=config.bandwidths,
                                 t_match=config.t_match,
                                 score_ratio=config.score_ratio)

            def one(scene, variant=variant, cfg=cfg):
                sid, features, shape, _ = scene
                acts = match_all(model.codebook, features.descriptors, cfg.t_match)
                votes = cast_votes(features, acts, model, variant)
                if not votes:
                    return sid, None
                hyps = mean_shift(votes, cfg.bandwidths, variant)
                return sid, voting_confidence(votes, hyps, cfg.bandwidths, variant)

            results = _map_scenes(scenes, one, args.workers)
            values = [c for _, c in results if c is not None]
            mean = sum(values) / len(values) if values else float("nan")
            rows.append((variant.value, mean, len(values)))
        with open(out_dir / "confidence.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "mean_confidence", "n_scenes"])
            for row in rows:
                writer.writerow([row[0], repr(row[1]), row[2]])
        write_manifest(out_dir, "eval confidence", _public_config(args),
                       [args.model, args.data])
        print(f"confidence for {len(rows)} variants"
              f" -> {out_dir / 'confidence.csv'}")
        return 0

    raise UsageError(f"unknown metric {args.metric!r}")


def cmd_synth(args) -> int:
    root = Path(args.out)
    rng = np.random.default_rng(args.seed)
    templates = make_templates(args.classes, args.parts, args.shared,
                               seed=args.seed, dim=args.dim)
    class_names = [f"class{i}" for i in range(args.classes)]
    width, height = args.width, args.height

    root.mkdir(parents=True, exist_ok=True)
    save_templates(templates, root / "templates.json")

    def emit(directory: Path, sid: str, scene, mask: np.ndarray | None):
        directory.mkdir(parents=True, exist_ok=True)
        if args.pixel:
            write_image(scene.image.intensity, directory / f"{sid}.img")
            write_depth(scene.image.depth, directory / f"{sid}.depth")
        else:
            write_features(scene.features, directory / f"{sid}.feat")
        if mask is not None:
            write_mask(mask, directory / f"{sid}.mask")

    for class_id, name in enumerate(class_names):
        for i in range(args.train):
            margin_x = templates[class_id].width / 2 + 8
            margin_y = templates[class_id].height / 2 + 8
            spec = SceneSpec(
                width=width, height=height,
                placements=(Placement(
                    class_id,
                    (float(rng.uniform(margin_x, width - margin_x)),
                     float(rng.uniform(margin_y, height - margin_y))),
                    1.0,
                    float(rng.uniform(1.0, 2.5))),),
                clutter_count=args.clutter,
                clutter_noise=args.clutter_noise,
                descriptor_jitter=args.descriptor_jitter,
                scale_jitter=args.scale_jitter,
                seed=int(rng.integers(1 << 31)),
            )
            scene = render_scene(spec, templates, pixel=args.pixel)
            emit(root / name, f"{i:04d}", scene, scene.masks[0])

    scenes_dir = root / "_scenes"
    index = {"scenes": []}
    for i in range(args.test):
        n_objects = int(rng.integers(1, args.objects_per_scene + 1))
        placements = []
        for k in range(n_objects):
            cls = int(rng.integers(args.classes))
            margin_x = templates[cls].width / 2 + 8
            margin_y = templates[cls].height / 2 + 8
            placements.append(Placement(
                cls,
                (float(rng.uniform(margin_x, width - margin_x)),
                 float(rng.uniform(margin_y, height - margin_y))),
                1.0,
                float(rng.uniform(1.0, 2.5))))
        spec = SceneSpec(
            width=width, height=height, placements=tuple(placements),
            clutter_count=args.clutter, clutter_noise=args.clutter_noise,
            descriptor_jitter=args.descriptor_jitter,
            scale_jitter=args.scale_jitter,
            seed=int(rng.integers(1 << 31)),
        )
        scene = render_scene(spec, templates, pixel=args.pixel)
        sid = f"{i:04d}"
        emit(scenes_dir, sid, scene, None)
        index["scenes"].append({
            "id": sid, "width": width, "height": height,
            "truths": [
                {"class": t.class_id, "center": list(t.center),
                 "box": list(t.box), "depth": t.depth, "scale": t.scale}
                for t in scene.truths
            ],
        })
    scenes_dir.mkdir(parents=True, exist_ok=True)
    with open(scenes_dir / "truths.json", "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(root, "synth", _public_config(args), [])
    print(f"dataset: {args.classes} classes x {args.train} train,"
          f" {args.test} test scenes -> {root}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ism3d",
        description="Multi-class, depth-aware object detection with implicit"
                    " shape models.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract features from an image")
    p.add_argument("--image", required=True)
    p.add_argument("--depth")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="build codebook and train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t-cluster", type=float, default=0.8)
    p.add_argument("--t-match", type=float, default=0.8)
    p.add_argument("--tq", type=int, default=0)
    p.add_argument("--tig", type=float, default=0.0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="prune a trained model's codebook")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tq", type=int, default=0)
    p.add_argument("--tig", type=float, default=0.0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_prune)

    for name, fn in (("detect", cmd_detect), ("segment", cmd_segment)):
        p = sub.add_parser(name, help=f"{name} objects in one image")
        p.add_argument("--model", required=True)
        p.add_argument("--image")
        p.add_argument("--depth")
        p.add_argument("--features")
        p.add_argument("--width", type=int)
        p.add_argument("--height", type=int)
        p.add_argument("--out", required=True)
        _add_common_detect_args(p)
        p.add_argument("--config")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="evaluate a model over a dataset")
    p.add_argument("metric", choices=["confusion", "pr", "sweep", "confidence"])
    p.add_argument("--data", required=True)
    p.add_argument("--model")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="0.1,0.2,0.3,0.4,0.5,0.55,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--variants", default="ism,jism,ji3sm1,ji3sm2,ji3sm3")
    p.add_argument("--t-cluster", type=float, default=0.8)
    p.add_argument("--workers", type=int, default=1)
    _add_common_detect_args(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--parts", type=int, default=8)
    p.add_argument("--shared", type=float, default=0.3)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--train", type=int, default=20)
    p.add_argument("--test", type=int, default=8)
    p.add_argument("--objects-per-scene", type=int, default=1)
    p.add_argument("--clutter", type=int, default=6)
    p.add_argument("--clutter-noise", type=float, default=0.5)
    p.add_argument("--descriptor-jitter", type=float, default=0.03)
    p.add_argument("--scale-jitter", type=float, default=0.0)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pixel", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _apply_config_file(args)
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
