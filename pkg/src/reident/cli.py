"""Command line front end.

Subcommands: gen-data, train, eval, calibrate, fuse-eval, serve.
Exit codes: 0 success, 2 usage/config error, 3 data/format error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, datagen, embedding, ensemble, features, novelty, retrieval
from .datagen import Observation, RenderConfig, Side
from .errors import ConfigError, DataFormatError
from .features import AugmentParams
from .novelty import GridSpec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

# desk: CI-sized run; paper-scale: full-survey-sized dataset with the long
# 100+100 schedule and 224px letterboxing.
PRESETS: dict[str, dict] = {
    "desk": {
        "individuals": 60,
        "mean_obs": 6.0,
        "day_span": 1100,
        "image_size": 64,
        "input_size": 64,
        "stage1_epochs": 40,
        "stage2_epochs": 10,
        "stage1_lr": 1.5,
        "stage2_lr": 0.15,
        "mining": "batch_hard",
    },
    "paper-scale": {
        "individuals": 513,
        "mean_obs": 2113 / 513,
        "day_span": 1100,
        "image_size": 224,
        "input_size": 224,
        "stage1_epochs": 100,
        "stage2_epochs": 100,
        "stage1_lr": 0.001,
        "stage2_lr": 0.0001,
        "mining": "hard",
    },
}


def _apply_preset_and_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Resolve defaults in order: built-ins < preset < --config file < flags."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--preset", choices=sorted(PRESETS))
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    overrides: dict = {}
    if known.preset:
        overrides.update(PRESETS[known.preset])
    if known.config:
        path = Path(known.config)
        if not path.exists():
            parser.error(f"config file not found: {path}")
        try:
            overrides.update(json.loads(path.read_text()))
        except ValueError as exc:
            raise DataFormatError(f"bad config file {path}: {exc}") from exc
    valid = {a.dest for a in parser._actions}
    parser.set_defaults(**{k: v for k, v in overrides.items() if k in valid})
    return parser.parse_args(argv)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), help="named flag bundle")
    p.add_argument("--config", help="JSON file of flag defaults")
    p.add_argument("--seed", type=int, default=0, help="master seed")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--backbone-seed", type=int, default=None,
                   help="featurizer seed (default: seed+2)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split-fraction", type=float, default=0.3)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--pk-classes", type=int, default=8)
    p.add_argument("--pk-samples", type=int, default=4)
    p.add_argument("--stage1-epochs", type=int, default=100)
    p.add_argument("--stage2-epochs", type=int, default=100)
    p.add_argument("--stage1-lr", type=float, default=0.001)
    p.add_argument("--stage2-lr", type=float, default=0.0001)
    p.add_argument("--mining", choices=embedding.MINING_MODES, default="hard")
    p.add_argument("--hue-sat-delta", type=float, default=20.0)
    p.add_argument("--rotation-fraction", type=float, default=0.1)
    p.add_argument("--scale-fraction", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reident", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--individuals", type=int, default=60)
    p.add_argument("--mean-obs", type=float, default=6.0)
    p.add_argument("--day-span", type=int, default=1100)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--out", default="observations.jsonl")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the embedding model")
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", default="model.bin")
    p.add_argument("--log", default="train_log.csv")
    p.add_argument("--report-out", default=None, help="JSON train report path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="gallery retrieval metrics on the query split")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split-fraction", type=float, default=0.3)
    p.add_argument("--report", choices=["metrics", "curve"], default="metrics",
                   help="curve also writes accuracy-vs-k CSV")
    p.add_argument("--out", default="eval_report.json")
    p.add_argument("--curve-out", default=None, help="CSV path (default: next to --out)")
    p.add_argument("--gallery-out", default=None, help="also write gallery.bin")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("calibrate", help="grid-search the new-individual distance threshold")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split-fraction", type=float, default=0.3)
    p.add_argument("--new-fraction", type=float, default=0.25,
                   help="fraction of individuals held out as never seen")
    p.add_argument("--calib-split", type=float, default=0.5,
                   help="fraction of scored queries used for the grid search")
    p.add_argument("--grid-lo", type=float, default=0.0)
    p.add_argument("--grid-hi", type=float, default=2.0)
    p.add_argument("--grid-step", type=float, default=0.005)
    p.add_argument("--out", default="calibration.json")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fuse-eval", help="train per-side models and fuse paired queries")
    _add_common(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--merge-mode", choices=["distance", "rank"], default="distance")
    p.add_argument("--out", default="ensemble_report.json")
    p.set_defaults(func=cmd_fuse_eval)

    p = sub.add_parser("serve", help="run the review service")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--dataset", required=True, help="observations for thumbnails")
    p.add_argument("--model", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--journal", default="journal.jsonl")
    p.add_argument("--threshold", type=float, default=0.820)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--cors-origin", action="append", default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def _resolved_config(args: argparse.Namespace) -> dict:
    skip = {"func", "config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _backbone_seed(args: argparse.Namespace) -> int:
    return args.backbone_seed if args.backbone_seed is not None else args.seed + 2


def _write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"input path does not exist: {p}")
    return p


def cmd_gen_data(args) -> int:
    observations = datagen.gen_population(
        n_individuals=args.individuals,
        mean_obs_per_individual=args.mean_obs,
        day_span=args.day_span,
        image_size=(args.image_size, args.image_size),
        seed=args.seed,
    )
    datagen.write_observations(args.out, observations)
    print(f"wrote {len(observations)} observations for {args.individuals} "
          f"individuals to {args.out}")
    return EXIT_OK


def _load_split(args) -> datagen.DatasetSplit:
    path = _require_file(args.dataset)
    observations = datagen.read_observations(path)
    return datagen.split_dataset(observations, args.split_fraction, seed=args.seed + 1)


def _train_config(args) -> embedding.TrainConfig:
    return embedding.TrainConfig(
        margin=args.margin,
        batch_size=args.batch_size,
        stage1_epochs=args.stage1_epochs,
        stage2_epochs=args.stage2_epochs,
        stage1_lr=args.stage1_lr,
        stage2_lr=args.stage2_lr,
        pk_classes=args.pk_classes,
        pk_samples=args.pk_samples,
        seed=args.seed + 3,
        mining=args.mining,
    )


def _augment_params(args) -> AugmentParams:
    return AugmentParams(
        hue_sat_delta_max=args.hue_sat_delta,
        rotation_fraction_max=args.rotation_fraction,
        scale_fraction_max=args.scale_fraction,
    )


def _write_train_log(path: str | Path, log: list[embedding.EpochStats]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("epoch,stage,mean_loss\n")
        for row in log:
            fh.write(f"{row.epoch},{row.stage},{row.mean_loss!r}\n")


def cmd_train(args) -> int:
    split = _load_split(args)
    backbone = features.build_backbone(_backbone_seed(args), args.input_size)
    result = embedding.train_staged(split, backbone, _train_config(args), _augment_params(args))
    checkpoint.save_checkpoint(
        args.model,
        head_weight=result.head.weight,
        head_bias=result.head.bias,
        stage2_weight=result.backbone.conv3_w,
        stage2_bias=result.backbone.conv3_b,
    )
    _write_train_log(args.log, result.log)
    report = {
        "command": "train",
        "config": _resolved_config(args),
        "model": args.model,
        "log": args.log,
        "epochs": len(result.log),
        "first_epoch_mean_loss": result.log[0].mean_loss if result.log else None,
        "final_epoch_mean_loss": result.log[-1].mean_loss if result.log else None,
    }
    if args.report_out:
        _write_json(args.report_out, report)
    print(f"trained {len(result.log)} epochs -> {args.model}")
    return EXIT_OK


def _load_model(args) -> tuple[embedding.EmbeddingHead, features.Backbone]:
    bundle = checkpoint.load_checkpoint(_require_file(args.model))
    head = embedding.EmbeddingHead(weight=bundle.head_weight, bias=bundle.head_bias)
    backbone = features.build_backbone(_backbone_seed(args), args.input_size)
    if bundle.stage2_weight is not None:
        if bundle.stage2_weight.shape != backbone.conv3_w.shape:
            raise DataFormatError("checkpoint stage-2 shape does not match backbone")
        backbone.conv3_w = bundle.stage2_weight
        backbone.conv3_b = bundle.stage2_bias
    return head, backbone


def _embed_observations(head, backbone, observations: list[Observation]) -> np.ndarray:
    images = np.stack(
        [features.letterbox(o.image, backbone.input_size) for o in observations]
    )
    feats, _ = features.extract_batch(backbone, images)
    return embedding.embed_batch(head, feats)


def cmd_eval(args) -> int:
    split = _load_split(args)
    head, backbone = _load_model(args)
    gallery = retrieval.build_gallery(head, backbone, split.support)
    query_emb = _embed_observations(head, backbone, split.query)
    results = [
        (retrieval.rank(query_emb[i], gallery), split.query[i].individual_id)
        for i in range(len(split.query))
    ]
    report = {
        "command": "eval",
        "config": _resolved_config(args),
        "n_gallery": len(gallery),
        "n_query": len(split.query),
        "accuracy_at_1": retrieval.accuracy_at_k(results, 1),
        "accuracy_at_5": retrieval.accuracy_at_k(results, 5),
        "map_at_5": retrieval.map_at_5(results),
    }
    if args.report == "curve":
        curve = retrieval.accuracy_curve(results)
        curve_path = args.curve_out or str(Path(args.out).with_suffix(".curve.csv"))
        retrieval.write_curve_csv(curve_path, curve)
        report["curve_csv"] = curve_path
    if args.gallery_out:
        retrieval.save_gallery(args.gallery_out, gallery)
        report["gallery"] = args.gallery_out
    _write_json(args.out, report)
    print(f"acc@1 {report['accuracy_at_1']:.4f} acc@5 {report['accuracy_at_5']:.4f} "
          f"mAP@5 {report['map_at_5']:.4f} -> {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    if not 0 < args.new_fraction < 1:
        raise ConfigError("--new-fraction must be in (0, 1)")
    path = _require_file(args.dataset)
    observations = datagen.read_observations(path)
    head, backbone = _load_model(args)

    individuals = sorted({o.individual_id for o in observations})
    rng = np.random.default_rng(np.random.SeedSequence(args.seed + 4))
    shuffled = rng.permutation(individuals)
    n_new = int(round(len(individuals) * args.new_fraction))
    if n_new == 0 or n_new == len(individuals):
        raise ConfigError("new-fraction leaves a single truth class")
    new_ids = set(int(i) for i in shuffled[:n_new])

    known_obs = [o for o in observations if o.individual_id not in new_ids]
    new_obs = [o for o in observations if o.individual_id in new_ids]
    split = datagen.split_dataset(known_obs, args.split_fraction, seed=args.seed + 1)
    gallery = retrieval.build_gallery(head, backbone, split.support)

    scored_obs = [(o, False) for o in split.query] + [(o, True) for o in new_obs]
    embs = _embed_observations(head, backbone, [o for o, _ in scored_obs])
    scored = [
        (novelty.min_distance(embs[i], gallery), truly_new, i)
        for i, (_, truly_new) in enumerate(scored_obs)
    ]

    # Stratified half for the grid search, the rest for validation.
    calib, valid = [], []
    for flag in (False, True):
        group = [s for s in scored if s[1] == flag]
        order = rng.permutation(len(group))
        n_calib = int(round(len(group) * args.calib_split))
        for pos, j in enumerate(order):
            (calib if pos < n_calib else valid).append(group[j])
    if not any(t for _, t, _ in calib) or all(t for _, t, _ in calib):
        raise ConfigError("calibration half has a single truth class")

    grid = GridSpec(lo=args.grid_lo, hi=args.grid_hi, step=args.grid_step)
    calibration = novelty.calibrate_threshold([(d, t) for d, t, _ in calib], grid)

    valid_queries = [
        (embs[i], truly_new, None if truly_new else scored_obs[i][0].individual_id)
        for _, truly_new, i in valid
    ]
    open_set = novelty.evaluate_open_set(valid_queries, gallery, calibration.threshold)

    report = {
        "command": "calibrate",
        "config": _resolved_config(args),
        "threshold": calibration.threshold,
        "f1": calibration.best_f1,
        "grid": {"lo": grid.lo, "hi": grid.hi, "step": grid.step},
        "per_point": [
            {"t": p.t, "f1": p.f1, "tp": p.tp, "fp": p.fp, "fn": p.fn, "tn": p.tn}
            for p in calibration.per_point
        ],
        "validation": {
            "accuracy": open_set.accuracy,
            "n_predicted_new": open_set.n_predicted_new,
            "tp": open_set.tp,
            "fp": open_set.fp,
            "fn": open_set.fn,
            "tn": open_set.tn,
            "n_queries": open_set.n_queries,
        },
    }
    _write_json(args.out, report)
    print(f"threshold {calibration.threshold:.3f} (F1 {calibration.best_f1:.4f}) -> {args.out}")
    return EXIT_OK


def split_paired_events(
    observations: list[Observation], fraction: float, seed: int
) -> tuple[list[ensemble.PairedQuery], list[Observation], list[Observation]]:
    """Event-level split for the two-view experiment.

    Both frames of a capture event stay on the same side of the split, so
    query pairs are complete and the per-side galleries stay leak-free.
    """
    events: dict[tuple[int, int], dict[Side, Observation]] = {}
    for obs in observations:
        events.setdefault((obs.individual_id, obs.capture_day), {})[obs.side] = obs
    pairs = {
        key: sides
        for key, sides in events.items()
        if Side.LEFT in sides and Side.RIGHT in sides
    }
    by_individual: dict[int, list[tuple[int, int]]] = {}
    for key in sorted(pairs):
        by_individual.setdefault(key[0], []).append(key)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    support_left: list[Observation] = []
    support_right: list[Observation] = []
    query_pairs: list[ensemble.PairedQuery] = []
    for individual in sorted(by_individual):
        keys = by_individual[individual]
        n = len(keys)
        n_query = min(n - 1, int(n * fraction + 0.5))
        order = rng.permutation(n)
        for pos, j in enumerate(order):
            sides = pairs[keys[j]]
            if pos < n_query:
                query_pairs.append(
                    ensemble.PairedQuery(left_obs=sides[Side.LEFT], right_obs=sides[Side.RIGHT])
                )
            else:
                support_left.append(sides[Side.LEFT])
                support_right.append(sides[Side.RIGHT])
    return query_pairs, support_left, support_right


def cmd_fuse_eval(args) -> int:
    path = _require_file(args.dataset)
    observations = datagen.read_observations(path)
    pairs, support_left, support_right = split_paired_events(
        observations, args.split_fraction, seed=args.seed + 1
    )
    if not pairs:
        raise ConfigError("no complete left/right query pairs in the dataset")

    reports = {}
    models = {}
    for side_name, support, seed_offset in (
        ("left", support_left, 10),
        ("right", support_right, 11),
    ):
        split = datagen.DatasetSplit(support=support, query=[], split_fraction=args.split_fraction)
        backbone = features.build_backbone(_backbone_seed(args), args.input_size)
        config = embedding.TrainConfig(
            margin=args.margin,
            batch_size=args.batch_size,
            stage1_epochs=args.stage1_epochs,
            stage2_epochs=args.stage2_epochs,
            stage1_lr=args.stage1_lr,
            stage2_lr=args.stage2_lr,
            pk_classes=args.pk_classes,
            pk_samples=args.pk_samples,
            seed=args.seed + seed_offset,
            mining=args.mining,
        )
        result = embedding.train_staged(split, backbone, config, _augment_params(args))
        models[side_name] = (result.head, result.backbone, support)

    left_gallery = retrieval.build_gallery(*models["left"][:2], models["left"][2])
    right_gallery = retrieval.build_gallery(*models["right"][:2], models["right"][2])
    report_obj = ensemble.evaluate_ensemble(
        pairs,
        models["left"][0], models["left"][1],
        models["right"][0], models["right"][1],
        left_gallery, right_gallery,
        mode=args.merge_mode,
    )
    report = {
        "command": "fuse-eval",
        "config": _resolved_config(args),
        "n_pairs": report_obj.n_pairs,
        "left": vars(report_obj.left),
        "right": vars(report_obj.right),
        "fused": vars(report_obj.fused),
    }
    _write_json(args.out, report)
    print(
        f"acc@1 left {report_obj.left.accuracy_at_1:.4f} "
        f"right {report_obj.right.accuracy_at_1:.4f} "
        f"fused {report_obj.fused.accuracy_at_1:.4f} -> {args.out}"
    )
    return EXIT_OK


def cmd_serve(args) -> int:
    import socket

    import uvicorn

    from .service import ReviewService, ServiceConfig, create_app
    from .service.journal import Journal

    head, backbone = _load_model(args)
    gallery = retrieval.load_gallery(_require_file(args.gallery))
    observations = datagen.read_observations(_require_file(args.dataset))
    images = {o.obs_id: o.image for o in observations}
    service = ReviewService(
        head=head,
        backbone=backbone,
        gallery=gallery,
        journal=Journal(args.journal),
        config=ServiceConfig(
            threshold=args.threshold,
            top_k=args.top_k,
            image_size=(args.image_size, args.image_size),
        ),
        images=images,
    )
    app = create_app(service, cors_origins=args.cors_origin)

    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((args.host, args.port))
    host, port = sock.getsockname()[:2]
    print(f"listening on http://{host}:{port}", flush=True)
    server = uvicorn.Server(uvicorn.Config(app, log_level="warning"))
    server.run(sockets=[sock])
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_preset_and_config(parser, argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
