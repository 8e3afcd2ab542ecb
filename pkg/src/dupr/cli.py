"""Command-line entry point: ``dupr <subcommand> ...``.

Exit status is 0 on success, 1 for usage errors and 2 for runtime failures.
Set ``DUPR_LOG`` (DEBUG, INFO, WARNING, ...) to control log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("dupr")


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageExit()


def _scenes(args):
    from .scenes import Corpus, SceneConfig, synthetic_scenes

    if args.data:
        corpus = Corpus(args.data)
        return [corpus.scene(i) for i in range(len(corpus))]
    return synthetic_scenes(args.count, args.data_seed, SceneConfig(size=args.size))


def _encoder(path):
    from .diagnostics import FeatureEncoder

    return FeatureEncoder.from_checkpoint(path)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    from .scenes import generate_dataset

    paths = generate_dataset(args.out, args.count, args.seed or 0, args.size)
    print(f"wrote {len(paths)} scenes to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    from .trainer import load_config, run

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    if args.out_dir:
        cfg = replace(cfg, out_dir=args.out_dir)
    final = run(cfg, resume=args.resume, progress=True)
    print(final)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOL, run_all

    try:
        results = run_all(args.op, seed=args.seed or 0)
    except KeyError as exc:
        print(f"dupr gradcheck: {exc.args[0]}", file=sys.stderr)
        return 1
    print(f"{'op':<20} {'max_rel_err':>12}  status")
    for r in results:
        print(f"{r.name:<20} {r.max_rel_error:>12.3e}  {'ok' if r.ok else 'FAIL'}")
    bad = [r.name for r in results if not r.ok]
    if bad:
        print(f"{len(bad)} op(s) above {TOL:g}: {', '.join(bad)}", file=sys.stderr)
        return 2
    return 0


def cmd_iou_curve(args) -> int:
    from .diagnostics import iou_similarity_curve, save_iou_svg

    enc = _encoder(args.ckpt)
    before = enc.checksum()
    curve = iou_similarity_curve(enc, _scenes(args), args.n_images, S=args.S, level=args.level,
                                 raw_features=args.raw_features, seed=args.seed or 0)
    if enc.checksum() != before:
        raise RuntimeError("encoder parameters changed during diagnosis")
    curve.write_csv(args.out)
    if args.svg:
        save_iou_svg({Path(args.ckpt).stem: curve}, args.svg)
    print(f"spearman {curve.spearman():.4f} over {len(curve.bins)} bins -> {args.out}")
    return 0


def cmd_affinity(args) -> int:
    from .diagnostics import affinity_accuracy, affinity_matrix, save_affinity_svg

    enc = _encoder(args.ckpt)
    scenes = [s for s in _scenes(args) if s.gt_boxes]
    scene = scenes[args.index % len(scenes)]
    rng = np.random.default_rng([args.seed or 0, 31])
    box = max(scene.gt_boxes, key=lambda b: b.area)
    aff = affinity_matrix(enc, scene.image, box, args.tau_vis, args.S, args.level, rng,
                          raw_features=args.raw_features)
    aff.write_csv(args.out)
    if args.svg:
        save_affinity_svg(aff, args.svg)
    msg = f"diagonal accuracy {aff.accuracy:.4f} -> {args.out}"
    if args.pairs:
        mean = affinity_accuracy(enc, scenes, args.pairs, args.S, args.level, args.seed or 0,
                                 args.raw_features)
        msg += f"; mean over {args.pairs} pairs {mean:.4f}"
    print(msg)
    return 0


def cmd_match(args) -> int:
    from .diagnostics import geometric_match_fraction, patch_matching, write_matches_csv
    from .geometry import AugmentConfig, sample_augmentation

    enc = _encoder(args.ckpt)
    scene = _scenes(args)[args.index]
    rng = np.random.default_rng([args.seed or 0, 37])
    aug = replace(AugmentConfig().geometric_only(), out_size=scene.image.shape[0])
    t1 = sample_augmentation(rng, scene.size, aug)
    t2 = sample_augmentation(rng, scene.size, aug)
    matches = patch_matching(enc, t1, t2, scene.image, args.level, args.raw_features)
    write_matches_csv(matches, args.out)
    h = 1 + max(m.src_i for m in matches)
    w = 1 + max(m.src_j for m in matches)
    frac = geometric_match_fraction(matches, t1, t2, enc.strides[args.level], (h, w))
    print(f"{len(matches)} matches, {frac:.3f} within 1 cell of geometry -> {args.out}")
    return 0


def cmd_knn(args) -> int:
    from .diagnostics import knn_retrieval, write_knn_csv

    enc = _encoder(args.ckpt)
    scenes = _scenes(args)
    images = [s.image for s in scenes]
    hits = knn_retrieval(enc, images, images[args.query], args.k, args.level)
    write_knn_csv(hits, args.out)
    for rank, (i, s) in enumerate(hits, 1):
        labels = scenes[i].labels
        print(f"{rank:>3} {i:>6} {s:.4f} labels={labels}")
    return 0


def cmd_export(args) -> int:
    from .encoder import read_tensor_file

    meta, arrays = read_tensor_file(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest, offset = {"config": meta.get("config"), "step": meta.get("step"), "tensors": {}}, 0
    with (out / "params.bin").open("wb") as fh:
        for name, arr in arrays.items():
            if not name.startswith("query/"):
                continue
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(data)
            manifest["tensors"][name[6:]] = {"shape": list(arr.shape), "dtype": "float64-le",
                                             "offset": offset, "nbytes": len(data)}
            offset += len(data)
    (out / "params.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"exported {len(manifest['tensors'])} tensors to {out}")
    return 0


# ---------------------------------------------------------------- parser

def _add_scene_source(p):
    p.add_argument("--data", help="image folder with .json box sidecars (default: synthetic scenes)")
    p.add_argument("--count", type=int, default=200, help="synthetic scenes to generate")
    p.add_argument("--data-seed", type=int, default=2, help="seed of the synthetic held-out scenes")
    p.add_argument("--size", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dupr", description="Dense patch-level contrastive pretraining at desk scale.")
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides config seeds)")
    p.add_argument("--workers", type=int, default=None, help="augmentation worker threads")
    p.add_argument("--print-default-config", action="store_true",
                   help="print the default training config as JSON and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic PPM dataset with box sidecars")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=512)
    g.add_argument("--size", type=int, default=64)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="run pretraining from a TOML/JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--out-dir", help="override the config's output directory")
    t.set_defaults(func=cmd_pretrain)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--op", action="append", help="restrict to this op (repeatable)")
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("diagnose", help="analysis artifacts from a checkpoint")
    dsub = d.add_subparsers(dest="probe", parser_class=_Parser, required=True)

    iou = dsub.add_parser("iou-curve", help="IoU vs. patch-similarity curve")
    iou.add_argument("--ckpt", required=True)
    iou.add_argument("--out", default="iou_curve.csv")
    iou.add_argument("--svg")
    iou.add_argument("--n-images", type=int, default=None)
    iou.add_argument("--level", type=int, default=2)
    iou.add_argument("--S", type=int, default=None, help="grid size (default: the training RoI size)")
    iou.add_argument("--raw-features", action="store_true", help="skip the patch projection head")
    _add_scene_source(iou)
    iou.set_defaults(func=cmd_iou_curve)

    aff = dsub.add_parser("affinity", help="cross-view affinity matrix of a gt box")
    aff.add_argument("--ckpt", required=True)
    aff.add_argument("--out", default="affinity.csv")
    aff.add_argument("--svg")
    aff.add_argument("--index", type=int, default=0, help="scene index")
    aff.add_argument("--pairs", type=int, default=0, help="also report mean accuracy over N view pairs")
    aff.add_argument("--tau-vis", type=float, default=0.001)
    aff.add_argument("--level", type=int, default=2)
    aff.add_argument("--S", type=int, default=None, help="grid size (default: the training RoI size)")
    aff.add_argument("--raw-features", action="store_true")
    _add_scene_source(aff)
    aff.set_defaults(func=cmd_affinity)

    mt = dsub.add_parser("match", help="dense cross-view patch matching")
    mt.add_argument("--ckpt", required=True)
    mt.add_argument("--out", default="matches.csv")
    mt.add_argument("--index", type=int, default=0)
    mt.add_argument("--level", type=int, default=2)
    mt.add_argument("--raw-features", action="store_true")
    _add_scene_source(mt)
    mt.set_defaults(func=cmd_match)

    kn = dsub.add_parser("knn", help="nearest neighbours on the stride-32 map")
    kn.add_argument("--ckpt", required=True)
    kn.add_argument("--out", default="knn.csv")
    kn.add_argument("--query", type=int, default=0)
    kn.add_argument("--k", type=int, default=4)
    kn.add_argument("--level", type=int, default=3)
    _add_scene_source(kn)
    kn.set_defaults(func=cmd_knn)

    e = sub.add_parser("export", help="dump query parameters as JSON manifest + raw float64")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export)
    return p


def _setup_logging():
    level = os.environ.get("DUPR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit:
        return 1
    if args.print_default_config:
        from .trainer import TrainConfig

        print(json.dumps(TrainConfig().to_dict(), indent=2))
        return 0
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # every failure past parsing is a runtime error
        log.debug("traceback", exc_info=True)
        print(f"dupr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
