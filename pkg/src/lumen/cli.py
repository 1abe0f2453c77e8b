"""Command line entry point: ``lumen <command> ...``.

Exit status is 0 on success, 2 on a usage error and 1 on a runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger("lumen")

TABLE_HEADERS = {"tilt": "Tilt range", "pan": "Pan range", "frontback": "Light"}


def _cmd_gen(args) -> int:
    from .dataset import DatasetConfig, generate_dataset

    cfg = DatasetConfig(n=args.n, seed=args.seed, size=args.size, spp=args.spp, single_object=args.single_object)
    manifest = generate_dataset(cfg, args.out, threads=args.threads)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.records)} images to {args.out} ({counts})")
    return 0


def _load_model(path: str):
    from .estimator import load_checkpoint

    model, _ = load_checkpoint(path)
    return model


def _cmd_train(args) -> int:
    from . import estimator as est
    from .dataset import load_split, read_manifest

    root = Path(args.data)
    manifest = read_manifest(root)
    images, recs = load_split(manifest, root, "train")
    if not recs:
        raise ValueError(f"{root}: no training records")
    val_imgs, val_recs = load_split(manifest, root, "val")
    size = images.shape[1]
    if args.resume:
        model = _load_model(args.resume)
    else:
        model = est.build_model(est.ModelConfig(input_size=size), args.seed)
    cfg = est.TrainConfig(
        batch_size=args.batch,
        lr=args.lr,
        plateau_patience=args.patience,
        max_epochs=args.epochs,
        max_steps=args.steps,
        seed=args.seed,
        weights=est.LossWeights(*args.alpha),
        literal_residual_sum=args.literal_loss,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    val = (est.normalize_images(val_imgs), [r.gt for r in val_recs]) if val_recs else None
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:

        def on_epoch(e):
            fh.write(json.dumps(e.__dict__, sort_keys=True) + "\n")
            fh.flush()
            print(
                f"epoch {e.epoch:4d} steps {e.steps:6d} lr {e.lr:.1e} loss {e.train_loss:.5f}"
                + ("" if e.val_loss is None else f" val {e.val_loss:.5f}")
                + f" dir {e.direction_error:.2f} col {e.color_error:.2f}"
            )

        est.fit(model, est.normalize_images(images), [r.gt for r in recs], cfg, val, out, on_epoch)
    est.save_checkpoint(out / "model.lpckpt", model)
    print(f"saved {out / 'model.lpckpt'}")
    return 0


def _cmd_eval(args) -> int:
    from .dataset import read_manifest
    from .evaluation import evaluate, format_table, model_predictor, overall_row, stratify

    model = _load_model(args.checkpoint)
    root = Path(args.data)
    report = evaluate(model_predictor(model), read_manifest(root), args.split, root)
    stat = "median" if args.median else "mean"
    if args.stratify:
        rows = stratify(report, args.stratify, stat)
        print(format_table(rows, TABLE_HEADERS[args.stratify]))
    else:
        print(format_table([overall_row(report, stat)], "Split"))
    return 0


def _cmd_predict(args) -> int:
    from .dataset import load_png, save_png
    from .estimator import predict
    from .overlay import render_overlay

    model = _load_model(args.checkpoint)
    image = load_png(args.image)
    pan, tilt, color = predict(model, image)
    print(f"pan={pan:.2f} tilt={tilt:.2f} rgb={color.r:.4f},{color.g:.4f},{color.b:.4f}")
    if args.overlay:
        save_png(Path(args.overlay), render_overlay((pan, tilt, color), None, image))
    return 0


def _cmd_probe(args) -> int:
    from .annotations import read_annotations
    from .dataset import ManifestRecord, load_png, save_png, write_manifest
    from .probe import analyze, calibrate, mask_spheres
    from .scenegen import LightGT

    ann_path = Path(args.annotations)
    base = ann_path.parent
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records, results = [], []
    cal_cache = {}
    for i, ann in enumerate(read_annotations(ann_path)):
        image = load_png(base / ann.image)
        cal = None
        if ann.reference is not None:
            if ann.reference not in cal_cache:
                cal_cache[ann.reference] = calibrate(load_png(base / ann.reference), ann.specular, args.mount_offset)
            cal = cal_cache[ann.reference]
        res = analyze(image, ann.specular, ann.diffuse, cal)
        if args.mask_spheres:
            image = mask_spheres(image, [ann.specular, ann.diffuse])
        rel = f"images/{i:05d}.png"
        save_png(out / rel, image)
        gt = LightGT(res.pan, -res.tilt, res.color)
        records.append(ManifestRecord(i, rel, "test", gt, None, ann.image))
        results.append(
            {
                "image": ann.image,
                "pan": res.pan,
                "tilt": res.tilt,
                "color": list(res.color),
                "highlight": list(res.highlight),
                "confidence": res.confidence,
            }
        )
    write_manifest(out / "manifest.jsonl", records, {"source": str(ann_path), "masked": bool(args.mask_spheres)})
    with open(out / "probe_results.jsonl", "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    print(f"wrote {len(records)} probe results to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import end_to_end_check, run_op_suite

    results = run_op_suite(args.seed)
    if not args.ops_only:
        results += end_to_end_check(args.seed)
    worst: dict[str, tuple[float, float, int]] = {}
    for r in results:
        key = r.name.split("/")[0] if r.name.startswith("total_loss") else r.name
        prev = worst.get(key, (0.0, r.tolerance, 0))
        worst[key] = (max(prev[0], r.max_rel_error), r.tolerance, prev[2] + 1)
    ok = True
    for name, (err, tol, n) in worst.items():
        status = "PASS" if err < tol else "FAIL"
        ok &= err < tol
        print(f"{status} {name:<22} checks={n:<3d} max_rel_err={err:.3e} tol={tol:.0e}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lumen", description="Light direction and colour estimation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, default=2500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--spp", type=int, choices=(1, 4), default=1)
    g.add_argument("--single-object", action="store_true", help="one object per scene")
    g.add_argument("--threads", type=int, default=None)
    g.set_defaults(func=_cmd_gen)

    t = sub.add_parser("train", help="train the estimator on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="directory for checkpoints and the training log")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--patience", type=int, default=5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--alpha", type=float, nargs=3, default=(1.0, 1.0, 1.0), metavar=("PAN", "TILT", "COLOR"))
    t.add_argument("--literal-loss", action="store_true", help="sum residual pairs before squaring")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--stratify", choices=("tilt", "pan", "frontback"))
    e.add_argument("--median", action="store_true", help="report medians instead of means")
    e.set_defaults(func=_cmd_eval)

    pr = sub.add_parser("predict", help="estimate the light for one image")
    pr.add_argument("image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--overlay", default=None, help="write an overlay PNG here")
    pr.set_defaults(func=_cmd_predict)

    pb = sub.add_parser("probe", help="extract ground truth from annotated probe spheres")
    pb.add_argument("annotations")
    pb.add_argument("--out", required=True)
    pb.add_argument("--mask-spheres", action="store_true")
    pb.add_argument("--mount-offset", type=float, default=10.0)
    pb.set_defaults(func=_cmd_probe)

    gc = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--ops-only", action="store_true")
    gc.set_defaults(func=_cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - surfaced as exit status 1
        print(f"lumen {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
