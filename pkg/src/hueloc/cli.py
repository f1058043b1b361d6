"""Command-line entry point: ``hueloc {sources,synth,train,localize,eval,render}``.

Exit codes: 0 success, 1 usage error, 2 incomplete or missing inputs,
3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, baseline_choi, colorops, dataset, evaluate, localize, model
from .colorops import ParameterError

EXIT_OK, EXIT_USAGE, EXIT_INCOMPLETE, EXIT_RUNTIME = 0, 1, 2, 3
OUT_ENV = "HUELOC_OUT"

log = logging.getLogger("hueloc")


class UsageError(Exception):
    pass


class IncompleteInputs(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_range(text: str) -> list[int]:
    """``"30:330:30"`` (inclusive stop) or ``"30,90,150"``."""
    try:
        if ":" in text:
            parts = [int(p) for p in text.split(":")]
            start, stop = parts[0], parts[1]
            step = parts[2] if len(parts) > 2 else 1
            if step <= 0:
                raise ValueError
            return list(range(start, stop + 1, step))
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer range {text!r}") from None


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 768x1024, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def parse_threshold(text: str) -> tuple[str, float]:
    if text == "adaptive":
        return "adaptive", localize.TAIL
    if text.startswith("fixed:"):
        try:
            value = float(text.split(":", 1)[1])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad threshold {text!r}") from None
        if not 0.0 <= value <= 1.0:
            raise argparse.ArgumentTypeError("fixed threshold must lie in [0, 1]")
        return "fixed", value
    raise argparse.ArgumentTypeError("threshold must be 'adaptive' or 'fixed:<value>'")


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


def _write_config(out: Path, args, **extra) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(extra)
    cfg["hueloc_version"] = __version__
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def _pmap(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _need_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise IncompleteInputs(f"{what} directory {path} does not exist")
    return path


def _need_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise IncompleteInputs(f"{what} {path} does not exist")
    return path


# --------------------------------------------------------------------------- commands

def cmd_sources(args) -> int:
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed = dataset.derive_seed(args.seed, i)
        img = dataset.synthetic_source(args.height, args.width, seed, colorops.CfaPattern(args.cfa))
        colorops.write_png(out / f"source_{i:04d}.png", img)
    _write_config(out, args)
    print(f"wrote {args.count} synthetic sources to {out}")
    return EXIT_OK


def _synth_case(job):
    return dataset.make_case(*job)


def cmd_synth(args) -> int:
    src_dir = _need_dir(args.sources, "source")
    sources = dataset.load_sources(src_dir)
    params = dataset.TestSetParams(angles=args.angles, qfs=args.qfs, per_angle=args.per_angle,
                                   n_pristine=args.pristine, crop=args.crop, box=args.box)
    sources = [dataset.crop_source(s, params.crop) for s in sources]
    plan = dataset.case_plan(len(sources), params, args.recipe)
    qfs = [None] if args.recipe == "png" else list(params.qfs)
    jobs = [(sources[src], src, angle, args.recipe, qf, args.seed, params)
            for qf in qfs for src, angle in plan]
    cases = _pmap(_synth_case, jobs, args.jobs)
    out = _out_dir(args)
    # Build in a sibling temp dir so a failure leaves no partial dataset behind.
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".synth-", dir=out.parent))
    try:
        manifest = dataset.write_test_set(cases, tmp)
        _write_config(tmp, args, cases=len(cases))
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    groups = sorted({c.angle for c in cases})
    print(f"wrote {len(cases)} cases ({len(groups)} angle groups) to {out / manifest.name}")
    return EXIT_OK


def cmd_train(args) -> int:
    pool = dataset.load_sources(_need_dir(args.pool, "pool"))
    cfg = model.TrainConfig(mode=args.mode, epochs=args.epochs, pairs=args.pairs,
                            batch_size=args.batch_size, lr0=args.lr0, patience=args.patience,
                            backbone=args.backbone, seed=args.seed,
                            same_image=not args.cross_image, angles=tuple(args.angles))
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, args)
    result = model.train(cfg, pool, log_path=out / "train_log.jsonl")
    model.save_checkpoint(result.model, out / "checkpoint.pt", result.metadata)
    print(f"trained {result.metadata['epochs_run']} epochs; best val acc "
          f"{result.metadata['best_val_acc']:.3f}; checkpoint at {out / 'checkpoint.pt'}")
    return EXIT_OK


def _inputs(args) -> list[dict]:
    if args.manifest:
        return dataset.read_manifest(_need_file(args.manifest, "manifest"))
    path = _need_file(args.image, "image")
    return [{"case_id": path.stem, "image": path.name, "_root": str(path.parent)}]


def _choi_case(job):
    rec, cfg, out = job
    img = colorops.read_image(Path(rec["_root"]) / rec["image"])
    mask = baseline_choi.choi_localize(img, cfg)
    colorops.write_mask(out / f"{rec['case_id']}_mask.png", mask)
    return {"case_id": rec["case_id"], "method": "choi", "forged_fraction": float(mask.mean())}


_MODELS: dict = {}


def _siamese_case(job):
    rec, ckpt, opts, out = job
    if ckpt not in _MODELS:
        _MODELS[ckpt] = model.load_checkpoint(ckpt)[0]
    net = _MODELS[ckpt]
    img = colorops.read_image(Path(rec["_root"]) / rec["image"])
    res = localize.localize_pipeline(img, net, stride=opts["stride"], mode=opts["mode"],
                                     fixed_threshold=opts["value"], invert=opts["invert"],
                                     keep_intermediates=opts["intermediates"])
    cid = rec["case_id"]
    colorops.write_mask(out / f"{cid}_mask.png", res.mask)
    localize.write_heatmap_png(out / f"{cid}_heatmap.png", res.heatmap)
    localize.write_heatmap_raw(out / f"{cid}_heatmap.f32", res.heatmap)
    if opts["intermediates"]:
        np.savez_compressed(out / f"{cid}_intermediates.npz", fused=res.fused, **res.extras)
    return {"case_id": cid, "method": opts["tag"], **res.record()}


def cmd_localize(args) -> int:
    records = _inputs(args)
    mode, value = args.threshold
    if args.method == "siamese":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required for --method siamese")
        ckpt = str(_need_file(args.checkpoint, "checkpoint"))
        model.load_checkpoint(ckpt)  # fail early on a bad file
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    if args.method == "choi":
        cfg = baseline_choi.ChoiConfig(cfa=colorops.CfaPattern(args.cfa))
        results = _pmap(_choi_case, [(r, cfg, out) for r in records], args.jobs)
    else:
        opts = {"stride": args.stride, "mode": mode, "value": value, "invert": args.invert,
                "intermediates": args.save_intermediates,
                "tag": "siamese-G" if mode == "adaptive" else f"siamese-T-{value:g}"}
        results = _pmap(_siamese_case, [(r, ckpt, opts, out) for r in records], args.jobs)
    (out / "results.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in results))
    _write_config(out, args)
    print(f"localized {len(results)} image(s) with {args.method}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    records = dataset.read_manifest(_need_file(args.manifest, "manifest"))
    pred_dir = _need_dir(args.predictions, "predictions")
    report = evaluate.evaluate_run(records, pred_dir, args.group_by)
    out = _out_dir(args)
    table, _ = evaluate.write_report(report, out, args.method)
    _write_config(out, args)
    print(table.read_text(), end="")
    return EXIT_OK if report.complete else EXIT_INCOMPLETE


def _panel(images: list[np.ndarray], height: int = 256) -> Image.Image:
    tiles = []
    for img in images:
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        im = Image.fromarray(img)
        w = max(1, round(im.width * height / im.height))
        tiles.append(im.resize((w, height), Image.BILINEAR))
    gap = 4
    panel = Image.new("RGB", (sum(t.width for t in tiles) + gap * (len(tiles) - 1), height), "white")
    x = 0
    for t in tiles:
        panel.paste(t, (x, 0))
        x += t.width + gap
    return panel


def cmd_render(args) -> int:
    records = _inputs(args)
    pred_dir = _need_dir(args.predictions, "predictions")
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        root = Path(rec["_root"])
        cid = rec["case_id"]
        tiles = [colorops.read_image(root / rec["image"])]
        heat = pred_dir / f"{cid}_heatmap.png"
        if heat.is_file():
            tiles.append(np.asarray(Image.open(heat).convert("L")))
        pred = evaluate.prediction_path(pred_dir, cid)
        if pred.is_file():
            tiles.append(colorops.read_mask(pred).astype(np.uint8) * 255)
        if "mask" in rec:
            tiles.append(colorops.read_mask(root / rec["mask"]).astype(np.uint8) * 255)
        _panel(tiles, args.height).save(out / f"{cid}_panel.png")
    print(f"rendered {len(records)} panel(s) to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hueloc", description="Hue-modification forgery localization toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
        return p

    p = common(sub.add_parser("sources", help="write synthetic demosaiced source images"))
    p.add_argument("--count", type=int, default=30)
    p.add_argument("--height", type=int, default=dataset.TEST_CROP[0])
    p.add_argument("--width", type=int, default=dataset.TEST_CROP[1])
    p.add_argument("--cfa", default="GBRG")
    p.set_defaults(func=cmd_sources)

    p = common(sub.add_parser("synth", help="build a forgery test set"))
    p.add_argument("--recipe", required=True, choices=dataset.RECIPES)
    p.add_argument("--sources", required=True, help="directory of source images")
    p.add_argument("--angles", type=parse_range, default=list(dataset.DEFAULT_ANGLES))
    p.add_argument("--qfs", type=parse_range, default=list(dataset.DEFAULT_QFS))
    p.add_argument("--per-angle", type=int, default=10)
    p.add_argument("--pristine", type=int, default=10)
    p.add_argument("--crop", type=parse_size, default=dataset.TEST_CROP, help="HxW crop of every source")
    p.add_argument("--box", type=int, default=dataset.MASK_BOX)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train the Siamese model"))
    p.add_argument("--pool", required=True, help="directory of pristine training images")
    p.add_argument("--mode", choices=("clean", "jpeg"), default="clean")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--pairs", type=int, default=model.TrainConfig.pairs)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr0", type=float, default=1e-4)
    p.add_argument("--angles", type=parse_range, default=list(dataset.TRAIN_ANGLES),
                   help="rotation angles for inconsistent pairs")
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--backbone", choices=model.BACKBONES, default="small-cnn")
    p.add_argument("--cross-image", action="store_true", help="draw pair patches from different images")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("localize", help="produce heatmaps and masks"))
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--image")
    p.add_argument("--method", choices=("siamese", "choi"), default="siamese")
    p.add_argument("--threshold", type=parse_threshold, default=("adaptive", localize.TAIL))
    p.add_argument("--checkpoint")
    p.add_argument("--stride", type=int, default=localize.DEFAULT_STRIDE)
    p.add_argument("--invert", action="store_true", help="invert the fused map (forgery larger than background)")
    p.add_argument("--save-intermediates", action="store_true")
    p.add_argument("--cfa", default="GBRG")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_localize)

    p = common(sub.add_parser("eval", help="score predicted masks against a manifest"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--group-by", choices=("angle", "qf", "all"), default="angle")
    p.add_argument("--method", default="")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("render", help="image / heatmap / mask panels"))
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--image")
    p.add_argument("--predictions", required=True)
    p.add_argument("--height", type=int, default=256)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ParameterError) as exc:
        print(f"hueloc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IncompleteInputs, FileNotFoundError, model.CheckpointError) as exc:
        print(f"hueloc: error: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.debug("failure", exc_info=True)
        print(f"hueloc: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
