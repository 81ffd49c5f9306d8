"""Command-line entry point: synth, preprocess, split, train, eval, infer.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
Machine-readable results go to stdout; progress and diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .dataset import ManifestError, Sample, SplitSpec, generate_synthetic, load_manifest, resolve_path, split_dataset, write_manifest
from .fov import FitError
from .imaging import read_image, write_image
from .model import ModelFormatError, ModelSpec, load_model, predict_proba, save_model, train
from .model.training import HISTORY_FIELDS
from .pipeline import PipelineConfig, config_from_dict, override, preprocess_image
from .stats import evaluation_report

log = logging.getLogger("cscfundus")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
THREADS_ENV = "CSCFUNDUS_THREADS"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers -----------------------------------------------------------------------


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}")
        if n < 1:
            raise UsageError(f"{THREADS_ENV} must be >= 1")
        return n
    return os.cpu_count() or 1


def ordered_map(fn: Callable, items: Sequence, threads: int) -> list:
    """Apply ``fn`` to every item; results follow input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _resolve_seed(args, config_seed: int) -> int:
    return config_seed if args.seed is None else args.seed


def load_pipeline_config(args) -> tuple[PipelineConfig, dict]:
    """Config file (if any) with the global ``--seed`` applied to every seeded stage."""
    raw: dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}")
    try:
        cfg = config_from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}")
    if args.seed is not None:
        cfg = replace(
            cfg,
            split=replace(cfg.split, seed=args.seed),
            augment=replace(cfg.augment, seed=args.seed),
            train=replace(cfg.train, seed=args.seed),
        )
    return cfg, raw


def _load_samples(path) -> list[Sample]:
    try:
        return load_manifest(path)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}")


def _load_split_images(manifest, samples, split):
    chosen = [s for s in samples if s.split == split]
    if not chosen:
        raise DataError(f"manifest has no {split!r} split")
    images = [read_image(resolve_path(manifest, s)) for s in chosen]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"{split} images differ in size: {sorted(shapes)}")
    shape = shapes.pop()
    if shape[0] != shape[1]:
        raise DataError(f"{split} images must be square, got {shape[1]}x{shape[0]}")
    return chosen, np.stack(images), np.array([s.label for s in chosen])


def _fmt(x: float) -> str:
    return repr(float(x))


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg, _ = load_pipeline_config(args)
    size = args.size if args.size is not None else cfg.synth_size
    seed = _resolve_seed(args, 0)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if size < 16:
        raise UsageError("--size must be >= 16")
    manifest = generate_synthetic(args.n, seed, args.out, size=size)
    print(manifest)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg, _ = load_pipeline_config(args)
    size = args.size if args.size is not None else cfg.preprocess_size
    if size < 1:
        raise UsageError("--size must be >= 1")
    threads = args.threads or default_threads()
    samples = _load_samples(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(s: Sample):
        src = resolve_path(args.manifest, s)
        try:
            img, _ = preprocess_image(read_image(src), size, cfg.fov)
        except (OSError, ValueError) as exc:
            return None, f"{s.path}: {exc}"
        rel = Path(s.path).with_suffix(".png")
        if rel.is_absolute():
            rel = Path(rel.name)
        dst = out_dir / rel
        dst.parent.mkdir(parents=True, exist_ok=True)
        write_image(dst, img)
        return Sample(rel.as_posix(), s.label, s.split), None

    results = ordered_map(work, samples, threads)
    kept = [r for r, _ in results if r is not None]
    for _, err in results:
        if err:
            log.warning("skipped %s", err)
    log.info("preprocessed %d of %d images (%d skipped)", len(kept), len(samples), len(samples) - len(kept))
    if samples and not kept:
        raise DataError("every image failed preprocessing")
    manifest = write_manifest(out_dir / "manifest.csv", kept)
    print(manifest)
    return EXIT_OK


def cmd_split(args) -> int:
    cfg, _ = load_pipeline_config(args)
    try:
        spec = SplitSpec(
            ratios=tuple(args.ratios) if args.ratios else cfg.split.ratios,
            seed=_resolve_seed(args, cfg.split.seed),
            stratified=False if args.no_stratify else cfg.split.stratified,
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    samples = _load_samples(args.manifest)
    try:
        out = split_dataset(samples, spec, respect_existing=args.respect_existing)
    except ValueError as exc:
        raise DataError(str(exc))
    target = Path(args.out) if args.out else Path(args.manifest)
    if target.resolve().parent != Path(args.manifest).resolve().parent:
        # keep relative image paths valid from the new location
        out = [replace(s, path=Path(os.path.relpath(resolve_path(args.manifest, s).resolve(), target.resolve().parent)).as_posix())
               for s in out]
    target.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(target, out)
    for lab in (0, 1):
        counts = [sum(1 for s in out if s.label == lab and s.split == sp) for sp in ("train", "val", "test")]
        log.info("label %d: train %d, val %d, test %d", lab, *counts)
    print(target)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, raw = load_pipeline_config(args)
    samples = _load_samples(args.manifest)
    _, x_train, y_train = _load_split_images(args.manifest, samples, "train")
    _, x_val, y_val = _load_split_images(args.manifest, samples, "val")
    image_size = x_train.shape[1]
    if x_val.shape[1] != image_size:
        raise DataError("train and val images differ in size")

    spec = cfg.model
    if args.input_size is not None:
        spec = replace(spec, input_size=args.input_size)
    elif "input_size" not in raw.get("model", {}):
        spec = replace(spec, input_size=image_size)
    if spec.input_size != image_size:
        raise DataError(f"images are {image_size}x{image_size} but the model expects {spec.input_size}")

    try:
        tcfg = override(cfg.train, max_epochs=args.epochs, batch_size=args.batch_size,
                        learning_rate=args.lr, patience=args.patience)
    except ValueError as exc:
        raise UsageError(str(exc))
    augment = None if args.no_augment else cfg.augment
    log.info("training on %d images, validating on %d (input %d)", len(x_train), len(x_val), spec.input_size)

    history_path = Path(args.history) if args.history else Path(args.model_out).with_suffix(".history.csv")
    history_path.parent.mkdir(parents=True, exist_ok=True)
    with open(history_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)

        def on_epoch(row):
            writer.writerow([row["epoch"]] + [_fmt(row[k]) for k in HISTORY_FIELDS[1:]])
            fh.flush()

        params, history = train(spec, x_train, y_train, x_val, y_val, tcfg, augment=augment, on_epoch=on_epoch)

    Path(args.model_out).parent.mkdir(parents=True, exist_ok=True)
    save_model(params, spec, args.model_out)
    best = min(history, key=lambda r: r["val_loss"])
    print(json.dumps({"model": str(args.model_out), "history": str(history_path), "epochs": len(history),
                      "best_epoch": best["epoch"], "best_val_loss": best["val_loss"]}))
    return EXIT_OK


def _read_csv(path, header: Sequence[str]) -> list[list[str]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")
    if not rows or [c.strip() for c in rows[0]] != list(header):
        raise DataError(f"{path}: expected header {','.join(header)!r}")
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise DataError(f"{path} line {i}: expected {len(header)} fields")
    return [[c.strip() for c in r] for r in rows[1:]]


def _parse_label(text, where) -> int:
    if text not in ("0", "1"):
        raise DataError(f"{where}: label must be 0 or 1, got {text!r}")
    return int(text)


def _load_scores(path):
    ids, scores, labels = [], [], []
    for i, (cid, score, label) in enumerate(_read_csv(path, ("case_id", "score", "label")), start=2):
        try:
            s = float(score)
        except ValueError:
            raise DataError(f"{path} line {i}: bad score {score!r}")
        if not np.isfinite(s):
            raise DataError(f"{path} line {i}: score must be finite")
        ids.append(cid)
        scores.append(s)
        labels.append(_parse_label(label, f"{path} line {i}"))
    return ids, np.array(scores), np.array(labels)


def _load_rater(path, case_ids) -> np.ndarray:
    calls = {}
    for i, (cid, label) in enumerate(_read_csv(path, ("case_id", "label")), start=2):
        calls[cid] = _parse_label(label, f"{path} line {i}")
    missing = [c for c in case_ids if c not in calls]
    if missing:
        raise DataError(f"{path}: no label for {len(missing)} case(s), e.g. {missing[0]!r}")
    return np.array([calls[c] for c in case_ids])


def _model_scores(args, cfg):
    params, spec = load_model(args.model)
    samples = _load_samples(args.manifest)
    if args.split != "all":
        samples = [s for s in samples if s.split == args.split]
    if not samples:
        raise DataError(f"manifest has no cases in split {args.split!r}")
    images = [read_image(resolve_path(args.manifest, s)) for s in samples]
    for s, im in zip(samples, images):
        if im.shape[:2] != (spec.input_size, spec.input_size):
            raise DataError(f"{s.path}: expected {spec.input_size}x{spec.input_size} image, got {im.shape[1]}x{im.shape[0]}")
    probs = predict_proba(params, spec, np.stack(images))
    return [s.path for s in samples], probs.astype(np.float64), np.array([s.label for s in samples])


def cmd_eval(args) -> int:
    cfg, _ = load_pipeline_config(args)
    threshold = args.threshold if args.threshold is not None else cfg.eval.threshold
    level = args.ci_level if args.ci_level is not None else cfg.eval.ci_level
    if bool(args.scores) == bool(args.model):
        raise UsageError("give either --scores or --model with --manifest")
    if args.model and not args.manifest:
        raise UsageError("--model needs --manifest")

    if args.scores:
        case_ids, scores, truth = _load_scores(args.scores)
    else:
        case_ids, scores, truth = _model_scores(args, cfg)

    raters = {}
    for spec in args.rater or []:
        name, _, path = spec.rpartition("=")
        name = name or Path(path).stem
        if name in raters or name == "model":
            raise UsageError(f"duplicate rater name {name!r}")
        raters[name] = _load_rater(path, case_ids)

    try:
        report = evaluation_report(scores, truth, raters, threshold, level)
    except ValueError as exc:
        raise DataError(str(exc))

    text = json.dumps(report, indent=2, allow_nan=False) + "\n"
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(text, encoding="utf-8")
    roc_path = Path(args.roc) if args.roc else report_path.with_suffix(".roc.csv")
    with open(roc_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["reader", "fpr", "tpr", "threshold"])
        for name, r in report["readers"].items():
            for f, t, h in r["roc_points"]:
                w.writerow([name, _fmt(f), _fmt(t), h if isinstance(h, str) else _fmt(h)])
    if args.scores_out:
        with open(args.scores_out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case_id", "score", "label"])
            for cid, s, y in zip(case_ids, scores, truth):
                w.writerow([cid, _fmt(s), int(y)])

    summary = {name: {"auc": r["auc"], "auc_ci": r["auc_ci"], "accuracy": r["accuracy"]}
               for name, r in report["readers"].items()}
    print(json.dumps({"report": str(report_path), "roc": str(roc_path), "readers": summary}))
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg, _ = load_pipeline_config(args)
    params, spec = load_model(args.model)
    threads = args.threads or default_threads()

    def work(path):
        try:
            img = read_image(path)
            if not args.preprocessed:
                img, _ = preprocess_image(img, spec.input_size, cfg.fov)
            elif img.shape[:2] != (spec.input_size, spec.input_size):
                raise ValueError(f"expected {spec.input_size}x{spec.input_size} image")
            return float(predict_proba(params, spec, img)[0]), None
        except (OSError, ValueError) as exc:
            return None, str(exc)

    failures = 0
    for path, (prob, err) in zip(args.images, ordered_map(work, args.images, threads)):
        if err is None:
            print(f"{path},{prob:.6f}", flush=True)
            log.info("ok %s", path)
        else:
            failures += 1
            log.error("failed %s: %s", path, err)
    if failures:
        log.error("%d of %d images failed", failures, len(args.images))
        return EXIT_DATA
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _ratios(text: str) -> list[float]:
    parts = text.replace(":", ",").split(",")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratios {text!r}")
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected three ratios, e.g. 8:1:1 or 0.8,0.1,0.1")
    total = sum(vals)
    if total > 1.5:
        # integer parts such as 8:1:1
        vals = [v / total for v in vals]
    return vals


def build_parser() -> argparse.ArgumentParser:
    def add_common(parser, top):
        # accepted before or after the subcommand; only the top level sets defaults
        kw = {} if top else {"default": argparse.SUPPRESS}
        parser.add_argument("--config", help="JSON pipeline configuration", **kw)
        parser.add_argument("--seed", type=int, help="seed for every seeded stage (overrides the config)", **kw)
        parser.add_argument("-v", "--verbose", action="store_true", help="debug diagnostics on stderr", **kw)
        parser.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr", **kw)

    common = _Parser(add_help=False)
    add_common(common, top=False)
    p = _Parser(prog="cscfundus", description="Fundus preprocessing, CSC classifier training and evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    add_common(p, top=True)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    s = add("synth", "generate a labeled synthetic fundus dataset")
    s.add_argument("--n", type=int, required=True, help="images per class")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--size", type=int, help="image side in pixels (default 256)")
    s.set_defaults(func=cmd_synth)

    s = add("preprocess", "FOV detection, equalization, crop and resize")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--size", type=int, help="output side in pixels (default 299)")
    s.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or CPU count)")
    s.set_defaults(func=cmd_preprocess)

    s = add("split", "assign train/val/test splits")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", help="output manifest (default: rewrite the input)")
    s.add_argument("--ratios", type=_ratios, help="train:val:test, e.g. 8:1:1")
    s.add_argument("--no-stratify", action="store_true")
    s.add_argument("--respect-existing", action="store_true", help="keep splits already present")
    s.set_defaults(func=cmd_split)

    s = add("train", "train the classifier on the train/val splits")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model-out", required=True)
    s.add_argument("--history", help="history CSV (default: <model>.history.csv)")
    s.add_argument("--input-size", type=int, help="model input side (default: image size)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--patience", type=int)
    s.add_argument("--no-augment", action="store_true")
    s.set_defaults(func=cmd_train)

    s = add("eval", "ROC/AUC, confusion and kappa report")
    s.add_argument("--model")
    s.add_argument("--manifest")
    s.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    s.add_argument("--scores", help="CSV case_id,score,label instead of a model")
    s.add_argument("--rater", action="append", metavar="[NAME=]CSV", help="rater CSV case_id,label (repeatable)")
    s.add_argument("--threshold", type=float)
    s.add_argument("--ci-level", type=float)
    s.add_argument("--report", required=True, help="report JSON path")
    s.add_argument("--roc", help="ROC CSV path (default: <report>.roc.csv)")
    s.add_argument("--scores-out", help="write per-case model scores as CSV")
    s.set_defaults(func=cmd_eval)

    s = add("infer", "CSC probability per image")
    s.add_argument("--model", required=True)
    s.add_argument("images", nargs="+")
    s.add_argument("--preprocessed", action="store_true", help="inputs are already model-sized")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_infer)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cscfundus: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ManifestError, ModelFormatError, FitError) as exc:
        print(f"cscfundus: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"cscfundus: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
