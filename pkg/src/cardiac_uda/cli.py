"""Command-line driver: generate, preprocess, train, eval, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config
from .evaluation import (ablation_table, evaluate, predict, prepare_data, run_ablation,
                         save_overlays, write_records)
from .phantom import DatasetSplit, load_slice_stack, make_splits, write_slice_stack
from .preprocess import HistogramReference, build_reference, preprocess_slices
from .trainer import fit, load_checkpoint, save_checkpoint
from .types import ConfigError, InvalidInputError

log = logging.getLogger("cardiac_uda")

SPLIT_DIRS = {
    "source_labeled": "source",
    "target_unlabeled": "target",
    "target_heldout_labeled": "heldout",
    "source_heldout_labeled": "source_heldout",
}
REFERENCE_FILE = "histogram_reference.txt"


class UsageError(Exception):
    """Bad arguments, missing inputs or invalid configuration (exit code 2)."""


# ---------------------------------------------------------------- dataset IO

def write_dataset(split: DatasetSplit, directory, meta: dict):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for attr, sub in SPLIT_DIRS.items():
        slices = getattr(split, attr)
        if slices:
            write_slice_stack(slices, directory / sub)
    meta = dict(meta, normalize="dtype", splits={sub: len(getattr(split, a)) for a, sub in SPLIT_DIRS.items()})
    with open(directory / "dataset.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def read_dataset(directory) -> DatasetSplit:
    directory = Path(directory)
    if not directory.is_dir():
        raise UsageError(f"dataset directory not found: {directory}")
    normalize = "minmax"
    meta_path = directory / "dataset.json"
    if meta_path.is_file():
        with open(meta_path) as fh:
            normalize = json.load(fh).get("normalize", "minmax")
    parts = {}
    for attr, sub in SPLIT_DIRS.items():
        manifest = directory / sub / "manifest.csv"
        parts[attr] = load_slice_stack(manifest, normalize) if manifest.is_file() else []
    if not parts["source_labeled"] and not parts["target_heldout_labeled"]:
        raise UsageError(f"no slice manifests found under {directory}")
    return DatasetSplit(**parts)


# ---------------------------------------------------------------- commands

def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    train = cfg.train
    if getattr(args, "seed", None) is not None:
        train = dataclasses.replace(train, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        train = dataclasses.replace(train, epochs=args.epochs)
    w = train.loss_weights
    if getattr(args, "no_mda", False):
        w = dataclasses.replace(w, lambda_Dm=0.0, lambda_Gm=0.0)
    if getattr(args, "no_fda", False):
        w = dataclasses.replace(w, lambda_Df=0.0, lambda_Gf=0.0)
    if getattr(args, "no_gfrm", False):
        train = dataclasses.replace(train, use_gfrm=False)
    cfg.train = dataclasses.replace(train, loss_weights=w)
    if getattr(args, "no_hm", False):
        cfg.preprocess = dataclasses.replace(cfg.preprocess, histogram_match=False)
    if getattr(args, "image_size", None) is not None:
        cfg.preprocess = dataclasses.replace(cfg.preprocess, image_size=args.image_size)
    if getattr(args, "seeds", None):
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    return cfg.sync()


def _data_dir(args, cfg: RunConfig) -> Path:
    path = args.data or cfg.data_dir
    if path is None:
        raise UsageError("no dataset given; pass --data or set data_dir in the config")
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    return path


def _out_dir(args, cfg: RunConfig) -> Path:
    path = Path(args.out or cfg.output_dir or "runs/latest")
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_generate(args):
    cfg = _config(args)
    d = cfg.data
    n = dict(n_source=args.n_source or d.n_source, n_target=args.n_target or d.n_target,
             n_heldout=args.n_heldout or d.n_heldout,
             n_source_heldout=args.n_source_heldout if args.n_source_heldout is not None else d.n_source_heldout)
    seed = args.data_seed if args.data_seed is not None else d.seed
    size = cfg.preprocess.image_size
    split = make_splits(n["n_source"], n["n_target"], n["n_heldout"], seed,
                        spec=d.phantom_spec(size), n_source_heldout=n["n_source_heldout"])
    out = Path(args.out)
    write_dataset(split, out, dict(seed=seed, image_size=size, generator=f"cardiac_uda {__version__}", **n))
    print(f"wrote {sum(len(getattr(split, a)) for a in SPLIT_DIRS)} slices to {out}")


def cmd_preprocess(args):
    cfg = _config(args)
    data = read_dataset(_data_dir(args, cfg))
    out = _out_dir(args, cfg)
    pcfg = cfg.preprocess
    prepared, ref = prepare_data(data, pcfg.image_size, pcfg.histogram_match, pcfg.bins)
    write_dataset(prepared, out, dict(image_size=pcfg.image_size, histogram_match=pcfg.histogram_match))
    if ref is not None:
        ref.save(out / REFERENCE_FILE)
    cfg.dump(out / "config.yaml")
    print(f"preprocessed slices written to {out}")


def _evaluator(split: DatasetSplit):
    def run(net, epoch):
        report = evaluate(net.seg, split.target_heldout_labeled)
        return {"heldout_dice_per_class": report.dice, "heldout_jaccard_per_class": report.jaccard,
                "heldout_mean_dice": report.mean_dice}
    return run if split.target_heldout_labeled else None


def cmd_train(args):
    cfg = _config(args)
    data_dir = _data_dir(args, cfg)
    out = _out_dir(args, cfg)
    cfg.data_dir, cfg.output_dir = str(data_dir), str(out)
    cfg.dump(out / "config.yaml")
    (out / "seeds.txt").write_text(f"{cfg.train.seed}\n")
    data = read_dataset(data_dir)
    pcfg = cfg.preprocess
    split, ref = prepare_data(data, pcfg.image_size, pcfg.histogram_match, pcfg.bins)
    records = []
    state, _ = fit(split, cfg.train, cfg.segnet, evaluator=_evaluator(split), log_fn=records.append)
    write_records(out / "metrics.jsonl", records)
    ck = out / "checkpoint"
    save_checkpoint(state, ck)
    _write_preprocess_meta(ck, pcfg, ref)
    if split.target_heldout_labeled:
        report = evaluate(state.net.seg, split.target_heldout_labeled)
        _write_report(out, report, "target held-out")
        if cfg.eval.overlays:
            held = split.target_heldout_labeled
            preds = predict(state.net.seg, [s.image for s in held])
            save_overlays([s.image for s in held], preds, [s.mask for s in held], out / "overlays",
                          cfg.eval.overlays)
    print(f"run written to {out}")


def _write_preprocess_meta(ck: Path, pcfg, ref):
    meta = {"image_size": pcfg.image_size, "histogram_match": pcfg.histogram_match, "bins": pcfg.bins}
    with open(ck / "preprocess.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    if ref is not None:
        ref.save(ck / REFERENCE_FILE)


def _write_report(out: Path, report, title):
    text = f"# {title}\n{report.table()}\n"
    (out / "report.txt").write_text(text)
    with open(out / "report.json", "w") as fh:
        json.dump(report.as_dict(), fh, indent=1, sort_keys=True)
    print(text, end="")


def cmd_eval(args):
    ck = Path(args.checkpoint)
    if not (ck / "manifest.json").is_file():
        raise UsageError(f"checkpoint not found: {ck}")
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise UsageError(f"dataset directory not found: {data_dir}")
    state = load_checkpoint(ck)
    size = state.seg_config.input_size
    meta_path = ck / "preprocess.json"
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
    data = read_dataset(data_dir)
    slices = getattr(data, {"heldout": "target_heldout_labeled",
                            "source_heldout": "source_heldout_labeled"}[args.split])
    if not slices:
        raise UsageError(f"split {args.split!r} is empty under {data_dir}")
    shapes = {s.image.shape for s in slices}
    if not args.resize and shapes != {(size, size)}:
        raise UsageError(f"config mismatch: checkpoint expects {size}x{size} slices, data has "
                         f"{sorted(shapes)}; pass --resize or preprocess with --image-size {size}")
    ref = None
    if meta.get("histogram_match") and (ck / REFERENCE_FILE).is_file() and not args.no_hm:
        ref = HistogramReference.load(ck / REFERENCE_FILE)
    slices = preprocess_slices(slices, size, ref)
    report = evaluate(state.net.seg, slices)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_report(out, report, f"{args.split} ({len(slices)} slices)")
    else:
        print(f"# {args.split}\n{report.table()}")


def cmd_ablate(args):
    cfg = _config(args)
    data_dir = _data_dir(args, cfg)
    out = _out_dir(args, cfg)
    cfg.data_dir, cfg.output_dir = str(data_dir), str(out)
    cfg.dump(out / "config.yaml")
    (out / "seeds.txt").write_text(",".join(map(str, cfg.seeds)) + "\n")
    data = read_dataset(data_dir)
    results = run_ablation(data, cfg.train, cfg.seeds, cfg.segnet, bins=cfg.preprocess.bins)
    table = ablation_table(results)
    (out / "report.txt").write_text(table + "\n")
    with open(out / "report.json", "w") as fh:
        json.dump([r.as_dict() for r in results], fh, indent=1, sort_keys=True)
    print(table)
    if any(r.error for r in results):
        return 1


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="cardiac-uda", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, out=True):
        sp.add_argument("--config", help="YAML run config; flags override it")
        if data:
            sp.add_argument("--data", help="dataset directory")
        if out:
            sp.add_argument("--out", help="output directory")
        sp.add_argument("--image-size", type=int, help="square grid size (multiple of 8)")

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    common(g, data=False, out=False)
    g.add_argument("--out", required=True)
    g.add_argument("--n-source", type=int)
    g.add_argument("--n-target", type=int)
    g.add_argument("--n-heldout", type=int)
    g.add_argument("--n-source-heldout", type=int)
    g.add_argument("--seed", dest="data_seed", type=int)
    g.set_defaults(func=cmd_generate)

    pp = sub.add_parser("preprocess", help="crop/resize and histogram-match a dataset")
    common(pp)
    pp.add_argument("--no-hm", action="store_true")
    pp.set_defaults(func=cmd_preprocess)

    def toggles(sp):
        for flag in ("hm", "mda", "fda", "gfrm"):
            sp.add_argument(f"--no-{flag}", action="store_true")

    t = sub.add_parser("train", help="preprocess and train one model")
    common(t)
    toggles(t)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labeled split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("heldout", "source_heldout"), default="heldout")
    e.add_argument("--resize", action="store_true", help="crop/resize slices to the model grid")
    e.add_argument("--no-hm", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the five-row ablation ladder")
    common(a)
    a.add_argument("--seeds", help="comma-separated training seeds")
    a.add_argument("--epochs", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (UsageError, ConfigError, InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
