"""``changeseg`` command line: train, eval, predict, convert, synth, verify, params.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .backbone import Backbone, ConfigError, count_lora_params, lora_slope
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, ConfigFileError, describe_keys
from .data import (DatasetError, DatasetManifest, colorize, compare_map, list_ids, load_dataset, scd_to_mcd,
                   stack_batch, synth_generate)
from .losses import TargetError
from .metrics import MetricsError, format_report
from .model import normalize_images
from .nn import GROUPS
from .train import TrainingError, build_model, evaluate, train, write_history

log = logging.getLogger("changeseg")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2
LORA_SWEEP = (4, 8, 16, 24, 32)


class UsageError(Exception):
    pass


def _resolve_seed(arg_seed):
    if arg_seed is not None:
        return arg_seed
    env = os.environ.get("MCDS_SEED")
    if env is None or env.strip() == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"MCDS_SEED must be an integer, got {env!r}") from None


def _load_config(path) -> Config:
    if path is None:
        return Config()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    return Config.load(p)


def _data_root(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"data directory not found: {p}")
    return p


def _manifest(root: Path) -> DatasetManifest:
    return DatasetManifest.load(root)


def _split_samples(root: Path, split: str, k: int) -> list:
    if not (root / split).is_dir():
        return []
    return list(load_dataset(root, split, k))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed)
    if seed is not None:
        cfg.train.seed = seed
    root = _data_root(args.data)
    manifest = _manifest(root)
    cfg.decoder.num_classes = manifest.k + 1
    cfg.validate()
    train_samples = _split_samples(root, "train", manifest.k)
    if not train_samples:
        raise UsageError(f"no training samples under {root / 'train'}")
    val_samples = _split_samples(root, "val", manifest.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = build_model(cfg)
    initial = model.state_dict()
    result = train(model, train_samples, cfg, val_samples or None)
    write_history(out / "history.csv", result.history)
    cfg.save(out / "config.txt")

    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    else:
        model.load_state_dict(initial)
    opt_state = result.optimizer.state_dict() if result.optimizer is not None else {}
    opt_state["epoch"] = np.array(float(result.best_epoch))
    save_checkpoint(out / "best.ckpt", model.state_dict(), opt_state, cfg.hash())

    cm = evaluate(model, val_samples or train_samples, cfg.train.batch)
    report = format_report(cm, manifest.class_names)
    (out / "report.txt").write_text(report, encoding="utf-8")
    print(report)
    print(f"best epoch {result.best_epoch}  steps {result.steps}  outputs in {out}")
    return EXIT_OK


def _restore(checkpoint, config_path=None):
    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    cfg_path = Path(config_path) if config_path else ckpt.parent / "config.txt"
    if not cfg_path.is_file():
        raise UsageError(f"config file not found: {cfg_path} (expected next to the checkpoint)")
    cfg = Config.load(cfg_path)
    model_state, _, chash = load_checkpoint(ckpt)
    if chash != cfg.hash():
        raise UsageError(f"config hash mismatch: {cfg_path} does not match {ckpt}")
    model = build_model(cfg)
    model.load_state_dict(model_state)
    return cfg, model


def cmd_eval(args) -> int:
    cfg, model = _restore(args.checkpoint, args.config)
    root = _data_root(args.data)
    manifest = _manifest(root)
    if manifest.k + 1 != model.num_classes:
        raise UsageError(f"class-count mismatch: model predicts {model.num_classes} classes, "
                         f"dataset has {manifest.k + 1}")
    samples = _split_samples(root, args.split, manifest.k)
    if not samples:
        raise UsageError(f"empty dataset: no samples in split {args.split!r} under {root}")
    cm = evaluate(model, samples, cfg.train.batch, manifest.k + 1)
    print(format_report(cm, manifest.class_names))
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg, model = _restore(args.checkpoint, args.config)
    root = _data_root(args.data)
    manifest = _manifest(root)
    if len(manifest.palette) != model.num_classes:
        raise UsageError(f"palette/class mismatch: palette has {len(manifest.palette)} colours, "
                         f"model predicts {model.num_classes} classes")
    samples = _split_samples(root, args.split, manifest.k)
    if not samples:
        raise UsageError(f"empty dataset: no samples in split {args.split!r} under {root}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dtype = model.backbone.stem.weight.dtype
    batch = cfg.train.batch
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        t1, t2, label = stack_batch(chunk)
        pred = model.predict(normalize_images(t1, dtype), normalize_images(t2, dtype))
        for s, p, g in zip(chunk, pred, label):
            Image.fromarray(colorize(p, manifest.palette), "RGB").save(out / f"{s.sample_id}.png")
            if args.compare:
                Image.fromarray(compare_map(p, g), "RGB").save(out / f"{s.sample_id}_compare.png")
    print(f"wrote {len(samples)} prediction(s) to {out}")
    return EXIT_OK


def _read_label(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"label image not found: {p}")
    with Image.open(p) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise UsageError(f"{p}: expected a single-channel label image, got mode {im.mode}")
        return np.asarray(im)


def cmd_convert(args) -> int:
    l1, l2 = _read_label(args.t1), _read_label(args.t2)
    if l1.shape != l2.shape:
        raise UsageError(f"label shapes differ: {l1.shape} vs {l2.shape}")
    mcd = scd_to_mcd(l1, l2)
    if mcd.max(initial=0) > 255:
        raise UsageError("class index above 255 cannot be stored in an 8-bit label")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mcd.astype(np.uint8), "L").save(out)
    print(f"wrote {out} ({int(np.count_nonzero(mcd))} changed pixels)")
    return EXIT_OK


_SYNTH_KEYS = {"count": 8, "size": 64, "k": 3, "seed": 0, "val": 0}


def parse_synth_spec(text: str) -> dict:
    spec = dict(_SYNTH_KEYS)
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise UsageError(f"bad --spec entry {part!r}: expected key=value")
        key, value = (v.strip() for v in part.split("=", 1))
        if key not in spec:
            raise UsageError(f"unknown --spec key {key!r} (known: {', '.join(spec)})")
        try:
            spec[key] = int(value)
        except ValueError:
            raise UsageError(f"--spec {key} must be an integer, got {value!r}") from None
    return spec


def cmd_synth(args) -> int:
    spec = parse_synth_spec(args.spec)
    seed = _resolve_seed(args.seed)
    if seed is not None:
        spec["seed"] = seed
    synth_generate(args.out, spec["count"], spec["size"], spec["k"], spec["seed"], val_count=spec["val"])
    print(f"wrote {spec['count']} train / {spec['val']} val scene(s) (size {spec['size']}, K={spec['k']}) to {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import format_results, run_gradcheck_suite, run_oracle_suite

    results = []
    if args.suite in ("gradcheck", "all"):
        results += run_gradcheck_suite(instances=args.instances)
    if args.suite in ("oracles", "all"):
        results += run_oracle_suite()
    print(format_results(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def params_table(cfg: Config) -> str:
    model = build_model(cfg)
    counts = model.param_counts()
    total = sum(counts.values())
    trainable = sum(v for g, v in counts.items() if g != "frozen")
    lines = [f"total parameters     {total}",
             f"trainable parameters {trainable} ({100.0 * trainable / total:.2f}%)"]
    for g in GROUPS:
        lines.append(f"  {g:<8} {counts.get(g, 0):>10}")
    slope = lora_slope(model.backbone)
    lines.append("")
    lines.append(f"LoRA linearity (slope sum(d+k) = {slope})")
    lines.append(f"  {'r':>3}  {'alpha':>7}  {'lora params':>11}  {'params / r':>10}")
    for r in LORA_SWEEP:
        bc = Config.from_text(cfg.to_text()).backbone
        bc.lora_r, bc.lora_alpha = r, 2.0 * r
        n = count_lora_params(Backbone(bc))
        lines.append(f"  {r:>3}  {2.0 * r:>7g}  {n:>11}  {n // r:>10}")
    return "\n".join(lines)


def cmd_params(args) -> int:
    print(params_table(_load_config(args.config)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="changeseg",
        description="Multi-class change detection: training, evaluation and verification.",
        epilog="config keys (key=value lines in --config files):\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", help="key=value config file (defaults when omitted)")
    p.add_argument("--data", required=True, help="dataset root with manifest.txt and train/ (val/ optional)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="run seed (falls back to MCDS_SEED, then the config)")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "print metrics of a checkpoint on a split"),
                             ("predict", cmd_predict, "write colour-coded prediction PNGs")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--config", help="config file (default: config.txt next to the checkpoint)")
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="val" if name == "eval" else "train")
        if name == "predict":
            p.add_argument("--out", required=True)
            p.add_argument("--compare", action="store_true",
                           help="also write TP white / TN black / FP red / FN green agreement maps")
        p.set_defaults(func=func)

    p = sub.add_parser("convert", help="turn a pair of semantic labels into a change label")
    p.add_argument("--t1", required=True)
    p.add_argument("--t2", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", default="", help="comma list of count=,size=,k=,seed=,val= (defaults 8,64,3,0,0)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="overrides seed= in --spec")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify", help="run gradient checks and reference oracles")
    p.add_argument("--suite", choices=("gradcheck", "oracles", "all"), default="all")
    p.add_argument("--instances", type=int, default=20, help="random instances per gradient check")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("params", help="parameter counts per group and the LoRA rank sweep")
    p.add_argument("--config")
    p.set_defaults(func=cmd_params)
    return parser


_INPUT_ERRORS = (UsageError, ConfigFileError, ConfigError, DatasetError, CheckpointError, TargetError,
                 MetricsError, TrainingError, FileNotFoundError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"changeseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
