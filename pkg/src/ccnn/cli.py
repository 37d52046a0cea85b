"""Command-line driver: train, eval, inspect, features.

Config for training is INI-style text with named layer blocks; precedence
is preset < config file < --set overrides < dedicated flags. Exit codes:
1 for configuration errors, 2 for data/file errors, 3 for numerical
failures.
"""

import argparse
import configparser
import contextlib
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import (
    CropView,
    Dataset,
    load_amat,
    load_cifar10,
    load_idx,
    load_idx_labels,
    split,
)
from .errors import ConfigError, DataError, NumericalError
from .model import (
    LayerSpec,
    classify,
    describe,
    forward_batch,
    load_model,
    predict_scores,
    save_model,
    train_multi_layer,
    validate_stack,
)
from .optimize import OptConfig
from .presets import get_preset, list_presets
from .serialize import load_features, save_features

logger = logging.getLogger(__name__)

EVAL_CHUNK = 512
SUMMARY_SCHEMA_VERSION = 1
METRICS_HEADER = ("layer,epoch,objective,train_error,nuclear_norm,"
                  "effective_rank,wall_ms")

_RUN_KEYS = {"seed", "threads", "out", "metrics", "summary", "cache_dir"}
_DATASET_KEYS = {"format", "data", "labels", "limit", "crop", "val_fraction",
                 "test_data", "test_labels"}
_OPTIM_KEYS = {"epochs", "batch_size", "step_size", "schedule", "projection",
               "project_every", "early_stop"}
_LAYER_KEYS = {"kernel", "gamma", "features", "m", "r", "R", "patch_side",
               "stride", "pad", "pool_side", "pool_stride", "gcn", "lcn",
               "zca", "zca_eps", "scale", "seed"}
_FORMATS = ("idx", "amat", "cifar10", "ccnf")


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns exit codes."""

    def error(self, message):
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# Config assembly


def _read_config_file(path) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(p) as fh:
            cp.read_file(fh, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {sec: dict(cp[sec]) for sec in cp.sections()}


def _merge(base: dict, extra: dict) -> None:
    for sec, pairs in extra.items():
        base.setdefault(sec, {}).update(pairs)


def _apply_set_overrides(sections: dict, pairs) -> None:
    for item in pairs or []:
        m = re.fullmatch(r"([A-Za-z0-9_]+)\.([A-Za-z0-9_]+)=(.*)", item)
        if m is None:
            raise ConfigError(
                f"--set expects SECTION.KEY=VALUE, got {item!r}"
            )
        sec, key, value = m.groups()
        sections.setdefault(sec, {})[key] = value


def _check_known_keys(sections: dict) -> None:
    for sec, pairs in sections.items():
        if sec == "run":
            allowed = _RUN_KEYS
        elif sec == "dataset":
            allowed = _DATASET_KEYS
        elif sec == "optim":
            allowed = _OPTIM_KEYS
        elif re.fullmatch(r"layer[0-9]+", sec):
            allowed = _LAYER_KEYS
        else:
            raise ConfigError(f"unknown config section [{sec}]")
        for key in pairs:
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")


def _get(sections, sec, key, default=None):
    return sections.get(sec, {}).get(key, default)


def _typed(sections, sec, key, default, conv, kind):
    raw = _get(sections, sec, key)
    if raw is None:
        return default
    try:
        return conv(raw)
    except (TypeError, ValueError):
        raise ConfigError(
            f"[{sec}] {key} must be {kind}, got {raw!r}"
        ) from None


def _to_bool(raw) -> bool:
    low = str(raw).strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(raw)


def _layer_sections(sections: dict) -> list[str]:
    found = {}
    for sec in sections:
        m = re.fullmatch(r"layer([0-9]+)", sec)
        if m:
            found[int(m.group(1))] = sec
    if not found:
        raise ConfigError(
            "config defines no layer blocks; add a [layer1] section"
        )
    expected = list(range(1, len(found) + 1))
    if sorted(found) != expected:
        raise ConfigError(
            f"layer blocks must be numbered 1..{len(found)} without gaps, "
            f"got {sorted(found)}"
        )
    return [found[i] for i in expected]


def _build_layer_spec(sections: dict, sec: str, default_seed: int) -> LayerSpec:
    kwargs = {
        "kernel": _get(sections, sec, "kernel", "gaussian"),
        "gamma": _typed(sections, sec, "gamma", 0.2, float, "a number"),
        "features": _get(sections, sec, "features", "random"),
        "m": _typed(sections, sec, "m", 500, int, "an integer"),
        "r": _typed(sections, sec, "r", 16, int, "an integer"),
        "R": _typed(sections, sec, "R", 30.0, float, "a number"),
        "patch_side": _typed(sections, sec, "patch_side", 5, int,
                             "an integer"),
        "stride": _typed(sections, sec, "stride", 1, int, "an integer"),
        "pad": _typed(sections, sec, "pad", 0, int, "an integer"),
        "pool_side": _typed(sections, sec, "pool_side", 1, int, "an integer"),
        "pool_stride": _typed(sections, sec, "pool_stride", 1, int,
                              "an integer"),
        "gcn": _typed(sections, sec, "gcn", False, _to_bool, "a boolean"),
        "lcn": _typed(sections, sec, "lcn", True, _to_bool, "a boolean"),
        "zca": _typed(sections, sec, "zca", True, _to_bool, "a boolean"),
        "zca_eps": _typed(sections, sec, "zca_eps", 1e-5, float, "a number"),
        "scale": _get(sections, sec, "scale", "auto"),
        "seed": _typed(sections, sec, "seed", default_seed, int,
                       "an integer"),
    }
    try:
        return LayerSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{sec}]: {exc}") from None


def _build_opt_config(sections: dict, radius: float, seed: int) -> OptConfig:
    early = _get(sections, "optim", "early_stop")
    kwargs = {
        "epochs": _typed(sections, "optim", "epochs", 10, int, "an integer"),
        "batch_size": _typed(sections, "optim", "batch_size", 50, int,
                             "an integer"),
        "step_size": _typed(sections, "optim", "step_size", 1.0, float,
                            "a number"),
        "schedule": _get(sections, "optim", "schedule", "inv_sqrt"),
        "projection": _get(sections, "optim", "projection", "nuclear"),
        "project_every": _typed(sections, "optim", "project_every", 1, int,
                                "an integer"),
        "early_stop": (None if early is None
                       else _typed(sections, "optim", "early_stop", None,
                                   int, "an integer")),
        "radius": radius,
        "seed": seed,
    }
    try:
        return OptConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[optim]: {exc}") from None


# ---------------------------------------------------------------------------
# Dataset assembly


def _parse_crop(text: str):
    if text is None or text == "none":
        return None
    m = re.fullmatch(r"(center|once):([0-9]+)x([0-9]+)", text)
    if m is None:
        raise ConfigError(
            f"crop must be none, center:HxW, or once:HxW, got {text!r}"
        )
    return m.group(1), int(m.group(2)), int(m.group(3))


def _load_dataset(fmt: str, data_paths, labels_path) -> Dataset:
    if fmt not in _FORMATS:
        raise ConfigError(
            f"unknown dataset format {fmt!r}; expected one of "
            f"{', '.join(_FORMATS)}"
        )
    if not data_paths:
        raise ConfigError("no dataset paths given (use --data)")
    if fmt == "idx":
        if labels_path is None:
            raise ConfigError("idx format needs --labels")
        if len(data_paths) != 1:
            raise ConfigError("idx format takes exactly one image file")
        return load_idx(data_paths[0], labels_path)
    if fmt == "amat":
        if len(data_paths) != 1:
            raise ConfigError("amat format takes exactly one file")
        return load_amat(data_paths[0])
    if fmt == "cifar10":
        return load_cifar10(data_paths)
    if labels_path is None:
        raise ConfigError("ccnf format needs --labels (an IDX label file)")
    if len(data_paths) != 1:
        raise ConfigError("ccnf format takes exactly one feature file")
    features = load_features(data_paths[0])
    labels = load_idx_labels(labels_path)
    if len(labels) != len(features):
        raise DataError(
            f"{labels_path}: {len(labels)} labels for {len(features)} "
            f"feature samples"
        )
    return Dataset(features, labels,
                   {"source": str(data_paths[0]), "format": "ccnf"})


def _apply_limit(ds: Dataset, limit: int, seed: int) -> Dataset:
    if limit <= 0 or limit >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).permutation(len(ds))[:limit])
    return ds.subset(idx)


def _apply_crop(ds: Dataset, crop, seed: int) -> Dataset:
    if crop is None:
        return ds
    mode, ch, cw = crop
    try:
        view = CropView(ds, ch, cw, mode, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return view.for_epoch(0)


# ---------------------------------------------------------------------------
# Output helpers


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else None
    return obj


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(_to_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_metrics(path, records_per_layer) -> None:
    lines = [METRICS_HEADER]
    for layer_idx, records in enumerate(records_per_layer, start=1):
        for rec in records:
            lines.append(",".join([
                str(layer_idx), str(rec["epoch"]),
                repr(float(rec["objective"])),
                repr(float(rec["train_error"])),
                repr(float(rec["nuclear_norm"])),
                repr(float(rec["effective_rank"])),
                repr(float(rec["wall_ms"])),
            ]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _chunked_scores(model, images) -> np.ndarray:
    parts = [predict_scores(model, images[i:i + EVAL_CHUNK])
             for i in range(0, len(images), EVAL_CHUNK)]
    return np.concatenate(parts, axis=0)


def _eval_error(model, ds: Dataset):
    scores = _chunked_scores(model, ds.images)
    pred = scores.argmax(axis=1)
    wrong = int(np.sum(pred != ds.labels))
    confusion = np.zeros((model.d2, model.d2), dtype=np.int64)
    np.add.at(confusion, (ds.labels, pred), 1)
    return wrong / len(ds), wrong, confusion


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    sections: dict = {}
    if args.preset:
        _merge(sections, get_preset(args.preset))
    if args.config:
        _merge(sections, _read_config_file(args.config))
    _apply_set_overrides(sections, args.set)

    flag_map = [
        ("dataset", "format", args.format),
        ("dataset", "data", " ".join(args.data) if args.data else None),
        ("dataset", "labels", args.labels),
        ("dataset", "limit", args.limit),
        ("dataset", "crop", args.crop),
        ("dataset", "val_fraction", args.val_fraction),
        ("dataset", "test_data",
         " ".join(args.test_data) if args.test_data else None),
        ("dataset", "test_labels", args.test_labels),
        ("run", "seed", args.seed),
        ("run", "threads", args.threads),
        ("run", "out", args.out),
        ("run", "metrics", args.metrics),
        ("run", "summary", args.summary),
        ("run", "cache_dir", args.cache_dir),
    ]
    for sec, key, value in flag_map:
        if value is not None:
            sections.setdefault(sec, {})[key] = str(value)
    _check_known_keys(sections)

    seed = _typed(sections, "run", "seed", 0, int, "an integer")
    threads = _typed(sections, "run", "threads", 0, int, "an integer")
    out_path = Path(_get(sections, "run", "out", "model.ccnn"))
    stem = out_path.parent / out_path.stem
    metrics_path = Path(_get(sections, "run", "metrics",
                             f"{stem}.metrics.csv"))
    summary_path = Path(_get(sections, "run", "summary",
                             f"{stem}.summary.json"))
    cache_dir = _get(sections, "run", "cache_dir")

    fmt = _get(sections, "dataset", "format")
    if fmt is None:
        raise ConfigError("dataset format not set (use --format)")
    data_paths = (_get(sections, "dataset", "data") or "").split()
    labels_path = _get(sections, "dataset", "labels")
    limit = _typed(sections, "dataset", "limit", 0, int, "an integer")
    crop = _parse_crop(_get(sections, "dataset", "crop", "none"))
    val_fraction = _typed(sections, "dataset", "val_fraction", 0.0, float,
                          "a number")
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(
            f"val_fraction must be in [0, 1), got {val_fraction}"
        )

    layer_secs = _layer_sections(sections)
    specs = [_build_layer_spec(sections, sec, seed) for sec in layer_secs]
    opt = _build_opt_config(sections, specs[0].R, seed)

    ds = _load_dataset(fmt, data_paths, labels_path)
    ds = _apply_limit(ds, limit, seed)
    ds = _apply_crop(ds, crop, seed)
    validate_stack(ds.shape, specs)

    val_ds = None
    if val_fraction > 0.0:
        ds, val_ds = split(ds, (1.0 - val_fraction, val_fraction), seed)
        if len(ds) == 0 or len(val_ds) == 0:
            raise ConfigError(
                f"val_fraction {val_fraction} leaves an empty split for "
                f"{len(ds) + len(val_ds)} samples"
            )

    with contextlib.ExitStack() as stack:
        if threads > 0:
            from threadpoolctl import threadpool_limits
            stack.enter_context(threadpool_limits(limits=threads))
        model = train_multi_layer(ds, specs, opt, cache_dir=cache_dir)

        crop_text = _get(sections, "dataset", "crop", "none")
        model.meta["config"] = {sec: dict(pairs)
                                for sec, pairs in sorted(sections.items())}
        model.meta["dataset"] = {"format": fmt, "crop": crop_text,
                                 "seed": seed}
        save_model(model, out_path)
        _write_metrics(metrics_path, model.meta["records"])

        last = model.meta["records"][-1][-1]
        summary = {
            "format_version": SUMMARY_SCHEMA_VERSION,
            "config": model.meta["config"],
            "n_train": len(ds),
            "d2": model.d2,
            "layers": describe(model)["layers"],
            "objective": last["objective"],
            "train_error": last["train_error"],
            "nuclear_norm": last["nuclear_norm"],
            "effective_rank": last["effective_rank"],
            "wall_ms_total": sum(rec["wall_ms"]
                                 for recs in model.meta["records"]
                                 for rec in recs),
            "model": str(out_path),
        }
        if val_ds is not None:
            val_error, val_wrong, _ = _eval_error(model, val_ds)
            summary["n_val"] = len(val_ds)
            summary["val_error"] = val_error
            print(f"validation error {val_error:.4f} "
                  f"({val_wrong} / {len(val_ds)})")
        if _get(sections, "dataset", "test_data"):
            test_ds = _load_dataset(
                fmt, (_get(sections, "dataset", "test_data") or "").split(),
                _get(sections, "dataset", "test_labels"))
            test_ds = _apply_crop(test_ds, crop, seed)
            test_error, test_wrong, _ = _eval_error(model, test_ds)
            summary["n_test"] = len(test_ds)
            summary["test_error"] = test_error
            print(f"test error {test_error:.4f} "
                  f"({test_wrong} / {len(test_ds)})")
    _write_json(summary_path, summary)

    print(f"trained {len(model.layers)} layer(s) on {len(ds)} samples; "
          f"final objective {last['objective']:.6g}, "
          f"train error {last['train_error']:.4f}")
    print(f"wrote {out_path}")
    print(f"wrote {metrics_path}")
    print(f"wrote {summary_path}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    crop_text = args.crop
    if crop_text is None:
        crop_text = model.meta.get("dataset", {}).get("crop", "none")
    seed = args.seed if args.seed is not None else 0
    ds = _load_dataset(args.format, args.data, args.labels)
    ds = _apply_limit(ds, args.limit or 0, seed)
    ds = _apply_crop(ds, _parse_crop(crop_text), seed)
    if ds.labels.size and ds.labels.max() >= model.d2:
        raise DataError(
            f"label {int(ds.labels.max())} out of range for a "
            f"{model.d2}-class model"
        )
    error, wrong, confusion = _eval_error(model, ds)
    print(f"error = {error:.4f} ({wrong} / {len(ds)} misclassified)")
    print("confusion matrix (rows: true, cols: predicted):")
    width = max(5, len(str(int(confusion.max()))) + 1)
    header = " " * 6 + "".join(f"{c:>{width}}" for c in range(model.d2))
    print(header)
    for c in range(model.d2):
        row = "".join(f"{int(v):>{width}}" for v in confusion[c])
        print(f"{c:>5} {row}")
    payload = {
        "format_version": SUMMARY_SCHEMA_VERSION,
        "model": str(args.model),
        "n": len(ds),
        "n_misclassified": wrong,
        "error": error,
        "confusion": confusion,
        "crop": crop_text,
    }
    json_path = args.json or f"{Path(args.model).parent / Path(args.model).stem}.eval.json"
    _write_json(json_path, payload)
    print(f"wrote {json_path}")
    return 0


def cmd_inspect(args) -> int:
    model = load_model(args.model)
    info = describe(model)
    if args.json:
        print(json.dumps(_to_jsonable(info), indent=2, sort_keys=True))
        return 0
    print(f"model: {args.model}")
    print(f"layers: {len(info['layers'])}, classes: {info['d2']}")
    for lay in info["layers"]:
        c, h, w = lay["input_shape"]
        kern = lay["kernel"]
        print(
            f"  layer {lay['layer']}: input {c}x{h}x{w}, "
            f"patch {lay['patch_side']} stride {lay['stride']} "
            f"pad {lay['pad']}, grid {lay['grid'][0]}x{lay['grid'][1]} -> "
            f"pooled {lay['pooled_grid'][0]}x{lay['pooled_grid'][1]}, "
            f"kernel {kern}, features {lay['features']} (m={lay['m']}), "
            f"r={lay['r']}"
        )
    head = info["head"]
    print(f"head: A {head['shape'][0]}x{head['shape'][1]}")
    print(f"  nuclear norm    {head['nuclear_norm']:.6g}")
    print(f"  spectral norm   {head['spectral_norm']:.6g}")
    print(f"  frobenius norm  {head['frobenius_norm']:.6g}")
    print(f"  effective rank  {head['effective_rank']:.6g}")
    vals = " ".join(f"{v:.6g}" for v in head["singular_values"])
    print(f"  singular values (top {len(head['singular_values'])}): {vals}")
    return 0


def cmd_features(args) -> int:
    model = load_model(args.model)
    crop_text = args.crop
    if crop_text is None:
        crop_text = model.meta.get("dataset", {}).get("crop", "none")
    seed = args.seed if args.seed is not None else 0
    ds = _load_dataset(args.format, args.data, args.labels)
    ds = _apply_limit(ds, args.limit or 0, seed)
    ds = _apply_crop(ds, _parse_crop(crop_text), seed)
    depth = args.layer if args.layer is not None else len(model.layers)
    if not 1 <= depth <= len(model.layers):
        raise ConfigError(
            f"--layer must be in [1, {len(model.layers)}], got {depth}"
        )
    X = ds.images
    for layer in model.layers[:depth]:
        X = forward_batch(layer, X)
    save_features(args.out, X)
    n, c, gh, gw = X.shape
    print(f"wrote {args.out}: {n} samples, {c} channels, grid {gh}x{gw}")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def _build_parser() -> _Parser:
    p = _Parser(prog="ccnn",
                description="Convexified convolutional networks")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true",
                   help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add_dataset_flags(sp, for_train=False):
        sp.add_argument("--data", nargs="+", metavar="PATH",
                        help="dataset file(s)")
        sp.add_argument("--labels", metavar="PATH",
                        help="label file (idx and ccnf formats)")
        sp.add_argument("--format", choices=_FORMATS,
                        help="dataset format")
        sp.add_argument("--limit", type=int,
                        help="use a seeded random subset of this size")
        sp.add_argument("--crop", metavar="MODE",
                        help="none, center:HxW, or once:HxW")
        sp.add_argument("--seed", type=int,
                        help="seed for subset/crop/split draws"
                        + (" and training" if for_train else ""))

    t = sub.add_parser("train", help="train a model from a config/preset")
    t.add_argument("--config", metavar="PATH", help="INI config file")
    t.add_argument("--preset", choices=list_presets(),
                   help="named hyperparameter preset")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a single config value (repeatable)")
    add_dataset_flags(t, for_train=True)
    t.add_argument("--val-fraction", type=float, dest="val_fraction",
                   help="hold out this fraction for validation")
    t.add_argument("--test-data", nargs="+", metavar="PATH",
                   dest="test_data", help="evaluate on this set after "
                   "training (same format)")
    t.add_argument("--test-labels", metavar="PATH", dest="test_labels")
    t.add_argument("--out", metavar="PATH", help="model output path")
    t.add_argument("--metrics", metavar="PATH", help="metrics CSV path")
    t.add_argument("--summary", metavar="PATH", help="summary JSON path")
    t.add_argument("--cache-dir", metavar="DIR", dest="cache_dir",
                   help="directory for inter-stage feature files")
    t.add_argument("--threads", type=int,
                   help="cap BLAS/OpenMP worker threads")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a model on a dataset")
    e.add_argument("model", help="model file")
    add_dataset_flags(e)
    e.add_argument("--json", metavar="PATH", help="evaluation JSON path")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="print model geometry and spectrum")
    i.add_argument("model", help="model file")
    i.add_argument("--json", action="store_true",
                   help="print the full summary as JSON")
    i.set_defaults(func=cmd_inspect)

    f = sub.add_parser("features", help="export layer outputs as a "
                       "feature file")
    f.add_argument("model", help="model file")
    add_dataset_flags(f)
    f.add_argument("--layer", type=int,
                   help="export outputs of this layer (default: last)")
    f.add_argument("--out", required=True, metavar="PATH",
                   help="feature file output path")
    f.set_defaults(func=cmd_features)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
