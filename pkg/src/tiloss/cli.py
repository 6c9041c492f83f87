"""Command-line entry point.

Subcommands: ``synth``, ``affinity``, ``margins``, ``train`` and ``gradcheck``.
Settings come from built-in defaults, overridden by a JSON file given with
``--config`` and then by command-line flags. Exit status is 0 on success,
1 on validation or numerical failure and 2 on I/O or configuration errors.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .affinity import (compute_affinity, prior_margin_table, read_margin_cache,
                       write_margin_cache)
from .features import (ALL_FEATURES, FeatureConfig, FeatureId, GaborBank, build_tensor,
                       write_matrix_csv, write_tensor_csv)
from .glyphs import (GlyphDecodeError, load_template_set, synth_glyph_samples,
                     synth_template_set, write_template_set)
from .gradcheck import OPS, gradient_check
from .idx import IdxFormatError, write_idx
from .loss import LossConfig
from .trainer import TrainConfig, load_idx_dataset, train

log = logging.getLogger("tiloss")

EXIT_OK, EXIT_FAILURE, EXIT_IO = 0, 1, 2
TABLE_ALPHAS = (0.0, 0.01, 0.05, 0.1, 0.2)
IDX_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, error):
        super().__init__(f"{stage}: {error}")
        self.stage = stage
        self.error = error


def _train_defaults():
    d = TrainConfig().to_dict()
    for key in ("loss", "seed"):
        d.pop(key)
    d.update({"data": None, "train_images": None, "train_labels": None, "test_images": None,
              "test_labels": None, "margins": None, "sweep_alpha": None, "embeddings": True})
    return d


def _feature_defaults():
    d = asdict(FeatureConfig())
    d["gabor"]["wavelengths"] = list(d["gabor"]["wavelengths"])
    return d


DEFAULTS = {
    "seed": 0,
    "out": "out",
    "synth": {"templates": 8, "fonts": 3, "side": 96, "train_samples": 0,
              "test_samples": 0, "sample_side": 28, "noise": 20.0},
    "features": _feature_defaults(),
    "affinity": {"manifest": None, "side": 96, "features": [k.value for k in ALL_FEATURES],
                 "exclude_diagonal_in_softmax": False},
    "loss": asdict(LossConfig()),
    "train": _train_defaults(),
    "gradcheck": {"ops": list(OPS), "modes": ["detached"], "batch_size": 8, "sizes": [3, 10, 50],
                  "trials": 100, "threshold": 1e-5, "h": 1e-5, "corrupt": 0.0},
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def merge_config(base, override, where="config"):
    """Recursively overlay ``override`` on ``base``; unknown keys are errors."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            out[key] = merge_config(base[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def load_config(path):
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return merge_config(DEFAULTS, data)


def _set(cfg, dotted, value):
    if value is None:
        return
    node = cfg
    *head, last = dotted.split(".")
    for key in head:
        node = node[key]
    node[last] = value


def _dataclass_from(cls, values, where):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key {where}.{sorted(unknown)[0]}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def feature_config(cfg):
    d = dict(cfg["features"])
    gabor = dict(d.pop("gabor"))
    gabor["wavelengths"] = tuple(float(w) for w in gabor["wavelengths"])
    d["gabor"] = _dataclass_from(GaborBank, gabor, "features.gabor")
    return _dataclass_from(FeatureConfig, d, "features")


def loss_config(cfg):
    return _dataclass_from(LossConfig, cfg["loss"], "loss")


def train_config(cfg, **overrides):
    d = {k: v for k, v in cfg["train"].items() if k in {f.name for f in fields(TrainConfig)}}
    d["hidden"] = tuple(d["hidden"])
    d["loss"] = loss_config(cfg)
    d["seed"] = int(cfg["seed"])
    d.update(overrides)
    return _dataclass_from(TrainConfig, d, "train")


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def _out_dir(cfg):
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


@contextmanager
def stage(name):
    try:
        yield
    except (ConfigError, StageError):
        raise
    except Exception as exc:  # tag anything else with the pipeline stage
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg):
    s = cfg["synth"]
    out = _out_dir(cfg)
    seed = int(cfg["seed"])
    with stage("synth"):
        tset = synth_template_set(seed, int(s["templates"]), int(s["fonts"]), int(s["side"]))
        write_template_set(tset, out / "templates")
        written = {"templates": len(tset.template_ids), "fonts": len(tset.fonts)}
        n_train, n_test = int(s["train_samples"]), int(s["test_samples"])
        if n_train or n_test:
            # one class per template, bright ink on black as in MNIST
            imgs, labels = synth_glyph_samples(seed, int(s["templates"]), n_train + n_test,
                                               int(s["sample_side"]), float(s["noise"]),
                                               bright_ink=True)
            data = out / "data"
            data.mkdir(exist_ok=True)
            parts = {"train": slice(0, n_train), "test": slice(n_train, None)}
            for part, sl in parts.items():
                if sl.stop == 0 or (part == "test" and not n_test):
                    continue
                write_idx(data / IDX_NAMES[f"{part}_images"], imgs[sl])
                write_idx(data / IDX_NAMES[f"{part}_labels"], labels[sl])
            written.update(train_samples=n_train, test_samples=n_test)
    _write_json(out / "synth.json", written)
    print(f"wrote {written['templates']} templates x {written['fonts']} fonts to {out / 'templates'}")
    return EXIT_OK


def cmd_affinity(cfg):
    a = cfg["affinity"]
    out = _out_dir(cfg)
    fcfg = feature_config(cfg)
    try:
        features = [FeatureId(k) for k in a["features"]]
    except ValueError as exc:
        raise ConfigError(f"affinity.features: {exc}") from None
    with stage("ingest"):
        if a["manifest"] is None:
            s = cfg["synth"]
            tset = synth_template_set(int(cfg["seed"]), int(s["templates"]), int(s["fonts"]),
                                      int(a["side"]))
        else:
            manifest = Path(a["manifest"])
            if not manifest.is_file():
                raise FileNotFoundError(f"manifest not found: {manifest}")
            tset = load_template_set(manifest.parent, manifest, int(a["side"]))
    with stage("features"):
        tensor = build_tensor(tset, fcfg, features)
        tensor.validate()
        write_tensor_csv(tensor, out)
    with stage("affinity"):
        aff = compute_affinity(tensor)
        write_matrix_csv(out / "affinity.csv", aff.template_ids, aff.matrix)
    with stage("margins"):
        table = prior_margin_table(aff, bool(a["exclude_diagonal_in_softmax"]))
        write_matrix_csv(out / "margins.csv", table.template_ids, table.matrix)
        write_margin_cache(out / "margins.bin", table)
    print(f"{len(features)} feature matrices, affinity and margins for {tset.n} templates in {out}")
    return EXIT_OK


def cmd_margins(cfg, cache, csv_path=None):
    path = Path(cache)
    if not path.is_file():
        raise ConfigError(f"margin cache not found: {path}")
    with stage("margins"):
        table = read_margin_cache(path)
    width = max(10, max(len(t) for t in table.template_ids) + 2)
    print(" " * width + "".join(f"{t:>{width}}" for t in table.template_ids))
    for tid, row in zip(table.template_ids, table.matrix):
        print(f"{tid:>{width}}" + "".join(f"{v:>{width}.6f}" for v in row))
    if csv_path is not None:
        write_matrix_csv(csv_path, table.template_ids, table.matrix)
    return EXIT_OK


def _resolve_data(cfg):
    t = cfg["train"]
    paths = {}
    for key, name in IDX_NAMES.items():
        if t[key] is not None:
            paths[key] = Path(t[key])
        elif t["data"] is not None:
            base = Path(t["data"]) / name
            gz = base.with_name(name + ".gz")
            paths[key] = gz if gz.is_file() and not base.is_file() else base
        else:
            paths[key] = None
    if paths["train_images"] is None or paths["train_labels"] is None:
        raise ConfigError("no training data: set train.data or --data")
    for key in ("train_images", "train_labels"):
        if not paths[key].is_file():
            raise ConfigError(f"dataset file not found: {paths[key]}")
    explicit_test = t["test_images"] is not None or t["test_labels"] is not None
    for key in ("test_images", "test_labels"):
        if paths[key] is not None and not paths[key].is_file():
            if explicit_test:
                raise ConfigError(f"dataset file not found: {paths[key]}")
            paths["test_images"] = paths["test_labels"] = None
    return paths


def _summary(alpha, report):
    return {"alpha_max": alpha, "train_accuracy": report.train_accuracy,
            "test_accuracy": report.test_accuracy,
            "min_inter_class_angle": report.min_inter_class_angle,
            "mean_intra_class_std": report.mean_intra_class_std}


def cmd_train(cfg):
    t = cfg["train"]
    out = _out_dir(cfg)
    paths = _resolve_data(cfg)
    margins = None
    if t["margins"] is not None:
        if not Path(t["margins"]).is_file():
            raise ConfigError(f"margin cache not found: {t['margins']}")
        with stage("margins"):
            margins = read_margin_cache(t["margins"])
    with stage("data"):
        train_set = load_idx_dataset(paths["train_images"], paths["train_labels"])
        test_set = None
        if paths["test_images"] is not None:
            test_set = load_idx_dataset(paths["test_images"], paths["test_labels"],
                                        train_set.n_classes)
    base = train_config(cfg)

    runs = []
    if t["sweep_alpha"] is None:
        runs.append((None, base, "report.json", "embeddings.csv"))
    else:
        for alpha in t["sweep_alpha"]:
            loss = LossConfig(**{**asdict(base.loss), "alpha_max": float(alpha)})
            run_cfg = train_config(cfg, loss=loss, loss_mode="template_instance")
            tag = format(float(alpha), "g")
            runs.append((float(alpha), run_cfg, f"report_alpha_{tag}.json", f"embeddings_alpha_{tag}.csv"))

    summary = []
    for alpha, run_cfg, report_name, emb_name in runs:
        emb = out / emb_name if t["embeddings"] and run_cfg.feature_dim == 2 else None
        with stage("train"):
            started = time.perf_counter()
            _, report = train(train_set, run_cfg, margins, test_set, emb)
            log.info("run finished in %.1f s", time.perf_counter() - started)
        # store the embedding file name only, so reports do not depend on --out
        report.embedding_path = emb_name if emb is not None else None
        (out / report_name).write_text(report.to_json() + "\n", encoding="utf-8")
        summary.append(_summary(run_cfg.loss.alpha_max if alpha is not None else None, report))
        acc = "n/a" if report.test_accuracy is None else f"{report.test_accuracy:.4f}"
        label = run_cfg.loss_mode if alpha is None else f"alpha_max={alpha:g}"
        print(f"{label}: train acc {report.train_accuracy:.4f}, test acc {acc}, "
              f"min class angle {np.degrees(report.min_inter_class_angle):.2f} deg")
    if t["sweep_alpha"] is not None:
        _write_json(out / "sweep.json", summary)
    return EXIT_OK


def cmd_gradcheck(cfg):
    g = cfg["gradcheck"]
    out = _out_dir(cfg)
    lcfg = loss_config(cfg)
    unknown = set(g["ops"]) - set(OPS)
    if unknown:
        raise ConfigError(f"gradcheck.ops: unknown op {sorted(unknown)[0]!r}")
    reports = []
    with stage("gradcheck"):
        for n in g["sizes"]:
            for op in g["ops"]:
                modes = g["modes"] if op == "template_instance" else ["detached"]
                for mode in modes:
                    r = gradient_check(op, mode, int(g["batch_size"]), int(n), int(cfg["seed"]),
                                       int(g["trials"]), lcfg, float(g["h"]), float(g["corrupt"]))
                    r["passed"] = r["max_rel_error"] < float(g["threshold"])
                    reports.append(r)
                    print(f"{op:18s} {mode:15s} n={n:<3d} max_rel_error={r['max_rel_error']:.3e} "
                          f"{'ok' if r['passed'] else 'FAIL'}")
    _write_json(out / "gradcheck.json", reports)
    return EXIT_OK if all(r["passed"] for r in reports) else EXIT_FAILURE


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON configuration file")
    parser.add_argument("--seed", type=int, default=default, help="run seed (non-negative)")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("--dump-defaults", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="print the default configuration as JSON and exit")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser():
    parser = argparse.ArgumentParser(prog="tiloss", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="write a synthetic template set and optional IDX dataset")
    _global_flags(p, suppress=True)
    p.add_argument("--templates", type=int)
    p.add_argument("--fonts", type=int)
    p.add_argument("--side", type=int)
    p.add_argument("--train-samples", type=int)
    p.add_argument("--test-samples", type=int)

    p = sub.add_parser("affinity", help="feature matrices, affinity and prior margins")
    _global_flags(p, suppress=True)
    p.add_argument("--manifest", help="template manifest (default: synthetic set from --seed)")
    p.add_argument("--feature", action="append", choices=[k.value for k in ALL_FEATURES],
                   help="restrict to this feature (repeatable)")
    p.add_argument("--exclude-diagonal", action="store_true", default=None,
                   help="leave the self term out of the margin softmax")

    p = sub.add_parser("margins", help="pretty-print a binary margin cache")
    _global_flags(p, suppress=True)
    p.add_argument("cache", help="margins.bin written by 'affinity'")
    p.add_argument("--csv", help="also write the table as CSV")

    p = sub.add_parser("train", help="train the toy network")
    _global_flags(p, suppress=True)
    p.add_argument("--data", help="directory with MNIST-named IDX files")
    p.add_argument("--loss", choices=["softmax", "am", "template_instance"])
    p.add_argument("--alpha-max", type=float)
    p.add_argument("--alpha-mode", choices=["schedule", "fixed"])
    p.add_argument("--max-iter", type=int)
    p.add_argument("--margins", help="margin cache for the prior margins")
    p.add_argument("--sweep-alpha", nargs="*", type=float,
                   help="train once per alpha_max (default sweep: 0 0.01 0.05 0.1 0.2)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    _global_flags(p, suppress=True)
    p.add_argument("--mode", choices=["detached", "differentiated", "both"])
    p.add_argument("--trials", type=int)
    p.add_argument("--corrupt", action="store_const", const=1e-3, default=None,
                   help="self-test: perturb the analytic gradient by 1e-3")
    return parser


def _apply_flags(cfg, args):
    _set(cfg, "seed", getattr(args, "seed", None))
    _set(cfg, "out", getattr(args, "out", None))
    cmd = args.command
    if cmd == "synth":
        for key in ("templates", "fonts", "side", "train_samples", "test_samples"):
            _set(cfg, f"synth.{key}", getattr(args, key))
    elif cmd == "affinity":
        _set(cfg, "affinity.manifest", args.manifest)
        _set(cfg, "affinity.features", args.feature)
        _set(cfg, "affinity.exclude_diagonal_in_softmax", args.exclude_diagonal)
    elif cmd == "train":
        _set(cfg, "train.data", args.data)
        _set(cfg, "train.loss_mode", args.loss)
        _set(cfg, "loss.alpha_max", args.alpha_max)
        _set(cfg, "train.alpha_mode", args.alpha_mode)
        _set(cfg, "train.max_iter", args.max_iter)
        _set(cfg, "train.margins", args.margins)
        if args.sweep_alpha is not None:
            _set(cfg, "train.sweep_alpha", args.sweep_alpha or list(TABLE_ALPHAS))
    elif cmd == "gradcheck":
        if args.mode is not None:
            cfg["gradcheck"]["modes"] = ["detached", "differentiated"] if args.mode == "both" else [args.mode]
        _set(cfg, "gradcheck.trials", args.trials)
        _set(cfg, "gradcheck.corrupt", args.corrupt)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.dump_defaults:
            print(json.dumps(DEFAULTS, indent=2, sort_keys=True))
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("tiloss: error: a subcommand is required", file=sys.stderr)
            return EXIT_IO
        cfg = _apply_flags(load_config(args.config), args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "affinity":
            return cmd_affinity(cfg)
        if args.command == "margins":
            return cmd_margins(cfg, args.cache, args.csv)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_gradcheck(cfg)
    except ConfigError as exc:
        print(f"tiloss: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except StageError as exc:
        io = isinstance(exc.error, (OSError, GlyphDecodeError, IdxFormatError))
        print(f"tiloss: error in stage '{exc.stage}': {exc.error}", file=sys.stderr)
        return EXIT_IO if io else EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
