"""Command-line entry point.

Subcommands: gen-data, train, eval, export-attention, gradcheck, ablate.
Exit codes: 0 success, 1 verification failure, 2 config error, 3 I/O error,
4 corrupt artifact.  All randomness comes from config seeds; the
ORDISTILL_THREADS env var caps worker threads (default 1, and the current
implementation is single-threaded regardless).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import data as D
from . import gradcheck as G
from .attention import normalize, spatial_attention, student_map, teacher_map, export_heatmaps
from .backbone import load_checkpoint
from .errors import ArtifactError, ConfigError, DataFormatError, NumericError, OrdistillError
from .evaluate import evaluate_models
from .tensor import Tensor
from .trainer import TrainRunConfig, train_sequence

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_ARTIFACT = 4


def _threads_from_env() -> int:
    raw = os.environ.get("ORDISTILL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ORDISTILL_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"ORDISTILL_THREADS must be >= 1, got {n}")
    return n


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _collect_config(args_config: str | None, extras: list[str], allowed: set[str]) -> dict:
    """Merge a JSON config file with --key=value overrides; reject unknowns."""
    cfg: dict = {}
    if args_config:
        try:
            with open(args_config) as fh:
                cfg = json.load(fh)
        except OSError as e:
            raise DataFormatError(f"cannot read config {args_config}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {args_config} is not valid JSON: {e}") from e
    for extra in extras:
        if not extra.startswith("--") or "=" not in extra:
            raise ConfigError(f"expected --key=value, got {extra!r}")
        key, _, raw = extra[2:].partition("=")
        key = key.replace("-", "_")
        cfg[key] = _parse_value(raw)
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _refuse_existing(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise OSError(f"{path} already exists; pass --force to overwrite")


def _dataclass_keys(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def cmd_gen_data(args, extras) -> int:
    keys = _dataclass_keys(D.DatasetConfig) | {"out_dir"}
    cfg = _collect_config(args.config, extras, keys)
    out_dir = cfg.pop("out_dir", None) or args.out_dir
    if not out_dir:
        raise ConfigError("gen-data needs --out-dir")
    _refuse_existing(os.path.join(out_dir, D.MANIFEST_NAME), args.force)
    manifest = D.generate(D.DatasetConfig(**cfg), out_dir)
    n = len(manifest["images"])
    print(f"wrote {n} images to {out_dir}")
    return EXIT_OK


def cmd_train(args, extras) -> int:
    cfg_dict = _collect_config(args.config, extras, _dataclass_keys(TrainRunConfig))
    cfg = TrainRunConfig.from_dict(cfg_dict)
    if not cfg.data_dir or not os.path.isdir(cfg.data_dir):
        raise OSError(f"dataset directory not found: {cfg.data_dir!r}")
    if not cfg.out_dir:
        raise ConfigError("train needs out_dir")
    _refuse_existing(os.path.join(cfg.out_dir, "summary.json"), args.force)
    summary = train_sequence(cfg)
    for m in summary["models"]:
        print(f"model {m['model_index']}: train {m['train_accuracy']:.4f} "
              f"test {m['test_accuracy']:.4f}")
    print(f"ensemble test accuracy: {summary['ensemble_test_accuracy']:.4f}")
    return EXIT_OK


def _load_run_models(run_dir: str, subset: int | None):
    names = sorted(f for f in os.listdir(run_dir)
                   if f.startswith("model_") and f.endswith(".ckpt"))
    if not names:
        raise OSError(f"no checkpoints in {run_dir}")
    if subset is not None:
        if not 1 <= subset <= len(names):
            raise ConfigError(f"--subset must be in [1, {len(names)}]")
        names = names[:subset]
    models = []
    for name in names:
        model, _ = load_checkpoint(os.path.join(run_dir, name))
        models.append(model)
    return models, names


def cmd_eval(args, extras) -> int:
    if extras:
        raise ConfigError(f"unexpected arguments: {extras}")
    models, names = _load_run_models(args.run_dir, args.subset)
    test = D.load(args.data_dir, args.split)
    images = np.stack([im.pixels for im in test])
    labels = np.array([im.label for im in test], dtype=np.int64)
    result = evaluate_models(models, images, labels, batch_size=args.batch_size,
                             average=args.average, with_overlap=not args.no_overlap,
                             config={"run_dir": args.run_dir, "checkpoints": names,
                                     "split": args.split, "average": args.average})
    for name, acc in zip(names, result.per_model_accuracy):
        print(f"{name}: top-1 {acc:.4f}")
    print(f"ensemble top-1: {result.ensemble_accuracy:.4f}")
    out = args.out or os.path.join(args.run_dir, "eval.json")
    _refuse_existing(out, args.force)
    with open(out, "w") as fh:
        fh.write(result.to_json())
    if result.overlap_matrix:
        with open(os.path.splitext(out)[0] + "_overlap.csv", "w") as fh:
            fh.write(result.overlap_csv())
    return EXIT_OK


def cmd_export_attention(args, extras) -> int:
    if extras:
        raise ConfigError(f"unexpected arguments: {extras}")
    model, meta = load_checkpoint(args.checkpoint)
    images = D.load(args.data_dir, args.split)
    by_id = {im.id: im for im in images}
    wanted = args.ids.split(",") if args.ids else [im.id for im in images]
    missing = [i for i in wanted if i not in by_id]
    if missing:
        raise ConfigError(f"unknown image ids: {missing}")
    os.makedirs(args.out_dir, exist_ok=True)
    batch = np.stack([by_id[i].pixels for i in wanted])
    feats, _ = model.forward(Tensor(batch))
    raw = spatial_attention(feats, source_model=meta.get("model_index", 0))
    norm = normalize(raw)
    sample_nums = [sorted(by_id).index(i) for i in wanted]
    written = []
    for m in (raw, norm, teacher_map(norm), student_map(norm)):
        written += export_heatmaps(m, args.out_dir, args.split, sample_nums)
    print(f"wrote {len(written)} heatmaps to {args.out_dir}")
    return EXIT_OK


def cmd_gradcheck(args, extras) -> int:
    if extras:
        raise ConfigError(f"unexpected arguments: {extras}")
    if args.op:
        if args.op not in G.CHECKS:
            raise ConfigError(f"unknown op {args.op!r}; choices: {sorted(G.CHECKS)}")
        ops = [args.op]
    else:
        ops = list(G.CHECKS)
    failed = False
    for name in ops:
        err = G.check_primitive(name, trials=args.trials, seed=args.seed)
        if args.inject_bug and name == ops[0]:
            err += 1.0  # fixture hook: prove failures are detected
        ok = err < G.REL_TOL
        failed |= not ok
        print(f"{name}: max rel err {err:.3e} [{'ok' if ok else 'FAIL'}]")
    if not args.op:
        err = G.check_end_to_end(args.seed)
        ok = err < 1e-3
        failed |= not ok
        print(f"end_to_end: max rel err {err:.3e} [{'ok' if ok else 'FAIL'}]")
    return EXIT_VERIFY if failed else EXIT_OK


def _parse_range(spec: str) -> list[int]:
    lo, _, hi = spec.partition("..")
    try:
        lo_i, hi_i = int(lo), int(hi) if hi else int(lo)
    except ValueError:
        raise ConfigError(f"bad range {spec!r}; expected like 1..5")
    if lo_i < 1 or hi_i < lo_i:
        raise ConfigError(f"bad range {spec!r}")
    return list(range(lo_i, hi_i + 1))


def cmd_ablate(args, extras) -> int:
    base = _collect_config(args.config, extras, _dataclass_keys(TrainRunConfig))
    if args.out is None:
        raise ConfigError("ablate needs --out")
    _refuse_existing(args.out, args.force)
    rows = []
    if args.alphas is not None:
        alphas = [float(a) for a in args.alphas.split(",")]
        for alpha in alphas:
            cfg = TrainRunConfig.from_dict({**base, "alpha": alpha,
                                            "out_dir": os.path.join(args.work_dir, f"alpha_{alpha:g}")})
            summary = train_sequence(cfg)
            rows.append({"alpha": alpha, "n_models": cfg.n_models,
                         "ensemble_accuracy": summary["ensemble_test_accuracy"]})
        fieldnames = ["alpha", "n_models", "ensemble_accuracy"]
    elif args.n_range is not None:
        for n in _parse_range(args.n_range):
            for alpha, tag in ((base.get("alpha", 0.5), "or"), (0.0, "baseline")):
                cfg = TrainRunConfig.from_dict({**base, "alpha": alpha, "n_models": n,
                                                "seeds": base.get("seeds", [])[:n] or None,
                                                "out_dir": os.path.join(args.work_dir, f"n{n}_{tag}")})
                summary = train_sequence(cfg)
                single = summary["models"][0]["test_accuracy"]
                rows.append({"n_models": n, "alpha": alpha, "variant": tag,
                             "single_accuracy": single,
                             "ensemble_accuracy": summary["ensemble_test_accuracy"]})
        fieldnames = ["n_models", "alpha", "variant", "single_accuracy", "ensemble_accuracy"]
    else:
        raise ConfigError("ablate needs --alphas or --n-range")
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ordistill", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    gd = sub.add_parser("gen-data", help="generate the synthetic glyph dataset; "
                        "config keys: " + ", ".join(sorted(_dataclass_keys(D.DatasetConfig))))
    gd.add_argument("--config", help="JSON config file")
    gd.add_argument("--out-dir", help="dataset output directory")
    gd.add_argument("--force", action="store_true", help="overwrite existing output")
    gd.set_defaults(fn=cmd_gen_data)

    tr = sub.add_parser("train", help="run the sequential training protocol; "
                        "config keys: " + ", ".join(sorted(_dataclass_keys(TrainRunConfig))))
    tr.add_argument("--config", help="JSON config file (TrainRunConfig)")
    tr.add_argument("--force", action="store_true", help="overwrite existing output")
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="per-model + ensemble accuracy and attention overlap")
    ev.add_argument("--run-dir", required=True, help="directory with model_*.ckpt")
    ev.add_argument("--data-dir", required=True)
    ev.add_argument("--split", default="test", choices=["train", "test"])
    ev.add_argument("--subset", type=int, help="evaluate only the first N models")
    ev.add_argument("--average", default="prob", choices=["prob", "logit"],
                    help="ensemble averaging space")
    ev.add_argument("--batch-size", type=int, default=64)
    ev.add_argument("--no-overlap", action="store_true", help="skip the overlap matrix")
    ev.add_argument("--out", help="output JSON path (default: run_dir/eval.json)")
    ev.add_argument("--force", action="store_true")
    ev.set_defaults(fn=cmd_eval)

    ex = sub.add_parser("export-attention", help="write per-stage PGM heatmaps")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--data-dir", required=True)
    ex.add_argument("--split", default="test", choices=["train", "test"])
    ex.add_argument("--ids", help="comma-separated image ids (default: all)")
    ex.add_argument("--out-dir", required=True)
    ex.set_defaults(fn=cmd_export_attention)

    gc = sub.add_parser("gradcheck", help="finite-difference verification suite (float64)")
    gc.add_argument("--op", help="check a single primitive")
    gc.add_argument("--trials", type=int, default=5)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    gc.set_defaults(fn=cmd_gradcheck)

    ab = sub.add_parser("ablate", help="sweep alpha or the number of models; emits CSV")
    ab.add_argument("--config", help="JSON base config (TrainRunConfig)")
    ab.add_argument("--alphas", help="comma-separated alpha values")
    ab.add_argument("--n-range", help="model-count range like 1..5")
    ab.add_argument("--work-dir", default="ablate_runs", help="where run outputs go")
    ab.add_argument("--out", help="output CSV path")
    ab.add_argument("--force", action="store_true")
    ab.set_defaults(fn=cmd_ablate)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        _threads_from_env()
        return args.fn(args, extras)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as e:
        print(f"corrupt artifact: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (OSError, DataFormatError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except OrdistillError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERIFY


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
