"""``nowcast`` command line: synth, preprocess, krige, train, evaluate, ablate, report, models.

Exit codes: 0 ok, 2 config error, 3 hash mismatch, 4 missing input.

A work directory (``--out``) collects every stage::

    preprocess/   manifest.json, train/validation/test.npz
    krige/        index.json, <sample_id>.npz
    runs/<model>/ best.pt, last.pt, history.json, metrics.*, ablation.*
    reports/      performance.csv, ablation.csv, figures/*.png
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from nowcast import config as cfgmod
from nowcast.constants import STATIONS, THRESHOLDS_MMH, VARIABLES
from nowcast.data_pipeline import PipelineError, collect_samples, load_manifest, load_split, preprocess
from nowcast.errors import ConfigError, HashMismatchError, MissingInputError
from nowcast.evaluation import (
    AblationResult,
    MetricReport,
    ablate_variables,
    evaluate_predictions,
    predict,
    to_rate,
)
from nowcast.kriging import build_krige_stacks
from nowcast.models import MODEL_NAMES, build_model, count_parameters
from nowcast.storage import dump_json, load_arrays, load_json, save_arrays, write_text_atomic
from nowcast.synthetic import generate_synthetic_corpus

logger = logging.getLogger("nowcast")

EXIT_OK, EXIT_CONFIG, EXIT_HASH, EXIT_MISSING = 0, 2, 3, 4


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"{what} not found at {path}; run the upstream stage first")
    return path


def _versions():
    import scipy
    import torch

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "torch": torch.__version__}


def _freeze(out_dir, flat, command, extra=None):
    """Write the resolved config, its hash and library versions next to a stage's outputs."""
    out = Path(out_dir)
    write_text_atomic(out / "config.txt", cfgmod.dump_text(flat))
    h = cfgmod.config_hash(flat)
    write_text_atomic(out / "config.hash", h + "\n")
    dump_json(out / "run.json", {"command": command, "config_hash": h, "versions": _versions(), **(extra or {})})
    return h


def _resolve(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        for key in ("synth.seed", "preprocess.seed", "train.seed"):
            overrides[key] = args.seed
    if getattr(args, "device", None):
        overrides["train.device"] = args.device
    if getattr(args, "deterministic", False):
        overrides["train.deterministic"] = True
    for key, value in (getattr(args, "set", None) or []):
        overrides[key] = value
    if getattr(args, "epochs", None) is not None:
        overrides["train.max_epochs"] = args.epochs
    if getattr(args, "blobs", None) is not None:
        overrides["synth.blobs"] = args.blobs
    if getattr(args, "days_per_year", None) is not None:
        overrides["synth.days_per_year"] = args.days_per_year
    if getattr(args, "hours_per_day", None) is not None:
        overrides["synth.hours_per_day"] = args.hours_per_day
    return cfgmod.resolve(args.config, overrides)


def _stored_hash(arrays):
    return str(np.asarray(arrays["config_hash"]).reshape(-1)[0])


def _krige_hash(preprocess_hash, krige_cfg):
    return hashlib.sha256(f"{preprocess_hash}:{krige_cfg.config_hash()}".encode()).hexdigest()[:16]


# ------------------------------------------------------------------ stages


def cmd_synth(args):
    flat = _resolve(args)
    cfg = cfgmod.section(flat, "synth")
    summary = generate_synthetic_corpus(cfg, args.out)
    _freeze(args.out, flat, "synth")
    samples, counts = collect_samples(args.out, cfgmod.section(flat, "preprocess"))
    if not samples:
        logger.warning("no window of this corpus passes the rain filter; preprocess will have empty splits")
    print(json.dumps({"days": len(summary["days"]), "station_rows": summary["station_rows"], **counts}))
    return EXIT_OK


def cmd_preprocess(args):
    flat = _resolve(args)
    corpus = args.corpus or os.environ.get("NOWCAST_DATA_ROOT")
    if not corpus:
        raise ConfigError("no corpus given: pass --corpus or set NOWCAST_DATA_ROOT")
    _require(Path(corpus) / "radar", "radar corpus")
    _require(Path(corpus) / "stations" / "observations.csv", "station observations")
    out = Path(args.out) / "preprocess"
    manifest = preprocess(corpus, out, cfgmod.section(flat, "preprocess"))
    _freeze(out, flat, "preprocess", {"preprocess_hash": manifest.preprocess_hash})
    print(json.dumps({"preprocess_hash": manifest.preprocess_hash,
                      "sizes": {k: len(v) for k, v in manifest.splits.items()}, **manifest.counts}))
    return EXIT_OK


def cmd_krige(args):
    flat = _resolve(args)
    kcfg = cfgmod.section(flat, "krige")
    prep = Path(args.out) / "preprocess"
    manifest = load_manifest(_require(prep / "manifest.json", "preprocess manifest"))
    khash = _krige_hash(manifest.preprocess_hash, kcfg)
    out = Path(args.out) / "krige"
    sites = np.array([[lat, lon] for _, lat, lon in STATIONS])
    index = {"krige_hash": khash, "preprocess_hash": manifest.preprocess_hash,
             "config": {"n_bins": kcfg.n_bins, "grid_size": kcfg.grid_size, "standardized": kcfg.standardized},
             "splits": {}, "excluded": []}
    computed = reused = 0
    for split in manifest.splits:
        arrays = load_split(prep, split)
        tensors = arrays["stations"] if kcfg.standardized else arrays["stations_raw"]
        ids = [str(i) for i in arrays["ids"]]
        todo = []
        for i, sid in enumerate(ids):
            path = out / f"{sid}.npz"
            if path.exists() and _stored_hash(load_arrays(path)) == khash:
                reused += 1
                continue
            todo.append(i)
        stacks = build_krige_stacks(sites, [tensors[i] for i in todo], kcfg, workers=args.workers)
        failed = set()
        for i, maps in zip(todo, stacks):
            if maps is None:
                failed.add(ids[i])
                continue
            save_arrays(out / f"{ids[i]}.npz", maps=maps, config_hash=np.array(khash))
            computed += 1
        index["splits"][split] = [s for s in ids if s not in failed]
        index["excluded"].extend(sorted(failed))
    dump_json(out / "index.json", index)
    _freeze(out, flat, "krige", {"krige_hash": khash})
    print(json.dumps({"krige_hash": khash, "computed": computed, "reused": reused,
                      "excluded": len(index["excluded"])}))
    return EXIT_OK


def _load_data(work, split, model_name, expect_krige_hash=None):
    from nowcast.training import ArrayData

    prep = Path(work) / "preprocess"
    _require(prep / f"{split}.npz", f"{split} split")
    arrays = load_split(prep, split)
    ids = [str(i) for i in arrays["ids"]]
    krige = None
    if model_name == "smaat_krige_gnet":
        kdir = Path(work) / "krige"
        index = load_json(_require(kdir / "index.json", "kriging cache index"))
        manifest = load_manifest(prep / "manifest.json")
        if index["preprocess_hash"] != manifest.preprocess_hash:
            raise HashMismatchError("kriging cache was built from a different preprocessing run")
        if expect_krige_hash is not None and index["krige_hash"] != expect_krige_hash:
            raise HashMismatchError(
                f"kriging cache hash {index['krige_hash']} differs from the checkpoint's {expect_krige_hash}")
        keep = set(index["splits"].get(split, []))
        sel = [i for i, s in enumerate(ids) if s in keep]
        maps = []
        for i in sel:
            z = load_arrays(_require(kdir / f"{ids[i]}.npz", f"kriging stack {ids[i]}"))
            if _stored_hash(z) != index["krige_hash"]:
                raise HashMismatchError(f"stale kriging stack for {ids[i]}")
            maps.append(z["maps"].reshape(-1, *z["maps"].shape[2:]))
        krige = np.stack(maps)
        arrays = {k: v[sel] for k, v in arrays.items()}
        ids = [ids[i] for i in sel]
    return ArrayData(arrays["inputs"], arrays["target"], arrays["stations"], krige, ids)


def _hash_chain(work, model_name):
    prep = Path(work) / "preprocess"
    manifest = load_manifest(_require(prep / "manifest.json", "preprocess manifest"))
    chain = {"preprocess_hash": manifest.preprocess_hash}
    if model_name == "smaat_krige_gnet":
        index = load_json(_require(Path(work) / "krige" / "index.json", "kriging cache index"))
        chain["krige_hash"] = index["krige_hash"]
    return chain


def cmd_train(args):
    import torch

    from nowcast.training import set_determinism, train

    flat = _resolve(args)
    if args.model == "persistence":
        raise ConfigError("persistence has no trainable parameters; evaluate it directly")
    tcfg = cfgmod.section(flat, "train")
    ncfg = cfgmod.section(flat, "net")
    chain = _hash_chain(args.out, args.model)
    train_data = _load_data(args.out, "train", args.model)
    val_data = _load_data(args.out, "validation", args.model)
    set_determinism(tcfg.seed, tcfg.deterministic)
    torch.set_num_threads(max(1, args.workers))
    model = build_model(args.model, ncfg)
    run_dir = Path(args.out) / "runs" / args.model
    run_dir.mkdir(parents=True, exist_ok=True)
    meta = {"model": args.model, "net_config": ncfg.to_dict(), "net_hash": ncfg.config_hash(),
            "parameters": count_parameters(model), **chain}
    log_path = run_dir / "train.log"
    header = {"model": args.model, "parameters": meta["parameters"], "train_config": tcfg.to_dict(),
              "net_config": ncfg.to_dict(), "adam_betas": [0.9, 0.999], "weight_decay": 0.0}
    with open(log_path, "w") as log_file:
        def log(line):
            log_file.write(line + "\n")
            log_file.flush()
            print(line)

        log(json.dumps(header))
        resume = run_dir / "last.pt" if args.resume and (run_dir / "last.pt").exists() else None
        _, state = train(model, train_data, val_data, tcfg, out_dir=run_dir, resume=resume, meta=meta, log=log)
    _freeze(run_dir, flat, "train", meta)
    print(json.dumps({"best_epoch": state.best_epoch, "best_val_loss": state.best_val_loss,
                      "epochs": state.epoch, "stopped_early": state.stopped_early}))
    return EXIT_OK


def _load_trained(work, model_name):
    import torch

    from nowcast.models import NetConfig
    from nowcast.training import load_checkpoint

    if model_name == "persistence":
        return build_model("persistence"), {}
    run_dir = Path(work) / "runs" / model_name
    ckpt = load_checkpoint(_require(run_dir / "best.pt", f"{model_name} checkpoint"))
    meta = ckpt["meta"]
    chain = _hash_chain(work, model_name)
    for key, value in chain.items():
        if meta.get(key) != value:
            raise HashMismatchError(
                f"{model_name} checkpoint was trained with {key}={meta.get(key)}, current artifacts have {value}")
    ncfg = NetConfig(**meta["net_config"])
    if ncfg.config_hash() != meta["net_hash"]:
        raise HashMismatchError("checkpoint network config does not match its recorded hash")
    torch.manual_seed(0)
    model = build_model(model_name, ncfg)
    model.load_state_dict(ckpt["model_state"])
    model.eval()
    return model, meta


def _write_rows(path, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    write_text_atomic(path, buf.getvalue())


def cmd_evaluate(args):
    flat = _resolve(args)
    thresholds = tuple(args.threshold) if args.threshold else THRESHOLDS_MMH
    _require(Path(args.out) / "preprocess" / "manifest.json", "preprocess manifest")
    model, meta = _load_trained(args.out, args.model)
    data = _load_data(args.out, "test", args.model, meta.get("krige_hash"))
    preds = predict(model, data)
    report = evaluate_predictions(preds, data.target.numpy(), thresholds, args.model, "test")
    run_dir = Path(args.out) / "runs" / args.model
    save_arrays(run_dir / "predictions.npz", ids=np.array(data.ids), pred=preds.astype(np.float32),
                target=data.target.numpy(), last_input=data.inputs[:, -1:].numpy())
    dump_json(run_dir / "metrics.json", report.to_dict())
    _write_rows(run_dir / "metrics.csv", report.table_rows())
    _freeze(run_dir / "eval", flat, "evaluate", {"thresholds": list(thresholds)})
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_ablate(args):
    flat = _resolve(args)
    if args.retrain:
        raise ConfigError("retraining ablation is not implemented; inference-time masking is the supported mode")
    threshold = args.threshold[0] if args.threshold else 0.5
    model, meta = _load_trained(args.out, args.model)
    if args.model not in ("smaat_fusion", "smaat_krige_gnet"):
        raise ConfigError("ablation needs smaat_fusion or smaat_krige_gnet")
    variables = tuple(args.variables) if args.variables else VARIABLES
    unknown = [v for v in variables if v not in VARIABLES]
    if unknown:
        raise ConfigError(f"unknown variable(s) {unknown}; choose from {', '.join(VARIABLES)}")
    data = _load_data(args.out, "test", args.model, meta.get("krige_hash"))
    rows = ablate_variables(model, data, threshold, variables)
    run_dir = Path(args.out) / "runs" / args.model
    dump_json(run_dir / "ablation.json", {"model": args.model, "threshold": threshold,
                                          "rows": [r.__dict__ for r in rows]})
    _write_rows(run_dir / "ablation.csv", [{"model": args.model, **r.row()} for r in rows])
    _freeze(run_dir / "ablate", flat, "ablate", {"threshold": threshold})
    for r in rows:
        print(json.dumps(r.row()))
    return EXIT_OK


def cmd_report(args):
    from nowcast import plotting

    runs = Path(args.out) / "runs"
    order = {m: i for i, m in enumerate(MODEL_NAMES)}
    metric_files = sorted(runs.glob("*/metrics.json"), key=lambda p: order.get(p.parent.name, 99))
    if not metric_files:
        raise MissingInputError(f"no evaluated runs under {runs}")
    reports = [MetricReport.from_dict(load_json(p)) for p in metric_files]
    out = Path(args.out) / "reports"
    thresholds = sorted({t for r in reports for t in r.thresholds})
    rows = []
    for t in thresholds:
        for r in reports:
            if t in r.scores:
                row = next(x for x in r.table_rows() if float(x["threshold_mmh"]) == t)
                rows.append(row)
    _write_rows(out / "performance.csv", rows)

    ablations = []
    for p in sorted(runs.glob("*/ablation.json")):
        d = load_json(p)
        res = [AblationResult(**r) for r in d["rows"]]
        ablations.append((d["model"], res))
    if ablations:
        _write_rows(out / "ablation.csv", [{"model": m, **r.row()} for m, res in ablations for r in res])

    written = ["performance.csv"] + (["ablation.csv"] if ablations else [])
    if not args.no_plots:
        figs = out / "figures"
        for t in thresholds:
            plotting.score_bars([r for r in reports if t in r.scores], t, figs / f"scores_{t:g}mmh.png")
        preds = {}
        base = None
        for p in metric_files:
            pred_file = p.parent / "predictions.npz"
            if pred_file.exists():
                z = load_arrays(pred_file)
                base = base or z
                preds[p.parent.name] = to_rate(z["pred"][:4])
        if base is not None:
            plotting.prediction_panels(to_rate(base["last_input"][:4]), to_rate(base["target"][:4]), preds,
                                       figs / "examples.png", titles=[str(i) for i in base["ids"][:4]])
        for model, res in ablations:
            plotting.ablation_bars(res, model, figs / f"ablation_{model}.png")
        hist = {p.parent.name: load_json(p)["history"] for p in sorted(runs.glob("*/history.json"))}
        if hist:
            plotting.training_curves(hist, figs / "training_curves.png")
        written += sorted(str(f.relative_to(out)) for f in figs.glob("*.png"))
    print("\n".join(written))
    return EXIT_OK


def cmd_models(args):
    import torch

    flat = _resolve(args)
    ncfg = cfgmod.section(flat, "net")
    torch.manual_seed(0)
    print(json.dumps({"net_config": ncfg.to_dict(), "net_hash": ncfg.config_hash()}))
    for name in MODEL_NAMES:
        print(f"{name}\t{count_parameters(build_model(name, ncfg))}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _kv(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected KEY=VALUE")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", type=_kv, metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--device", help="torch device (default cpu)")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nowcast", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--blobs", type=int)
    p.add_argument("--days-per-year", type=int)
    p.add_argument("--hours-per-day", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="crop, filter, align, standardize, split")
    p.add_argument("--corpus", help="corpus root (default $NOWCAST_DATA_ROOT)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("krige", parents=[common], help="build the kriging stack cache")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_krige)

    for name, func, text in (("train", cmd_train, "train a model"),
                             ("evaluate", cmd_evaluate, "score a model on the test split"),
                             ("ablate", cmd_ablate, "per-variable ablation on the test split")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--out", required=True)
        p.add_argument("--model", required=True, choices=MODEL_NAMES)
        p.add_argument("--threshold", type=float, action="append", help="mm/h; repeatable")
        if name == "train":
            p.add_argument("--epochs", type=int, help="override train.max_epochs")
            p.add_argument("--resume", action="store_true", help="continue from runs/<model>/last.pt")
        if name == "ablate":
            p.add_argument("--variables", nargs="+", metavar="VAR")
            p.add_argument("--retrain", action="store_true", help="retrain per variable (not implemented)")
        p.set_defaults(func=func)

    p = sub.add_parser("report", parents=[common], help="tables and figures from evaluated runs")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("models", parents=[common], help="print network config and parameter counts")
    p.set_defaults(func=cmd_models)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HashMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HASH
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, PipelineError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
