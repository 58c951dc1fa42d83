"""Command-line front end.

Settings are resolved as: built-in defaults, then the ``--config`` JSON
document, then command-line flags; ``CLUSTERLAB_OUT`` overrides ``--out``.

Exit codes: 0 success, 2 configuration or validation error, 3 runtime error.
"""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, theory
from .clustering import bsgc, floor_degrees, gradient_similarity, weight_similarity
from .datahub import load_mnist_dir, synthetic_blobs
from .errors import DomainError, FormatError
from .modmetrics import clusterability, random_baseline
from .network import OFF, ON, load_checkpoint, save_checkpoint
from .trainer import TrainPlan, history_to_json, max_clusterability_sweep, train, write_history_csv

log = logging.getLogger("clusterlab")

DEFAULT_DATA = {
    "dataset": "synthetic",
    "mnist_dir": None,
    "train_subset": 10000,
    "synthetic": {"n_classes": 10, "per_class_train": 1000, "per_class_test": 200, "seed": 0},
}
CONFIG_KEYS = {"plan", "out", *DEFAULT_DATA}
DEFAULT_SWEEP_K = (2, 3, 4, 6, 8)


class UsageError(Exception):
    """Bad configuration or a request the inputs cannot support (exit 2)."""


# -- configuration -----------------------------------------------------------


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config: file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config: invalid JSON at line {exc.lineno} ({exc.msg})") from None
    if not isinstance(cfg, dict):
        raise UsageError("config: top level must be a JSON object")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"{sorted(unknown)[0]}: unknown config field")
    return cfg


def _data_config(args, cfg, stored=None):
    data = json.loads(json.dumps(DEFAULT_DATA))
    for source in (stored or {}, cfg):
        for key in DEFAULT_DATA:
            if key in source:
                data[key] = source[key]
    if getattr(args, "dataset", None):
        data["dataset"] = args.dataset
    if getattr(args, "mnist_dir", None):
        data["mnist_dir"] = args.mnist_dir
    if data["dataset"] not in ("mnist", "synthetic"):
        raise UsageError(f"dataset: expected mnist or synthetic, got {data['dataset']!r}")
    if data["dataset"] == "mnist":
        if not data["mnist_dir"] or not Path(data["mnist_dir"]).is_dir():
            raise UsageError(f"mnist_dir: directory {data['mnist_dir']!r} does not exist")
    return data


def load_datasets(data, width):
    if data["dataset"] == "mnist":
        try:
            train_set = load_mnist_dir(data["mnist_dir"], "train")
            test_set = load_mnist_dir(data["mnist_dir"], "test")
        except (FileNotFoundError, FormatError) as exc:
            raise UsageError(f"mnist_dir: {exc}") from None
        if data.get("train_subset"):
            train_set = train_set.subset(np.arange(min(len(train_set), int(data["train_subset"]))))
        return train_set, test_set
    s = data["synthetic"]
    train_set = synthetic_blobs(s["n_classes"], width, s["per_class_train"], s["seed"], "train")
    test_set = synthetic_blobs(s["n_classes"], width, s["per_class_test"], s["seed"], "test")
    return train_set, test_set


def _out_dir(args, cfg):
    out = os.environ.get("CLUSTERLAB_OUT") or args.out or cfg.get("out")
    if not out:
        raise UsageError("out: no output directory given (use --out or CLUSTERLAB_OUT)")
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"out: cannot create {out} ({exc.strerror})") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"out: {out} is not writable")
    return path


def build_plan(args, cfg):
    fields = dict(cfg.get("plan", {}))
    for flag, name in (("seed", "seed"), ("lam", "lam"), ("k", "k"), ("epochs", "epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            fields[name] = value
    try:
        plan = TrainPlan.from_dict(fields)
        return plan.validate()
    except (DomainError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _load(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint: {path} not found") from None
    except FormatError as exc:
        raise UsageError(f"checkpoint: {exc}") from None


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- commands ----------------------------------------------------------------


def cmd_train(args):
    cfg = _read_config(args.config)
    plan = build_plan(args, cfg)
    data = _data_config(args, cfg)
    out = _out_dir(args, cfg)
    train_set, test_set = load_datasets(data, plan.dims[0])
    log.info("training %s on %d samples", plan.dims, len(train_set))
    model, history = train(plan, train_set, test_set)
    write_history_csv(history, out / "history.csv", plan.clustered_layers)
    save_checkpoint(
        model,
        plan.to_dict(),
        history_to_json(history),
        out / "checkpoint.json",
        grad_traces=history.grad_traces,
        extra={"data": data},
    )
    last = history.records[-1]
    log.info("done: step %d test_acc %s clusterability %s", last["step"], last["test_acc"], last["clusterability"])
    return 0


def _parse_ints(text, name):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{name}: expected comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError(f"{name}: empty list")
    return values


def cmd_bsgc(args):
    model, meta = _load(args.checkpoint)
    out = _out_dir(args, {})
    ks = _parse_ints(args.ks, "ks") if args.ks else list(DEFAULT_SWEEP_K)
    layers = range(model.n_layers - 1)
    if args.source == "gradient":
        traces = meta["grad_traces"]
        if not traces or any(traces[l] is None or traces[l].step_count == 0 for l in layers):
            raise UsageError("source: checkpoint has no stored gradient trace")
        sims = {l: floor_degrees(gradient_similarity(traces[l])) for l in layers}
    else:
        sims = {l: floor_degrees(weight_similarity(model.weights[l])) for l in layers}
    primary_k = args.k if args.k is not None else (meta["plan"] or {}).get("k", 4)
    rows, clusters = [], {"source": args.source, "seed": args.seed, "layers": {}}
    for l in layers:
        for k in sorted(set(ks) | {primary_k}):
            if k > min(model.weights[l].shape):
                continue
            try:
                bc = bsgc(sims[l], k, args.seed)
            except DomainError as exc:
                raise UsageError(f"layer {l}: {exc}") from None
            c = clusterability(model.weights[l], bc).c
            if k in ks:
                rows.append([l, k, args.source, c, random_baseline(k)])
            if k == primary_k:
                clusters["layers"][str(l)] = dict(bc.to_dict(), clusterability=c)
    _write_csv(out / "clusterability-vs-k.csv", ["layer", "k", "source", "clusterability", "baseline"], rows)
    _write_json(out / "clusters.json", clusters)
    return 0


def _analysis_layers(model, layer):
    clustered = [l for l in range(model.n_layers - 1) if model.clusterings[l] is not None]
    if layer is not None:
        if layer not in clustered:
            raise UsageError(f"layer: {layer} is not a clustered hidden layer")
        return clustered, layer
    return clustered, clustered[-1] if clustered else None


def cmd_analyze(args):
    model, meta = _load(args.checkpoint)
    cfg = _read_config(args.config)
    out = _out_dir(args, cfg)
    data = _data_config(args, cfg, stored=meta.get("data"))
    _, test_set = load_datasets(data, model.dims[0])
    clustered, layer = _analysis_layers(model, args.layer)
    needs_clusters = args.interventions or args.sufficiency or args.heatmap or args.null_dependency
    if needs_clusters and layer is None:
        raise UsageError("checkpoint has no clustered layer; interventions are unavailable")
    summary = {"layer": layer}

    if args.interventions:
        rows = []
        for l in clustered:
            for mode in (ON, OFF):
                mat = analysis.intervention_matrix(model, l, mode, test_set)
                for c in range(mat.accuracy.shape[0]):
                    for y in range(mat.accuracy.shape[1]):
                        rows.append([mode, l, c, y, float(mat.accuracy[c, y])])
        _write_csv(out / "interventions.csv", ["mode", "layer", "cluster", "class", "accuracy"], rows)

    if args.sufficiency:
        hist = analysis.sufficiency_histogram(model, layer, test_set)
        rows = [
            [s, hist.k - s, int(n), int(n) / hist.eligible_count] for s, n in enumerate(hist.counts)
        ]
        _write_csv(out / "sufficiency.csv", ["s", "not_sufficient", "count", "fraction"], rows)
        summary["eligible_count"] = hist.eligible_count

    if args.null_dependency:
        k = model.clusterings[layer].k
        summary["null_dependency"] = {
            str(m): analysis.null_dependency(model, layer, test_set, m) for m in sorted({1, min(3, k)})
        }

    if args.heatmap:
        w = model.weights[layer]
        same = model.clusterings[layer].same_module()
        rows = [
            [i, j, float(w[i, j]), int(same[i, j])] for i in range(w.shape[0]) for j in range(w.shape[1])
        ]
        _write_csv(out / "heatmap.csv", ["row", "col", "weight", "same_module"], rows)

    if args.ecs:
        cfg_ecs = {
            "chunk_fraction": args.chunk_fraction,
            "accuracy_drop": args.accuracy_drop,
            "loss_rise": args.loss_rise,
            "include_negatives": args.include_negatives,
        }
        labels = sorted(int(v) for v in np.unique(test_set.labels))
        if args.compare:
            other, _ = _load(args.compare)
            if other.dims[0] != model.dims[0] or other.dims[-1] != model.dims[-1]:
                raise UsageError("compare: checkpoints solve different tasks")
            pct, mean, reports, other_reports = analysis.ecs_compare(model, other, test_set, labels, **cfg_ecs)
            _write_csv(
                out / "ecs_compare.csv", ["label", "pct_increase"], [[l, pct[l]] for l in labels]
            )
            summary["ecs_mean_pct_increase"] = mean
        else:
            reports = {l: analysis.effective_circuit(model, test_set, l, **cfg_ecs) for l in labels}
        _write_csv(
            out / "ecs.csv",
            ["label", "ecs", "nonzero", "total"],
            [[l, reports[l].ecs, reports[l].nonzero_params, reports[l].total_params] for l in labels],
        )
        summary["ecs_config"] = cfg_ecs
    _write_json(out / "summary.json", summary)
    return 0


def _parse_theory_request(args, cfg_path):
    req = {"dense": [], "modular": [], "jl": [], "capacity": []}
    if cfg_path:
        try:
            with open(cfg_path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"config: {exc}") from None
        for key, value in loaded.items():
            if key not in req:
                raise UsageError(f"{key}: unknown theory request")
            req[key] = list(value)
    for text in args.dense or []:
        req["dense"].append(_parse_ints(text, "dense"))
    for text in args.modular or []:
        n_prev, _, parts = text.partition(":")
        if not parts:
            raise UsageError(f"modular: expected N_PREV:W1,W2,..., got {text!r}")
        req["modular"].append({"n_prev": _parse_ints(n_prev, "modular")[0], "partition": _parse_ints(parts, "modular")})
    for text in args.jl or []:
        n, _, eps = text.partition(":")
        try:
            req["jl"].append([int(n), float(eps)])
        except ValueError:
            raise UsageError(f"jl: expected N:EPS, got {text!r}") from None
    for text in args.capacity or []:
        req["capacity"].append(_parse_ints(text, "capacity"))
    if not any(req.values()):
        req = {"dense": [[64, 64]], "modular": [{"n_prev": 64, "partition": [16, 16, 16, 16]}],
               "jl": [[64, 0.5]], "capacity": [[16, 16, 16, 16]]}
    return req


def cmd_theory(args):
    req = _parse_theory_request(args, args.config)
    out = _out_dir(args, {})
    rows = []

    def big(name, inputs, count):
        rows.append([name, inputs, "exact", str(count.value)])
        rows.append([name, inputs, "log2", repr(count.log2)])

    try:
        for widths in req["dense"]:
            big("polytope_dense", ",".join(map(str, widths)), theory.polytope_bound_dense(widths))
        for item in req["modular"]:
            n_prev, parts = int(item["n_prev"]), [int(p) for p in item["partition"]]
            inputs = f"{n_prev}:{','.join(map(str, parts))}"
            big("polytope_pair_modular", inputs, theory.polytope_pair_count_modular(n_prev, parts))
            big("polytope_pair_dense", inputs, theory.polytope_pair_count_dense(n_prev, sum(parts)))
        for n, eps in req["jl"]:
            rows.append(["jl_capacity", f"{int(n)}:{float(eps)!r}", "exact", str(theory.jl_capacity(int(n), float(eps)))])
        for parts in req["capacity"]:
            mod, dense, gap = theory.modular_capacity_comparison(parts)
            inputs = ",".join(map(str, parts))
            rows.append(["capacity_modular", inputs, "ln", repr(mod)])
            rows.append(["capacity_dense", inputs, "ln", repr(dense)])
            rows.append(["capacity_gap", inputs, "ln", repr(gap)])
    except (DomainError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"theory request: {exc}") from None
    _write_csv(out / "theory.csv", ["calculator", "inputs", "quantity", "value"], rows)
    return 0


def cmd_sweep(args):
    model, meta = _load(args.checkpoint)
    cfg = _read_config(args.config)
    out = _out_dir(args, cfg)
    stored_plan = dict(meta["plan"] or {})
    cfg = dict(cfg, plan={**stored_plan, **cfg.get("plan", {})})
    plan = build_plan(args, cfg)
    data = _data_config(args, cfg, stored=meta.get("data"))
    train_set, test_set = load_datasets(data, model.dims[0])
    layers = [args.layer] if args.layer is not None else list(range(model.n_layers - 1))
    rows = []
    for l in layers:
        if not 0 <= l < model.n_layers - 1:
            raise UsageError(f"layer: {l} is not a hidden layer")
        base = analysis.evaluate(model, test_set).accuracy
        best = max_clusterability_sweep(model, l, plan, train_set, test_set, base, tolerance=args.tolerance)
        rows.append([l, plan.k, plan.lam, base, best])
    _write_csv(out / "max_clusterability.csv", ["layer", "k", "lambda", "baseline_accuracy", "max_clusterability"], rows)
    return 0


# -- entry point -------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="clusterlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--out", help="output directory (CLUSTERLAB_OUT overrides)")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--dataset", choices=["mnist", "synthetic"])
            p.add_argument("--mnist-dir")

    p = sub.add_parser("train", help="train a (modular) MLP")
    common(p)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bsgc", help="spectral clusterability of a checkpoint over k")
    p.add_argument("checkpoint")
    p.add_argument("--out")
    p.add_argument("--source", choices=["weight", "gradient"], default="weight")
    p.add_argument("--k", type=int, help="k whose assignments go to clusters.json")
    p.add_argument("--ks", help="comma-separated k sweep (default 2,3,4,6,8)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bsgc)

    p = sub.add_parser("analyze", help="interventions, sufficiency, ECS and heatmap reports")
    p.add_argument("checkpoint")
    common(p)
    p.add_argument("--layer", type=int)
    p.add_argument("--interventions", action="store_true")
    p.add_argument("--sufficiency", action="store_true")
    p.add_argument("--null-dependency", action="store_true")
    p.add_argument("--heatmap", action="store_true")
    p.add_argument("--ecs", action="store_true")
    p.add_argument("--compare", help="second checkpoint for ecs_compare.csv")
    p.add_argument("--chunk-fraction", type=float, default=0.005)
    p.add_argument("--accuracy-drop", type=float, default=0.01)
    p.add_argument("--loss-rise", type=float, default=0.10)
    p.add_argument("--include-negatives", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("theory", help="polytope and capacity calculators")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--dense", action="append", help="hidden widths, e.g. 64,64")
    p.add_argument("--modular", action="append", help="N_PREV:W1,W2,... e.g. 4:2,2")
    p.add_argument("--jl", action="append", help="N:EPS e.g. 100:0.5")
    p.add_argument("--capacity", action="append", help="sub-widths, e.g. 16,16,16,16")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("sweep-max-clusterability", help="max C per layer without accuracy loss")
    p.add_argument("checkpoint")
    common(p)
    p.add_argument("--layer", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--tolerance", type=float, default=0.01)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 3
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
