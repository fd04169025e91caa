"""Command-line pipeline: one run directory per run, a manifest, plot-ready CSVs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
import warnings

import numpy as np

from . import config as cfgmod
from . import evalbench, ingest, quant, shap, train
from .errors import DataError, NumericalError
from .nn import build_student, build_teacher, load_model, save_model
from .nn.layers import BatchNorm, Dense, ReLU
from .nn.model import Model
from .numcore import SeededRng, derive_seed

log = logging.getLogger("kronids")

MANIFEST = "manifest.json"
TIMINGS = "timings.json"

# derived-seed keys, one per stochastic stage
SEED_SYNTH, SEED_SPLIT, SEED_TEACHER, SEED_SHAP, SEED_ABLATE, SEED_DISTILL = range(1, 7)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """A run directory plus its manifest."""

    def __init__(self, out_dir, cfg: dict):
        self.dir = out_dir
        self.cfg = cfg
        os.makedirs(out_dir, exist_ok=True)
        self.manifest = self._read(MANIFEST) or {"steps": {}}
        self.manifest["config"] = cfg
        self.manifest["root_seed"] = cfg["seed"]
        self.manifest["split_ratios"] = cfg["split"]["ratios"]
        with open(self.path("config.json"), "w") as fh:
            fh.write(cfgmod.dumps(cfg))

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def _read(self, name):
        p = self.path(name)
        if not os.path.exists(p):
            return None
        with open(p) as fh:
            return json.load(fh)

    def seed(self, key: int) -> int:
        return derive_seed(self.cfg["seed"], key)

    def require(self, step: str, *files: str) -> dict:
        """Check that ``step`` ran and its outputs are unchanged since."""
        entry = self.manifest["steps"].get(step)
        if entry is None:
            raise DataError(f"step '{step}' has not been run in {self.dir}; run it first")
        hashes = {}
        for f in files:
            p = self.path(f)
            if not os.path.exists(p):
                raise DataError(f"{f} is missing from {self.dir}; re-run '{step}'")
            h = sha256(p)
            if entry["outputs"].get(f) != h:
                raise DataError(f"{f} changed since '{step}' produced it (stale pipeline); re-run '{step}'")
            hashes[f] = h
        return hashes

    def record(
        self, step: str, outputs: list[str], inputs: dict | None = None, info: dict | None = None,
        seconds=None, measured: bool = False,
    ):
        # measured outputs (wall-clock timings) are listed without checksums
        self.manifest["steps"][step] = {
            "outputs": {os.path.basename(o): None if measured else sha256(o) for o in outputs},
            "inputs": inputs or {},
            "info": info or {},
        }
        with open(self.path(MANIFEST), "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if seconds is not None:
            timings = self._read(TIMINGS) or {}
            timings[step] = seconds
            with open(self.path(TIMINGS), "w") as fh:
                json.dump(timings, fh, indent=2, sort_keys=True)
                fh.write("\n")


def _train_cfg(d: dict, seed: int) -> train.TrainConfig:
    fields = {k: d[k] for k in cfgmod.TRAIN_DEFAULTS}
    return train.TrainConfig(**fields, seed=seed)


def _write_curves(path, rep: train.TrainReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_macro_f1", "lr"])
        for i, (l, f, lr) in enumerate(zip(rep.train_loss, rep.val_macro_f1, rep.lrs)):
            w.writerow([i + 1, repr(l), repr(f), repr(lr)])


def _load_dataset(run: Run) -> tuple[ingest.Dataset, dict]:
    hashes = run.require("preprocess", "X.npy", "y.npy", "splits.csv", "dataset.json", "preprocess_map.json")
    X = np.load(run.path("X.npy"))
    y = np.load(run.path("y.npy"))
    with open(run.path("splits.csv")) as fh:
        rows = list(csv.reader(fh))[1:]
    tags = np.array([r[1] for r in rows], dtype="<U5")
    with open(run.path("dataset.json")) as fh:
        meta = json.load(fh)
    return ingest.Dataset(X, y, tags, meta["class_names"], meta["feature_names"]), {"meta": meta, "hashes": hashes}


def _source_table(run: Run) -> ingest.Table:
    data = run.cfg["data"]
    if data["source"] == "synthetic":
        run.require("synth", "raw.csv", "schema.json")
        schema = ingest.Schema.load(run.path("schema.json"))
        return ingest.load_csv(run.path("raw.csv"), schema)
    if data["source"] == "csv":
        for key in ("csv", "schema"):
            if not data[key] or not os.path.exists(data[key]):
                raise DataError(f"data.{key} must name an existing file, got {data[key]!r}")
        return ingest.load_csv(data["csv"], ingest.Schema.load(data["schema"]))
    raise cfgmod.ConfigError(f"data.source must be 'synthetic' or 'csv', got {data['source']!r}")


# ---------------------------------------------------------------- steps


def cmd_synth(run: Run) -> None:
    d = run.cfg["data"]
    if d["source"] != "synthetic":
        log.info("data.source is %r; nothing to synthesize", d["source"])
        return
    t = time.perf_counter()
    counts = ingest.heavy_tail_counts(d["n_classes"], d["n_rows"], d["imbalance_ratio"])
    table = ingest.synthesize(
        counts,
        d["n_numeric"],
        d["n_informative"],
        tuple(d["categorical_dims"]),
        d["separability"],
        SeededRng(run.seed(SEED_SYNTH)),
        d["n_sources"],
    )
    table.write_csv(run.path("raw.csv"))
    table.schema.save(run.path("schema.json"))
    run.record(
        "synth",
        [run.path("raw.csv"), run.path("schema.json")],
        info={"class_counts": counts},
        seconds=time.perf_counter() - t,
    )


def cmd_preprocess(run: Run) -> None:
    t = time.perf_counter()
    table = _source_table(run)
    ratios = tuple(run.cfg["split"]["ratios"])
    ds, pmap = ingest.prepare(table, ratios, SeededRng(run.seed(SEED_SPLIT)))
    np.save(run.path("X.npy"), ds.X)
    np.save(run.path("y.npy"), ds.y)
    with open(run.path("splits.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "split"])
        for i, tag in enumerate(ds.split):
            w.writerow([i, tag])
    pmap.save(run.path("preprocess_map.json"))
    counts = {s: np.bincount(ds.y[ds.split == s], minlength=ds.n_classes).tolist() for s in ingest.SPLITS}
    meta = {
        "class_names": ds.class_names,
        "feature_names": pmap.feature_names,
        "feature_sources": pmap.feature_sources,
        "p": pmap.p,
        "rows": int(len(ds.y)),
        "dropped_rows": int(table.dropped_rows),
        "class_counts": counts,
    }
    _dump_json(run.path("dataset.json"), meta)
    outs = ["X.npy", "y.npy", "splits.csv", "dataset.json", "preprocess_map.json"]
    run.record(
        "preprocess",
        [run.path(o) for o in outs],
        info={"p": pmap.p, "ratios": list(ratios), "dropped_zero_variance": pmap.dropped},
        seconds=time.perf_counter() - t,
    )


def _dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_profile(run: Run) -> None:
    t = time.perf_counter()
    table = _source_table(run)
    prof = ingest.profile(table, run.cfg["profile"]["top_v"])
    outs = ingest.write_profile(prof, run.dir)
    run.record("profile", outs, seconds=time.perf_counter() - t)


def cmd_train_teacher(run: Run) -> None:
    ds, src = _load_dataset(run)
    tc = run.cfg["teacher"]
    cfg = _train_cfg(tc, run.seed(SEED_TEACHER))
    Xtr, ytr = ds.part("train")
    Xva, yva = ds.part("val")
    model = build_teacher(ds.p, ds.n_classes, cfg.dropout, tuple(tc["hidden"]), seed=cfg.seed)
    w = train.class_weights(np.maximum(np.bincount(ytr, minlength=ds.n_classes), 1))
    rep = train.fit(model, Xtr, Xva, yva, ds.n_classes, cfg, train.ce_provider(ytr, w))
    save_model(model, run.path("teacher.kids"))
    _write_curves(run.path("curves.csv"), rep)
    run.record(
        "train-teacher",
        [run.path("teacher.kids"), run.path("curves.csv")],
        inputs=src["hashes"],
        info={
            "train_hyperparams": {k: tc[k] for k in cfgmod.TRAIN_DEFAULTS},
            "params": model.n_params,
            "best_epoch": rep.best_epoch,
            "stopped_epoch": rep.stopped_epoch,
            "val_macro_f1": rep.best_val_macro_f1,
            "class_weights": w.tolist(),
        },
        seconds=rep.wall_clock_s,
    )


def cmd_shap(run: Run) -> None:
    t = time.perf_counter()
    ds, src = _load_dataset(run)
    hashes = {**src["hashes"], **run.require("train-teacher", "teacher.kids")}
    teacher = load_model(run.path("teacher.kids"))
    sc = run.cfg["shap"]
    Xtr, ytr = ds.part("train")
    Xva, yva = ds.part("val")
    root = SeededRng(run.seed(SEED_SHAP))
    bg = Xtr[shap.attribution_sampling_plan(ytr, min(sc["background"], len(ytr)), root.spawn(1))]
    ex = Xva[shap.attribution_sampling_plan(yva, min(sc["n_samples"], len(yva)), root.spawn(2))]
    phi = shap.explain_model(
        teacher, ex, bg, sc["n_coalitions"], root.spawn(3).seed, sc["use_probability"], sc["n_jobs"]
    )
    s, pi, cum = shap.global_ranking(phi)
    report = shap.AttributionReport(
        phi, s, pi, cum,
        mass_k=shap.mass_cutoff(cum, sc["mass"]),
        feature_names=src["meta"]["feature_names"],
        feature_sources=src["meta"]["feature_sources"],
    )
    report.write_global_csv(run.path("shap_global.csv"))
    with open(run.path("shap_sources.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_feature", "s"])
        for name, val in report.source_importance():
            w.writerow([name, repr(val)])
    np.save(run.path("shap_phi.npy"), phi)
    run.record(
        "shap",
        [run.path("shap_global.csv"), run.path("shap_sources.csv"), run.path("shap_phi.npy")],
        inputs=hashes,
        info={"mass_cutoff_k": report.mass_k, "mass": sc["mass"], "n_explained": len(ex), "background": len(bg)},
        seconds=time.perf_counter() - t,
    )


def _ranking(run: Run) -> np.ndarray:
    run.require("shap", "shap_global.csv")
    with open(run.path("shap_global.csv")) as fh:
        return np.array([int(r["column"]) for r in csv.DictReader(fh)], dtype=np.int64)


def _probe(n_in: int, n_classes: int, hidden: int, seed: int) -> Model:
    rng = SeededRng(seed)
    return Model([Dense(n_in, hidden, rng), BatchNorm(hidden), ReLU(), Dense(hidden, n_classes, rng)], n_in, seed)


def cmd_ablate(run: Run) -> None:
    t = time.perf_counter()
    ds, src = _load_dataset(run)
    pi = _ranking(run)
    ac = run.cfg["ablation"]
    Xtr, ytr = ds.part("train")
    Xva, yva = ds.part("val")
    w = train.class_weights(np.maximum(np.bincount(ytr, minlength=ds.n_classes), 1))
    base_seed = run.seed(SEED_ABLATE)
    probe_cfg = _train_cfg(run.cfg["student"]["train"], base_seed)

    def train_probe(cols):
        cols = np.asarray(cols)
        model = _probe(len(cols), ds.n_classes, ac["probe_hidden"], derive_seed(base_seed, len(cols)))
        rep = train.fit(
            model, Xtr[:, cols], Xva[:, cols], yva, ds.n_classes, probe_cfg, train.ce_provider(ytr, w)
        )
        return rep.best_val_macro_f1

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = shap.ablate_k(train_probe, pi, ac["k_grid"], ac["tolerance"])
    notes = sorted({str(c.message) for c in caught if "K values above" in str(c.message)})
    res.write_csv(run.path("ablation.csv"))
    k = run.cfg["student"]["k"] or res.selected_k
    cols = pi[:k]
    _dump_json(
        run.path("features.json"),
        {"k": int(k), "columns": cols.tolist(), "names": [src["meta"]["feature_names"][c] for c in cols]},
    )
    run.record(
        "ablate",
        [run.path("ablation.csv"), run.path("features.json")],
        inputs={**src["hashes"], **run.require("shap", "shap_global.csv")},
        info={
            "chosen_k": int(k),
            "ablation_k": res.selected_k,
            "met_tolerance": res.met_tolerance,
            "full_f1": res.full_f1,
            "notes": notes,
        },
        seconds=time.perf_counter() - t,
    )


def _features(run: Run) -> np.ndarray:
    run.require("ablate", "features.json")
    with open(run.path("features.json")) as fh:
        return np.array(json.load(fh)["columns"], dtype=np.int64)


def cmd_distill(run: Run) -> None:
    ds, src = _load_dataset(run)
    hashes = {**src["hashes"], **run.require("train-teacher", "teacher.kids"), **run.require("ablate", "features.json")}
    teacher = load_model(run.path("teacher.kids"))
    cols = _features(run)
    sc = run.cfg["student"]
    dc = run.cfg["distill"]
    grid = train.DistillConfig(tuple(dc["temperatures"]), tuple(dc["alphas"]), dc["n_jobs"])
    cfg = _train_cfg(sc["train"], run.seed(SEED_DISTILL))
    Xtr, ytr = ds.part("train")
    Xva, yva = ds.part("val")
    hidden = tuple(sc["hidden"])

    def builder(seed):
        return build_student(len(cols), ds.n_classes, hidden, seed=seed)

    rep, student, _ = train.distill(teacher, builder, Xtr, ytr, Xva, yva, cols, ds.n_classes, grid, cfg)
    save_model(student, run.path("student_fp32.kids"))
    with open(run.path("grid.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["T", "alpha", "val_macro_f1", "chosen"])
        for g in rep.grid:
            w.writerow([repr(g["T"]), repr(g["alpha"]), repr(g["val_macro_f1"]), int(g["chosen"])])
    _write_curves(run.path("curves_student.csv"), rep)
    run.record(
        "distill",
        [run.path("student_fp32.kids"), run.path("grid.csv"), run.path("curves_student.csv")],
        inputs=hashes,
        info={
            "chosen": rep.chosen,
            "val_macro_f1": rep.best_val_macro_f1,
            "params": student.n_params,
            "architecture": student.summary(),
        },
        seconds=rep.wall_clock_s,
    )


def cmd_quantize(run: Run) -> None:
    t = time.perf_counter()
    hashes = run.require("distill", "student_fp32.kids")
    student = load_model(run.path("student_fp32.kids"))
    q = quant.quantize_weights(student)
    save_model(q, run.path("student_int8.kids"))
    sizes = quant.size_report(run.path("student_int8.kids"), run.path("student_fp32.kids"))
    # keep the manifest independent of where the run directory lives
    sizes["path"], sizes["reference"] = "student_int8.kids", "student_fp32.kids"
    run.record(
        "quantize",
        [run.path("student_int8.kids")],
        inputs=hashes,
        info=sizes,
        seconds=time.perf_counter() - t,
    )


MODEL_FILES = {"teacher": "teacher.kids", "student_fp32": "student_fp32.kids", "student_int8": "student_int8.kids"}
PRODUCERS = {"teacher": "train-teacher", "student_fp32": "distill", "student_int8": "quantize"}


def _load_all_models(run: Run) -> tuple[dict, dict]:
    hashes = {}
    models = {}
    for name, fname in MODEL_FILES.items():
        hashes.update(run.require(PRODUCERS[name], fname))
        models[name] = load_model(run.path(fname))
    hashes.update(run.require("ablate", "features.json"))
    return models, hashes


def _inputs_for(name: str, X: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return X if name == "teacher" else np.ascontiguousarray(X[:, cols])


def cmd_eval(run: Run) -> None:
    t = time.perf_counter()
    ds, src = _load_dataset(run)
    models, hashes = _load_all_models(run)
    hashes.update(src["hashes"])
    cols = _features(run)
    ref = run.cfg["bench"]["reference"]
    if ref not in models:
        raise cfgmod.ConfigError(f"bench.reference must be one of {sorted(models)}")
    Xte, yte = ds.part("test")
    Xva, yva = ds.part("val")
    bundles = []
    val_f1 = {}
    for name, model in models.items():
        b = evalbench.confusion_and_metrics(yte, model.predict(_inputs_for(name, Xte, cols)), ds.n_classes, name)
        b.model_params = model.n_params
        b.model_kb = os.path.getsize(run.path(MODEL_FILES[name])) / 1024.0
        val_f1[name] = evalbench.macro_f1(yva, model.predict(_inputs_for(name, Xva, cols)), ds.n_classes)
        bundles.append(b)
    by = {b.name: b for b in bundles}
    for b in bundles:
        b.compression_vs_reference = by[ref].model_kb / b.model_kb
    parity = quant.parity_eval(models["student_fp32"], models["student_int8"], Xte[:, cols], yte, ds.n_classes)
    meta = {
        "split": "test",
        "reference": ref,
        "val_macro_f1": val_f1,
        "param_compression_teacher_over_student": models["teacher"].n_params / models["student_fp32"].n_params,
        "size_compression_teacher_over_student": by["teacher"].model_kb / by["student_fp32"].model_kb,
        "int8_delta_accuracy": parity["delta_accuracy"],
        "int8_delta_macro_f1": parity["delta_macro_f1"],
        "student_vs_teacher_macro_f1_gap": by["teacher"].macro_f1 - by["student_fp32"].macro_f1,
    }
    outs = evalbench.emit_report(bundles, meta, run.dir, ds.class_names, parts=("metrics", "confusion"))
    run.record("eval", outs, inputs=hashes, info={"test_macro_f1": {b.name: b.macro_f1 for b in bundles}},
               seconds=time.perf_counter() - t)


BENCH_KEYS = (
    "latency_mean_ms", "latency_median_ms", "latency_p95_ms", "throughput_samples_per_s",
    "per_sample_latency_us", "model_params", "model_kb", "speedup_vs_reference", "compression_vs_reference",
)


def _bench_batch(X: np.ndarray, batch: int) -> np.ndarray:
    reps = -(-batch // len(X))
    return np.ascontiguousarray(np.tile(X, (reps, 1))[:batch])


def cmd_bench(run: Run) -> None:
    """Latency/throughput; outputs are wall-clock measurements, not reproducible bytes."""
    t = time.perf_counter()
    ds, _ = _load_dataset(run)
    models, hashes = _load_all_models(run)
    cols = _features(run)
    bc = run.cfg["bench"]
    Xva, _ = ds.part("val")
    batch = _bench_batch(Xva, bc["batch_size"])
    bundles = []
    raw = {}
    for name, model in models.items():
        X = _inputs_for(name, batch, cols).astype(model.dtype)
        res = evalbench.bench_latency(model.predict_logits, X, bc["warmup"], bc["repeats"])
        raw[name] = res
        bundles.append(
            evalbench.MetricBundle(
                name=name,
                latency_mean_ms=res["latency_mean_ms"],
                latency_p95_ms=res["latency_p95_ms"],
                latency_median_ms=res["latency_median_ms"],
                throughput_samples_per_s=res["throughput_samples_per_s"],
                per_sample_latency_us=res["per_sample_latency_us"],
                model_params=model.n_params,
                model_kb=os.path.getsize(run.path(MODEL_FILES[name])) / 1024.0,
            )
        )
    by = {b.name: b for b in bundles}
    ref = by[bc["reference"]]
    for b in bundles:
        b.speedup_vs_reference, b.compression_vs_reference = evalbench.compare_models(ref, b)
    evalbench.write_bench_csv(run.path("bench.csv"), bundles)
    _dump_json(
        run.path("bench.json"),
        {
            "reference": bc["reference"],
            "batch_size": bc["batch_size"],
            "models": {b.name: {k: getattr(b, k) for k in BENCH_KEYS} for b in bundles},
            "durations_s": {k: v["durations_s"] for k, v in raw.items()},
            "student_over_teacher_throughput": by["student_fp32"].throughput_samples_per_s
            / by["teacher"].throughput_samples_per_s,
        },
    )
    run.record("bench", [run.path("bench.csv"), run.path("bench.json")], inputs=hashes,
               seconds=time.perf_counter() - t, measured=True)


STEPS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "profile": cmd_profile,
    "train-teacher": cmd_train_teacher,
    "shap": cmd_shap,
    "ablate": cmd_ablate,
    "distill": cmd_distill,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "bench": cmd_bench,
}
PIPELINE = list(STEPS)


def cmd_run_all(run: Run) -> None:
    for name in PIPELINE:
        log.info("== %s", name)
        STEPS[name](run)


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--seed", type=int, help="root seed; overrides the config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set teacher.epochs=20")
    common.add_argument("--csv", help="shorthand for data.source=csv with data.csv=PATH")
    common.add_argument("--schema", help="schema JSON for --csv")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="kronids", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in [*PIPELINE, "run-all"]:
        sub.add_parser(name, parents=[common])
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return parser


def _resolve_config(args) -> dict:
    stored = os.path.join(args.out, "config.json")
    file_cfg = None
    if args.config:
        file_cfg = cfgmod.load(args.config)
    elif os.path.exists(stored):
        file_cfg = cfgmod.load(stored)
    sets = list(args.set)
    if args.csv:
        sets += ["data.source=csv", f"data.csv={args.csv}"]
    if args.schema:
        sets.append(f"data.schema={args.schema}")
    return cfgmod.resolve(file_cfg, sets, args.seed)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.captureWarnings(True)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _resolve_config(args)
        if args.command == "show-config":
            sys.stdout.write(cfgmod.dumps(cfg))
            return 0
        run = Run(args.out, cfg)
        if args.command == "run-all":
            cmd_run_all(run)
        else:
            STEPS[args.command](run)
    except cfgmod.ConfigError as exc:
        print(f"kronids: usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"kronids: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"kronids: numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"kronids: usage error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
