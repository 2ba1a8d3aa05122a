"""Config-driven experiment runner.

Subcommands: gen (write datasets + manifest), run (train/evaluate per seed),
report (aggregate results across runs), ei (standalone environment inference
on a checkpoint), selftest (quick oracle suite). Configs are versioned JSON;
all numeric output keeps full precision, and results files carry no
timestamps so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import datagen, ingest
from .core import Dataset, concat_datasets, load_dataset, save_dataset
from .envinfer import export_partition_csv
from .errors import ConfigError, EnvlearnError
from .metrics import causal_errors, evaluate, mi_diagnostics
from .models import LinearModel, load_model, save_model
from .pipelines import (TrainConfig, run_ei_step, run_erm, run_irm, run_reiil,
                        run_werm, select_model)

CONFIG_VERSION = 1
METHODS = ("ERM", "IRM", "WERM", "EIIL", "REIIL", "REIWERM")
GENERATORS = ("sem", "proxy_cbmnist", "color_spurious", "cbmnist")


# ---------------------------------------------------------------- config ----

def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}")
    validate_config(cfg, path)
    return cfg


def _require(cfg: dict, path: str, key: str, where: str):
    if key not in cfg:
        raise ConfigError(f"{where}: missing required field '{path}{key}'")
    return cfg[key]


def validate_config(cfg: dict, where: str = "config") -> None:
    if _require(cfg, "", "version", where) != CONFIG_VERSION:
        raise ConfigError(f"{where}: unsupported config version {cfg['version']!r}")
    ds = _require(cfg, "", "dataset", where)
    if "generator" not in ds and "dir" not in ds:
        raise ConfigError(f"{where}: dataset needs either 'dataset.generator' or 'dataset.dir'")
    if "generator" in ds and ds["generator"] not in GENERATORS:
        raise ConfigError(f"{where}: unknown generator {ds['generator']!r} "
                          f"(choose from {', '.join(GENERATORS)})")
    pipe = _require(cfg, "", "pipeline", where)
    methods = pipe.get("method", pipe.get("methods"))
    if methods is None:
        raise ConfigError(f"{where}: missing required field 'pipeline.method'")
    for m in ([methods] if isinstance(methods, str) else methods):
        if m not in METHODS:
            raise ConfigError(f"{where}: unknown method {m!r} (choose from {', '.join(METHODS)})")
    seeds = _require(cfg, "", "seeds", where)
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError(f"{where}: 'seeds' must be a non-empty list")


def config_methods(cfg: dict) -> list[str]:
    m = cfg["pipeline"].get("method", cfg["pipeline"].get("methods"))
    return [m] if isinstance(m, str) else list(m)


def train_config(cfg: dict, seed: int) -> TrainConfig:
    model = cfg.get("model", {})
    opt = cfg.get("optimizer", {})
    pipe = cfg["pipeline"]
    kw = dict(seed=seed)
    if "kind" in model:
        kw["model"] = model["kind"]
    if "hidden" in model:
        kw["hidden"] = tuple(model["hidden"])
    if "bias" in model:
        kw["bias"] = model["bias"]
    for src, keys in ((opt, ("lr", "steps", "l2")),
                      (pipe, ("lam", "anneal_steps", "il_steps", "ei_steps", "ei_lr", "soft_norm"))):
        for k in keys:
            if k in src:
                kw[k] = src[k]
    if pipe.get("lam_sweep"):
        kw["lam_sweep"] = tuple(pipe["lam_sweep"])
    return TrainConfig(**kw)


# ------------------------------------------------------------- datasets ----

def generate_bundle(ds_cfg: dict, seed: int):
    """Build the named datasets for a generator config. Returns
    (bundle dict, sem ground truth or None)."""
    gen = ds_cfg["generator"]
    params = dict(ds_cfg.get("params", {}))
    params.setdefault("seed", seed)
    if gen == "sem":
        variant = params.pop("variant", "FOU")
        train, val, test, truth = datagen.gen_sem_protocol(variant, **params)
        return {"train": train, "validation": val, "test": test}, truth
    if gen == "proxy_cbmnist":
        env1, env2, test = datagen.gen_proxy_cbmnist(**params)
        return {"train": [env1, env2], "test": test}, None
    if gen == "color_spurious":
        base_cfg = params.pop("base", {})
        base = datagen.ProxySpec(**base_cfg)
        envs, test = datagen.gen_color_spurious(base, **params)
        return {"train": envs, "test": test}, None
    if gen == "cbmnist":
        variant = params.pop("variant", "I")
        with open(params.pop("mnist_images"), "rb") as fh:
            images = ingest.images_from_idx(ingest.parse_idx(fh.read()))
        with open(params.pop("mnist_labels"), "rb") as fh:
            labels = ingest.parse_idx(fh.read()).data
        fg = Dataset(features=images, labels=labels, task="multiclass", n_classes=10)
        records = []
        for p in params.pop("cifar_batches"):
            with open(p, "rb") as fh:
                records.extend(ingest.parse_cifar10(fh.read()))
        rule = "predecided" if variant.upper() == "II" else "any_remaining"
        spec = datagen.random_background_spec(
            datagen.pick_class_backgrounds(records, seed=params["seed"]),
            seed=params["seed"], shuffle_rule=rule)
        env1, env2, test = datagen.gen_cbmnist(variant, fg, spec, **params)
        return {"train": [env1, env2], "test": test}, None
    raise ConfigError(f"unknown generator {gen!r}")


def dataset_label(cfg: dict) -> str:
    ds = cfg["dataset"]
    if "generator" in ds:
        gen = ds["generator"]
        variant = ds.get("params", {}).get("variant")
        return f"{gen}:{variant}" if variant else gen
    manifest = Path(ds["dir"]) / "manifest.json"
    if manifest.exists():
        return json.loads(manifest.read_text()).get("label", ds["dir"])
    return ds["dir"]


def load_bundle(dirname: str):
    mpath = Path(dirname) / "manifest.json"
    if not mpath.exists():
        raise ConfigError(f"no manifest.json in {dirname}")
    manifest = json.loads(mpath.read_text())
    bundle = {}
    for role, entry in manifest["files"].items():
        if isinstance(entry, list):
            bundle[role] = [load_dataset(Path(dirname) / f) for f in entry]
        else:
            bundle[role] = load_dataset(Path(dirname) / entry)
    truth = None
    if "sem_truth" in manifest:
        t = manifest["sem_truth"]
        truth = datagen.SemGroundTruth(
            w_causal=np.array(t["w_causal"]), w_anticausal=np.array(t["w_anticausal"]),
            scramble=np.array(t["scramble"]), variant=t["variant"])
    return bundle, truth


def bundle_stats(bundle: dict) -> dict:
    pool = concat_datasets(bundle["train"])
    stats: dict = {"n_train": pool.n, "n_test": bundle["test"].n if "test" in bundle else 0}
    if pool.task != "regression":
        counts = np.bincount(pool.labels.astype(int), minlength=pool.n_classes)
        stats["class_balance"] = (counts / pool.n).tolist()
    if pool.is_shuffled is not None:
        stats["shuffled_fraction"] = float(pool.is_shuffled.mean())
    if pool.spurious_id is not None and pool.causal_id is not None:
        mi = mi_diagnostics(pool)
        stats["mi_label_spurious"] = mi.i_yz
        stats["mi_label_causal"] = mi.i_yx
        stats["mi_gap"] = mi.gap
    return stats


# ------------------------------------------------------------- commands ----

def cmd_gen(cfg: dict, out: str | None) -> int:
    out_dir = Path(out or cfg.get("out", "datasets"))
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = int(cfg.get("dataset", {}).get("params", {}).get("seed", cfg["seeds"][0]))
    if "generator" not in cfg["dataset"]:
        raise ConfigError("cmd gen needs 'dataset.generator'")
    bundle, truth = generate_bundle(cfg["dataset"], seed)
    files: dict = {}
    for role, entry in bundle.items():
        if isinstance(entry, list):
            names = []
            for i, d in enumerate(entry):
                name = f"{role}_env{i}.dsb"
                save_dataset(d, out_dir / name)
                names.append(name)
            files[role] = names
        else:
            name = f"{role}.dsb"
            save_dataset(entry, out_dir / name)
            files[role] = name
    manifest = {
        "label": dataset_label(cfg),
        "generator": cfg["dataset"]["generator"],
        "params": cfg["dataset"].get("params", {}),
        "seed": seed,
        "generator_version": CONFIG_VERSION,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "files": files,
        "stats": bundle_stats(bundle),
    }
    if truth is not None:
        manifest["sem_truth"] = {
            "variant": truth.variant,
            "w_causal": truth.w_causal.tolist(),
            "w_anticausal": truth.w_anticausal.tolist(),
            "scramble": truth.scramble.tolist(),
        }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {len(files)} roles to {out_dir}")
    return 0


def _run_one(cfg: dict, method: str, seed: int, out_dir: Path, label: str) -> dict:
    """One (method, seed) job; writes its artifacts and returns the result row."""
    job_dir = out_dir / f"{method}_seed{seed}"
    job_dir.mkdir(parents=True, exist_ok=True)
    result = {"method": method, "seed": seed, "dataset": label, "status": "ok"}
    try:
        if "dir" in cfg["dataset"]:
            bundle, truth = load_bundle(cfg["dataset"]["dir"])
        else:
            bundle, truth = generate_bundle(cfg["dataset"], seed)
        tc = train_config(cfg, seed)
        pipe = cfg["pipeline"]
        envs = bundle["train"]
        pool = concat_datasets(envs)
        validation = bundle.get("validation")
        trace = None
        partition = None
        selection: dict = {}

        if method == "ERM":
            model = run_erm(pool, tc)
        elif method == "WERM":
            model = run_werm(envs, tc)
        elif method == "IRM":
            if tc.lam_sweep and validation is not None:
                cands = [(lam, run_irm(envs, tc, lam=lam)) for lam in tc.lam_sweep]
                lam, model = select_model(cands, validation)
                selection["lam"] = lam
            else:
                model = run_irm(envs, tc)
        else:
            n_iters = int(pipe.get("n_iters", 9)) if method != "EIIL" else 1
            il_kind = "WERM" if method == "REIWERM" else "IRM"
            trace = run_reiil(pool, n_iters=n_iters, il_kind=il_kind, cfg=tc,
                              validation=validation)
            model = trace.final_model
            partition = trace.final_partition
            selection = dict(trace.selection)

        metrics = {"train_error": evaluate(model, pool)}
        if validation is not None:
            metrics["validation_error"] = evaluate(model, validation)
        if "test" in bundle:
            metrics["test_error"] = evaluate(model, bundle["test"])
            if bundle["test"].task != "regression":
                metrics["test_accuracy"] = 1.0 - metrics["test_error"]
        if truth is not None and isinstance(model, LinearModel):
            rep = causal_errors(model, truth)
            metrics["ce"], metrics["nce"] = rep.ce, rep.nce
        result["metrics"] = metrics
        if selection:
            result["selection"] = selection

        save_model(model, job_dir / "model.ckpt")
        if partition is not None:
            export_partition_csv(partition, job_dir / "partition.csv", data=pool)
        if trace is not None:
            _write_trace_csv(trace, job_dir / "trace.csv")
            result["n_iterations"] = len(trace.records)
            if trace.final_note:
                result["note"] = trace.final_note
    except EnvlearnError as e:
        result["status"] = "error"
        result["error"] = f"{type(e).__name__}: {e}"
    (job_dir / "results.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def _write_trace_csv(trace, path) -> None:
    cols = ["iteration", "majority_size", "minority_size", "ref_majority_error",
            "ref_minority_error", "minority_shuffled_fraction", "conjecture_gap",
            "ei_objective", "note"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for rec in trace.records:
            w.writerow(["" if getattr(rec, c) is None else getattr(rec, c) for c in cols])


def cmd_run(cfg: dict, out: str | None, seed_list: list[int] | None, jobs: int) -> int:
    out_dir = Path(out or cfg.get("out", "runs"))
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = seed_list if seed_list else [int(s) for s in cfg["seeds"]]
    label = dataset_label(cfg)
    tasks = [(method, seed) for method in config_methods(cfg) for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_one, cfg, m, s, out_dir, label) for m, s in tasks]
            results = [f.result() for f in futures]
    else:
        results = [_run_one(cfg, m, s, out_dir, label) for m, s in tasks]
    failed = [r for r in results if r["status"] != "ok"]
    for r in results:
        line = f"{r['method']} seed={r['seed']}: {r['status']}"
        if r["status"] == "ok" and "test_error" in r.get("metrics", {}):
            line += f" test_error={r['metrics']['test_error']:.4f}"
        print(line)
    return 1 if failed else 0


def cmd_report(run_dirs: list[str], out: str | None) -> int:
    results = []
    for d in run_dirs:
        for p in sorted(Path(d).rglob("results.json")):
            results.append((p.parent, json.loads(p.read_text())))
    if not results:
        raise ConfigError("no results.json found under the given directories")
    labels = {r["dataset"] for _, r in results}
    if len(labels) > 1:
        raise ConfigError(f"refusing to aggregate runs of different datasets: {sorted(labels)}")
    ok = [(p, r) for p, r in results if r["status"] == "ok"]

    out_dir = Path(out or "report")
    out_dir.mkdir(parents=True, exist_ok=True)
    by_method: dict[str, list] = {}
    for p, r in ok:
        by_method.setdefault(r["method"], []).append(r)
    metric_names = sorted({k for _, r in ok for k in r["metrics"]})
    with open(out_dir / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "method", "metric", "mean", "std", "n_runs"])
        for method in sorted(by_method):
            rows = by_method[method]
            for metric in metric_names:
                vals = [r["metrics"][metric] for r in rows if metric in r["metrics"]]
                if not vals:
                    continue
                mean = float(np.mean(vals))
                std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                w.writerow([rows[0]["dataset"], method, metric, repr(mean), repr(std), len(vals)])

    # bar-chart data: test accuracy (or error) per method
    with open(out_dir / "fig3.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mean_test_accuracy", "std_test_accuracy", "n_runs"])
        for method in sorted(by_method):
            vals = [r["metrics"].get("test_accuracy") for r in by_method[method]]
            vals = [v for v in vals if v is not None]
            if vals:
                std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                w.writerow([method, repr(float(np.mean(vals))), repr(std), len(vals)])

    # line data per iteration from the repeated-EI traces
    per_iter: dict[tuple[str, int], dict[str, list]] = {}
    for p, r in ok:
        tpath = p / "trace.csv"
        if not tpath.exists():
            continue
        with open(tpath, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (r["method"], int(row["iteration"]))
                slot = per_iter.setdefault(key, {"acc": [], "frac": []})
                if row["ref_minority_error"]:
                    slot["acc"].append(1.0 - float(row["ref_minority_error"]))
                if row["minority_shuffled_fraction"]:
                    slot["frac"].append(float(row["minority_shuffled_fraction"]))
    if per_iter:
        with open(out_dir / "fig4.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "iteration", "mean_minority_ref_accuracy",
                        "mean_minority_shuffled_fraction", "n_runs"])
            for (method, it) in sorted(per_iter):
                slot = per_iter[(method, it)]
                acc = repr(float(np.mean(slot["acc"]))) if slot["acc"] else ""
                frac = repr(float(np.mean(slot["frac"]))) if slot["frac"] else ""
                w.writerow([method, it, acc, frac, max(len(slot["acc"]), len(slot["frac"]))])
    print(f"report written to {out_dir}")
    return 0


def cmd_ei(model_path: str, data_path: str, out: str, steps: int, lr: float, seed: int) -> int:
    model = load_model(model_path)
    data = load_dataset(data_path)
    tc = TrainConfig(seed=seed, ei_steps=steps, ei_lr=lr)
    res = run_ei_step(model, data, tc)
    export_partition_csv(res.partition, out, data=data)
    n0, n1 = res.partition.sizes()
    flag = " (degenerate)" if res.degenerate else ""
    print(f"objective={res.final_objective!r} sizes={n0}/{n1}{flag} -> {out}")
    return 0


def cmd_selftest() -> int:
    from . import selftest
    return selftest.run()


# ------------------------------------------------------------------ main ----

def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="envlearn",
                                     description="environment inference / invariant learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate datasets from a config")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", default=None)

    p_run = sub.add_parser("run", help="run pipelines per seed")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seed-list", default=None,
                       help="comma-separated override of the config seeds")
    p_run.add_argument("--jobs", type=int, default=1)

    p_rep = sub.add_parser("report", help="aggregate results from run directories")
    p_rep.add_argument("run_dirs", nargs="+")
    p_rep.add_argument("--out", default=None)

    p_ei = sub.add_parser("ei", help="environment inference for a checkpoint on a dataset")
    p_ei.add_argument("--model", required=True)
    p_ei.add_argument("--data", required=True)
    p_ei.add_argument("--out", default="partition.csv")
    p_ei.add_argument("--steps", type=int, default=2000)
    p_ei.add_argument("--lr", type=float, default=0.01)
    p_ei.add_argument("--seed", type=int, default=0)

    sub.add_parser("selftest", help="run the quick oracle suite")

    args = parser.parse_args(argv)
    try:
        if args.command == "gen":
            return cmd_gen(load_config(args.config), args.out)
        if args.command == "run":
            seeds = None
            if args.seed_list:
                seeds = [int(s) for s in args.seed_list.split(",")]
            return cmd_run(load_config(args.config), args.out, seeds, args.jobs)
        if args.command == "report":
            return cmd_report(args.run_dirs, args.out)
        if args.command == "ei":
            return cmd_ei(args.model, args.data, args.out, args.steps, args.lr, args.seed)
        if args.command == "selftest":
            return cmd_selftest()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except EnvlearnError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
