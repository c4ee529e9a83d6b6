"""Config-driven experiment command line.

Subcommands:
  train        run one experiment mode, writing a run directory
  gen-data     render a dataset file plus a label-count report
  dump-alphas  sorted mixing weights of a stitched checkpoint, as CSV
  gradcheck    finite-difference check of a small stitched network
  report       compare finished runs against a baseline run

Exit codes: 0 success, 2 usage/validation error, 3 numerical divergence
(gradcheck returns 1 when the check itself fails).

Configs are JSON with a ``schema_version`` field; see the README for the
schema. ``--seed`` overrides the config's training seed (or the generator
seed for gen-data), which is how sweeps over seeds are scripted.
"""

from __future__ import annotations

import argparse
import copy
import os
import sys
import time
from dataclasses import asdict, replace

import numpy as np

from . import jsonio, reports
from ._kernels import BACKEND
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .datagen import DataConfigError, DatasetConfig, generate, load_dataset, save_dataset, starve
from .gradcheck import check_network, draw_safe_batch
from .layers import LayerSpec
from .network import StitchedNetwork, build_one_task, build_split, init_networks, stitch
from .specs import NetworkSpec, default_network_spec, enumerate_splits, two_block_network_spec
from .training import TrainConfig, ensemble_eval, evaluate, train

SCHEMA_VERSION = 1
MODES = ("one_task_A", "one_task_B", "ensemble", "split", "split_all", "cross_stitch")


class UsageError(Exception):
    """Bad config or arguments; maps to exit code 2."""


def _load_config(path) -> dict:
    if path is None:
        raise UsageError("--config is required for this command")
    try:
        cfg = jsonio.load_file(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"unreadable config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a JSON object")
    version = cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise UsageError(f"unsupported config schema_version {version}")
    return cfg


def _dataset_from_config(cfg: dict, seed_override=None):
    block = cfg.get("dataset")
    if not isinstance(block, dict):
        raise UsageError("config needs a 'dataset' section")
    if "path" in block:
        try:
            ds = load_dataset(block["path"])
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot load dataset {block['path']}: {exc}") from exc
    elif "generator" in block:
        try:
            gen_cfg = DatasetConfig(**block["generator"])
        except (TypeError, DataConfigError) as exc:
            raise UsageError(f"bad generator config: {exc}") from exc
        seed = block.get("seed", 0) if seed_override is None else seed_override
        ds = generate(gen_cfg, int(seed))
    else:
        raise UsageError("dataset section needs either 'path' or 'generator'")
    if "starve" in block:
        sb = block["starve"]
        try:
            ds = starve(ds, sb["classes"], sb["keep_fraction"], int(sb.get("seed", 0)))
        except (KeyError, ValueError) as exc:
            raise UsageError(f"bad starve config: {exc}") from exc
    summary = {
        "hash": jsonio.config_hash({
            "config": asdict(ds.config), "seed": ds.seed, "starve": ds.starve_report,
        }),
        "n": int(ds.config.n),
        "classes_a": int(ds.config.classes_a),
        "classes_b": int(ds.config.classes_b),
        "counts_a_train": [int(c) for c in ds.counts_a("train")],
        "counts_b_train_masked": [int(c) for c in ds.counts_b("train", masked=True)],
    }
    return ds, summary


_PRESETS = {"default": default_network_spec, "two_block": two_block_network_spec}


def _network_spec_from_config(cfg: dict, classes: int, input_shape) -> NetworkSpec:
    block = cfg.get("network", {"preset": "default"})
    if "preset" in block:
        maker = _PRESETS.get(block["preset"])
        if maker is None:
            raise UsageError(f"unknown network preset {block['preset']!r}")
        return maker(classes=classes, input_shape=tuple(input_shape))
    try:
        layers = tuple(LayerSpec(**d) for d in block["layers"])
        spec = NetworkSpec(layers, tuple(block.get("input_shape", input_shape)),
                           tuple(block["stitch_sites"]) if "stitch_sites" in block else None)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad network config: {exc}") from exc
    if tuple(spec.input_shape) != tuple(input_shape):
        raise UsageError(
            f"network input_shape {spec.input_shape} does not match dataset {tuple(input_shape)}"
        )
    return spec.with_classes(classes)


def _train_config_from(cfg: dict, seed_override=None) -> TrainConfig:
    block = dict(cfg.get("train", {}))
    alpha = cfg.get("alpha", {})
    if "lr_scale" in alpha:
        block["alpha_lr_scale"] = alpha["lr_scale"]
    if "freeze" in alpha:
        block["freeze_alphas"] = bool(alpha["freeze"])
    if seed_override is not None:
        block["seed"] = seed_override
    try:
        return TrainConfig(**block)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train config: {exc}") from exc


def _dtype_from(cfg: dict):
    precision = cfg.get("precision", "float32")
    if precision not in ("float32", "float64"):
        raise UsageError(f"precision must be float32 or float64, got {precision!r}")
    return np.dtype(precision)


def _resolved_config(cfg: dict, seed: int) -> dict:
    resolved = copy.deepcopy(cfg)
    resolved.pop("out", None)
    resolved.setdefault("train", {})["seed"] = int(seed)
    return resolved


def _hash_of(resolved: dict) -> str:
    return jsonio.config_hash(resolved)


def _run_single(model, dataset, tc: TrainConfig, out_dir: str, resolved: dict,
                ds_summary: dict, mode: str) -> int:
    """Train one model and write the standard run-directory artifacts."""
    os.makedirs(out_dir, exist_ok=True)
    cfg_hash = _hash_of(resolved)
    t0 = time.time()
    model, history = train(model, dataset, tc)
    outputs = [reports.METRICS_CSV, reports.CHECKPOINT_FILE, reports.MANIFEST_FILE]
    reports.write_metrics_csv(os.path.join(out_dir, reports.METRICS_CSV), history,
                              cfg_hash, tc.seed)
    if isinstance(model, StitchedNetwork):
        reports.write_alpha_snapshot_csv(os.path.join(out_dir, reports.ALPHAS_CSV),
                                         history, cfg_hash, tc.seed)
        reports.write_sorted_alpha_csv(os.path.join(out_dir, reports.SORTED_ALPHAS_CSV),
                                       model.units.values(), cfg_hash, tc.seed)
        outputs += [reports.ALPHAS_CSV, reports.SORTED_ALPHAS_CSV]
    save_checkpoint(model, os.path.join(out_dir, reports.CHECKPOINT_FILE),
                    extra={"config_hash": cfg_hash, "seed": tc.seed, "mode": mode})
    status = "diverged" if history.diverged else "ok"
    if not history.diverged:
        metrics = {split: evaluate(model, dataset, split) for split in ("val", "test")}
        reports.write_final_metrics(os.path.join(out_dir, reports.FINAL_METRICS_FILE),
                                    metrics, cfg_hash, tc.seed)
        outputs.append(reports.FINAL_METRICS_FILE)
    reports.write_manifest(os.path.join(out_dir, reports.MANIFEST_FILE), {
        "schema_version": SCHEMA_VERSION,
        "command": "train",
        "mode": mode,
        "config": resolved,
        "config_hash": cfg_hash,
        "seed": tc.seed,
        "wall_time_s": time.time() - t0,
        "backend": BACKEND,
        "dataset": ds_summary,
        "status": status,
        "diverged_at": history.diverged_at,
        "outputs": sorted(outputs),
    })
    return 3 if history.diverged else 0


def _alpha_block(cfg: dict) -> dict:
    block = dict(cfg.get("alpha", {}))
    block.setdefault("alpha_s", 0.9)
    block.setdefault("alpha_d", 0.1)
    block.setdefault("granularity", "per_channel")
    block.setdefault("init", "common_init")
    return block


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    mode = cfg.get("mode")
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}, got {mode!r}")
    out_dir = args.out or cfg.get("out")
    if not out_dir:
        raise UsageError("an output directory is required (--out or config 'out')")
    dataset, ds_summary = _dataset_from_config(cfg)
    tc = _train_config_from(cfg, args.seed)
    dtype = _dtype_from(cfg)
    resolved = _resolved_config(cfg, tc.seed)
    input_shape = dataset.inputs.shape[1:]

    if mode in ("one_task_A", "one_task_B"):
        task = "A" if mode == "one_task_A" else "B"
        classes = dataset.config.classes_a if task == "A" else dataset.config.classes_b
        spec = _network_spec_from_config(cfg, classes, input_shape)
        model = build_one_task(spec, tc.seed, task=task, dtype=dtype)
        return _run_single(model, dataset, tc, out_dir, resolved, ds_summary, mode)

    if mode == "ensemble":
        task = cfg.get("ensemble_task", "A")
        if task not in ("A", "B"):
            raise UsageError(f"ensemble_task must be 'A' or 'B', got {task!r}")
        classes = dataset.config.classes_a if task == "A" else dataset.config.classes_b
        spec = _network_spec_from_config(cfg, classes, input_shape)
        os.makedirs(out_dir, exist_ok=True)
        t0 = time.time()
        members = []
        status = 0
        for i in range(2):
            seed_i = tc.seed + i
            tc_i = replace(tc, seed=seed_i)
            member = build_one_task(spec, seed_i, task=task, dtype=dtype)
            sub = os.path.join(out_dir, f"member_{i + 1}")
            member_mode = "one_task_A" if task == "A" else "one_task_B"
            sub_cfg = _resolved_config(cfg, seed_i)
            sub_cfg["mode"] = member_mode
            rc = _run_single(member, dataset, tc_i, sub, sub_cfg, ds_summary, member_mode)
            status = max(status, rc)
            members.append(member)
        cfg_hash = _hash_of(resolved)
        if status == 0:
            metrics = {split: {task: ensemble_eval(members[0], members[1], dataset, split)}
                       for split in ("val", "test")}
            reports.write_final_metrics(os.path.join(out_dir, reports.FINAL_METRICS_FILE),
                                        metrics, cfg_hash, tc.seed)
        reports.write_manifest(os.path.join(out_dir, reports.MANIFEST_FILE), {
            "schema_version": SCHEMA_VERSION, "command": "train", "mode": mode,
            "config": resolved, "config_hash": cfg_hash, "seed": tc.seed,
            "wall_time_s": time.time() - t0, "backend": BACKEND, "dataset": ds_summary,
            "status": "ok" if status == 0 else "diverged",
            "outputs": ["member_1", "member_2", reports.FINAL_METRICS_FILE,
                        reports.MANIFEST_FILE],
        })
        return status

    if mode == "split":
        k = cfg.get("split_k")
        spec = _network_spec_from_config(cfg, dataset.config.classes_a, input_shape)
        if not isinstance(k, int) or not 0 <= k <= spec.n_non_head:
            raise UsageError(f"split_k must be an integer in [0, {spec.n_non_head}]")
        arch = enumerate_splits(spec)[k]
        model = build_split(arch, tc.seed, classes_b=dataset.config.classes_b, dtype=dtype)
        return _run_single(model, dataset, tc, out_dir, resolved, ds_summary, mode)

    if mode == "split_all":
        spec = _network_spec_from_config(cfg, dataset.config.classes_a, input_shape)
        archs = enumerate_splits(spec)
        os.makedirs(out_dir, exist_ok=True)
        t0 = time.time()
        cfg_hash = _hash_of(resolved)
        rows = []
        status = 0
        for arch in archs:
            k = arch.split_index
            seed_k = tc.seed + k  # each split depth trains with its own seed
            tc_k = replace(tc, seed=seed_k)
            model = build_split(arch, seed_k, classes_b=dataset.config.classes_b, dtype=dtype)
            sub = os.path.join(out_dir, f"split_{k}")
            sub_cfg = _resolved_config(cfg, seed_k)
            sub_cfg["mode"] = "split"
            sub_cfg["split_k"] = k
            rc = _run_single(model, dataset, tc_k, sub, sub_cfg, ds_summary, "split")
            status = max(status, rc)
            if rc == 0:
                test = evaluate(model, dataset, "test")
                for task in ("A", "B"):
                    m = test[task]
                    rows.append((f"split_{k}", k, task, m.overall_accuracy,
                                 m.mean_per_class_accuracy, m.loss))
        reports.write_comparison_csv(os.path.join(out_dir, reports.COMPARISON_CSV),
                                     rows, cfg_hash, tc.seed)
        reports.write_manifest(os.path.join(out_dir, reports.MANIFEST_FILE), {
            "schema_version": SCHEMA_VERSION, "command": "train", "mode": mode,
            "config": resolved, "config_hash": cfg_hash, "seed": tc.seed,
            "wall_time_s": time.time() - t0, "backend": BACKEND, "dataset": ds_summary,
            "status": "ok" if status == 0 else "diverged",
            "outputs": [f"split_{a.split_index}" for a in archs] + [reports.COMPARISON_CSV,
                                                                    reports.MANIFEST_FILE],
        })
        return status

    # cross_stitch
    alpha = _alpha_block(cfg)
    if alpha["init"] == "task_init":
        if not alpha.get("checkpoint_a") or not alpha.get("checkpoint_b"):
            raise UsageError("cross_stitch with task_init requires checkpoint_a and checkpoint_b")
        try:
            net_a, net_b = init_networks("task_init", checkpoint_a=alpha["checkpoint_a"],
                                         checkpoint_b=alpha["checkpoint_b"])
        except (CheckpointError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
    elif alpha["init"] == "common_init":
        spec = _network_spec_from_config(cfg, dataset.config.classes_a, input_shape)
        net_a, net_b = init_networks("common_init", spec=spec, seed=tc.seed,
                                     classes_b=dataset.config.classes_b, dtype=dtype)
    else:
        raise UsageError(f"alpha init must be task_init or common_init, got {alpha['init']!r}")
    try:
        model = stitch(net_a, net_b, sites=alpha.get("sites"),
                       granularity=alpha["granularity"], alpha_s=alpha["alpha_s"],
                       alpha_d=alpha["alpha_d"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return _run_single(model, dataset, tc, out_dir, resolved, ds_summary, mode)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    if "dataset" not in cfg or "generator" not in cfg.get("dataset", {}):
        raise UsageError("gen-data needs a dataset section with a 'generator' block")
    if not args.out:
        raise UsageError("gen-data requires --out")
    ds, summary = _dataset_from_config(cfg, seed_override=args.seed)
    os.makedirs(args.out, exist_ok=True)
    data_path = os.path.join(args.out, "dataset.json")
    save_dataset(ds, data_path)
    jsonio.dump_file({
        "schema_version": SCHEMA_VERSION, "command": "gen-data",
        "config_hash": summary["hash"], "seed": ds.seed, "dataset": summary,
    }, os.path.join(args.out, "report.json"))
    print(f"wrote {data_path}")
    print("task-B train labels per class (mask-true):",
          summary["counts_b_train_masked"])
    return 0


def cmd_dump_alphas(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, StitchedNetwork) or not model.units:
        raise UsageError(f"checkpoint {args.checkpoint} holds no cross-stitch units")
    payload = jsonio.load_file(args.checkpoint)
    meta = payload.get("meta", {})
    cfg_hash = meta.get("config_hash", jsonio.config_hash(payload.get("stitched", {}).get(
        "net_a", {}).get("spec", {})))
    seed = meta.get("seed", model.net_a.seed_lineage.get("init_seed", 0))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, reports.SORTED_ALPHAS_CSV)
        reports.write_sorted_alpha_csv(path, model.units.values(), cfg_hash, seed)
        print(f"wrote {path}")
    else:
        sys.stdout.write("".join(reports.sorted_alpha_lines(model.units.values(),
                                                            cfg_hash, seed)))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    batch_size = int(cfg.get("batch", 4))
    eps = float(cfg.get("eps", 1e-6))
    tol = float(cfg.get("tol", 1e-5))
    alpha = _alpha_block(cfg)
    classes = int(cfg.get("classes", 3))
    input_shape = tuple(cfg.get("input_shape", (1, 16, 16)))
    if "network" in cfg:
        spec = _network_spec_from_config(cfg, classes, input_shape)
    else:
        spec = two_block_network_spec(classes=classes, input_shape=input_shape)
    net_a, net_b = init_networks("common_init", spec=spec, seed=seed, dtype=np.float64)
    model = stitch(net_a, net_b, granularity=alpha["granularity"],
                   alpha_s=alpha["alpha_s"], alpha_d=alpha["alpha_d"])
    if model.param_count() > 25000:
        raise UsageError(f"network too large for exhaustive checking "
                         f"({model.param_count()} parameters)")
    batch = draw_safe_batch(model, batch_size, seed, spec.head.classes, spec.head.classes)
    report = check_network(model, batch, eps=eps, tol=tol)
    print(report.summary())
    return 0 if report.passed else 1


def cmd_report(args) -> int:
    try:
        baseline = reports.load_run(args.baseline)
        runs = [reports.load_run(d) for d in args.runs]
        rep = reports.comparison_report(runs, baseline, split=args.split)
    except (reports.RunLoadError, OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    print(reports.format_report_text(rep))
    if args.out:
        for path in reports.write_report_csvs(args.out, rep):
            print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stitchnet",
                                     description="two-task cross-stitch experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one experiment mode")
    p_train.add_argument("--config", required=True, help="JSON experiment config")
    p_train.add_argument("--seed", type=int, default=None, help="override the training seed")
    p_train.add_argument("--out", default=None, help="run output directory")
    p_train.set_defaults(func=cmd_train)

    p_gen = sub.add_parser("gen-data", help="render a dataset file")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--seed", type=int, default=None, help="override the generator seed")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.set_defaults(func=cmd_gen_data)

    p_dump = sub.add_parser("dump-alphas", help="sorted mixing weights of a checkpoint")
    p_dump.add_argument("checkpoint")
    p_dump.add_argument("--out", default=None, help="output directory (default: stdout)")
    p_dump.set_defaults(func=cmd_dump_alphas)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_gc.add_argument("--config", default=None)
    p_gc.add_argument("--seed", type=int, default=None)
    p_gc.set_defaults(func=cmd_gradcheck)

    p_rep = sub.add_parser("report", help="compare runs against a baseline")
    p_rep.add_argument("runs", nargs="+", help="run directories")
    p_rep.add_argument("--baseline", required=True, help="baseline run directory")
    p_rep.add_argument("--split", default="test", choices=("val", "test"))
    p_rep.add_argument("--out", default=None, help="directory for report CSVs")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DataConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
