"""Command-line surface: train, evaluate, ablate, analyze, generate.

One JSON config file describes a run (dataset, model, training); flags
override individual fields. Every command writes machine-readable artifacts
into the output directory and logs its seed. Wall-clock measurements live in
timing.json, apart from the deterministic report.json/history.csv pair, so
rerunning an identical config reproduces those files byte for byte.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import struct
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import data as dt
from . import graph as gr
from . import training as tr
from .model import CLS, LINK, RECON, ModelConfig, ModelParameters, TaskSpec

log = logging.getLogger("mtmv")

CHECKPOINT_MAGIC = b"MTMVCKPT"
CHECKPOINT_VERSION = 1

MODEL_DEFAULTS = {
    "layers": 2,
    "hidden": 32,
    "heads": 4,
    "alpha": 0.5,
    "feature_mode": "identity",
    "literal_post_softmax_scaling": False,
    "recon_stop_gradient": False,
}

TRAIN_DEFAULTS = {
    "learning_rate": 0.001,
    "dropout": 0.5,
    "max_epochs": 200,
    "patience": 10,
    "seed": 0,
    "link_train_fraction": 0.5,
    "label_train_fraction": 0.5,
    "lambda_link": 1.0,
    "lambda_cls": 0.1,
    "lambda_recon": 0.01,
    "mode": "multi",
    "binarize_adjacency": False,
    "batch_edges": None,
    "sample_nonedges": False,
}

GENERATE_DEFAULTS = {
    "nodes": 500,
    "communities": 5,
    "views": 3,
    "p_in": 0.1,
    "p_out": 0.01,
    "rho": 0.5,
    "seed": 0,
}


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


def _merge_section(defaults: dict, provided: dict, section: str) -> dict:
    unknown = set(provided) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(unknown)}")
    out = dict(defaults)
    out.update(provided)
    return out


def load_run_config(path: Path, overrides: argparse.Namespace) -> dict:
    """Read the JSON run config, apply defaults and flag overrides."""
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
    top_known = {"dataset", "out", "model", "train"}
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    cfg = {
        "dataset": raw.get("dataset"),
        "out": raw.get("out"),
        "model": _merge_section(MODEL_DEFAULTS, raw.get("model", {}), "model"),
        "train": _merge_section(TRAIN_DEFAULTS, raw.get("train", {}), "train"),
    }
    if getattr(overrides, "seed", None) is not None:
        cfg["train"]["seed"] = overrides.seed
    if getattr(overrides, "mode", None) is not None:
        cfg["train"]["mode"] = overrides.mode
    if getattr(overrides, "out", None) is not None:
        cfg["out"] = overrides.out
    if cfg["dataset"] is None:
        raise ConfigError("config is missing the 'dataset' path")
    if cfg["out"] is None:
        raise ConfigError("no output directory (config 'out' or --out)")
    return cfg


def build_configs(cfg: dict, g) -> tuple[ModelConfig, tr.TrainConfig]:
    m, t = cfg["model"], cfg["train"]
    tasks = [TaskSpec(LINK, t["lambda_link"])]
    if g.labels is not None and g.n_classes:
        tasks.append(TaskSpec(CLS, t["lambda_cls"]))
    if t["lambda_recon"] > 0:
        tasks.append(TaskSpec(RECON, t["lambda_recon"]))
    model_cfg = ModelConfig(views=g.k, layers=m["layers"], hidden=m["hidden"],
                            heads=m["heads"], alpha=m["alpha"], tasks=tasks,
                            feature_mode=m["feature_mode"],
                            dropout_rate=t["dropout"],
                            literal_post_softmax_scaling=m["literal_post_softmax_scaling"],
                            recon_stop_gradient=m["recon_stop_gradient"])
    train_cfg = tr.TrainConfig(
        learning_rate=t["learning_rate"], dropout=t["dropout"],
        max_epochs=t["max_epochs"], patience=t["patience"], seed=t["seed"],
        link_train_fraction=t["link_train_fraction"],
        label_train_fraction=t["label_train_fraction"],
        lambda_link=t["lambda_link"], lambda_cls=t["lambda_cls"],
        lambda_recon=t["lambda_recon"], mode=t["mode"],
        binarize_adjacency=t["binarize_adjacency"], batch_edges=t["batch_edges"],
        sample_nonedges=t["sample_nonedges"])
    return model_cfg, train_cfg


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def write_history_csv(history: list[dict], path: Path) -> None:
    lines = ["epoch,train_loss,train_link,train_cls,train_recon,val_loss"]
    for h in history:
        lines.append(",".join([str(h["epoch"]), _fmt(h["train_loss"]),
                               _fmt(h["train_link"]), _fmt(h["train_cls"]),
                               _fmt(h["train_recon"]), _fmt(h["val_loss"])]))
    path.write_text("\n".join(lines) + "\n")


def write_attention_csv(rows, path: Path) -> None:
    lines = ["mechanism,head,view,weight"]
    for mechanism, head, view, weight in rows:
        lines.append(f"{mechanism},{head},{view},{_fmt(weight)}")
    path.write_text("\n".join(lines) + "\n")


def write_timing(epoch_times: list[float], path: Path) -> None:
    times = np.asarray(epoch_times)
    _json_dump({"epoch_time_seconds": {"mean": float(times.mean()),
                                       "std": float(times.std())},
                "per_epoch": [float(t) for t in epoch_times]}, path)


def report_payload(report, cfg: dict) -> dict:
    payload = report.to_dict()
    payload["seed"] = cfg["train"]["seed"]
    payload["mode"] = cfg["train"]["mode"]
    payload["code_version"] = __version__
    return payload


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(path: Path, params: ModelParameters, model_cfg: ModelConfig,
                    train_cfg: tr.TrainConfig, dataset_meta: dict) -> None:
    named = params.named()
    header = {
        "code_version": __version__,
        "model": {**{k: v for k, v in asdict(model_cfg).items() if k != "tasks"},
                  "tasks": [[t.kind, t.weight] for t in model_cfg.tasks]},
        "train": asdict(train_cfg),
        "dataset": dataset_meta,
        "params": [{"name": name, "shape": list(t.shape)} for name, t in named],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    endian_tag = 1 if sys.byteorder == "little" else 2
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<B", endian_tag))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(t.data.tobytes())


def load_checkpoint(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    with path.open("rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        (endian_tag,) = struct.unpack("<B", fh.read(1))
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = {}
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arr = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
            file_little = endian_tag == 1
            if file_little != (sys.byteorder == "little"):
                arr = arr.byteswap()
            arrays[spec["name"]] = arr
    return header, arrays


def rebuild_from_checkpoint(header: dict, g) -> tuple[ModelConfig, tr.TrainConfig,
                                                      ModelParameters, tr.SplitPlan]:
    m = dict(header["model"])
    tasks = [TaskSpec(kind, weight) for kind, weight in m.pop("tasks")]
    model_cfg = ModelConfig(tasks=tasks, **m)
    train_cfg = tr.TrainConfig(**header["train"])
    ds = header["dataset"]
    if ds["n"] != g.n or ds["k"] != g.k or ds.get("classes") != g.n_classes:
        raise CheckpointError(
            f"checkpoint/dataset mismatch: checkpoint built for n={ds['n']}, "
            f"k={ds['k']}, classes={ds.get('classes')}; dataset has n={g.n}, "
            f"k={g.k}, classes={g.n_classes}")
    rng = np.random.default_rng(np.random.Philox(train_cfg.seed))
    plan = tr.split(g, train_cfg, rng)
    params = ModelParameters.init(model_cfg, g.n, link_out=g.k,
                                  n_classes=g.n_classes, rng=rng)
    return model_cfg, train_cfg, params, plan


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_dataset(path_str: str):
    path = Path(path_str)
    if not path.exists():
        raise FileNotFoundError(f"dataset path does not exist: {path}")
    return dt.load(path)


def cmd_train(args) -> int:
    cfg = load_run_config(Path(args.config), args)
    g = _load_dataset(cfg["dataset"])
    log.info("seed=%d", cfg["train"]["seed"])
    model_cfg, train_cfg = build_configs(cfg, g)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    result = tr.train(g, model_cfg, train_cfg)

    resolved = dict(cfg)
    resolved["code_version"] = __version__
    _json_dump(resolved, out / "config.resolved.json")
    _json_dump(report_payload(result.report, cfg), out / "report.json")
    write_history_csv(result.history, out / "history.csv")
    write_attention_csv(result.attention, out / "attention.csv")
    write_timing(result.epoch_times, out / "timing.json")
    save_checkpoint(out / "checkpoint", result.params, result.model_cfg,
                    result.train_cfg,
                    {"n": g.n, "k": g.k, "classes": g.n_classes})
    log.info("run artifacts written to %s", out)
    return 0


def cmd_evaluate(args) -> int:
    g = _load_dataset(args.dataset)
    header, arrays = load_checkpoint(Path(args.checkpoint))
    log.info("seed=%d", header["train"]["seed"])
    model_cfg, train_cfg, params, plan = rebuild_from_checkpoint(header, g)
    params.load_state(arrays)
    report, attention = tr.evaluate(g, params, model_cfg, train_cfg, plan,
                                    per_view_metrics=args.per_view_metrics,
                                    micro=args.micro)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["seed"] = header["train"]["seed"]
    payload["mode"] = header["train"]["mode"]
    payload["code_version"] = __version__
    _json_dump(payload, out / "report.json")
    write_attention_csv(attention, out / "attention.csv")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(Path(args.config), args)
    g = _load_dataset(cfg["dataset"])
    log.info("seed=%d", cfg["train"]["seed"])
    model_cfg, train_cfg = build_configs(cfg, g)
    variants = tuple(args.variants.split(","))
    max_threads = int(os.environ.get("MTMV_THREADS", "1"))
    rows = tr.run_ablation(g, model_cfg, train_cfg, variants=variants,
                           max_threads=max_threads)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    lines = ["variant,link_ap,link_auc,cls_accuracy,cls_precision_macro,"
             "cls_f1_macro,reconstruction_mse,mean_epoch_seconds"]
    for row in rows:
        link = row["link"] or {}
        cls = row["classification"] or {}
        lines.append(",".join([
            row["variant"], _fmt(link.get("ap")), _fmt(link.get("auc")),
            _fmt(cls.get("accuracy")), _fmt(cls.get("precision_macro")),
            _fmt(cls.get("f1_macro")), _fmt(row["reconstruction_mse"]),
            _fmt(row["mean_epoch_seconds"])]))
        for key, res in row["results"].items():
            suffix = row["variant"] if key == "run" else f"{row['variant']}-{key}"
            write_attention_csv(res.attention, out / f"attention_{suffix}.csv")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    resolved = dict(cfg)
    resolved["code_version"] = __version__
    resolved["variants"] = list(variants)
    _json_dump(resolved, out / "config.resolved.json")
    return 0


def cmd_analyze(args) -> int:
    g = _load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["view_a,view_b,agree_fraction,disagree_fraction"]
    for a in range(g.k):
        for b in range(a + 1, g.k):
            agree, disagree = gr.jaccard_agreement(g, a, b)
            lines.append(f"{a},{b},{_fmt(agree)},{_fmt(disagree)}")
    (out / "agreement.csv").write_text("\n".join(lines) + "\n")
    if g.labels is not None:
        lines = ["view,correlated_fraction"]
        for i in range(g.k):
            lines.append(f"{i},{_fmt(gr.task_correlation(g, i))}")
        (out / "correlation.csv").write_text("\n".join(lines) + "\n")
    else:
        log.info("dataset has no labels; correlation.csv skipped")
    return 0


def cmd_generate(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}")
    merged = _merge_section(GENERATE_DEFAULTS, raw, "generate")
    if args.seed is not None:
        merged["seed"] = args.seed
    log.info("seed=%d", merged["seed"])
    cfg = dt.SyntheticConfig(n=merged["nodes"], communities=merged["communities"],
                             k=merged["views"], p_in=merged["p_in"],
                             p_out=merged["p_out"], rho=merged["rho"],
                             seed=merged["seed"])
    g = dt.generate(cfg)
    dt.save(g, Path(args.out))
    log.info("dataset written to %s", args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtmv",
        description="Multi-task multi-view graph learning: train, evaluate, "
                    "ablate, analyze, generate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a JSON config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--out")
    p_train.add_argument("--mode", choices=list(tr.MODES))
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--per-view-metrics", action="store_true")
    p_eval.add_argument("--micro", action="store_true")
    p_eval.set_defaults(fn=cmd_evaluate)

    p_ablate = sub.add_parser("ablate", help="train several variants and compare")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--variants", default="full,nva,nta,equ,single")
    p_ablate.add_argument("--seed", type=int)
    p_ablate.add_argument("--out")
    p_ablate.set_defaults(fn=cmd_ablate)

    p_analyze = sub.add_parser("analyze", help="view agreement / label correlation tables")
    p_analyze.add_argument("--dataset", required=True)
    p_analyze.add_argument("--out", required=True)
    p_analyze.set_defaults(fn=cmd_analyze)

    p_gen = sub.add_parser("generate", help="write a synthetic multi-view dataset")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(fn=cmd_generate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FileNotFoundError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CheckpointError, dt.DatasetFormatError, ValueError, tr.DivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
