"""Command-line entry point.

All options live in one JSON document (``--config``) whose keys can be
overridden with ``--set section.key=value``. The effective configuration
is written to ``<outdir>/config.resolved.json`` by every command.

Exit codes: 0 success, 2 configuration error, 3 input/output or data
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis
from .data import Normalizer, SynthParams, load_speed_csv, prepare, synth_generate, write_speed_csv
from .errors import (
    ChecksumMismatch,
    ConfigError,
    ConstantNode,
    DegreeZero,
    EmptyDataset,
    EmptyGraph,
    FractionError,
    MalformedCsv,
    NoConvergence,
    NonFinite,
    NonScalarLoss,
    NonUniformSpacing,
    ShapeError,
    TooShort,
    UnknownNode,
    VersionMismatch,
)
from .graph import read_edge_csv, write_edge_csv
from .model import ModelConfig, load_checkpoint
from .seeding import derive_seed
from .training import TrainConfig, evaluate

log = logging.getLogger("msgwtcn")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
CONFIG_ERRORS = (ConfigError, FractionError)
IO_ERRORS = (
    OSError, MalformedCsv, NonUniformSpacing, UnknownNode, VersionMismatch, ChecksumMismatch,
    EmptyGraph, DegreeZero, TooShort, ConstantNode, EmptyDataset, ShapeError,
)
NUMERIC_ERRORS = (NonFinite, NoConvergence, NonScalarLoss, FloatingPointError)


def default_config() -> dict:
    synth = SynthParams()
    return {
        "outdir": "out",
        "seed": 0,
        "seeds": [0, 1, 2],
        "checkpoint": None,
        "data": {
            "edges": None,
            "speeds": None,
            "split": [0.7, 0.1, 0.2],
            "normalization": "per_node",
        },
        "model": ModelConfig().to_dict(),
        "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
        "synth": {
            "topology": "grid",
            "steps": 4000,
            "width": 6,
            "height": 8,
            "n1": 20,
            "n2": 20,
            "bridges": 3,
            "highway_len": 10,
            "alpha": synth.alpha,
            "beta": synth.beta,
            "p": synth.p,
            "m": synth.m,
            "a": synth.a,
        },
        "evaluate": {"split": "test"},
        "analyze": {"percentile": 5.0},
        "ablate": {
            "subsets": None,
            "scale_sets": [[0.85, 0.85, 0.85], [3.85, 3.85, 3.85], [5.85, 5.85, 5.85], [0.85, 3.85, 5.85]],
        },
        "scan": {"grid": [0.35 + 0.5 * i for i in range(12)]},
    }


# config plumbing

# sections whose values are free-form mappings rather than fixed keys
_OPEN_KEYS = {("ablate", "subsets")}


def _merge(base: dict, override: dict, path=()) -> dict:
    for key, value in override.items():
        where = ".".join((*path, key))
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and (*path, key) not in _OPEN_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge(base[key], value, (*path, key))
        else:
            base[key] = value
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    override: dict = {}
    node = override
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = _parse_value(text)
    _merge(cfg, override)


def resolve_config(path: str | None, sets=(), seed: int | None = None, outdir: str | None = None) -> dict:
    cfg = default_config()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(cfg, user)
    for s in sets:
        _apply_set(cfg, s)
    if seed is not None:
        cfg["seed"] = seed
    if outdir is not None:
        cfg["outdir"] = outdir
    # validate eagerly so bad values fail before any work
    model_cfg(cfg)
    train_cfg(cfg)
    if cfg["data"]["normalization"] not in ("per_node", "global"):
        raise ConfigError("data.normalization must be 'per_node' or 'global'")
    return cfg


def model_cfg(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(cfg["model"])
    except TypeError as e:
        raise ConfigError(f"model config: {e}") from None


def train_cfg(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict({**cfg["train"], "seed": int(cfg["seed"])})
    except TypeError as e:
        raise ConfigError(f"train config: {e}") from None


def _flatten(d: dict, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def _keys_epilog() -> str:
    lines = ["config keys (defaults):"]
    lines += [f"  {k} = {json.dumps(v)}" for k, v in _flatten(default_config())]
    return "\n".join(lines)


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["outdir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.resolved.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _require(cfg: dict, key: str) -> str:
    value = cfg["data"][key]
    if not value:
        raise ConfigError(f"data.{key} must be set (path to the {key} CSV)")
    return value


def _load_data(cfg: dict, mcfg: ModelConfig):
    graph = read_edge_csv(_require(cfg, "edges"))
    series = load_speed_csv(_require(cfg, "speeds"), graph)
    data = prepare(series, mcfg.history, mcfg.horizon, cfg["data"]["split"],
                   per_node=cfg["data"]["normalization"] == "per_node")
    return graph, series, data


def _checkpoint_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / "model.ckpt"


def _write_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# commands


def cmd_gen_synth(cfg: dict) -> int:
    out = _outdir(cfg)
    sc = cfg["synth"]
    params = SynthParams(alpha=sc["alpha"], beta=sc["beta"], p=sc["p"], m=sc["m"], a=sc["a"])
    shape = {k: sc[k] for k in ("width", "height", "n1", "n2", "bridges", "highway_len")}
    seed = derive_seed(cfg["seed"], "synth")
    graph, series = synth_generate(sc["topology"], int(sc["steps"]), seed, params, **shape)
    write_edge_csv(graph, out / "edges.csv")
    write_speed_csv(series, out / "speeds.csv")
    _write_json({"seed": cfg["seed"], "derived_seed": seed, "synth": sc, "nodes": graph.n,
                 "steps": series.n_steps}, out / "manifest.json")
    print(json.dumps({"edges": str(out / "edges.csv"), "speeds": str(out / "speeds.csv"), "nodes": graph.n}))
    return 0


def cmd_train(cfg: dict) -> int:
    out = _outdir(cfg)
    mcfg, tcfg = model_cfg(cfg), train_cfg(cfg)
    graph, _, data = _load_data(cfg, mcfg)
    ckpt = _checkpoint_path(cfg, out)
    res = analysis.fit_and_score(graph, data, mcfg, tcfg, tcfg.seed,
                                 checkpoint_path=ckpt, history_path=out / "history.csv")
    summary = {"best_val_mae": res.val_mae, "test_mae": res.test_mae, "checkpoint": str(ckpt)}
    _write_json(summary, out / "train_summary.json")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _restore(cfg: dict, out: Path):
    ckpt = _checkpoint_path(cfg, out)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    model, extra = load_checkpoint(ckpt)
    return model, extra


def _split(cfg: dict, model):
    graph, _, data = _load_data(cfg, model.cfg)
    if tuple(graph.node_ids) != tuple(model.graph.node_ids):
        raise ShapeError("data graph does not match the checkpoint's graph")
    name = cfg["evaluate"]["split"]
    if name not in ("train", "val", "test"):
        raise ConfigError("evaluate.split must be one of train, val, test")
    return data, getattr(data, name)


def cmd_evaluate(cfg: dict) -> int:
    out = _outdir(cfg)
    model, extra = _restore(cfg, out)
    data, split = _split(cfg, model)
    # the normalizer stored at training time is authoritative
    norm = Normalizer.from_dict(extra["normalizer"]) if "normalizer" in extra else data.normalizer
    metrics = evaluate(model, split, norm)
    metrics.update({"split": cfg["evaluate"]["split"], "samples": len(split),
                    "persistence_mae": analysis.persistence_mae(split)})
    _write_json(metrics, out / "metrics.json")
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_predict(cfg: dict) -> int:
    out = _outdir(cfg)
    model, extra = _restore(cfg, out)
    data, split = _split(cfg, model)
    norm = Normalizer.from_dict(extra["normalizer"]) if "normalizer" in extra else data.normalizer
    pred = norm.invert(model.predict(split.inputs)[..., 0])  # (S, T, N)
    ids = model.graph.node_ids
    horizon = pred.shape[1]
    cols = list(ids) if horizon == 1 else [f"{n}@h{h + 1}" for h in range(horizon) for n in ids]
    path = out / "predictions.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["timestamp", *cols]) + "\n")
        for row, ti in zip(pred.reshape(len(pred), -1), split.target_index):
            fh.write(",".join([data.timestamps[ti], *(f"{v:.17g}" for v in row)]) + "\n")
    print(json.dumps({"predictions": str(path), "rows": int(len(pred))}))
    return 0


def cmd_analyze(cfg: dict) -> int:
    out = _outdir(cfg)
    model, _ = _restore(cfg, out)
    rows = analysis.diagonal_contribution_report(model)
    analysis.write_diagonal_report(rows, out / "diagonal_report.csv")
    links = analysis.link_importance(model, float(cfg["analyze"]["percentile"]))
    analysis.write_link_scores(links, out / "link_scores.csv")
    print(json.dumps({"diagonal_rows": len(rows), "link_rows": len(links),
                      "median_drop_by_scale": {str(model.cfg.scales[j]): v for j, v in
                                               analysis.median_drop_by_scale(rows).items()}}, sort_keys=True))
    return 0


def cmd_ablate(cfg: dict) -> int:
    out = _outdir(cfg)
    mcfg, tcfg = model_cfg(cfg), train_cfg(cfg)
    graph, series, _ = _load_data(cfg, mcfg)
    subsets = cfg["ablate"]["subsets"] or {"full": list(graph.node_ids)}
    if not isinstance(subsets, dict):
        raise ConfigError("ablate.subsets must map subset names to node id lists")
    result = analysis.ablation_run(graph, series, subsets, cfg["ablate"]["scale_sets"], mcfg, tcfg,
                                   seeds=cfg["seeds"], split=cfg["data"]["split"])
    analysis.write_ablation_table(result, out / "ablation.csv")
    print(json.dumps({"ablation": str(out / "ablation.csv"), "rows": len(result["scale_sets"]),
                      "columns": len(result["subsets"])}))
    return 0


def cmd_scale_scan(cfg: dict) -> int:
    out = _outdir(cfg)
    mcfg, tcfg = model_cfg(cfg), train_cfg(cfg)
    graph, _, data = _load_data(cfg, mcfg)
    rows = analysis.scale_scan(graph, data, cfg["scan"]["grid"], mcfg, tcfg, seeds=cfg["seeds"])
    analysis.write_scan_table(rows, out / "scale_scan.csv")
    print(json.dumps({"scan": str(out / "scale_scan.csv"), "rows": len(rows)}))
    return 0


COMMANDS = {
    "gen-synth": (cmd_gen_synth, "generate a synthetic road graph and speed series"),
    "train": (cmd_train, "train a model; writes checkpoint and history CSV"),
    "evaluate": (cmd_evaluate, "print MAE and RMSE of a checkpoint as JSON"),
    "predict": (cmd_predict, "write denormalized forecasts for a split"),
    "analyze": (cmd_analyze, "wavelet weight-matrix diagonal report and link scores"),
    "ablate": (cmd_ablate, "retrain over node subsets x scale sets"),
    "scale-scan": (cmd_scale_scan, "validation MAE of single-scale models over a grid"),
}


def build_parser() -> argparse.ArgumentParser:
    epilog = _keys_epilog()
    parser = argparse.ArgumentParser(prog="msgwtcn", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=epilog)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--outdir", help="output directory (overrides 'outdir')")
        p.add_argument("--seed", type=int, help="top-level seed (overrides 'seed')")
        p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. train.max_epochs=5 (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.sets, args.seed, args.outdir)
        return COMMANDS[args.command][0](cfg)
    except CONFIG_ERRORS as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except IO_ERRORS as e:
        print(f"input/output error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
