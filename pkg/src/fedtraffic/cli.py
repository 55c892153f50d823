"""Command-line entry point.

Subcommands: generate (synthetic data), train, evaluate, compare. Runs are
driven by a JSON config file (schema below); every training run writes a
manifest first so it can be replayed exactly.

Exit codes: 0 success, 1 usage/config/IO error, 2 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from .aggregation import AGGREGATOR_KINDS, AggregatorConfig
from .data import generate_synthetic, load_dataset, save_dataset
from .errors import ConfigError, FedTrafficError, TrainingDiverged
from .fedsim import (
    MODE_CENTRALIZED,
    MODE_FEDERATED,
    MODES,
    FedConfig,
    evaluate_checkpoints,
    run,
    run_centralized,
)
from .graph import GRAPH_BUILDERS, er_graph, load_graph, save_graph
from .model import GruArch

CONFIG_SCHEMA_VERSION = 1

# (default, required) per key; None default + required=True means "must appear"
_TOP_KEYS = {
    "schema_version": (None, True),
    "mode": (MODE_FEDERATED, False),
    "dataset": (None, True),
    "graph": (None, False),
    "symmetrize": (True, False),
    "binarize_threshold": (None, False),
    "arch": ({}, False),
    "rounds": (5, False),
    "local_epochs": (3, False),
    "batch_size": (128, False),
    "lr": (1e-3, False),
    "aggregator": ({}, False),
    "seed": (0, False),
    "workers": (1, False),
    "splits": ([0.7, 0.1, 0.2], False),
    "stride": (1, False),
    "grad_clip": (None, False),
    "precision": ("float64", False),
    "time_of_day": (False, False),
    "checkpoint_every": (0, False),
    "output_dir": (None, True),
}

_ARCH_KEYS = {"input_dim": 1, "hidden_dim": 100, "num_layers": 2,
              "horizon_in": 12, "horizon_out": 12}
_AGG_KEYS = {"kind": "fedavg", "hops": 1, "alpha": 0.8}


class _Parser(argparse.ArgumentParser):
    # usage errors map to exit code 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _check_keys(section: dict, allowed, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(sorted(unknown))}")


def resolve_config(raw: dict, base_dir: Path) -> dict:
    """Validate a raw config document and materialize every default."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config")
    resolved: dict = {}
    for key, (default, required) in _TOP_KEYS.items():
        if key in raw:
            resolved[key] = raw[key]
        elif required:
            raise ConfigError(f"config is missing required key {key!r}")
        else:
            resolved[key] = json.loads(json.dumps(default))  # fresh copy
    if resolved["schema_version"] != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {resolved['schema_version']!r}; expected {CONFIG_SCHEMA_VERSION}"
        )
    if resolved["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {resolved['mode']!r}")

    _check_keys(resolved["arch"], _ARCH_KEYS, "arch")
    arch = {**_ARCH_KEYS, **resolved["arch"]}
    resolved["arch"] = arch
    _check_keys(resolved["aggregator"], _AGG_KEYS, "aggregator")
    agg = {**_AGG_KEYS, **resolved["aggregator"]}
    if agg["kind"] not in AGGREGATOR_KINDS:
        raise ConfigError(f"aggregator.kind must be one of {AGGREGATOR_KINDS}, got {agg['kind']!r}")
    resolved["aggregator"] = agg

    if not isinstance(resolved["splits"], (list, tuple)) or len(resolved["splits"]) != 3:
        raise ConfigError("splits must be a list of three fractions")

    for key in ("dataset", "graph", "output_dir"):
        if resolved[key] is not None:
            resolved[key] = str((base_dir / resolved[key]).resolve())
    return resolved


def _fed_config(resolved: dict) -> FedConfig:
    return FedConfig(
        arch=GruArch(**resolved["arch"]),
        rounds=resolved["rounds"],
        local_epochs=resolved["local_epochs"],
        batch_size=resolved["batch_size"],
        lr=resolved["lr"],
        aggregator=AggregatorConfig(**resolved["aggregator"]),
        seed=resolved["seed"],
        mode=resolved["mode"],
        worker_count=resolved["workers"],
        splits=tuple(resolved["splits"]),
        stride=resolved["stride"],
        grad_clip=resolved["grad_clip"],
        precision=resolved["precision"],
        time_of_day=resolved["time_of_day"],
        checkpoint_every=resolved["checkpoint_every"],
    )


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return "sha256:" + digest.hexdigest()


def _load_inputs(resolved: dict):
    dataset = load_dataset(resolved["dataset"])
    graph = None
    if resolved["graph"] is not None:
        graph = load_graph(
            resolved["graph"],
            symmetrize=resolved["symmetrize"],
            binarize_threshold=resolved["binarize_threshold"],
        )
    elif resolved["mode"] == MODE_FEDERATED and resolved["aggregator"]["kind"] != "fedavg":
        raise ConfigError(
            f"aggregator {resolved['aggregator']['kind']!r} requires a graph file"
        )
    return dataset, graph


def _write_manifest(resolved: dict, out_dir: Path) -> Path:
    manifest = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "tool": "fedtraffic",
        "tool_version": __version__,
        "resolved_config": resolved,
        "input_digests": {
            "dataset": _sha256_file(resolved["dataset"]),
            "graph": _sha256_file(resolved["graph"]) if resolved["graph"] else None,
        },
        "seed": resolved["seed"],
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_manifest(path: Path) -> dict:
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}")
    for key in ("resolved_config", "input_digests"):
        if key not in manifest:
            raise ConfigError(f"manifest {path} is missing {key!r}")
    resolved = manifest["resolved_config"]
    for name, digest in manifest["input_digests"].items():
        if digest is None:
            continue
        current = _sha256_file(resolved[name])
        if current != digest:
            raise ConfigError(
                f"input {name!r} changed since the manifest was written "
                f"({current} != {digest}); refusing to replay"
            )
    return resolved


def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.graph == "er":
        graph = er_graph(args.nodes, args.er_p, args.seed)
    else:
        graph = GRAPH_BUILDERS[args.graph](args.nodes)
    dataset = generate_synthetic(
        n_nodes=args.nodes, n_steps=args.steps, graph=graph,
        seed=args.seed, missing_rate=args.missing_rate, interval_min=args.interval,
    )
    series_path = out / "series.csv"
    graph_path = out / "graph.csv"
    save_dataset(dataset, series_path)
    save_graph(graph, graph_path)
    observed = int(dataset.mask.sum())
    total = dataset.mask.size
    print(f"wrote {series_path} ({args.nodes} nodes x {args.steps} steps, "
          f"{total - observed} missing of {total})")
    print(f"wrote {graph_path} ({len(graph.edges)} directed edges, kind={args.graph})")
    return 0


def cmd_train(args) -> int:
    if args.replay:
        resolved = _load_manifest(Path(args.replay))
    else:
        config_path = Path(args.config)
        try:
            raw = json.loads(config_path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}")
        resolved = resolve_config(raw, config_path.parent)

    config = _fed_config(resolved)
    out_dir = Path(resolved["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset, graph = _load_inputs(resolved)
    _write_manifest(resolved, out_dir)

    log_path = out_dir / "results.jsonl"
    checkpoint_dir = out_dir / "checkpoints"
    dump_dir = out_dir / "param_dumps" if args.dump_params else None
    if config.mode == MODE_CENTRALIZED:
        reports = run_centralized(config, dataset, log_path=log_path,
                                  checkpoint_dir=checkpoint_dir)
    else:
        reports = run(config, graph, dataset, log_path=log_path,
                      checkpoint_dir=checkpoint_dir, param_dump_dir=dump_dir)

    from .report import plot_training, write_metrics_csv

    write_metrics_csv(reports, out_dir / "metrics.csv")
    if not args.no_figures:
        fig_dir = out_dir / "figures"
        fig_dir.mkdir(exist_ok=True)
        plot_training(reports, fig_dir / "rmse_by_round.png",
                      title=f"{config.mode}/{reports[-1].aggregator}")
    final = reports[-1]
    for split, metric in final.metrics.items():
        print(f"final {split}: mae={metric.mae:.4f} mape={metric.mape:.4f}% "
              f"rmse={metric.rmse:.4f} (n={metric.n_evaluated})")
    print(f"results log: {log_path}")
    return 0


def cmd_evaluate(args) -> int:
    config_path = Path(args.config)
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {config_path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {config_path} is not valid JSON: {exc}")
    resolved = resolve_config(raw, config_path.parent)
    config = _fed_config(resolved)
    dataset, _ = _load_inputs(resolved)
    checkpoint_dir = Path(args.checkpoints) if args.checkpoints else Path(resolved["output_dir"]) / "checkpoints"
    report, per_step = evaluate_checkpoints(config, dataset, checkpoint_dir, split_name=args.split)
    print(f"{args.split}: mae={report.mae:.10f} mape={report.mape:.6f}% "
          f"rmse={report.rmse:.10f} (n={report.n_evaluated})")
    print("rmse per step: " + " ".join(f"{v:.4f}" for v in per_step))
    return 0


def cmd_compare(args) -> int:
    config_path = Path(args.config)
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {config_path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {config_path} is not valid JSON: {exc}")
    resolved = resolve_config(raw, config_path.parent)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    valid = set(AGGREGATOR_KINDS) | {"local", "centralized"}
    for method in methods:
        if method not in valid:
            raise ConfigError(f"unknown method {method!r}; expected one of {sorted(valid)}")

    out_dir = Path(resolved["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for method in methods:
        variant = dict(resolved)
        if method in AGGREGATOR_KINDS:
            variant["mode"] = MODE_FEDERATED
            variant["aggregator"] = {**resolved["aggregator"], "kind": method}
        else:
            variant["mode"] = MODE_CENTRALIZED if method == "centralized" else "local"
        config = _fed_config(variant)
        dataset, graph = _load_inputs(variant)
        if config.mode == MODE_CENTRALIZED:
            reports = run_centralized(config, dataset)
        else:
            reports = run(config, graph, dataset)
        final = reports[-1]
        rows.append({
            "method": method,
            "val_rmse": final.metrics["val"].rmse,
            "test_rmse": final.metrics["test"].rmse,
            "test_mae": final.metrics["test"].mae,
            "test_mape": final.metrics["test"].mape,
        })
        print(f"{method:>12}: test rmse={final.metrics['test'].rmse:.4f} "
              f"mae={final.metrics['test'].mae:.4f}")

    from .report import plot_compare, write_compare_csv

    write_compare_csv(rows, out_dir / "compare.csv")
    if not args.no_figures:
        plot_compare(rows, out_dir / "compare.png")
    print(f"summary: {out_dir / 'compare.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedtraffic",
                     description="Federated traffic-forecasting simulator")
    parser.add_argument("--version", action="version", version=f"fedtraffic {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a synthetic dataset and graph")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--nodes", type=int, default=20)
    p_gen.add_argument("--steps", type=int, default=4000)
    p_gen.add_argument("--graph", choices=("ring", "grid", "er"), default="ring")
    p_gen.add_argument("--er-p", type=float, default=0.15, help="edge probability for --graph er")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--missing-rate", type=float, default=0.0)
    p_gen.add_argument("--interval", type=int, default=5, help="minutes per step")
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="run a training config")
    p_train.add_argument("config", nargs="?", help="JSON config path")
    p_train.add_argument("--replay", help="re-run an existing manifest.json")
    p_train.add_argument("--dump-params", action="store_true",
                         help="dump the server parameter matrix each round")
    p_train.add_argument("--no-figures", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="recompute metrics from checkpoints")
    p_eval.add_argument("config", help="JSON config path")
    p_eval.add_argument("--checkpoints", help="checkpoint directory (default: <output_dir>/checkpoints)")
    p_eval.add_argument("--split", choices=("train", "val", "test"), default="test")
    p_eval.set_defaults(func=cmd_evaluate)

    p_cmp = sub.add_parser("compare", help="run several aggregation strategies")
    p_cmp.add_argument("config", help="JSON config path")
    p_cmp.add_argument("--methods", default="fedavg,graphfedavg,mpfedavg,local",
                       help="comma-separated: fedavg,graphfedavg,mpfedavg,local,centralized")
    p_cmp.add_argument("--no-figures", action="store_true")
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and not args.replay and not args.config:
        parser.error("train needs a config path (or --replay MANIFEST)")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except FedTrafficError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
