"""nodecaps CLI entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .capsules import forward
from .config import (
    CACHE_DIR,
    CONFIG_DIR,
    ENV_FILE,
    OUTPUT_DIR,
    TrainConfig,
    load_train_config,
    preset_for,
)
from .data_io import SplitSpec, generate_split, load_dataset, resolve_manifest, write_dataset
from .errors import DivergenceError, NodeCapsError, ValidationError
from .evaluation import RunReport, RunResult, evaluate, filter_summary, parameter_sweep
from .explain import export_explanations, write_explanations
from .filenames import (
    CHECKPOINT_FILE,
    CONFIG_FILE,
    FILTER_STATS_FILE,
    HISTORY_FILE,
    REPORT_FILE,
    run_name,
    sanitize_filename,
    value_slug,
)
from .filter_cache import FilterCache, build_filter, cache_key
from .filters import HopPowerSet, filter_stats
from .gradcheck import TOLERANCE, corrupted_adjoint, passed, run_gradcheck
from .graph import SPLIT_NAMES
from .logs import setup_logging
from .synthetic import make_sbm
from .training import load_checkpoint, prepare_features, save_checkpoint, train, write_history

log = logging.getLogger("nodecaps.cli")

# Valid config keys and their env var names
CONFIG_KEYS = {
    "data_dir": "NODECAPS_DATA_DIR",
    "output_dir": "NODECAPS_OUTPUT_DIR",
    "cache_dir": "NODECAPS_CACHE_DIR",
    "log_dir": "NODECAPS_LOG_DIR",
    "dense_ppr_cap": "NODECAPS_DENSE_PPR_CAP",
    "workers": "NODECAPS_WORKERS",
}

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_USAGE = 2


class UsageError(NodeCapsError):
    kind = "usage"


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _parse_value(raw: str, kind: type) -> Any:
    if raw.lower() in ("none", "null"):
        return None
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValidationError(f"expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ValidationError(f"expected {kind.__name__}, got {raw!r}") from None


def _overrides(cfg: TrainConfig, pairs: Sequence[str]) -> dict[str, Any]:
    out = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        out[key.strip()] = _parse_value(raw.strip(), cfg.field_type(key.strip()))
    return out


def _effective_config(args, dataset_name: str) -> TrainConfig:
    """Preset or config file, then --set overrides, then dedicated flags."""
    cfg = load_train_config(args.config) if args.config else preset_for(dataset_name)
    cfg = cfg.replace(**_overrides(cfg, args.set or []))
    direct = {}
    if getattr(args, "epochs", None) is not None:
        direct["epochs"] = args.epochs
    if getattr(args, "split_seed", None) is not None:
        direct["split_seed"] = args.split_seed
    if getattr(args, "weight_seed", None) is not None:
        direct["seed"] = args.weight_seed
    return cfg.replace(**direct)


def _load(dataset: str, cfg: TrainConfig | None = None):
    manifest = resolve_manifest(dataset)
    return load_dataset(
        manifest, row_normalize_features=bool(cfg and cfg.row_normalize_features)
    )


def _with_split(ds, cfg: TrainConfig):
    spec = SplitSpec(cfg.per_class_train, cfg.val_size, cfg.split_seed)
    return ds.with_splits(generate_split(ds, spec))


def _cache(args) -> FilterCache | None:
    return None if getattr(args, "no_cache", False) else FilterCache(CACHE_DIR)


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_prepare_filter(args) -> int:
    if args.mode == "attention" and (args.alpha is not None or args.truncate is not None):
        raise UsageError("--alpha and --truncate only apply to --mode ppr")
    if args.mode == "ppr" and args.max_hop is not None:
        raise UsageError("--max-hop only applies to --mode attention")

    cfg = preset_for(args.dataset)
    filter_overrides = {"mode": args.mode, "final_sparsify": args.final_sparsify}
    for flag, key in (
        ("max_hop", "max_hop"),
        ("alpha", "alpha"),
        ("truncate", "truncation"),
        ("sparsify", "sparsify"),
    ):
        value = getattr(args, flag)
        if value is not None:
            filter_overrides[key] = value
    spec = cfg.replace(**{f"filter.{k}": v for k, v in filter_overrides.items()}).filter

    ds = _load(args.dataset)
    cache = FilterCache(args.out or CACHE_DIR)
    built = build_filter(ds.adjacency, spec, cache)
    location = cache.location(cache_key(ds.adjacency, spec))

    if isinstance(built, HopPowerSet):
        stats = {f"hop{h}": filter_stats(m) for h, m in zip(built.hops, built.matrices)}
    else:
        stats = {"ppr": filter_stats(built)}
    _write_json(location / FILTER_STATS_FILE, {"filter": spec.to_dict(), "stats": stats})

    if cache.hits:
        print(f"♻️  Cache hit: {location}")
    else:
        print(f"💾 Filter written: {location}")
    for name, s in stats.items():
        print(f"   {name}: nnz={s['nnz']} mean row nnz={s['mean_row_nnz']:.2f} max={s['max_row_nnz']}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds_raw = _load(args.dataset)
    cfg = _effective_config(args, ds_raw.name)
    if cfg.row_normalize_features:
        ds_raw = _load(args.dataset, cfg)
    ds = _with_split(ds_raw, cfg)

    out_dir = Path(args.out_dir or OUTPUT_DIR / run_name(ds.name, cfg.filter.mode, cfg.split_seed, cfg.seed))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / CONFIG_FILE, cfg.to_dict())

    filter = build_filter(ds.adjacency, cfg.filter, _cache(args))
    params, history = train(ds, cfg, filter=filter)
    save_checkpoint(params, cfg, out_dir / CHECKPOINT_FILE, epoch=history.best_epoch)
    write_history(history, out_dir / HISTORY_FILE)

    test_mask = ds.mask("test")
    test_acc = evaluate(params, ds, test_mask, cfg, filter=filter) if test_mask.any() else float("nan")
    report = RunReport(
        dataset=ds.name,
        config=cfg.to_dict(),
        runs=[
            RunResult(
                cfg.split_seed,
                cfg.seed,
                test_acc,
                history.best_val_acc,
                history.best_epoch,
                history.seconds,
                history=str(out_dir / HISTORY_FILE),
            )
        ],
        wall_seconds=history.seconds,
        filter_stats=filter_summary(filter),
    )
    report.write(out_dir / REPORT_FILE)

    print(f"✅ Trained {ds.name} for {cfg.epochs} epochs (best epoch {history.best_epoch})")
    print(f"   test accuracy: {test_acc:.4f}")
    print(f"📁 {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    if args.split_seed is not None:
        cfg = cfg.replace(split_seed=args.split_seed)
    ds = _with_split(_load(args.dataset, cfg), cfg)
    acc = evaluate(params, ds, ds.mask(args.split), cfg, filter=build_filter(ds.adjacency, cfg.filter, _cache(args)))
    print(f"{args.split} accuracy: {acc:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    ds = _load(args.dataset)
    cfg = _effective_config(args, ds.name)
    kind = cfg.field_type(args.param)
    values = [_parse_value(v.strip(), kind) for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values must list at least one value")

    out_dir = Path(args.out or OUTPUT_DIR / (sanitize_filename(f"{ds.name}-sweep-{args.param}") or "sweep"))
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = parameter_sweep(
        ds, cfg, args.param, values, args.split_seeds, args.seeds,
        workers=args.workers, cache=_cache(args), history_dir=out_dir,
    )
    summary = []
    for value, report in zip(values, reports):
        report.write(out_dir / f"report-{value_slug(value)}.json")
        summary.append({"value": value, "mean": report.mean, "std": report.std, "runs": len(report.runs)})
        print(f"   {args.param}={value}: {report.mean:.4f} ± {report.std:.4f} ({len(report.runs)} runs)")
    _write_json(out_dir / "sweep.json", {"param": args.param, "results": summary})
    print(f"📁 {out_dir}")
    return EXIT_OK


def cmd_explain(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    ds = _load(args.dataset, cfg)
    filter = build_filter(ds.adjacency, cfg.filter, _cache(args))
    caps, state = forward(prepare_features(ds, cfg), filter, params, cfg.routing_iters)
    bundle = export_explanations(
        params, state, filter, cfg.filter, labels=ds.labels, target_class=args.target_class, top=args.top
    )
    out_dir = Path(args.out_dir or Path(args.checkpoint).parent / "explain")
    write_explanations(bundle, out_dir, class_caps=caps, labels=ds.labels, embedding_kind=args.embeddings)
    for hop, weight in bundle.hop_attention:
        print(f"   hop {hop}: {weight:.4f}")
    print(f"📁 {out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.corrupt_adjoint:
        with corrupted_adjoint(args.corrupt_adjoint):
            rows = run_gradcheck(args.size, args.mode, args.seed)
    else:
        rows = run_gradcheck(args.size, args.mode, args.seed)

    for row in rows:
        shown = "unused" if row.status == "unused" else f"{row.max_rel_error:.3e}"
        print(f"   {row.name:<16} {shown:>10}  {row.status}")
    if passed(rows):
        print(f"✅ All gradients within {TOLERANCE:g}")
        return EXIT_OK
    print(f"❌ Gradient check failed (tolerance {TOLERANCE:g})")
    return EXIT_NUMERIC


def cmd_synth(args) -> int:
    ds = make_sbm(
        args.n_per_class, args.classes, args.p_in, args.p_out, args.feature_dim, args.signal, args.seed
    )
    write_dataset(ds, args.out)
    print(f"💾 {ds.name}: {ds.n_nodes} nodes, {ds.adjacency.nnz // 2} edges")
    print(f"📁 {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Config file editing
# ---------------------------------------------------------------------------


def _read_env_file() -> dict[str, str]:
    """Read key=value pairs from the env file."""
    values = {}
    if ENV_FILE.exists():
        for line in ENV_FILE.read_text(encoding="utf-8").splitlines():
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" in stripped:
                key, _, val = stripped.partition("=")
                values[key.strip()] = val.strip().strip('"')
    return values


def _write_env_value(env_var: str, value: str):
    """Set a value in the env file, preserving comments and other keys."""
    CONFIG_DIR.mkdir(parents=True, exist_ok=True)

    lines = []
    found = False
    if ENV_FILE.exists():
        for line in ENV_FILE.read_text(encoding="utf-8").splitlines():
            stripped = line.strip()
            if stripped and not stripped.startswith("#") and "=" in stripped:
                if stripped.partition("=")[0].strip() == env_var:
                    lines.append(f'{env_var}="{value}"')
                    found = True
                    continue
            lines.append(line)
    if not found:
        lines.append(f'{env_var}="{value}"')
    ENV_FILE.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_config(args) -> int:
    if args.action is None:
        values = _read_env_file()
        print(f"Config file: {ENV_FILE}\n")
        for key, env_var in sorted(CONFIG_KEYS.items()):
            print(f"  {key:<14} {values.get(env_var, '(not set)')}")
        return EXIT_OK

    if args.key not in CONFIG_KEYS:
        raise UsageError(
            f"unknown config key {args.key!r}; valid keys: {', '.join(sorted(CONFIG_KEYS))}"
        )
    env_var = CONFIG_KEYS[args.key]
    if args.action == "set":
        if args.value is None:
            raise UsageError("usage: nodecaps config set <key> <value>")
        _write_env_value(env_var, args.value)
        print(f"Set {args.key} = {args.value}")
    else:
        value = _read_env_file().get(env_var)
        print(value if value else f"{args.key} is not set")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON TrainConfig file (default: dataset preset)")
    p.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override one config field, e.g. --set K=4 --set filter.max_hop=3 (repeatable)",
    )
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--no-cache", action="store_true", help="rebuild filters instead of using the cache")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nodecaps",
        description="Node capsules with multi-hop graph filters: train, evaluate, explain.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug output to stderr")
    parser.add_argument("--log-dir", help="directory for nodecaps.log")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("prepare-filter", help="build and cache graph filters")
    p.add_argument("--dataset", required=True, help="manifest path, dataset directory or known name")
    p.add_argument("--mode", choices=("attention", "ppr"), default="attention", help="filter kind")
    p.add_argument("--max-hop", type=int, help="largest hop of the attention filter")
    p.add_argument("--alpha", type=float, help="PPR teleport probability")
    p.add_argument("--truncate", type=int, help="PPR series length P (default: exact)")
    p.add_argument("--sparsify", help="topk:K or eps:E (default topk:128)")
    p.add_argument("--final-sparsify", action="store_true", help="prune the combined filter, not each hop")
    p.add_argument("--out", help="cache directory (default NODECAPS_CACHE_DIR)")
    p.set_defaults(func=cmd_prepare_filter)

    p = sub.add_parser("train", help="train one model and write checkpoint, history and report")
    p.add_argument("--dataset", required=True, help="manifest path, dataset directory or known name")
    _add_config_flags(p)
    p.add_argument("--split-seed", type=int, help="seed of the train/val/test split")
    p.add_argument("--weight-seed", type=int, help="seed of weight init and dropout")
    p.add_argument("--out-dir", help="run directory (default under NODECAPS_OUTPUT_DIR)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True, help="checkpoint.json written by train")
    p.add_argument("--dataset", required=True, help="manifest path, dataset directory or known name")
    p.add_argument("--split", choices=SPLIT_NAMES, default="test", help="split to score")
    p.add_argument("--split-seed", type=int, help="default: the checkpoint's split seed")
    p.add_argument("--no-cache", action="store_true", help="rebuild the filter instead of using the cache")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train over splits x seeds for each value of one parameter")
    p.add_argument("--dataset", required=True, help="manifest path, dataset directory or known name")
    _add_config_flags(p)
    p.add_argument("--param", default="max_hop", help="config field or alias (K, T, max_hop, alpha, ...)")
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 2,3,4,5")
    p.add_argument("--split-seeds", type=_int_list, default=[0, 1, 2, 3, 4], help="comma-separated split seeds")
    p.add_argument("--seeds", type=_int_list, default=list(range(10)), help="comma-separated weight seeds")
    p.add_argument("--workers", type=int, help="worker processes (default NODECAPS_WORKERS)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("explain", help="export hop attention, coupling summaries and embeddings")
    p.add_argument("--checkpoint", required=True, help="checkpoint.json written by train")
    p.add_argument("--dataset", required=True, help="manifest path, dataset directory or known name")
    p.add_argument("--target-class", type=int, help="only summarize nodes of this class")
    p.add_argument("--embeddings", choices=("argmax", "lengths"), default="argmax", help="per-node vector to export")
    p.add_argument("--top", type=int, default=10, help="neighbors listed per node")
    p.add_argument("--out-dir", help="output directory (default: explain/ next to the checkpoint)")
    p.add_argument("--no-cache", action="store_true", help="rebuild the filter instead of using the cache")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("gradcheck", help="compare taped gradients with finite differences")
    p.add_argument("--size", choices=("tiny", "small"), default="tiny", help="problem size to check")
    p.add_argument("--mode", choices=("attention", "ppr"), default="attention", help="filter kind")
    p.add_argument("--seed", type=int, default=0, help="seed of the random problem")
    p.add_argument("--corrupt-adjoint", metavar="OP", help="scale one primitive's adjoint (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a stochastic block model dataset")
    p.add_argument("--n-per-class", type=int, default=100, help="nodes per block")
    p.add_argument("--classes", type=int, default=2, help="number of blocks")
    p.add_argument("--p-in", type=float, default=0.05, help="edge probability inside a block")
    p.add_argument("--p-out", type=float, default=0.005, help="edge probability across blocks")
    p.add_argument("--feature-dim", type=int, default=16, help="feature columns")
    p.add_argument("--signal", type=float, default=1.0, help="separation of class feature means")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("config", help="show or edit ~/.nodecaps/nodecaps.env")
    p.add_argument("action", nargs="?", choices=("get", "set"), help="omit to show every setting")
    p.add_argument("key", nargs="?", help="setting name, e.g. workers")
    p.add_argument("value", nargs="?", help="new value for set")
    p.set_defaults(func=cmd_config)

    return parser


def _report_error(exc: Exception, fields: dict[str, Any]) -> None:
    print(f"❌ {exc}", file=sys.stderr)
    print(json.dumps(fields, sort_keys=True, default=str), file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, Path(args.log_dir) if args.log_dir else None)

    try:
        return args.func(args)
    except DivergenceError as exc:
        _report_error(exc, exc.to_dict())
        return EXIT_NUMERIC
    except NodeCapsError as exc:
        _report_error(exc, exc.to_dict())
        return EXIT_USAGE
    except OSError as exc:
        _report_error(exc, {"error": "io", "message": str(exc), "path": exc.filename})
        return EXIT_USAGE
    except Exception as exc:  # pylint: disable=broad-exception-caught
        log.info("unhandled error in %s", args.command, exc_info=True)
        _report_error(exc, {"error": "internal", "type": type(exc).__name__, "message": str(exc)})
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
