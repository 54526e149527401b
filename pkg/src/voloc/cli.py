"""Command-line surface: generate | train | index | evaluate | sweep | audit.

Configuration comes from a TOML file with flat sections mirroring the module
configs; repeated `--set section.key=value` flags override file values, so an
experiment is fully described by a committed config plus its command line.
Every artifact-producing command writes exactly one JSON manifest next to its
primary output (config hash, seed, versions, input digests, output paths,
wall clock).

Exit codes: 0 success, 1 validation/configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import evaluate as evaluate_mod
from . import mining as mining_mod
from .embedder import Embedder, EmbedderSpec
from .errors import (
    ConfigurationError,
    ContractViolation,
    ParseError,
    ValidationError,
    VolocError,
)
from .geodata import (
    ConditionSpec,
    Dataset,
    RouteSpec,
    SyntheticWorldConfig,
    check_disjoint,
    generate_world,
    load_dataset,
    save_dataset,
)
from .losses import LossSpec
from .mining import MiningConfig, apply_ablations, audit_tuple_geometry, read_mining_log
from .retrieval import build_reference_map
from .trainer import TrainConfig, train, write_metrics_csv


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract is exit 1
        raise _UsageError(f"{message}\n{self.format_usage()}")


def _load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}")


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        if len(keys) < 2:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            raise ConfigurationError(f"--set value is not a TOML literal: {raw!r}")
        node = config
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"--set path {dotted!r} crosses a non-table")
        node[keys[-1]] = value
    return config


def _build(cls, data: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(
            f"[{section}] has unknown keys: {', '.join(sorted(unknown))}"
        )
    return cls(**data)


def _world_config(config: dict) -> SyntheticWorldConfig:
    world = dict(config.get("world", {}))
    route = _build(RouteSpec, {
        **{k: tuple(v) if k == "center" else v
           for k, v in dict(world.pop("route", {})).items()}
    }, "world.route")
    conditions = tuple(
        _build(ConditionSpec, dict(c), "world.conditions")
        for c in world.pop("conditions", [{"name": "base"}])
    )
    return _build(
        SyntheticWorldConfig,
        {**world, "route": route, "conditions": conditions},
        "world",
    )


def _train_config(config: dict, dataset: Dataset) -> tuple[TrainConfig, dict]:
    emb = dict(config.get("embedder", {}))
    emb.setdefault("d_in", dataset.descriptor_dim)
    loss = dict(config.get("loss", {}))
    mining = dict(config.get("mining", {}))
    tr = dict(config.get("train", {}))
    tr.pop("dataset", None)
    cfg = _build(
        TrainConfig,
        {
            **tr,
            "loss": _build(LossSpec, loss, "loss"),
            "mining": _build(MiningConfig, mining, "mining"),
            "embedder": _build(EmbedderSpec, emb, "embedder"),
        },
        "train",
    )
    resolved = {"embedder": emb, "loss": loss, "mining": mining, "train": tr}
    return cfg, resolved


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import numpy
    import scipy

    try:
        from importlib.metadata import version

        own = version("voloc")
    except Exception:
        own = "unknown"
    return {"voloc": own, "numpy": numpy.__version__, "scipy": scipy.__version__}


def _write_manifest(primary_out, *, command: str, config_obj, seed,
                    inputs: list, outputs: list, started: float) -> str:
    canonical = json.dumps(config_obj, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": seed,
        "versions": _versions(),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = f"{primary_out}.manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
    return path


def _parse_floats(text: str, flag: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigurationError(f"{flag} expects comma-separated numbers, got {text!r}")
    if not values:
        raise ConfigurationError(f"{flag} needs at least one value")
    return values


def _parse_ints(text: str, flag: str) -> tuple[int, ...]:
    return tuple(int(v) for v in _parse_floats(text, flag))


def _cmd_generate(args) -> int:
    started = time.time()
    config = _apply_overrides(_load_toml(args.config), args.set)
    if args.seed is not None:
        config.setdefault("world", {})["seed"] = args.seed
    cfg = _world_config(config)
    dataset = generate_world(cfg)
    save_dataset(dataset, args.out)
    _write_manifest(
        args.out,
        command="generate",
        config_obj=config,
        seed=cfg.seed,
        inputs=[args.config],
        outputs=[args.out],
        started=started,
    )
    print(f"wrote {len(dataset)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    started = time.time()
    config = _apply_overrides(_load_toml(args.config), args.set)
    dataset_path = args.dataset or config.get("train", {}).get("dataset")
    if not dataset_path:
        raise ConfigurationError("train needs --dataset or [train].dataset")
    if args.seed is not None:
        config.setdefault("train", {})["seed"] = args.seed
    if args.epochs is not None:
        config.setdefault("train", {})["epochs"] = args.epochs
    dataset = load_dataset(dataset_path, "train")
    cfg, resolved = _train_config(config, dataset)
    result = train(dataset, cfg)
    result.embedder.save(args.out)
    outputs = [args.out]
    if args.metrics:
        write_metrics_csv(result.metrics, args.metrics)
        outputs.append(args.metrics)
    if args.mining_log:
        mining_mod.write_mining_log(result.mined_tuples, args.mining_log)
        outputs.append(args.mining_log)
    _write_manifest(
        args.out,
        command="train",
        config_obj=resolved,
        seed=cfg.seed,
        inputs=[args.config, dataset_path],
        outputs=outputs,
        started=started,
    )
    skips = sum(result.skip_counts.values())
    print(
        f"trained {cfg.epochs} epochs, {result.iterations} iterations, "
        f"{skips} skipped anchors -> {args.out}"
    )
    return 0


def _cmd_index(args) -> int:
    started = time.time()
    embedder = Embedder.load(args.checkpoint)
    refs = load_dataset(args.refs, "reference")
    ref_map = build_reference_map(
        refs, embedder.embed, dim=args.dim, spacing=args.spacing
    )
    ref_map.save(args.out)
    _write_manifest(
        args.out,
        command="index",
        config_obj={"dim": args.dim, "spacing": args.spacing},
        seed=embedder.spec.seed,
        inputs=[args.checkpoint, args.refs],
        outputs=[args.out],
        started=started,
    )
    print(f"indexed {len(ref_map.ids)} references at dim={ref_map.dim} -> {args.out}")
    return 0


def _load_eval_inputs(args):
    embedder = Embedder.load(args.checkpoint)
    refs = load_dataset(args.refs, "reference")
    queries = load_dataset(args.queries, "query")
    if args.check_train:
        if args.separation is None:
            raise ConfigurationError("--check-train requires --separation")
        train_ds = load_dataset(args.check_train, "train")
        check_disjoint(train_ds, refs, args.separation)
        check_disjoint(train_ds, queries, args.separation)
    return embedder, refs, queries


def _cmd_evaluate(args) -> int:
    started = time.time()
    embedder, refs, queries = _load_eval_inputs(args)
    axes = evaluate_mod.SweepAxes(
        thresholds=_parse_floats(args.thresholds, "--thresholds"),
        dims=(args.dim,),
        spacings=(args.spacing,),
    )
    report = evaluate_mod.sweep(queries, refs, embedder.embed, axes)
    evaluate_mod.write_report_csv(report, args.out)
    inputs = [args.checkpoint, args.refs, args.queries]
    if args.check_train:
        inputs.append(args.check_train)
    _write_manifest(
        args.out,
        command="evaluate",
        config_obj={
            "thresholds": list(axes.thresholds),
            "dim": args.dim,
            "spacing": args.spacing,
        },
        seed=embedder.spec.seed,
        inputs=inputs,
        outputs=[args.out],
        started=started,
    )
    for cond in sorted(report.per_condition):
        accs = " ".join(
            f"{t:g}m={report.per_condition[cond][t]:.3f}" for t in report.thresholds
        )
        print(f"{cond}: {accs} (n={report.counts[cond]})")
    return 0


def _cmd_sweep(args) -> int:
    started = time.time()
    embedder, refs, queries = _load_eval_inputs(args)
    axes = evaluate_mod.SweepAxes(
        thresholds=_parse_floats(args.thresholds, "--thresholds"),
        dims=_parse_ints(args.dims, "--dims"),
        spacings=_parse_floats(args.spacings, "--spacings"),
    )
    os.makedirs(args.out_dir, exist_ok=True)
    report = evaluate_mod.sweep(queries, refs, embedder.embed, axes)
    csv_path = os.path.join(args.out_dir, "sweep.csv")
    evaluate_mod.write_report_csv(report, csv_path)
    svgs = evaluate_mod.write_sweep_svgs(report, args.out_dir)
    _write_manifest(
        csv_path,
        command="sweep",
        config_obj={
            "thresholds": list(axes.thresholds),
            "dims": list(axes.dims),
            "spacings": list(axes.spacings),
        },
        seed=embedder.spec.seed,
        inputs=[args.checkpoint, args.refs, args.queries],
        outputs=[csv_path, *svgs],
        started=started,
    )
    print(f"swept {len(report.cells)} cells -> {csv_path}")
    return 0


def _cmd_audit(args) -> int:
    config = _apply_overrides(_load_toml(args.config), args.set)
    mining_cfg = _build(MiningConfig, dict(config.get("mining", {})), "mining")
    mining_cfg = apply_ablations(mining_cfg, hp_on=not args.hp_off, pn_on=not args.pn_off)
    dataset = load_dataset(args.dataset, "train")
    entries = read_mining_log(args.log)
    violations = 0
    for i, t in enumerate(entries):
        for problem in audit_tuple_geometry(t, dataset, mining_cfg):
            violations += 1
            print(f"entry {i} (anchor {t.anchor_id}): {problem}")
    print(f"audited {len(entries)} tuples: {violations} violations")
    return 0 if violations == 0 else 1


def build_parser() -> _Parser:
    parser = _Parser(prog="voloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="generate a synthetic world JSONL dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.set_defaults(handler=_cmd_generate)

    p = sub.add_parser("train", help="train an embedder on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", default=None, help="metrics CSV path")
    p.add_argument("--mining-log", default=None, help="JSONL mining audit log")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("index", help="build a reference map from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--spacing", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_index)

    def eval_common(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--refs", required=True)
        p.add_argument("--queries", required=True)
        p.add_argument("--check-train", default=None,
                       help="train split to verify geographic disjointness against")
        p.add_argument("--separation", type=float, default=None)

    p = sub.add_parser("evaluate", help="per-condition accuracy at thresholds")
    eval_common(p)
    p.add_argument("--thresholds", default="5,10,15")
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--spacing", type=float, default=0.0)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("sweep", help="accuracy over threshold/dim/spacing axes")
    eval_common(p)
    p.add_argument("--thresholds", default="5,10,15")
    p.add_argument("--dims", default="256")
    p.add_argument("--spacings", default="0.0")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=_cmd_sweep)

    p = sub.add_parser("audit", help="replay a mining log against the geometric invariants")
    p.add_argument("--dataset", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--config", required=True, help="train config with the [mining] section")
    p.add_argument("--hp-off", action="store_true")
    p.add_argument("--pn-off", action="store_true")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.set_defaults(handler=_cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"voloc: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except (ConfigurationError, ValidationError, ParseError, ContractViolation) as exc:
        print(f"voloc: error: {exc}", file=sys.stderr)
        return 1
    except VolocError as exc:
        print(f"voloc: runtime error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"voloc: runtime error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())
