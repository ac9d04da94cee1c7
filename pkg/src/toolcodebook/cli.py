"""Command-line entry point: ``toolcb {validate,synth,train,continual,report}``.

Exit codes: 0 success, 1 domain failure, 2 I/O or environment, 3 configuration.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .codebook import CapacityError
from .config import ConfigKeyError, RunConfig, apply_env, from_dict, write_resolved
from .continual import (
    ConfigError,
    load_bundle,
    make_plan,
    new_model,
    parse_strategy,
    pretrain,
    run_continual,
    mix_plain,
    train_stage,
)
from .dataset import (
    DEFAULT_REGISTRY,
    ParseError,
    RegistryError,
    SchemaError,
    StratificationError,
    load_registry,
    split_train_test,
    synthesize_corpus,
    validate,
    write_jsonl,
)
from .dataset.schema import parse_conversation
from .metrics import IncompleteMatrixError, metrics_report, parse_report_csv
from .numerics import AdamW, TrainingDivergedError
from .trainer import CheckpointError, config_hash, load_checkpoint, save_checkpoint

log = logging.getLogger("toolcb")

EXIT_OK, EXIT_DOMAIN, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3
RESOLVED = "resolved_config.yaml"


class DomainFailure(Exception):
    pass


class DependencyError(DomainFailure):
    pass


class RefusingToClobber(DomainFailure):
    pass


def _guard(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise RefusingToClobber(f"refusing to overwrite {existing[0]} (use --force)")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _registry(path):
    return load_registry(path) if path else DEFAULT_REGISTRY


# ---- validate -----------------------------------------------------------------

def cmd_validate(args) -> int:
    registry = _registry(args.registry)
    try:
        raw = Path(args.corpus).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read corpus: {e}") from e
    lines = []
    for index, line in enumerate(raw.splitlines()):
        if not line.strip():
            continue
        try:
            conv = parse_conversation(line, strict=False)
        except (ParseError, SchemaError) as e:
            lines.append({"index": index, "id": None, "code": "PARSE_ERROR", "turn": None, "detail": str(e)})
            continue
        for v in validate(conv, registry).violations:
            lines.append({"index": index, "id": conv.id, "code": v.code, "turn": v.turn, "detail": v.detail})
    text = "".join(json.dumps(x, ensure_ascii=False) + "\n" for x in lines)
    if args.report:
        _guard([args.report], args.force)
        Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK if not lines else EXIT_DOMAIN


# ---- synth --------------------------------------------------------------------

def cmd_synth(args) -> int:
    registry = _registry(args.registry)
    tools = [t for t in registry if not args.tools or t.name in args.tools]
    if not tools:
        raise ConfigError("no tools selected")
    out = Path(args.out)
    files = [out / f"{t.name}_instruction_{split}.jsonl" for t in tools for split in ("train", "test")]
    _guard(files + [out / "manifest.json"], args.force)
    out.mkdir(parents=True, exist_ok=True)

    train, test = split_train_test(synthesize_corpus(tuple(tools), args.per_tool, args.seed), args.seed)
    manifest = {"seed": args.seed, "per_tool": args.per_tool, "tools": {}}
    for t in tools:
        entry = {}
        for split, convs in (("train", train), ("test", test)):
            path = out / f"{t.name}_instruction_{split}.jsonl"
            rows = [c for c in convs if c.tool_key == t.name]
            write_jsonl(path, rows)
            entry[split] = len(rows)
            entry[f"{split}_sha256"] = _sha256(path)
        manifest["tools"][t.name] = entry
    body = json.dumps(manifest, sort_keys=True)
    manifest["checksum"] = hashlib.sha256(body.encode()).hexdigest()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / RESOLVED).write_text(
        yaml.safe_dump({"registry": args.registry, "tools": [t.name for t in tools], "per_tool": args.per_tool, "seed": args.seed}),
        encoding="utf-8",
    )
    print(f"wrote {len(tools)} tools to {out} (checksum {manifest['checksum'][:12]})")
    return EXIT_OK


# ---- train --------------------------------------------------------------------

def _config(args) -> RunConfig:
    raw = {}
    if args.config:
        text = Path(args.config).read_text(encoding="utf-8")
        raw = (json.loads(text) if args.config.endswith(".json") else yaml.safe_load(text)) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: expected a mapping")
    if args.preset:
        raw = {**raw, "preset": args.preset}
    cfg = apply_env(from_dict(raw))
    if args.output:
        cfg = replace(cfg, output_dir=args.output)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    ckpt = {n: out / f"stage{n}.ckpt" for n in (1, 2, 3)}
    _guard([ckpt[n] for n in stages] + [out / f"stage{n}.log.jsonl" for n in stages], args.force)

    first = stages[0]
    bundle = load_bundle(cfg)
    # output location is not part of a model's identity
    resolved = {k: v for k, v in cfg.resolved().items() if k != "output_dir"}
    opt = AdamW(weight_decay=cfg.weight_decay)
    if first == 1:
        state, codebook = new_model(bundle, cfg)
    else:
        if not ckpt[first - 1].exists():
            raise DependencyError(f"stage {first} needs {ckpt[first - 1]}; run stage {first - 1} first")
        cp = load_checkpoint(ckpt[first - 1])
        if cp.meta.get("config_hash") != config_hash(resolved):
            raise DependencyError(f"{ckpt[first - 1]} was written under a different config")
        state, codebook = cp.state, cp.codebook

    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / RESOLVED)
    data = [x for t in bundle.tools for x in bundle.train[t]]
    for n in stages:
        if n == 1:
            runs = pretrain(state, codebook, bundle, cfg, opt)
        else:
            mixed = mix_plain(data, bundle, cfg, np.random.default_rng([cfg.seed, 3, n]))
            runs = [train_stage(n, state, codebook, mixed, cfg, opt)]
        with open(out / f"stage{n}.log.jsonl", "w", encoding="utf-8") as f:
            for run in runs:
                for row in run.log:
                    f.write(json.dumps(row) + "\n")
        save_checkpoint(ckpt[n], state, codebook, resolved, meta={"stage": n, "config_hash": config_hash(resolved)})
        log.info("stage %d done -> %s", n, ckpt[n])
    return EXIT_OK


# ---- continual ----------------------------------------------------------------

def _groups_arg(value):
    if value is None:
        return None
    p = Path(value)
    if p.suffix in (".json", ".yaml", ".yml") or p.exists():
        try:
            groups = yaml.safe_load(p.read_text(encoding="utf-8"))
        except OSError as e:
            raise OSError(f"cannot read groups file: {e}") from e
        if not isinstance(groups, list) or not all(isinstance(g, list) for g in groups):
            raise ConfigError(f"{value}: expected a list of tool-name lists")
        return groups
    return value


def cmd_continual(args) -> int:
    cfg = _config(args)
    groups = _groups_arg(args.groups)
    if groups is not None:
        cfg = replace(cfg, groups=groups)
    strategies = args.strategy or [cfg.strategy]
    for s in strategies:
        parse_strategy(s)
    root = Path(cfg.output_dir)
    dirs = {}
    for s in strategies:
        kind, buf = parse_strategy(s)
        dirs[s] = root / (f"{kind}-{buf}" if buf else kind)
    _guard([d / "matrix.csv" for d in dirs.values()], args.force)

    bundle = load_bundle(cfg)
    incomplete = False
    for s in strategies:
        c = replace(cfg, strategy=s)
        plan = make_plan(c, bundle.tools)
        res = run_continual(plan, c, bundle)
        d = dirs[s]
        d.mkdir(parents=True, exist_ok=True)
        write_resolved(c, d / RESOLVED)
        with open(d / "log.jsonl", "w", encoding="utf-8") as f:
            for row in res.logs:
                f.write(json.dumps(row) + "\n")
        if not res.matrix.complete():
            (d / "matrix.csv").write_text(res.matrix.to_csv(), encoding="utf-8")
            incomplete = True
            continue
        rep = metrics_report(res.matrix)
        (d / "matrix.csv").write_text(rep.to_csv(), encoding="utf-8")
        summary = {
            "strategy": plan.label,
            "groups": [list(g) for g in plan.groups],
            "AA": rep.aa,
            "AF": rep.af,
            "AA_final": rep.aa_final,
            "AF_final": rep.af_final,
            "tool_accuracy": res.tool_accuracy,
            "buffer_audit": res.buffer_audit,
        }
        (d / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        print(f"[{plan.label}]")
        print(rep.to_table())
    return EXIT_DOMAIN if incomplete else EXIT_OK


# ---- report -------------------------------------------------------------------

def collect_runs(run_dir) -> tuple[dict[str, tuple[float, float | None]], list[str]]:
    """Read every ``*/matrix.csv`` under ``run_dir``; returns (results, incomplete labels)."""
    results, incomplete = {}, []
    for csv_path in sorted(Path(run_dir).glob("*/matrix.csv")):
        label = csv_path.parent.name
        if label.startswith("rehearsal-"):
            label = label.replace("-", ":", 1)
        try:
            A, aa, af = parse_report_csv(csv_path.read_text(encoding="utf-8"))
        except IncompleteMatrixError:
            incomplete.append(label)
            continue
        if not A.complete():
            incomplete.append(label)
            continue
        results[label] = (aa, af)
    return dict(sorted(results.items())), sorted(incomplete)


def format_report(results) -> str:
    labels = list(results)
    width = max([12] + [len(x) + 2 for x in labels])
    lines = ["metric".ljust(8) + "".join(x.rjust(width) for x in labels)]
    lines.append("AA (up)".ljust(8) + "".join(f"{100 * aa:.1f}".rjust(width) for aa, _ in results.values()))
    lines.append("AF (dn)".ljust(8) + "".join(("-" if af is None else f"{100 * af:.1f}").rjust(width) for _, af in results.values()))
    return "\n".join(lines)


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise OSError(f"{run_dir} is not a directory")
    results, incomplete = collect_runs(run_dir)
    for label in incomplete:
        log.warning("run %s is incomplete; partial report", label)
    if not results and not incomplete:
        raise DomainFailure(f"no runs under {run_dir}")
    out = run_dir / "report.csv"
    _guard([out], args.force)
    rows = ["strategy,AA_final,AF_final"] + [
        f"{k},{aa!r},{'undefined' if af is None else repr(af)}" for k, (aa, af) in results.items()
    ]
    out.write_text("\n".join(rows) + "\n", encoding="utf-8")
    if results:
        print(format_report(results))
    return EXIT_DOMAIN if incomplete else EXIT_OK


# ---- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toolcb", description="tool codebook continual-learning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a JSONL corpus against the registry")
    v.add_argument("corpus")
    v.add_argument("--registry")
    v.add_argument("--report", help="also write violations here")
    v.add_argument("--force", action="store_true")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("synth", help="generate a synthetic corpus with per-tool 9:1 splits")
    s.add_argument("--out", required=True)
    s.add_argument("--registry")
    s.add_argument("--tools", nargs="*")
    s.add_argument("--per-tool", type=int, default=200)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    for name, func, help_ in (("train", cmd_train, "run training stages"), ("continual", cmd_continual, "run a tool-stream experiment")):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config")
        c.add_argument("--preset", choices=("desk", "paper"))
        c.add_argument("--output")
        c.add_argument("--seed", type=int)
        c.add_argument("--force", action="store_true")
        c.set_defaults(func=func)
        if name == "train":
            c.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
        else:
            c.add_argument("--strategy", action="append", help="joint, sequential, colt or rehearsal:<n>; repeatable")
            c.add_argument("--groups", help="NxM or a JSON/YAML file listing tool groups")

    r = sub.add_parser("report", help="tabulate AA/AF across strategies in a run directory")
    r.add_argument("run_dir")
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigKeyError, RegistryError, StratificationError, CapacityError, yaml.YAMLError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DomainFailure, TrainingDivergedError, IncompleteMatrixError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except (OSError, CheckpointError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
