"""Command-line entry point.

Exit codes: 0 success, 1 invalid invocation or config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, apply_overrides, load_config

MODES = ("train", "infer", "sweep", "envgen", "envcheck", "treecmp", "report")
CONFIG_DIR = Path(__file__).parent / "configs"
_UNSET = object()

log = logging.getLogger("trunkrepro.cli")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trunkrepro", description="Build, evaluate and audit TRUNK trees.")
    modes = p.add_argument_group("modes (exactly one)")
    for mode in MODES:
        modes.add_argument(f"--{mode}", action="store_true")
    p.add_argument("--dataset")
    p.add_argument("--model_backbone", choices=("mobilenet", "vgg"))
    p.add_argument("--config", help="experiment YAML (default: the shipped config for --dataset)")
    p.add_argument("--grouping_volatility", nargs="?", type=float, const=None, default=_UNSET,
                   help="alone: use the config value; with a value: override it")
    p.add_argument("--debug", action="store_true", help="verbose logs and capped dataset sizes")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--build_dir", help="build directory (default: <output_dir>/<dataset>)")
    p.add_argument("--data_root", help="dataset root (default: $TRUNK_DATA_ROOT)")
    p.add_argument("--download", action="store_true", help="allow dataset downloads")
    p.add_argument("--claims", help="claimed-metrics JSON for --infer")
    p.add_argument("--tolerance", type=float, default=0.001,
                   help="absolute accuracy tolerance for --claims (fraction)")
    # sweep
    p.add_argument("--parameter", help="dotted config key to sweep")
    p.add_argument("--values", help="comma-separated sweep values")
    p.add_argument("--range", nargs=3, type=float, metavar=("START", "STOP", "STEP"))
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--sweep_dir")
    p.add_argument("--fixed_tree", help="tree.json to keep fixed during a sweep")
    # environment tooling
    p.add_argument("--source", default=".", help="source tree to scan")
    p.add_argument("--format", choices=("pip", "conda"), default="pip")
    p.add_argument("--find_links")
    p.add_argument("--manifest", help="manifest file to check")
    p.add_argument("--output", help="output file (default: stdout)")
    p.add_argument("--json", action="store_true", help="JSON report for --envcheck / --treecmp")
    # tree comparison
    p.add_argument("--trees", nargs=2, metavar=("A", "B"))
    return p


def _config(args):
    if args.config:
        path = Path(args.config)
    elif args.dataset:
        path = CONFIG_DIR / f"{args.dataset}.yaml"
        if not path.exists():
            raise ConfigError(f"no shipped config for dataset {args.dataset!r}; pass --config")
    else:
        raise ConfigError("--dataset or --config is required")
    config = load_config(path)
    if args.overrides:
        config = apply_overrides(config, args.overrides)
    changes = {}
    if args.dataset:
        changes["dataset"] = args.dataset
    if args.model_backbone:
        changes["model_backbone"] = args.model_backbone
    if changes:
        config = dataclasses.replace(config, **changes)
    if args.grouping_volatility is not _UNSET and args.grouping_volatility is not None:
        config = apply_overrides(config, [f"training.grouping_volatility={args.grouping_volatility}"])
    if config.dataset is None or config.model_backbone is None:
        raise ConfigError("--dataset and --model_backbone are required (or set them in the config)")
    # re-validate after the replacements above
    from .config import config_from_dict, config_to_dict

    return config_from_dict(config_to_dict(config))


def _build_dir(args, config) -> Path:
    return Path(args.build_dir) if args.build_dir else Path(config.output_dir) / config.dataset


def _write(text: str, output):
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def _train(args):
    from .evaluator import evaluate_build
    from .trainer import build_and_train

    config = _config(args)
    build_dir = _build_dir(args, config)
    report = build_and_train(config, build_dir, debug=args.debug, root=args.data_root,
                             download=args.download)
    caps = report.debug_caps or {}
    result = evaluate_build(build_dir, config, cap=caps.get("test"), root=args.data_root,
                            download=args.download)
    print(f"trunk train-done dir={build_dir} leaves={len(report.tree.leaves())} "
          f"depth={report.tree.depth} accuracy={result.accuracy:.4f}")
    return 0


def _infer(args):
    from .evaluator import evaluate_build, verify_pretrained

    config = _config(args)
    build_dir = _build_dir(args, config)
    if not (build_dir / "tree.json").exists():
        print(f"trunk error: no tree found in {build_dir}; run --train first", file=sys.stderr)
        return 2
    caps = {}
    build_json = build_dir / "build.json"
    if build_json.exists():
        caps = json.loads(build_json.read_text()).get("debug_caps") or {}
    if args.claims:
        report = verify_pretrained(build_dir, build_dir / "tree.json", config, args.claims,
                                   args.tolerance, cap=caps.get("test"), root=args.data_root,
                                   download=args.download)
        print(json.dumps(report.to_dict(), sort_keys=True))
        return 0 if report.status != "fail" else 2
    result = evaluate_build(build_dir, config, cap=caps.get("test"), root=args.data_root,
                            download=args.download)
    print(f"trunk infer-done dir={build_dir} accuracy={result.accuracy:.4f} "
          f"mean_flops={result.mean_flops_per_image:.0f} time={result.total_time:.3f}")
    return 0


def _sweep(args):
    from .sweep import SweepSpec, emit_csv, emit_plot, run_sweep
    from .trainer import DEBUG_CAPS

    if not args.parameter:
        raise ConfigError("--sweep needs --parameter")
    config = _config(args)
    values = []
    if args.values:
        import yaml

        values = [yaml.safe_load(v) for v in args.values.split(",")]
    spec = SweepSpec(config, args.parameter, values, tuple(args.range) if args.range else None,
                     args.repeats, args.fixed_tree)
    sweep_dir = Path(args.sweep_dir or Path(config.output_dir) / f"sweep_{args.parameter}")
    records = run_sweep(spec, sweep_dir, caps=dict(DEBUG_CAPS) if args.debug else None,
                        root=args.data_root)
    emit_csv(records, sweep_dir / "sweep.csv")
    if any(r.status == "ok" for r in records):
        emit_plot(records, sweep_dir / "sweep.png", args.parameter)
    failed = sum(r.status != "ok" for r in records)
    print(f"trunk sweep-done dir={sweep_dir} points={len(records)} failed={failed}")
    return 0


def _envgen(args):
    from .envkit import emit_conda_manifest, emit_pip_manifest, scan_imports

    deps = scan_imports(args.source)
    deps.find_links = args.find_links
    for w in deps.warnings + deps.unresolved:
        print(f"trunk envgen-note {w}", file=sys.stderr)
    text = emit_pip_manifest(deps) if args.format == "pip" else emit_conda_manifest(deps)
    _write(text, args.output)
    return 0


def _envcheck(args):
    from .envkit import validate_manifest

    if not args.manifest:
        raise ConfigError("--envcheck needs --manifest")
    report = validate_manifest(args.manifest, args.source)
    _write(report.to_json() if args.json else report.to_text(), args.output)
    return 0 if not (report.missing or report.extra) else 2


def _treecmp(args):
    from .tree import compare, fingerprint, load_tree

    if not args.trees:
        raise ConfigError("--treecmp needs --trees A B")
    a, b = (load_tree(p) for p in args.trees)
    identical, similarity = compare(a, b)
    body = {"identical": identical, "similarity": similarity,
            "fingerprints": [fingerprint(a), fingerprint(b)]}
    if args.json:
        _write(json.dumps(body, indent=2) + "\n", args.output)
    else:
        _write(f"identical: {identical}\nsimilarity: {similarity:.4f}\n", args.output)
    return 0


def _report(args):
    from .scaffold import report_scaffold

    if args.build_dir:
        build_dir = Path(args.build_dir)
    else:
        build_dir = _build_dir(args, _config(args))
    out = args.output or str(build_dir / "README.md")
    report_scaffold(build_dir, out)
    print(f"trunk report-done path={out}")
    return 0


HANDLERS = {"train": _train, "infer": _infer, "sweep": _sweep, "envgen": _envgen,
            "envcheck": _envcheck, "treecmp": _treecmp, "report": _report}


def main(argv=None) -> int:
    from .datakit import DatasetUnavailableError
    from .sweep import SweepError
    from .trainer import ResumeRefused, TrainingError
    from .tree import TreeError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    chosen = [m for m in MODES if getattr(args, m)]
    if len(chosen) != 1:
        parser.print_usage(sys.stderr)
        print(f"trunkrepro: error: exactly one mode is required, got "
              f"{', '.join('--' + m for m in chosen) or 'none'}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return HANDLERS[chosen[0]](args)
    except (ConfigError, SweepError, ResumeRefused) as exc:
        print(f"trunk error: {exc}", file=sys.stderr)
        return 1
    except (DatasetUnavailableError, TrainingError, TreeError, FileNotFoundError, RuntimeError,
            OSError, ValueError) as exc:
        print(f"trunk error: {exc}", file=sys.stderr)
        return 2
